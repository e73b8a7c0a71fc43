//! Named, partitioned parameter storage.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Which sub-network a parameter belongs to. The freezing policies operate on
/// whole partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    VisionEncoder,
    Qformer,
    Lm,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::VisionEncoder, Partition::Qformer, Partition::Lm];

    pub fn as_u8(self) -> u8 {
        match self {
            Partition::VisionEncoder => 0,
            Partition::Qformer => 1,
            Partition::Lm => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Partition::VisionEncoder),
            1 => Some(Partition::Qformer),
            2 => Some(Partition::Lm),
            _ => None,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::VisionEncoder => "vision_encoder",
            Partition::Qformer => "qformer",
            Partition::Lm => "lm",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision_encoder" => Ok(Partition::VisionEncoder),
            "qformer" => Ok(Partition::Qformer),
            "lm" => Ok(Partition::Lm),
            other => Err(Error::Config(format!("unknown partition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<F = f32> {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
}

/// Stable handle into a [`ParamStore`]; ids are positional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F = f32> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, partition: Partition, value: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            partition,
            value,
            grad,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_partition_trainable(&mut self, partition: Partition, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.partition == partition) {
            p.trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Copy of the store in another precision; names, partitions and flags
    /// are preserved.
    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    partition: p.partition,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over the little-endian f32 bytes of every parameter in the
    /// partition, in store order. Used for the freezing ledger.
    pub fn partition_hash(&self, partition: Partition) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.partition == partition) {
            h.update(p.name.as_bytes());
            for &x in p.value.data() {
                h.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Names of parameters whose values differ bitwise from `other`.
    pub fn changed_params(&self, other: &Self) -> Vec<(String, Partition)> {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, b)| {
                a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .any(|(x, y)| x.as_f64().to_bits() != y.as_f64().to_bits())
            })
            .map(|(a, _)| (a.name.clone(), a.partition))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Partition::Lm, Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a", Partition::Lm, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn partition_hash_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Partition::Lm, Tensor::zeros(&[2])).unwrap();
        s.add("b", Partition::Qformer, Tensor::zeros(&[2])).unwrap();
        let lm = s.partition_hash(Partition::Lm);
        let qf = s.partition_hash(Partition::Qformer);
        s.get_mut(a).value.data_mut()[0] = 1.0;
        assert_ne!(lm, s.partition_hash(Partition::Lm));
        assert_eq!(qf, s.partition_hash(Partition::Qformer));
    }
}
