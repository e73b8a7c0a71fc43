//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `b"RVSE"`, `u32` version, `u32` field count, that many `u32` config
//! fields, `u32` parameter count, then per parameter: `u32` name length,
//! UTF-8 name, `u32` rank, `u32` dims, `u8` partition, raw `f32` data.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Partition, Tensor};

pub const MAGIC: &[u8; 4] = b"RVSE";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(model.params.num_scalars() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let fields = model.config.to_fields();
    put_u32(&mut out, fields.len())?;
    for f in fields {
        put_u32(&mut out, f)?;
    }
    put_u32(&mut out, model.params.len())?;
    for p in model.params.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        out.push(p.partition.as_u8());
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let nfields = r.u32()?;
    let fields = (0..nfields).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig::from_fields(&fields)?;
    let mut model = Model::new(config, 0)?;
    let count = r.u32()?;
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let part = r.take(1)?[0];
        let partition = Partition::from_u8(part)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` has unknown partition tag {part}")))?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
        let p = model.params.get_mut(id);
        if p.value.shape() != shape.as_slice() || p.partition != partition {
            return Err(Error::Checkpoint(format!(
                "`{name}` is {shape:?}/{partition}, expected {:?}/{}",
                p.value.shape(),
                p.partition
            )));
        }
        p.value = Tensor::new(shape, data)?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
    }
    if seen.len() != model.params.len() {
        let missing: Vec<&str> = model
            .params
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| !seen.contains(*n))
            .collect();
        return Err(Error::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the parameter table".into()));
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
