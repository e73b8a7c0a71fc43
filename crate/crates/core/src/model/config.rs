use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes of every part of the stack. All fields are serialized as `u32` in
/// checkpoints, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub num_queries: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub qformer_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    /// Decoder positions available to prompt + target text.
    pub max_text_len: usize,
    /// Explanation tokens fed back into the query transformer.
    pub max_explanation_len: usize,
    pub max_gen_len: usize,
    pub beams: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_model: 64,
            num_queries: 8,
            heads: 4,
            encoder_layers: 2,
            qformer_layers: 2,
            decoder_layers: 2,
            ffn_mult: 4,
            vocab_size: 64,
            max_text_len: 64,
            max_explanation_len: 24,
            max_gen_len: 24,
            beams: 1,
        }
    }
}

impl ModelConfig {
    pub const NUM_FIELDS: usize = 14;

    pub fn to_fields(&self) -> [usize; Self::NUM_FIELDS] {
        [
            self.image_size,
            self.patch_size,
            self.d_model,
            self.num_queries,
            self.heads,
            self.encoder_layers,
            self.qformer_layers,
            self.decoder_layers,
            self.ffn_mult,
            self.vocab_size,
            self.max_text_len,
            self.max_explanation_len,
            self.max_gen_len,
            self.beams,
        ]
    }

    pub fn from_fields(f: &[usize]) -> Result<Self> {
        if f.len() != Self::NUM_FIELDS {
            return Err(Error::Checkpoint(format!(
                "config block has {} fields, expected {}",
                f.len(),
                Self::NUM_FIELDS
            )));
        }
        let cfg = Self {
            image_size: f[0],
            patch_size: f[1],
            d_model: f[2],
            num_queries: f[3],
            heads: f[4],
            encoder_layers: f[5],
            qformer_layers: f[6],
            decoder_layers: f[7],
            ffn_mult: f[8],
            vocab_size: f[9],
            max_text_len: f[10],
            max_explanation_len: f[11],
            max_gen_len: f[12],
            beams: f[13],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_queries == 0 {
            return err("at least one query token is required".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return err(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.vocab_size <= crate::text::BECAUSE {
            return err(format!("vocabulary of {} cannot hold the reserved tokens", self.vocab_size));
        }
        if self.ffn_mult == 0 || self.max_text_len < 2 || self.beams == 0 {
            return err("ffn_mult, max_text_len and beams must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

/// Whether the explanation rows of the query transformer are forwarded to
/// the decoder (explicit) or only shape the K query rows (implicit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LanguageMode {
    #[default]
    Explicit,
    Implicit,
}

impl fmt::Display for LanguageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LanguageMode::Explicit => "explicit",
            LanguageMode::Implicit => "implicit",
        })
    }
}

impl FromStr for LanguageMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(LanguageMode::Explicit),
            "implicit" => Ok(LanguageMode::Implicit),
            other => Err(Error::Config(format!("unknown language mode `{other}`"))),
        }
    }
}
