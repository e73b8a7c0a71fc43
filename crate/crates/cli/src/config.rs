//! Flat `key = value` run configuration. Every key has a default; a config
//! file overrides defaults and command-line flags override the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use revise_core::model::{DecodeSettings, LanguageMode, ModelConfig};
use revise_core::revise::{AttentionSource, ReviseConfig};
use revise_core::scenegen::DatasetConfig;
use revise_core::selftrain::SelfTrainConfig;
use revise_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub seed: u64,
    /// Independent runs of the full pipeline, each with its own derived seed.
    pub seeds: usize,

    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub grid: usize,
    pub image_size: usize,
    pub mix: [f64; 3],
    pub noise_sigma: f64,
    pub min_objects: usize,
    pub max_objects: usize,

    pub patch_size: usize,
    pub d_model: usize,
    pub num_queries: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub qformer_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    pub max_text_len: usize,
    pub max_explanation_len: usize,
    pub max_gen_len: usize,
    pub beams: usize,

    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub feedback_prob: f64,
    /// Share of the train split used for finetuning.
    pub fraction: f64,

    pub max_steps: usize,
    pub mode: LanguageMode,
    pub attention: AttentionSource,
    pub step_limits: Vec<usize>,

    pub k: Vec<usize>,
    pub selftrain_lr: f64,
    pub selftrain_epochs: usize,
    pub selftrain_batch_size: usize,
    pub skip_selftrain: bool,

    /// Write per-sample trace files and heatmaps during the pipeline.
    pub write_traces: bool,
}

impl Default for LabConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let model = ModelConfig::default();
        let selftrain = SelfTrainConfig::default();
        Self {
            seed: 0,
            seeds: 5,
            train: data.train,
            val: data.val,
            test: data.test,
            grid: data.grid,
            image_size: data.image_size,
            mix: data.mix,
            noise_sigma: data.noise_sigma,
            min_objects: data.min_objects,
            max_objects: data.max_objects,
            patch_size: model.patch_size,
            d_model: model.d_model,
            num_queries: model.num_queries,
            heads: model.heads,
            encoder_layers: model.encoder_layers,
            qformer_layers: model.qformer_layers,
            decoder_layers: model.decoder_layers,
            ffn_mult: model.ffn_mult,
            max_text_len: model.max_text_len,
            max_explanation_len: model.max_explanation_len,
            max_gen_len: model.max_gen_len,
            beams: model.beams,
            pretrain_lr: 1e-3,
            pretrain_epochs: 12,
            lr: 1e-3,
            epochs: 6,
            batch_size: 16,
            weight_decay: 0.01,
            clip_norm: 1.0,
            feedback_prob: 0.5,
            fraction: 1.0,
            max_steps: ReviseConfig::DEFAULT_MAX_STEPS,
            mode: LanguageMode::Explicit,
            attention: AttentionSource::CrossAttention,
            step_limits: vec![2, 3, 5],
            k: vec![8, 16, 32],
            selftrain_lr: selftrain.lr,
            selftrain_epochs: selftrain.epochs,
            selftrain_batch_size: selftrain.batch_size,
            skip_selftrain: false,
            write_traces: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Invalid> {
    value
        .trim()
        .parse()
        .map_err(|_| Invalid(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, Invalid> {
    value
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl LabConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Invalid> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "seeds" => self.seeds = parse(key, value)?,
            "train" => self.train = parse(key, value)?,
            "val" => self.val = parse(key, value)?,
            "test" => self.test = parse(key, value)?,
            "grid" => self.grid = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "mix" => {
                let v: Vec<f64> = parse_list(key, value)?;
                self.mix = v
                    .try_into()
                    .map_err(|_| Invalid("`mix` needs three comma-separated weights".into()))?;
            }
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "min_objects" => self.min_objects = parse(key, value)?,
            "max_objects" => self.max_objects = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "num_queries" => self.num_queries = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "qformer_layers" => self.qformer_layers = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "ffn_mult" => self.ffn_mult = parse(key, value)?,
            "max_text_len" => self.max_text_len = parse(key, value)?,
            "max_explanation_len" => self.max_explanation_len = parse(key, value)?,
            "max_gen_len" => self.max_gen_len = parse(key, value)?,
            "beams" => self.beams = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "feedback_prob" => self.feedback_prob = parse(key, value)?,
            "fraction" => self.fraction = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "mode" => self.mode = value.trim().parse().map_err(|e| Invalid(format!("{e}")))?,
            "attention" => self.attention = value.trim().parse().map_err(|e| Invalid(format!("{e}")))?,
            "step_limits" => self.step_limits = parse_list(key, value)?,
            "k" => self.k = parse_list(key, value)?,
            "selftrain_lr" => self.selftrain_lr = parse(key, value)?,
            "selftrain_epochs" => self.selftrain_epochs = parse(key, value)?,
            "selftrain_batch_size" => self.selftrain_batch_size = parse(key, value)?,
            "skip_selftrain" => self.skip_selftrain = parse(key, value)?,
            "write_traces" => self.write_traces = parse(key, value)?,
            other => return Err(Invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat config text: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Invalid> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Invalid(format!("config line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), Invalid> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        m.insert("seeds", self.seeds.to_string());
        m.insert("train", self.train.to_string());
        m.insert("val", self.val.to_string());
        m.insert("test", self.test.to_string());
        m.insert("grid", self.grid.to_string());
        m.insert("image_size", self.image_size.to_string());
        m.insert("mix", join(&self.mix));
        m.insert("noise_sigma", self.noise_sigma.to_string());
        m.insert("min_objects", self.min_objects.to_string());
        m.insert("max_objects", self.max_objects.to_string());
        m.insert("patch_size", self.patch_size.to_string());
        m.insert("d_model", self.d_model.to_string());
        m.insert("num_queries", self.num_queries.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("encoder_layers", self.encoder_layers.to_string());
        m.insert("qformer_layers", self.qformer_layers.to_string());
        m.insert("decoder_layers", self.decoder_layers.to_string());
        m.insert("ffn_mult", self.ffn_mult.to_string());
        m.insert("max_text_len", self.max_text_len.to_string());
        m.insert("max_explanation_len", self.max_explanation_len.to_string());
        m.insert("max_gen_len", self.max_gen_len.to_string());
        m.insert("beams", self.beams.to_string());
        m.insert("pretrain_lr", self.pretrain_lr.to_string());
        m.insert("pretrain_epochs", self.pretrain_epochs.to_string());
        m.insert("lr", self.lr.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("weight_decay", self.weight_decay.to_string());
        m.insert("clip_norm", self.clip_norm.to_string());
        m.insert("feedback_prob", self.feedback_prob.to_string());
        m.insert("fraction", self.fraction.to_string());
        m.insert("max_steps", self.max_steps.to_string());
        m.insert("mode", self.mode.to_string());
        m.insert("attention", self.attention.to_string());
        m.insert("step_limits", join(&self.step_limits));
        m.insert("k", join(&self.k));
        m.insert("selftrain_lr", self.selftrain_lr.to_string());
        m.insert("selftrain_epochs", self.selftrain_epochs.to_string());
        m.insert("selftrain_batch_size", self.selftrain_batch_size.to_string());
        m.insert("skip_selftrain", self.skip_selftrain.to_string());
        m.insert("write_traces", self.write_traces.to_string());
        m
    }

    /// The config in the file format, readable back by [`apply_text`](Self::apply_text).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn dataset(&self, seed: u64) -> DatasetConfig {
        DatasetConfig {
            seed,
            train: self.train,
            val: self.val,
            test: self.test,
            grid: self.grid,
            image_size: self.image_size,
            mix: self.mix,
            noise_sigma: self.noise_sigma,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            d_model: self.d_model,
            num_queries: self.num_queries,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            qformer_layers: self.qformer_layers,
            decoder_layers: self.decoder_layers,
            ffn_mult: self.ffn_mult,
            vocab_size,
            max_text_len: self.max_text_len,
            max_explanation_len: self.max_explanation_len,
            max_gen_len: self.max_gen_len,
            beams: self.beams,
        }
    }

    fn clip(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }

    pub fn pretrain(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.pretrain_lr,
            epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            seed,
            weight_decay: self.weight_decay,
            clip_norm: self.clip(),
            feedback_prob: 0.0,
        }
    }

    pub fn finetune(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            weight_decay: self.weight_decay,
            clip_norm: self.clip(),
            feedback_prob: self.feedback_prob,
        }
    }

    pub fn decode(&self) -> DecodeSettings {
        DecodeSettings::new(self.beams, self.max_gen_len)
    }

    pub fn revise(&self) -> ReviseConfig {
        self.revise_with(self.max_steps, self.mode)
    }

    pub fn revise_with(&self, max_steps: usize, mode: LanguageMode) -> ReviseConfig {
        ReviseConfig {
            max_steps,
            mode,
            decode: self.decode(),
            attention: self.attention,
        }
    }

    pub fn selftrain(&self, k: usize, seed: u64) -> SelfTrainConfig {
        SelfTrainConfig {
            k,
            lr: self.selftrain_lr,
            epochs: self.selftrain_epochs,
            batch_size: self.selftrain_batch_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), Invalid> {
        let wrap = |e: revise_core::Error| Invalid(e.to_string());
        if self.seeds == 0 {
            return Err(Invalid("`seeds` must be at least 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Invalid(format!("`fraction` must be in (0, 1], got {}", self.fraction)));
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Invalid("`k` needs one or more positive sizes".into()));
        }
        if self.step_limits.contains(&0) {
            return Err(Invalid("`step_limits` entries must be positive".into()));
        }
        if !(self.pretrain_lr >= 0.0 && self.lr >= 0.0 && self.selftrain_lr >= 0.0) {
            return Err(Invalid("learning rates must be non-negative".into()));
        }
        self.dataset(self.seed).validate().map_err(wrap)?;
        self.model(16).validate().map_err(wrap)?;
        self.pretrain(0).validate().map_err(wrap)?;
        self.finetune(0).validate().map_err(wrap)?;
        self.revise().validate().map_err(wrap)?;
        for &k in &self.k {
            self.selftrain(k, 0).validate().map_err(wrap)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = LabConfig::default();
        c.set("k", "8,32").unwrap();
        c.set("mode", "implicit").unwrap();
        c.set("mix", "1,0,0.5").unwrap();
        let mut back = LabConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut c = LabConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("epochs", "six").is_err());
        assert!(c.apply_text("epochs 6").is_err());
        assert!(c.set("mix", "1,2").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = LabConfig::default();
        c.apply_text("# desk\n\nepochs = 2 # short\n").unwrap();
        assert_eq!(c.epochs, 2);
    }

    #[test]
    fn defaults_validate() {
        LabConfig::default().validate().unwrap();
    }
}
