//! Few-shot self-training of the query transformer on pseudo-explanations.
//!
//! Pseudo-labels come from two sources over the same sample ids: the final
//! explanation of a trace that corrected a wrong step-0 answer, or a decode
//! forced through `answer because` with the gold answer.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{filtered_report, MetricReport};
use crate::model::{DecodeSettings, FreezePolicy, LanguageMode, Model};
use crate::nn::Partition;
use crate::revise::{check_convergence, predictions_from_steps, revise_samples, ReviseConfig, ReviseTrace, StepChoice};
use crate::scenegen::Sample;
use crate::text::{self, TokenId, Vocab, BECAUSE};
use crate::train::{finetune_on_targets, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    Revise,
    AnswerConditioned,
}

impl fmt::Display for PseudoSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PseudoSource::Revise => "revise",
            PseudoSource::AnswerConditioned => "answer_conditioned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoSample {
    pub id: u64,
    pub answer: String,
    pub explanation: String,
    pub source: PseudoSource,
    /// First step from which every answer in the trace was correct.
    pub provenance_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            k: 32,
            lr: 1e-6,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("self-training k must be at least 1".into()));
        }
        self.train_config().validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Result of a harvest: the drawn pseudo set and how many traces qualified.
#[derive(Debug, Clone, PartialEq)]
pub struct Harvest {
    pub pseudo: Vec<PseudoSample>,
    pub candidates: usize,
    /// Set when fewer than `k` candidates were available.
    pub shortfall: Option<usize>,
}

/// Pseudo samples from traces whose step-0 answer was wrong and whose final
/// answer is right. `samples` and `traces` align by position.
pub fn corrected_candidates(samples: &[Sample], traces: &[ReviseTrace]) -> Result<Vec<PseudoSample>> {
    if samples.len() != traces.len() {
        return Err(Error::Invalid(format!("{} traces for {} samples", traces.len(), samples.len())));
    }
    let mut out = Vec::new();
    for (s, t) in samples.iter().zip(traces) {
        if s.id != t.id {
            return Err(Error::Invalid(format!("trace {} is paired with sample {}", t.id, s.id)));
        }
        let right = |a: &str| check_convergence(a, &s.answer);
        if right(&t.first().answer) || !right(&t.last().answer) {
            continue;
        }
        let provenance = t.steps.iter().rposition(|st| !right(&st.answer)).map(|i| i + 1);
        out.push(PseudoSample {
            id: s.id,
            answer: s.answer.clone(),
            explanation: t.last().explanation.clone(),
            source: PseudoSource::Revise,
            provenance_step: provenance,
        });
    }
    Ok(out)
}

/// Seeded uniform draw of `k` items. Candidates are ordered by id before
/// the shuffle, so the draw depends only on the candidate set and the seed.
/// The result is returned in id order.
pub fn draw(mut candidates: Vec<PseudoSample>, k: usize, seed: u64) -> (Vec<PseudoSample>, Option<usize>) {
    candidates.sort_by_key(|c| c.id);
    let shortfall = (candidates.len() < k).then(|| k - candidates.len());
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    candidates.truncate(k);
    candidates.sort_by_key(|c| c.id);
    (candidates, shortfall)
}

/// Runs the loop over `samples`, keeps the wrong-then-corrected ones and
/// draws `cfg.k` of them.
pub fn harvest<F: crate::nn::Float>(
    model: &Model<F>,
    vocab: &Vocab,
    samples: &[Sample],
    revise: &ReviseConfig,
    cfg: &SelfTrainConfig,
) -> Result<Harvest> {
    cfg.validate()?;
    let traces = revise_samples(model, vocab, samples, revise)?;
    harvest_from_traces(samples, &traces, cfg)
}

pub fn harvest_from_traces(samples: &[Sample], traces: &[ReviseTrace], cfg: &SelfTrainConfig) -> Result<Harvest> {
    let candidates = corrected_candidates(samples, traces)?;
    let n = candidates.len();
    let (pseudo, shortfall) = draw(candidates, cfg.k, cfg.seed);
    if let Some(missing) = shortfall {
        eprintln!(
            "warning: only {n} corrected samples for k = {}, {missing} short; using all of them",
            cfg.k
        );
    }
    Ok(Harvest {
        pseudo,
        candidates: n,
        shortfall,
    })
}

fn by_id(samples: &[Sample]) -> BTreeMap<u64, &Sample> {
    samples.iter().map(|s| (s.id, s)).collect()
}

/// Explanations decoded after forcing `gold answer because` for the samples
/// in `ids`.
pub fn answer_conditioned_explanations<F: crate::nn::Float>(
    model: &Model<F>,
    vocab: &Vocab,
    samples: &[Sample],
    ids: &[u64],
    decode: &DecodeSettings,
) -> Result<Vec<PseudoSample>> {
    let index = by_id(samples);
    ids.par_iter()
        .map(|id| {
            let s = index
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("sample {id} is not in the pool")))?;
            let prefix = forced_prefix(vocab, &s.answer);
            let settings = DecodeSettings {
                forced_prefix: prefix.clone(),
                max_len: decode.max_len.max(prefix.len() + 1),
                ..decode.clone()
            };
            let features = model.image_features(&s.image)?;
            let queries = model.image_queries(&features, None, LanguageMode::Explicit)?;
            let prompt = vocab.tokenize(&text::format_prompt(&s.question)?);
            let g = model.generate(&queries.rows, &prompt, &settings)?;
            Ok(PseudoSample {
                id: s.id,
                answer: s.answer.clone(),
                explanation: vocab.detokenize(&g.tokens[prefix.len().min(g.tokens.len())..]),
                source: PseudoSource::AnswerConditioned,
                provenance_step: None,
            })
        })
        .collect()
}

/// Answer tokens followed by the separator.
pub fn forced_prefix(vocab: &Vocab, answer: &str) -> Vec<TokenId> {
    let mut p = vocab.tokenize(answer);
    p.push(BECAUSE);
    p
}

/// Teacher-forced finetuning of the query transformer alone on
/// `answer because explanation` pseudo targets.
pub fn selftrain_finetune(
    model: &mut Model<f32>,
    vocab: &Vocab,
    samples: &[Sample],
    pseudo: &[PseudoSample],
    cfg: &SelfTrainConfig,
) -> Result<TrainReport> {
    if pseudo.is_empty() {
        return Err(Error::Invalid("no pseudo-labelled samples to self-train on".into()));
    }
    let index = by_id(samples);
    let items = pseudo
        .iter()
        .map(|p| {
            let s = index
                .get(&p.id)
                .ok_or_else(|| Error::Invalid(format!("pseudo sample {} is not in the pool", p.id)))?;
            let prompt = vocab.tokenize(&text::format_prompt(&s.question)?);
            let mut target = forced_prefix(vocab, &p.answer);
            target.extend(vocab.tokenize(&p.explanation));
            Ok((s.image.as_slice(), prompt, target))
        })
        .collect::<Result<Vec<_>>>()?;
    finetune_on_targets(model, &items, &cfg.train_config(), FreezePolicy::Selftrain, "self-train")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Control,
    AnswerConditioned,
    Revise,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Control => "control",
            Strategy::AnswerConditioned => "answer_conditioned",
            Strategy::Revise => "revise",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
    /// Size of the pseudo set actually used (0 for the control).
    pub pseudo_count: usize,
    pub qformer_hash: String,
    /// Parameter partitions whose bytes differ from the control.
    pub changed_partitions: Vec<Partition>,
    pub report: MetricReport,
}

/// Both pseudo sets for one draw, over identical ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedPseudo {
    pub revise: Vec<PseudoSample>,
    pub answer_conditioned: Vec<PseudoSample>,
}

pub fn paired_pseudo<F: crate::nn::Float>(
    model: &Model<F>,
    vocab: &Vocab,
    pool: &[Sample],
    harvest: &Harvest,
    decode: &DecodeSettings,
) -> Result<PairedPseudo> {
    let ids: Vec<u64> = harvest.pseudo.iter().map(|p| p.id).collect();
    Ok(PairedPseudo {
        revise: harvest.pseudo.clone(),
        answer_conditioned: answer_conditioned_explanations(model, vocab, pool, &ids, decode)?,
    })
}

/// Single-shot evaluation report on `test`.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &Vocab,
    test: &[Sample],
    decode: &DecodeSettings,
    seed: u64,
) -> Result<MetricReport> {
    let cfg = ReviseConfig {
        max_steps: 1,
        mode: LanguageMode::Explicit,
        decode: decode.clone(),
        attention: Default::default(),
    };
    let traces = revise_samples(model, vocab, test, &cfg)?;
    let preds = predictions_from_steps(test, &traces, StepChoice::First)?;
    let refs: Vec<Vec<String>> = test.iter().map(|s| vec![s.explanation.clone()]).collect();
    filtered_report("test", seed, &preds, Some(&refs), None, 1)
}

fn changed_partitions(a: &Model<f32>, b: &Model<f32>) -> Vec<Partition> {
    let mut parts: Vec<Partition> = a.params.changed_params(&b.params).into_iter().map(|(_, p)| p).collect();
    parts.sort();
    parts.dedup();
    parts
}

/// Control, answer-conditioned and ReVisE self-training rows for one seed
/// and one paired pseudo set. `control_report` is reused when given.
#[allow(clippy::too_many_arguments)]
pub fn compare_strategies(
    model: &Model<f32>,
    vocab: &Vocab,
    pool: &[Sample],
    test: &[Sample],
    pseudo: &PairedPseudo,
    cfg: &SelfTrainConfig,
    decode: &DecodeSettings,
    control_report: Option<&MetricReport>,
) -> Result<Vec<ComparisonRow>> {
    let control = match control_report {
        Some(r) => r.clone(),
        None => evaluate(model, vocab, test, decode, cfg.seed)?,
    };
    let mut rows = vec![ComparisonRow {
        strategy: Strategy::Control,
        k: cfg.k,
        seed: cfg.seed,
        pseudo_count: 0,
        qformer_hash: model.params.partition_hash(Partition::Qformer),
        changed_partitions: Vec::new(),
        report: control,
    }];
    for (strategy, set) in [
        (Strategy::AnswerConditioned, &pseudo.answer_conditioned),
        (Strategy::Revise, &pseudo.revise),
    ] {
        let mut trained = model.clone();
        if !set.is_empty() {
            selftrain_finetune(&mut trained, vocab, pool, set, cfg)?;
        }
        rows.push(ComparisonRow {
            strategy,
            k: cfg.k,
            seed: cfg.seed,
            pseudo_count: set.len(),
            qformer_hash: trained.params.partition_hash(Partition::Qformer),
            changed_partitions: changed_partitions(model, &trained),
            report: evaluate(&trained, vocab, test, decode, cfg.seed)?,
        });
    }
    Ok(rows)
}

pub fn write_pseudo_jsonl(path: &Path, pseudo: &[PseudoSample]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pseudo {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_pseudo_jsonl(path: &Path) -> Result<Vec<PseudoSample>> {
    let body = std::fs::read_to_string(path)?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
