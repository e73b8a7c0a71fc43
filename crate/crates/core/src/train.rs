//! Decoder pretraining and teacher-forced finetuning.
//!
//! Every example gets its own graph over the shared parameters; gradients
//! are reduced in example order, so results do not depend on the number of
//! worker threads.

use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{set_freezing, FreezePolicy, LanguageMode, Model, ModelConfig, SceneRow};
use crate::nn::{AdamWConfig, CosineSchedule, Float, Gradients, Graph, OptimizerState, Var};
use crate::scenegen::{Question, Sample, Scene};
use crate::text::{self, TokenId, Vocab, BOS, EOS, PAD};

/// Target id that marks positions excluded from the loss.
pub const IGNORE: TokenId = PAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Probability that a finetuning example is also presented with a
    /// templated explanation (for a random candidate answer) fed back into
    /// the query transformer. 0 trains on single-shot inputs only.
    pub feedback_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 6,
            batch_size: 16,
            seed: 0,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            feedback_prob: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr < 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "need lr >= 0, epochs >= 1 and batch size >= 1 (got {}, {}, {})",
                self.lr, self.epochs, self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.feedback_prob) {
            return Err(Error::Config(format!("feedback_prob {} outside [0, 1]", self.feedback_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub final_val_loss: Option<f64>,
    pub steps: u64,
    pub examples: usize,
    pub wall_time_secs: f64,
}

/// One teacher-forced sequence. `text` is `[BOS] prompt target [EOS]`; row
/// `i` of the decoder predicts `text[i + 1]`, and only rows `>= loss_from`
/// count towards the loss.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub image: Option<&'a [u8]>,
    pub text: Vec<TokenId>,
    pub loss_from: usize,
    pub feedback: Option<Vec<TokenId>>,
    pub mode: LanguageMode,
    /// Symbolic scene prefix for image-free examples.
    pub scene: Option<Vec<SceneRow>>,
}

impl<'a> Example<'a> {
    /// Image-conditioned example scoring only the target tokens.
    pub fn finetune(image: &'a [u8], prompt: &[TokenId], target: &[TokenId]) -> Self {
        let mut text = Vec::with_capacity(prompt.len() + target.len() + 2);
        text.push(BOS);
        text.extend_from_slice(prompt);
        text.extend_from_slice(target);
        text.push(EOS);
        Self {
            image: Some(image),
            text,
            loss_from: prompt.len(),
            feedback: None,
            mode: LanguageMode::Explicit,
            scene: None,
        }
    }

    /// Text-only example scoring every next token.
    pub fn text_only(ids: &[TokenId]) -> Self {
        let mut text = Vec::with_capacity(ids.len() + 2);
        text.push(BOS);
        text.extend_from_slice(ids);
        text.push(EOS);
        Self {
            image: None,
            text,
            loss_from: 0,
            feedback: None,
            mode: LanguageMode::Explicit,
            scene: None,
        }
    }

    /// Decoder input ids and per-row targets (with [`IGNORE`] before
    /// `loss_from`).
    pub fn inputs_and_targets(&self) -> (&[TokenId], Vec<TokenId>) {
        let n = self.text.len();
        let targets = (0..n - 1)
            .map(|i| if i >= self.loss_from { self.text[i + 1] } else { IGNORE })
            .collect();
        (&self.text[..n - 1], targets)
    }

    pub fn num_targets(&self) -> usize {
        self.text.len() - 1 - self.loss_from
    }
}

/// Builds the loss graph for one example; returns the mean cross-entropy
/// node over its target positions.
pub fn example_loss<F: Float>(model: &Model<F>, g: &mut Graph<'_, F>, ex: &Example<'_>) -> Result<Var> {
    let (inputs, targets) = ex.inputs_and_targets();
    let prefix = match (ex.image, &ex.scene) {
        (Some(image), _) => {
            let features = model.encode_image(g, image)?;
            Some(model.qformer(g, features, ex.feedback.as_deref(), ex.mode)?.prefix)
        }
        (None, Some(rows)) => Some(model.scene_prefix(g, rows)?),
        (None, None) => None,
    };
    let hidden = model.decoder(g, prefix, inputs, None)?;
    let logits = model.logits(g, hidden)?;
    g.cross_entropy(logits, &targets, IGNORE)
}

/// Token-weighted mean loss over a batch, without gradients.
pub fn teacher_forced_loss<F: Float>(model: &Model<F>, batch: &[Example<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("teacher-forced loss of an empty batch".into()));
    }
    let parts: Vec<(f64, usize)> = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::no_grad(&model.params);
            let l = example_loss(model, &mut g, ex)?;
            Ok((g.value(l).data()[0].as_f64(), ex.num_targets()))
        })
        .collect::<Result<_>>()?;
    let total: usize = parts.iter().map(|p| p.1).sum();
    Ok(parts.iter().map(|(l, n)| l * *n as f64).sum::<f64>() / total as f64)
}

/// Loss and token-weighted mean gradient of a batch.
pub fn batch_gradients<F: Float>(model: &Model<F>, batch: &[Example<'_>]) -> Result<(f64, Gradients<F>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("gradient of an empty batch".into()));
    }
    let parts: Vec<(f64, usize, Gradients<F>)> = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(&model.params);
            let l = example_loss(model, &mut g, ex)?;
            let grads = g.backward(l)?;
            Ok((g.value(l).data()[0].as_f64(), ex.num_targets(), grads))
        })
        .collect::<Result<_>>()?;
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut grads = Gradients::empty(model.params.len());
    let mut loss = 0.0;
    for (l, n, g) in &parts {
        let w = *n as f64 / total as f64;
        loss += l * w;
        grads.accumulate(g, F::lit(w));
    }
    Ok((loss, grads))
}

fn clip<F: Float>(model: &mut Model<F>, max_norm: f64) {
    let sq: f64 = model
        .params
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data().iter().map(|g| g.as_f64().powi(2)))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        for p in model.params.iter_mut().filter(|p| p.trainable) {
            p.grad.scale_assign(s);
        }
    }
}

/// Shared optimization loop. `epoch_examples` yields the (already shuffled)
/// examples of each epoch.
fn optimize<'a, E>(
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    policy: FreezePolicy,
    stage: &str,
    examples_per_epoch: usize,
    mut epoch_examples: E,
) -> Result<TrainReport>
where
    E: FnMut(usize, &mut ChaCha8Rng) -> Vec<Example<'a>>,
{
    cfg.validate()?;
    let started = Instant::now();
    set_freezing(&mut model.params, policy);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = examples_per_epoch.div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.lr, steps_per_epoch * cfg.epochs);
    let mut opt = OptimizerState::new(
        &model.params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let examples = epoch_examples(epoch, &mut rng);
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        for batch in examples.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(model, batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    seed: cfg.seed,
                    step: opt.step as usize,
                    loss,
                });
            }
            let n: usize = batch.iter().map(Example::num_targets).sum();
            weighted += loss * n as f64;
            tokens += n;
            grads.store_into(&mut model.params);
            if let Some(c) = cfg.clip_norm {
                clip(model, c);
            }
            opt.set_lr(schedule.lr(opt.step as usize));
            opt.step(&mut model.params)?;
        }
        epoch_losses.push(weighted / tokens.max(1) as f64);
    }
    Ok(TrainReport {
        stage: stage.to_string(),
        seed: cfg.seed,
        epoch_losses,
        final_val_loss: None,
        steps: opt.step,
        examples: examples_per_epoch,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Token ids of the prompt and target strings of a sample.
pub fn encode_sample(vocab: &Vocab, s: &Sample) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let prompt = vocab.tokenize(&text::format_prompt(&s.question)?);
    let target = vocab.tokenize(&text::format_target(&s.answer, &s.explanation)?);
    Ok((prompt, target))
}

/// The strings the decoder is pretrained on: prompt followed by target.
pub fn pretraining_corpus(samples: &[Sample]) -> Result<Vec<String>> {
    samples
        .iter()
        .map(|s| {
            Ok(format!(
                "{} {}",
                text::format_prompt(&s.question)?,
                text::format_target(&s.answer, &s.explanation)?
            ))
        })
        .collect()
}

/// Symbolic prefix rows for a scene, one per object, with grid cells mapped
/// onto the model's patch grid.
pub fn scene_rows(scene: &Scene, vocab: &Vocab, config: &ModelConfig) -> Result<Vec<SceneRow>> {
    let side = config.image_size / config.patch_size;
    scene
        .objects
        .iter()
        .map(|o| {
            let word = |w: &str| {
                vocab
                    .id(w)
                    .ok_or_else(|| Error::Invalid(format!("scene word `{w}` is not in the vocabulary")))
            };
            let (r, c) = (o.row * side / scene.grid, o.col * side / scene.grid);
            Ok(SceneRow {
                color: word(o.color.word())?,
                shape: word(o.shape.word())?,
                cell: r * side + c,
            })
        })
        .collect()
}

/// Next-token pretraining of the decoder alone. Each sample's prompt and
/// target follow a symbolic prefix describing its scene (no image), padded
/// to the query count with repeated objects, so the frozen decoder already
/// reads facts from prefix rows when the query transformer is trained.
/// Only the language-model partition is updated.
pub fn pretrain_lm(model: &mut Model<f32>, samples: &[Sample], vocab: &Vocab, cfg: &TrainConfig) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty pretraining corpus".into()));
    }
    let corpus = pretraining_corpus(samples)?;
    let encoded: Vec<Vec<TokenId>> = corpus.iter().map(|s| vocab.tokenize(s)).collect();
    let scenes: Vec<Vec<SceneRow>> = samples
        .iter()
        .map(|s| scene_rows(&s.scene, vocab, &model.config))
        .collect::<Result<_>>()?;
    if let Some(i) = scenes.iter().position(Vec::is_empty) {
        return Err(Error::Invalid(format!("sample {} has an empty scene", samples[i].id)));
    }
    let k = model.config.num_queries;
    let n = encoded.len();
    optimize(model, cfg, FreezePolicy::Pretrain, "pretrain", n, |_, rng| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order
            .iter()
            .map(|&i| {
                let mut rows = scenes[i].clone();
                while rows.len() < k {
                    let extra = *scenes[i].choose(rng).expect("scene is non-empty");
                    rows.push(extra);
                }
                rows.shuffle(rng);
                let mut ex = Example::text_only(&encoded[i]);
                ex.scene = Some(rows);
                ex
            })
            .collect()
    })
}

/// Explanation template for a uniformly drawn candidate answer of the
/// sample's question (possibly the true one).
pub fn candidate_explanation(s: &Sample, rng: &mut impl Rng) -> Result<String> {
    let q = Question::parse(&s.question)?;
    let answers = q.answer_set();
    let a = answers
        .choose(rng)
        .ok_or_else(|| Error::Invalid("question without candidate answers".into()))?;
    q.explanation_for(a)
        .ok_or_else(|| Error::Invalid(format!("no explanation template for `{a}`")))
}

/// Teacher-forced finetuning of the vision encoder and query transformer on
/// `answer because explanation` targets; the language model stays frozen.
pub fn finetune(
    model: &mut Model<f32>,
    train: &[Sample],
    val: &[Sample],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Invalid("empty finetuning set".into()));
    }
    let encoded: Vec<(Vec<TokenId>, Vec<TokenId>)> =
        train.iter().map(|s| encode_sample(vocab, s)).collect::<Result<_>>()?;
    let n = train.len();
    let mut failure = None;
    let mut report = optimize(model, cfg, FreezePolicy::Finetune, "finetune", n, |_, rng| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut out = Vec::with_capacity(n);
        for i in order {
            let (p, t) = &encoded[i];
            let mut ex = Example::finetune(&train[i].image, p, t);
            if cfg.feedback_prob > 0.0 && rng.random_bool(cfg.feedback_prob) {
                match candidate_explanation(&train[i], rng) {
                    Ok(e) => ex.feedback = Some(vocab.tokenize(&e)),
                    Err(e) => failure = Some(e),
                }
                ex.mode = if rng.random_bool(0.5) {
                    LanguageMode::Explicit
                } else {
                    LanguageMode::Implicit
                };
            }
            out.push(ex);
        }
        out
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    if !val.is_empty() {
        report.final_val_loss = Some(validation_loss(model, val, vocab)?);
    }
    Ok(report)
}

/// Single-shot teacher-forced loss over `samples`.
pub fn validation_loss(model: &Model<f32>, samples: &[Sample], vocab: &Vocab) -> Result<f64> {
    let encoded: Vec<(Vec<TokenId>, Vec<TokenId>)> =
        samples.iter().map(|s| encode_sample(vocab, s)).collect::<Result<_>>()?;
    let batch: Vec<Example<'_>> = samples
        .iter()
        .zip(&encoded)
        .map(|(s, (p, t))| Example::finetune(&s.image, p, t))
        .collect();
    teacher_forced_loss(model, &batch)
}

/// Finetunes on explicit `(image, prompt, target)` triples under `policy`.
/// Used by self-training, where targets are pseudo-labels.
pub fn finetune_on_targets(
    model: &mut Model<f32>,
    items: &[(&[u8], Vec<TokenId>, Vec<TokenId>)],
    cfg: &TrainConfig,
    policy: FreezePolicy,
    stage: &str,
) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::Invalid("no training items".into()));
    }
    let n = items.len();
    optimize(model, cfg, policy, stage, n, |_, rng| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order
            .iter()
            .map(|&i| Example::finetune(items[i].0, &items[i].1, &items[i].2))
            .collect()
    })
}
