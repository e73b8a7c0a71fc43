//! The recursive explanation loop.
//!
//! Step 0 decodes from the learned queries alone. Every later step embeds
//! the previous step's explanation, recomputes the image queries and decodes
//! again with the same prompt. The loop stops as soon as two consecutive
//! answers agree or after `max_steps` generations.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::model::{DecodeSettings, LanguageMode, Model};
use crate::nn::{Float, Graph, Tensor};
use crate::scenegen::Sample;
use crate::text::{self, TokenId, Vocab, BOS, EOS};

/// Which patch weighting a step record carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// Last-layer query-transformer cross-attention, averaged over heads
    /// and the K query rows.
    #[default]
    CrossAttention,
    /// Image features weighted by the gradient of the first generated
    /// token's log-probability.
    GradCam,
}

impl fmt::Display for AttentionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionSource::CrossAttention => "cross_attention",
            AttentionSource::GradCam => "grad_cam",
        })
    }
}

impl FromStr for AttentionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" | "cross-attention" => Ok(AttentionSource::CrossAttention),
            "grad_cam" | "grad-cam" => Ok(AttentionSource::GradCam),
            _ => Err(Error::Config(format!("unknown attention source `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviseConfig {
    /// Cap on generations, step 0 included.
    pub max_steps: usize,
    pub mode: LanguageMode,
    pub decode: DecodeSettings,
    pub attention: AttentionSource,
}

impl ReviseConfig {
    pub const DEFAULT_MAX_STEPS: usize = 5;

    /// Defaults with the model's own decode settings.
    pub fn for_model<F: Float>(model: &Model<F>) -> Self {
        Self {
            max_steps: Self::DEFAULT_MAX_STEPS,
            mode: LanguageMode::Explicit,
            decode: model.decode_settings(),
            attention: AttentionSource::CrossAttention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.decode.beams == 0 || self.decode.max_len == 0 {
            return Err(Error::Config("beams and max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Parse and length flags of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepFlags {
    /// Output started with the separator.
    pub degenerate: bool,
    /// No explanation followed the answer.
    pub empty_explanation: bool,
    /// Generation hit the length cap before EOS.
    pub truncated_output: bool,
    /// The fed-back explanation was cut to the query transformer's limit.
    pub truncated_feedback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: usize,
    pub answer_ids: Vec<TokenId>,
    pub explanation_ids: Vec<TokenId>,
    pub answer: String,
    pub explanation: String,
    /// Distribution over image patches.
    pub attention: Vec<f64>,
    pub flags: StepFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Converged,
    Oscillating,
    MaxStepsHit,
}

impl fmt::Display for TraceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceStatus::Converged => "converged",
            TraceStatus::Oscillating => "oscillating",
            TraceStatus::MaxStepsHit => "max_steps_hit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviseTrace {
    pub id: u64,
    pub steps: Vec<StepRecord>,
    pub status: TraceStatus,
    /// Index of the step whose answer repeated the previous one.
    pub convergence_step: Option<usize>,
}

impl ReviseTrace {
    pub fn first(&self) -> &StepRecord {
        &self.steps[0]
    }

    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("a trace has at least one step")
    }

    pub fn answers(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.answer.as_str()).collect()
    }
}

/// Status plus the optional regression flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub status: TraceStatus,
    /// Step 0 matched the gold answer and the final step does not. `None`
    /// without a gold answer.
    pub regressed: Option<bool>,
}

/// Normalized answer equality: lowercase, ASCII punctuation dropped,
/// whitespace-insensitive.
pub fn check_convergence(a: &str, b: &str) -> bool {
    text::words(a) == text::words(b)
}

/// Status of an answer sequence under the stopping rule.
pub fn classify_answers<S: AsRef<str>>(answers: &[S]) -> TraceStatus {
    let n = answers.len();
    if n >= 2 && check_convergence(answers[n - 1].as_ref(), answers[n - 2].as_ref()) {
        return TraceStatus::Converged;
    }
    // Any answer that comes back after something else was said in between.
    for j in 2..n {
        for i in 0..j - 1 {
            if check_convergence(answers[i].as_ref(), answers[j].as_ref()) {
                return TraceStatus::Oscillating;
            }
        }
    }
    TraceStatus::MaxStepsHit
}

pub fn classify_trace(trace: &ReviseTrace, gold: Option<&str>) -> Classification {
    let status = classify_answers(&trace.answers());
    let regressed = gold.map(|g| check_convergence(&trace.first().answer, g) && !check_convergence(&trace.last().answer, g));
    Classification { status, regressed }
}

/// What one generation hands back to the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub tokens: Vec<TokenId>,
    pub attention: Vec<f64>,
    pub truncated_output: bool,
    pub truncated_feedback: bool,
}

/// Runs the loop over any step function. `step` receives `None` at step 0
/// and whenever the previous explanation was empty, otherwise the previous
/// explanation tokens.
pub fn run_loop<S>(id: u64, vocab: &Vocab, max_steps: usize, mut step: S) -> Result<ReviseTrace>
where
    S: FnMut(Option<&[TokenId]>) -> Result<StepOutput>,
{
    if max_steps == 0 {
        return Err(Error::Config("max_steps must be at least 1".into()));
    }
    let mut steps: Vec<StepRecord> = Vec::with_capacity(max_steps);
    let mut convergence_step = None;
    while steps.len() < max_steps {
        let feedback = steps
            .last()
            .map(|s| s.explanation_ids.as_slice())
            .filter(|e| !e.is_empty());
        let out = step(feedback)?;
        let parsed = text::parse_output(&out.tokens);
        let empty_explanation = parsed.explanation.is_empty();
        let record = StepRecord {
            n: steps.len(),
            answer: vocab.detokenize(&parsed.answer),
            explanation: vocab.detokenize(&parsed.explanation),
            answer_ids: parsed.answer,
            explanation_ids: parsed.explanation,
            attention: out.attention,
            flags: StepFlags {
                degenerate: parsed.degenerate,
                empty_explanation,
                truncated_output: out.truncated_output,
                truncated_feedback: out.truncated_feedback,
            },
        };
        let converged = steps
            .last()
            .is_some_and(|prev| check_convergence(&prev.answer, &record.answer));
        steps.push(record);
        if converged {
            convergence_step = Some(steps.len() - 1);
            break;
        }
    }
    let answers: Vec<&str> = steps.iter().map(|s| s.answer.as_str()).collect();
    let status = if convergence_step.is_some() {
        TraceStatus::Converged
    } else {
        classify_answers(&answers)
    };
    Ok(ReviseTrace {
        id,
        steps,
        status,
        convergence_step,
    })
}

/// One model generation: queries from `feedback`, then decoding.
fn model_step<F: Float>(
    model: &Model<F>,
    features: &Tensor<F>,
    prompt: &[TokenId],
    cfg: &ReviseConfig,
    feedback: Option<&[TokenId]>,
) -> Result<StepOutput> {
    let queries = model.image_queries(features, feedback, cfg.mode)?;
    let generation = model.generate(&queries.rows, prompt, &cfg.decode)?;
    let attention = match cfg.attention {
        AttentionSource::CrossAttention => queries.patch_attention(),
        AttentionSource::GradCam => {
            let target = generation.tokens.first().copied().unwrap_or(EOS);
            grad_cam(model, features, feedback, prompt, cfg.mode, target)?
        }
    };
    Ok(StepOutput {
        tokens: generation.tokens,
        attention,
        truncated_output: generation.truncated,
        truncated_feedback: queries.truncated,
    })
}

/// Gradient-weighted patch map for `target` as the next token after the
/// prompt. Channel weights are the patch-mean gradient of the target's
/// log-probability with respect to the image features.
pub fn grad_cam<F: Float>(
    model: &Model<F>,
    features: &Tensor<F>,
    feedback: Option<&[TokenId]>,
    prompt: &[TokenId],
    mode: LanguageMode,
    target: TokenId,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params).with_frozen_params();
    let f = g.input_with_grad(features.clone());
    let prefix = model.qformer(&mut g, f, feedback, mode)?.prefix;
    let mut ids = Vec::with_capacity(prompt.len() + 1);
    ids.push(BOS);
    ids.extend_from_slice(prompt);
    let hidden = model.decoder(&mut g, Some(prefix), &ids, None)?;
    let rows = g.value(hidden).rows();
    let last = g.slice_rows(hidden, rows - 1, rows)?;
    let logits = model.logits(&mut g, last)?;
    // Negative log-probability, so the sign flips below.
    let nll = g.cross_entropy(logits, &[target], usize::MAX)?;
    let (_, input_grads) = g.backward_with_inputs(nll, &[f])?;
    let grad = &input_grads[0];
    let (patches, dim) = (features.rows(), features.cols());
    let mut alpha = vec![0.0; dim];
    for p in 0..patches {
        for (j, a) in alpha.iter_mut().enumerate() {
            *a -= grad.data()[p * dim + j].as_f64();
        }
    }
    alpha.iter_mut().for_each(|a| *a /= patches as f64);
    let cam: Vec<f64> = (0..patches)
        .map(|p| {
            let s: f64 = (0..dim).map(|j| alpha[j] * features.data()[p * dim + j].as_f64()).sum();
            s.max(0.0)
        })
        .collect();
    Ok(normalize_distribution(&cam))
}

/// Scales non-negative weights to sum to 1; all-zero input gives uniform.
pub fn normalize_distribution(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 && total.is_finite() {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / weights.len().max(1) as f64; weights.len()]
    }
}

/// Runs the loop on one image/question pair.
pub fn revise_infer<F: Float>(
    model: &Model<F>,
    vocab: &Vocab,
    id: u64,
    image: &[u8],
    question: &str,
    cfg: &ReviseConfig,
) -> Result<ReviseTrace> {
    cfg.validate()?;
    let features = model.image_features(image)?;
    let prompt = vocab.tokenize(&text::format_prompt(question)?);
    run_loop(id, vocab, cfg.max_steps, |feedback| {
        model_step(model, &features, &prompt, cfg, feedback)
    })
}

/// A plain generation from the learned queries alone; what step 0 must
/// reproduce.
pub fn single_shot<F: Float>(
    model: &Model<F>,
    vocab: &Vocab,
    image: &[u8],
    question: &str,
    decode: &DecodeSettings,
) -> Result<(String, String)> {
    let features = model.image_features(image)?;
    let prompt = vocab.tokenize(&text::format_prompt(question)?);
    let queries = model.image_queries(&features, None, LanguageMode::Explicit)?;
    let g = model.generate(&queries.rows, &prompt, decode)?;
    let parsed = text::parse_output(&g.tokens);
    Ok((vocab.detokenize(&parsed.answer), vocab.detokenize(&parsed.explanation)))
}

/// Traces for many samples, computed in parallel and returned in input
/// order.
pub fn revise_samples<F: Float>(
    model: &Model<F>,
    vocab: &Vocab,
    samples: &[Sample],
    cfg: &ReviseConfig,
) -> Result<Vec<ReviseTrace>> {
    samples
        .par_iter()
        .map(|s| revise_infer(model, vocab, s.id, &s.image, &s.question, cfg))
        .collect()
}

/// Which step of each trace a prediction is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepChoice {
    First,
    Last,
}

/// One prediction per trace, scored against the sample's gold answer and
/// explanation. `samples` and `traces` align by position.
pub fn predictions_from_steps(samples: &[Sample], traces: &[ReviseTrace], choice: StepChoice) -> Result<Vec<Prediction>> {
    if samples.len() != traces.len() {
        return Err(Error::Invalid(format!("{} traces for {} samples", traces.len(), samples.len())));
    }
    samples
        .iter()
        .zip(traces)
        .map(|(s, t)| {
            if s.id != t.id {
                return Err(Error::Invalid(format!("trace {} is paired with sample {}", t.id, s.id)));
            }
            let step = match choice {
                StepChoice::First => t.first(),
                StepChoice::Last => t.last(),
            };
            Ok(Prediction {
                id: s.id,
                answer: step.answer.clone(),
                explanation: step.explanation.clone(),
                reference_answer: s.answer.clone(),
                reference_explanations: vec![s.explanation.clone()],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepJson {
    pub n: usize,
    pub answer: String,
    pub explanation: String,
    pub attention: Vec<f64>,
}

/// On-disk trace layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceJson {
    pub id: u64,
    pub status: TraceStatus,
    pub convergence_step: Option<usize>,
    pub steps: Vec<StepJson>,
}

impl From<&ReviseTrace> for TraceJson {
    fn from(t: &ReviseTrace) -> Self {
        Self {
            id: t.id,
            status: t.status,
            convergence_step: t.convergence_step,
            steps: t
                .steps
                .iter()
                .map(|s| StepJson {
                    n: s.n,
                    answer: s.answer.clone(),
                    explanation: s.explanation.clone(),
                    attention: s.attention.clone(),
                })
                .collect(),
        }
    }
}

impl TraceJson {
    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self, max_steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("trace {}: {m}", self.id)));
        if self.steps.is_empty() {
            return bad("no steps".into());
        }
        if self.steps.len() > max_steps {
            return bad(format!("{} steps exceed the cap of {max_steps}", self.steps.len()));
        }
        let patches = self.steps[0].attention.len();
        for (i, s) in self.steps.iter().enumerate() {
            if s.n != i {
                return bad(format!("step {i} is numbered {}", s.n));
            }
            if s.attention.len() != patches || s.attention.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return bad(format!("step {i} attention is malformed"));
            }
            let total: f64 = s.attention.iter().sum();
            if (total - 1.0).abs() > 1e-5 {
                return bad(format!("step {i} attention sums to {total}"));
            }
        }
        let answers: Vec<&str> = self.steps.iter().map(|s| s.answer.as_str()).collect();
        let status = classify_answers(&answers);
        if status != self.status {
            return bad(format!("status {} but answers classify as {status}", self.status));
        }
        let expected_step = (status == TraceStatus::Converged).then(|| self.steps.len() - 1);
        if self.convergence_step != expected_step {
            return bad(format!("convergence_step {:?}, expected {expected_step:?}", self.convergence_step));
        }
        // Convergence ends the loop, so no earlier pair may agree.
        if answers.windows(2).rev().skip(1).any(|w| check_convergence(w[0], w[1])) {
            return bad("the loop continued past an agreeing pair".into());
        }
        Ok(())
    }
}

/// A patch map laid out on its square grid, scaled to bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub side: usize,
    /// Row-major, min-max scaled to `0..=255`. A constant map is mid gray.
    pub pixels: Vec<u8>,
    /// The input weights renormalized to sum to 1.
    pub distribution: Vec<f64>,
}

pub fn attention_heatmap(attention: &[f64], patch_grid: usize) -> Result<Heatmap> {
    if attention.len() != patch_grid * patch_grid || attention.is_empty() {
        return Err(Error::Shape(format!(
            "attention map has {} entries, a {patch_grid}x{patch_grid} patch grid needs {}",
            attention.len(),
            patch_grid * patch_grid
        )));
    }
    if attention.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Invalid("attention weights must be finite and non-negative".into()));
    }
    let lo = attention.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        vec![128; attention.len()]
    } else {
        attention
            .iter()
            .map(|w| ((w - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    };
    Ok(Heatmap {
        side: patch_grid,
        pixels,
        distribution: normalize_distribution(attention),
    })
}

impl Heatmap {
    /// Binary greyscale PGM at one pixel per patch.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.distribution).expect("finite floats serialize")
    }

    /// Binary PPM of `image` (`size×size×3`) blended half-and-half with the
    /// map, hot patches tinted red and cold ones blue.
    pub fn overlay(&self, image: &[u8], size: usize) -> Result<Vec<u8>> {
        if image.len() != size * size * 3 {
            return Err(Error::Shape(format!("image has {} bytes, expected {size}x{size}x3", image.len())));
        }
        if !size.is_multiple_of(self.side) {
            return Err(Error::Shape(format!("image size {size} is not a multiple of the {} patch grid", self.side)));
        }
        let cell = size / self.side;
        let mut out = format!("P6\n{size} {size}\n255\n").into_bytes();
        for y in 0..size {
            for x in 0..size {
                let heat = self.pixels[(y / cell) * self.side + x / cell] as u16;
                let tint = [heat, 0, 255 - heat];
                let at = (y * size + x) * 3;
                for c in 0..3 {
                    out.push(((image[at + c] as u16 + tint[c]) / 2) as u8);
                }
            }
        }
        Ok(out)
    }
}
