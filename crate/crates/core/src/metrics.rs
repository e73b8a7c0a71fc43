//! Corpus n-gram metrics and the answer-filtered report.
//!
//! Text is split with [`text::words`], the same normalizer the vocabulary
//! uses. All maps are ordered so float sums are reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::revise::{check_convergence, ReviseTrace, TraceStatus};
use crate::text;

pub const MAX_ORDER: usize = 4;
/// Replaces a zero modified precision in the BLEU geometric mean.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

type Ngrams<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Ngrams<'_> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_corpus(candidates: usize, references: &[Vec<String>]) -> Result<()> {
    if candidates == 0 {
        return Err(Error::Invalid("metrics need at least one candidate".into()));
    }
    if candidates != references.len() {
        return Err(Error::Invalid(format!(
            "{candidates} candidates but {} reference lists",
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::Invalid(format!("item {i} has no reference")));
    }
    Ok(())
}

fn tokenize_all(references: &[Vec<String>]) -> Vec<Vec<Vec<String>>> {
    references
        .iter()
        .map(|refs| refs.iter().map(|r| text::words(r)).collect())
        .collect()
}

/// Corpus BLEU-1..4: clipped n-gram precision pooled over the corpus,
/// geometric mean up to each order, brevity penalty from the closest
/// reference length (shorter wins ties).
pub fn bleu(candidates: &[String], references: &[Vec<String>]) -> Result<[f64; MAX_ORDER]> {
    check_corpus(candidates.len(), references)?;
    let refs = tokenize_all(references);
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(&refs) {
        let cand = text::words(cand);
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .expect("references are non-empty");
        for n in 1..=MAX_ORDER {
            let mut max_ref: Ngrams<'_> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngrams(&cand, n) {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if cand_len == 0 {
        return Ok([0.0; MAX_ORDER]);
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    let mut out = [0.0; MAX_ORDER];
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let p = if matched[n] == 0 || total[n] == 0 {
            BLEU_EPSILON
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
        out[n] = bp * (log_sum / (n + 1) as f64).exp();
    }
    Ok(out)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by `beta²`.
pub fn rouge_l_pair(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over items of the best ROUGE-L against any reference.
pub fn rouge_l(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check_corpus(candidates.len(), references)?;
    let refs = tokenize_all(references);
    let total: f64 = candidates
        .iter()
        .zip(&refs)
        .map(|(c, refs)| {
            let c = text::words(c);
            refs.iter().map(|r| rouge_l_pair(&c, r, ROUGE_BETA)).fold(0.0, f64::max)
        })
        .sum();
    Ok(total / candidates.len() as f64)
}

/// Document frequencies of every n-gram, one document per item's reference
/// set.
#[derive(Debug, Clone)]
pub struct DocFreq {
    orders: Vec<BTreeMap<Vec<String>, usize>>,
    documents: usize,
}

impl DocFreq {
    pub fn from_references(references: &[Vec<String>]) -> Result<Self> {
        if references.len() < 2 {
            return Err(Error::Invalid(format!(
                "CIDEr document frequencies need a corpus of at least 2 items, got {}",
                references.len()
            )));
        }
        let refs = tokenize_all(references);
        let mut orders = vec![BTreeMap::new(); MAX_ORDER];
        for item in &refs {
            for (n, order) in orders.iter_mut().enumerate() {
                let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
                for r in item {
                    for g in ngrams(r, n + 1).into_keys() {
                        seen.insert(g, ());
                    }
                }
                for g in seen.into_keys() {
                    *order.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            orders,
            documents: refs.len(),
        })
    }

    fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let df = self.orders[n].get(gram).copied().unwrap_or(0).max(1) as f64;
        (self.documents as f64).ln() - df.ln()
    }
}

struct TfIdf {
    weights: Vec<BTreeMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tf_idf(tokens: &[String], df: &DocFreq) -> TfIdf {
    let mut weights = Vec::with_capacity(MAX_ORDER);
    let mut norms = Vec::with_capacity(MAX_ORDER);
    for n in 0..MAX_ORDER {
        let w: BTreeMap<Vec<String>, f64> = ngrams(tokens, n + 1)
            .into_iter()
            .map(|(g, c)| (g.to_vec(), c as f64 * df.idf(n, g)))
            .collect();
        norms.push(w.values().map(|v| v * v).sum::<f64>().sqrt());
        weights.push(w);
    }
    TfIdf {
        weights,
        norms,
        len: tokens.len(),
    }
}

/// Clipped cosine per order with the Gaussian length penalty.
fn cider_similarity(cand: &TfIdf, reference: &TfIdf, sigma: f64) -> [f64; MAX_ORDER] {
    let delta = cand.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
    let mut out = [0.0; MAX_ORDER];
    #[allow(clippy::needless_range_loop)]
    for n in 0..MAX_ORDER {
        let mut dot = 0.0;
        for (g, v) in &cand.weights[n] {
            if let Some(r) = reference.weights[n].get(g) {
                dot += v.min(*r) * r;
            }
        }
        if cand.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            out[n] = dot / (cand.norms[n] * reference.norms[n]) * penalty;
        }
    }
    out
}

/// CIDEr-D of `candidates` with frequencies taken from `df`.
pub fn cider_with(candidates: &[String], references: &[Vec<String>], df: &DocFreq, sigma: f64) -> Result<f64> {
    check_corpus(candidates.len(), references)?;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Invalid(format!("CIDEr sigma must be positive, got {sigma}")));
    }
    let refs = tokenize_all(references);
    let mut total = 0.0;
    for (c, refs) in candidates.iter().zip(&refs) {
        let cand = tf_idf(&text::words(c), df);
        let mut per_order = [0.0; MAX_ORDER];
        for r in refs {
            let sim = cider_similarity(&cand, &tf_idf(r, df), sigma);
            per_order.iter_mut().zip(sim).for_each(|(a, s)| *a += s);
        }
        let mean_order: f64 = per_order.iter().sum::<f64>() / MAX_ORDER as f64;
        total += mean_order / refs.len() as f64 * CIDER_SCALE;
    }
    Ok(total / candidates.len() as f64)
}

/// CIDEr-D with frequencies from the candidates' own references.
pub fn cider(candidates: &[String], references: &[Vec<String>], sigma: f64) -> Result<f64> {
    check_corpus(candidates.len(), references)?;
    let df = DocFreq::from_references(references)?;
    cider_with(candidates, references, &df, sigma)
}

/// One evaluated output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub answer: String,
    pub explanation: String,
    pub reference_answer: String,
    pub reference_explanations: Vec<String>,
}

impl Prediction {
    pub fn is_correct(&self) -> bool {
        check_convergence(&self.answer, &self.reference_answer)
    }
}

/// Scores over one subset of predictions. Values are `None` when the subset
/// is empty. The trailing slots are metrics this crate does not compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBlock {
    pub count: usize,
    pub bleu1: Option<f64>,
    pub bleu2: Option<f64>,
    pub bleu3: Option<f64>,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub meteor: Option<f64>,
    pub spice: Option<f64>,
    pub bertscore: Option<f64>,
    pub g_eval: Option<f64>,
}

impl ScoreBlock {
    fn empty() -> Self {
        Self {
            count: 0,
            bleu1: None,
            bleu2: None,
            bleu3: None,
            bleu4: None,
            rouge_l: None,
            cider: None,
            meteor: None,
            spice: None,
            bertscore: None,
            g_eval: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// BLEU-1 with an empty subset counted as 0.
    pub fn bleu1_or_zero(&self) -> f64 {
        self.bleu1.unwrap_or(0.0)
    }

    fn score(preds: &[&Prediction], df: &DocFreq) -> Result<Self> {
        if preds.is_empty() {
            return Ok(Self::empty());
        }
        let cands: Vec<String> = preds.iter().map(|p| p.explanation.clone()).collect();
        let refs: Vec<Vec<String>> = preds.iter().map(|p| p.reference_explanations.clone()).collect();
        let b = bleu(&cands, &refs)?;
        Ok(Self {
            count: preds.len(),
            bleu1: Some(b[0]),
            bleu2: Some(b[1]),
            bleu3: Some(b[2]),
            bleu4: Some(b[3]),
            rouge_l: Some(rouge_l(&cands, &refs)?),
            cider: Some(cider_with(&cands, &refs, df, CIDER_SIGMA)?),
            ..Self::empty()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub correct: usize,
}

/// Answer changes between step 0 and the final step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flips {
    /// Wrong at step 0, right at the end.
    pub gained: usize,
    /// Right at step 0, wrong at the end.
    pub lost: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    /// Entry `n` counts traces that converged at step `n`.
    pub convergence_histogram: Vec<usize>,
    pub not_converged: usize,
    pub oscillating: usize,
    pub max_steps_hit: usize,
    pub regressed: usize,
    pub flips: Flips,
}

impl TraceStats {
    /// Share of traces that converged at step `step` or earlier.
    pub fn converged_by(&self, step: usize) -> f64 {
        let total = self.convergence_histogram.iter().sum::<usize>() + self.not_converged;
        if total == 0 {
            return 0.0;
        }
        let by: usize = self.convergence_histogram.iter().take(step + 1).sum();
        by as f64 / total as f64
    }

    /// Oscillating plus regressed traces over all traces.
    pub fn failure_rate(&self) -> f64 {
        let total = self.convergence_histogram.iter().sum::<usize>() + self.not_converged;
        if total == 0 {
            return 0.0;
        }
        (self.oscillating + self.regressed) as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub seed: u64,
    pub filtered: ScoreBlock,
    pub unfiltered: ScoreBlock,
    pub accuracy: f64,
    pub counts: Counts,
    pub traces: Option<TraceStats>,
}

/// Scores all predictions and the answer-correct subset. `df_refs` supplies
/// the CIDEr frequency corpus (the split's references); `None` uses the
/// predictions' own. `traces`, when given, must align with `preds` by id;
/// answers are checked against each prediction's reference answer.
pub fn filtered_report(
    split: &str,
    seed: u64,
    preds: &[Prediction],
    df_refs: Option<&[Vec<String>]>,
    traces: Option<&[ReviseTrace]>,
    max_steps: usize,
) -> Result<MetricReport> {
    let mut ids: Vec<u64> = preds.iter().map(|p| p.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("prediction ids must be unique".into()));
    }
    let own: Vec<Vec<String>>;
    let df_source = match df_refs {
        Some(r) => r,
        None => {
            own = preds.iter().map(|p| p.reference_explanations.clone()).collect();
            &own
        }
    };
    let df = DocFreq::from_references(df_source)?;
    let all: Vec<&Prediction> = preds.iter().collect();
    let right: Vec<&Prediction> = preds.iter().filter(|p| p.is_correct()).collect();
    let trace_stats = match traces {
        Some(t) => Some(trace_stats(preds, t, max_steps)?),
        None => None,
    };
    Ok(MetricReport {
        split: split.to_string(),
        seed,
        filtered: ScoreBlock::score(&right, &df)?,
        unfiltered: ScoreBlock::score(&all, &df)?,
        accuracy: if preds.is_empty() {
            0.0
        } else {
            right.len() as f64 / preds.len() as f64
        },
        counts: Counts {
            total: preds.len(),
            correct: right.len(),
        },
        traces: trace_stats,
    })
}

fn trace_stats(preds: &[Prediction], traces: &[ReviseTrace], max_steps: usize) -> Result<TraceStats> {
    if traces.len() != preds.len() {
        return Err(Error::Invalid(format!(
            "{} traces for {} predictions",
            traces.len(),
            preds.len()
        )));
    }
    let mut stats = TraceStats {
        convergence_histogram: vec![0; max_steps.max(1)],
        not_converged: 0,
        oscillating: 0,
        max_steps_hit: 0,
        regressed: 0,
        flips: Flips::default(),
    };
    for (p, t) in preds.iter().zip(traces) {
        if p.id != t.id {
            return Err(Error::Invalid(format!("trace {} is paired with prediction {}", t.id, p.id)));
        }
        match (t.status, t.convergence_step) {
            (TraceStatus::Converged, Some(n)) if n < stats.convergence_histogram.len() => {
                stats.convergence_histogram[n] += 1
            }
            (TraceStatus::Converged, _) => {
                return Err(Error::Invalid(format!("trace {} converged outside the step range", t.id)))
            }
            (TraceStatus::Oscillating, _) => {
                stats.oscillating += 1;
                stats.not_converged += 1;
            }
            (TraceStatus::MaxStepsHit, _) => {
                stats.max_steps_hit += 1;
                stats.not_converged += 1;
            }
        }
        let first = check_convergence(&t.first().answer, &p.reference_answer);
        let last = check_convergence(&t.last().answer, &p.reference_answer);
        match (first, last) {
            (false, true) => stats.flips.gained += 1,
            (true, false) => {
                stats.flips.lost += 1;
                stats.regressed += 1;
            }
            _ => {}
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu_hand_examples() {
        let b = bleu(&s(&["the cat sat"]), &[s(&["the cat ran"])]).unwrap();
        assert!((b[0] - 2.0 / 3.0).abs() < 1e-12);
        let b = bleu(&s(&["a b c d e"]), &[s(&["a b c d e"])]).unwrap();
        assert!(b.iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert_eq!(bleu(&s(&[""]), &[s(&["a b"])]).unwrap(), [0.0; 4]);
        assert!(bleu(&[], &[]).is_err());
    }

    #[test]
    fn rouge_hand_example() {
        let r = rouge_l(&s(&["a b c"]), &[s(&["a c"])]).unwrap();
        let (p, rc, b2) = (2.0 / 3.0, 1.0, 1.44);
        assert!((r - (1.0 + b2) * p * rc / (rc + b2 * p)).abs() < 1e-12);
        assert_eq!(rouge_l(&s(&["x y"]), &[s(&["a b"])]).unwrap(), 0.0);
    }

    #[test]
    fn cider_needs_a_corpus() {
        assert!(cider(&s(&["a"]), &[s(&["a"])], CIDER_SIGMA).is_err());
    }
}
