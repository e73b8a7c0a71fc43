//! Experiment stages. Each stage reads its inputs from a run directory,
//! writes its outputs there and records one manifest; the full pipeline is
//! the stages run in order, once per derived seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revise_core::metrics::{filtered_report, MetricReport, Prediction, ScoreBlock};
use revise_core::model::{checkpoint, LanguageMode, Model};
use revise_core::nn::Partition;
use revise_core::revise::{
    attention_heatmap, predictions_from_steps, revise_samples, ReviseConfig, ReviseTrace, StepChoice, TraceJson,
};
use revise_core::scenegen::{generate_dataset, read_jsonl, split_of, write_jsonl, Sample, Split};
use revise_core::selftrain::{
    compare_strategies, evaluate, harvest_from_traces, paired_pseudo, selftrain_finetune, write_pseudo_jsonl,
    ComparisonRow, Strategy,
};
use revise_core::text::Vocab;
use revise_core::train::{finetune, pretrain_lm, pretraining_corpus, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::derive_seed;
use crate::manifest::ManifestChain;

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn data(&self, split: Split) -> PathBuf {
        self.0.join("data").join(format!("{split}.jsonl"))
    }
    pub fn vocab(&self) -> PathBuf {
        self.0.join("vocab.txt")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.0.join("pretrained.ckpt")
    }
    pub fn finetuned(&self) -> PathBuf {
        self.0.join("finetuned.ckpt")
    }
    pub fn selftrained(&self, k: usize) -> PathBuf {
        self.0.join(format!("selftrained_k{k}.ckpt"))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.0.join("reports").join(format!("{name}.json"))
    }
    pub fn traces(&self) -> PathBuf {
        self.0.join("traces")
    }
    pub fn pseudo(&self, k: usize, strategy: Strategy) -> PathBuf {
        self.0.join("pseudo").join(format!("k{k}_{strategy}.jsonl"))
    }
}

/// Everything a stage needs: the resolved config, where to work, the
/// manifest chain and the seed of this run.
pub struct Stage<'a> {
    pub cfg: &'a LabConfig,
    pub dir: RunDir,
    pub chain: &'a mut ManifestChain,
    pub run_seed: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&body)?)
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_split(dir: &RunDir, split: Split) -> Result<Vec<Sample>> {
    let path = dir.data(split);
    read_jsonl(&path).with_context(|| format!("loading {}; run generate-data first", path.display()))
}

fn load_vocab(dir: &RunDir) -> Result<Vocab> {
    let path = dir.vocab();
    Vocab::load(&path).with_context(|| format!("loading {}; run pretrain first", path.display()))
}

/// A seeded subset of `fraction` of the samples, in id order.
pub fn fraction_subset(samples: &[Sample], fraction: f64, seed: u64) -> Vec<Sample> {
    let n = ((samples.len() as f64 * fraction).ceil() as usize).clamp(1, samples.len().max(1));
    let mut picked: Vec<&Sample> = samples.iter().collect();
    picked.sort_by_key(|s| s.id);
    picked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    picked.truncate(n);
    picked.sort_by_key(|s| s.id);
    picked.into_iter().cloned().collect()
}

/// Per-epoch losses of a training stage, without timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub epoch_losses: Vec<f64>,
    pub final_val_loss: Option<f64>,
    pub examples: usize,
}

impl From<&TrainReport> for LossSummary {
    fn from(r: &TrainReport) -> Self {
        Self {
            epoch_losses: r.epoch_losses.clone(),
            final_val_loss: r.final_val_loss,
            examples: r.examples,
        }
    }
}

/// Filtered scores on the samples answered wrongly at step 0, read from
/// step 0 and from the final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrongSubset {
    pub count: usize,
    pub fixed: usize,
    pub without_revise: ScoreBlock,
    pub with_revise: ScoreBlock,
    /// Filtered BLEU-1 with an empty filtered set counted as 0.
    pub bleu1_without: f64,
    pub bleu1_with: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviseSummary {
    pub max_steps: usize,
    pub mode: LanguageMode,
    pub step0: MetricReport,
    #[serde(rename = "final")]
    pub final_step: MetricReport,
    pub initially_wrong: WrongSubset,
    pub converged_by_step3: f64,
    pub failure_rate: f64,
}

pub fn summarize_traces(
    samples: &[Sample],
    traces: &[ReviseTrace],
    revise: &ReviseConfig,
    seed: u64,
) -> Result<ReviseSummary> {
    let refs: Vec<Vec<String>> = samples.iter().map(|s| vec![s.explanation.clone()]).collect();
    let first = predictions_from_steps(samples, traces, StepChoice::First)?;
    let last = predictions_from_steps(samples, traces, StepChoice::Last)?;
    let max = revise.max_steps;
    let step0 = filtered_report("test", seed, &first, Some(&refs), None, max)?;
    let final_step = filtered_report("test", seed, &last, Some(&refs), Some(traces), max)?;
    let wrong: BTreeSet<u64> = first.iter().filter(|p| !p.is_correct()).map(|p| p.id).collect();
    let subset = |preds: &[Prediction]| -> Vec<Prediction> {
        preds.iter().filter(|p| wrong.contains(&p.id)).cloned().collect()
    };
    let without = filtered_report("test_initially_wrong", seed, &subset(&first), Some(&refs), None, max)?;
    let with = filtered_report("test_initially_wrong", seed, &subset(&last), Some(&refs), None, max)?;
    let stats = final_step
        .traces
        .clone()
        .context("final-step report lost its trace statistics")?;
    Ok(ReviseSummary {
        max_steps: max,
        mode: revise.mode,
        initially_wrong: WrongSubset {
            count: wrong.len(),
            fixed: stats.flips.gained,
            bleu1_without: without.filtered.bleu1_or_zero(),
            bleu1_with: with.filtered.bleu1_or_zero(),
            without_revise: without.filtered,
            with_revise: with.filtered,
        },
        converged_by_step3: stats.converged_by(3),
        failure_rate: stats.failure_rate(),
        step0,
        final_step,
    })
}

/// Explicit and implicit traces over the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAblation {
    pub explicit: ReviseSummary,
    pub implicit: ReviseSummary,
    /// Samples whose step sequences differ between the modes.
    pub differing: usize,
    pub total: usize,
    pub differing_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLimitAblation {
    pub rows: Vec<ReviseSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestSummary {
    pub pool: usize,
    pub candidates: usize,
    /// Pseudo-set size actually drawn for each k.
    pub drawn: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainComparison {
    pub harvest: HarvestSummary,
    pub rows: Vec<ComparisonRow>,
}

fn traces_differ(a: &ReviseTrace, b: &ReviseTrace) -> bool {
    a.steps.len() != b.steps.len()
        || a.steps
            .iter()
            .zip(&b.steps)
            .any(|(x, y)| x.answer_ids != y.answer_ids || x.explanation_ids != y.explanation_ids)
}

impl Stage<'_> {
    fn entries(&self) -> BTreeMap<String, String> {
        self.cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn seed(&self, stage: &str, index: u64) -> u64 {
        derive_seed(self.run_seed, stage, index)
    }

    fn record(&mut self, command: &str, seed: u64, inputs: &[PathBuf], outputs: &[PathBuf], start: Instant) -> Result<()> {
        let entries = self.entries();
        self.chain
            .record(command, entries, seed, inputs, outputs, start.elapsed().as_secs_f64())?;
        Ok(())
    }

    pub fn generate_data(&mut self) -> Result<()> {
        let start = Instant::now();
        let seed = self.seed("data", 0);
        let samples = generate_dataset(&self.cfg.dataset(seed))?;
        let mut outputs = Vec::new();
        for split in Split::ALL {
            let path = self.dir.data(split);
            std::fs::create_dir_all(path.parent().expect("data path has a parent"))?;
            write_jsonl(&path, &split_of(&samples, split))?;
            outputs.push(path);
        }
        self.record("generate-data", seed, &[], &outputs, start)
    }

    pub fn pretrain(&mut self) -> Result<LossSummary> {
        let start = Instant::now();
        let seed = self.seed("pretrain", 0);
        let train = load_split(&self.dir, Split::Train)?;
        let vocab = Vocab::build(&pretraining_corpus(&train)?, 1)?;
        let mut model = Model::new(self.cfg.model(vocab.len()), self.seed("init", 0))?;
        let report = pretrain_lm(&mut model, &train, &vocab, &self.cfg.pretrain(seed))?;
        vocab.save(&self.dir.vocab())?;
        checkpoint::save(&model, &self.dir.pretrained())?;
        let report_path = self.dir.report("pretrain");
        write_json(&report_path, &report)?;
        let outputs = [self.dir.vocab(), self.dir.pretrained(), report_path];
        self.record("pretrain", seed, &[self.dir.data(Split::Train)], &outputs, start)?;
        Ok(LossSummary::from(&report))
    }

    /// Returns the loss summary and the partitions the stage changed.
    pub fn finetune(&mut self) -> Result<(LossSummary, Vec<Partition>)> {
        let start = Instant::now();
        let seed = self.seed("finetune", 0);
        let train = load_split(&self.dir, Split::Train)?;
        let val = load_split(&self.dir, Split::Val)?;
        let vocab = load_vocab(&self.dir)?;
        let before = load_model(&self.dir.pretrained())?;
        let mut model = before.clone();
        let subset = fraction_subset(&train, self.cfg.fraction, self.seed("fraction", 0));
        let report = finetune(&mut model, &subset, &val, &vocab, &self.cfg.finetune(seed))?;
        let changed = changed_partitions(&before, &model);
        checkpoint::save(&model, &self.dir.finetuned())?;
        let report_path = self.dir.report("finetune");
        write_json(&report_path, &report)?;
        let inputs = [
            self.dir.data(Split::Train),
            self.dir.data(Split::Val),
            self.dir.vocab(),
            self.dir.pretrained(),
        ];
        self.record("finetune", seed, &inputs, &[self.dir.finetuned(), report_path], start)?;
        Ok((LossSummary::from(&report), changed))
    }

    /// The loop over the test split with the configured cap and mode. With
    /// `write_traces`, one JSON file per trace and one heatmap per step go
    /// to `traces/`.
    pub fn revise(&mut self, write_traces: bool) -> Result<ReviseSummary> {
        let start = Instant::now();
        let test = load_split(&self.dir, Split::Test)?;
        let vocab = load_vocab(&self.dir)?;
        let model = load_model(&self.dir.finetuned())?;
        let revise = self.cfg.revise();
        let traces = revise_samples(&model, &vocab, &test, &revise)?;
        let summary = summarize_traces(&test, &traces, &revise, self.run_seed)?;
        let mut outputs = Vec::new();
        if write_traces {
            outputs = write_trace_files(&self.dir.traces(), &traces, &model, revise.max_steps)?;
        }
        let report_path = self.dir.report("revise");
        write_json(&report_path, &summary)?;
        outputs.push(report_path);
        let inputs = [self.dir.data(Split::Test), self.dir.vocab(), self.dir.finetuned()];
        self.record("revise", self.run_seed, &inputs, &outputs, start)?;
        Ok(summary)
    }

    /// Single-shot report of a checkpoint on the test split.
    pub fn eval(&mut self, checkpoint_path: Option<&Path>) -> Result<MetricReport> {
        let start = Instant::now();
        let ckpt = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| self.dir.finetuned());
        let test = load_split(&self.dir, Split::Test)?;
        let vocab = load_vocab(&self.dir)?;
        let model = load_model(&ckpt)?;
        let report = evaluate(&model, &vocab, &test, &self.cfg.decode(), self.run_seed)?;
        let report_path = self.dir.report("eval");
        write_json(&report_path, &report)?;
        let inputs = [self.dir.data(Split::Test), self.dir.vocab(), ckpt];
        self.record("eval", self.run_seed, &inputs, &[report_path], start)?;
        Ok(report)
    }

    pub fn ablate_language_mode(&mut self) -> Result<ModeAblation> {
        let start = Instant::now();
        let test = load_split(&self.dir, Split::Test)?;
        let vocab = load_vocab(&self.dir)?;
        let model = load_model(&self.dir.finetuned())?;
        let run = |mode| -> Result<(Vec<ReviseTrace>, ReviseSummary)> {
            let revise = self.cfg.revise_with(self.cfg.max_steps, mode);
            let traces = revise_samples(&model, &vocab, &test, &revise)?;
            let summary = summarize_traces(&test, &traces, &revise, self.run_seed)?;
            Ok((traces, summary))
        };
        let (explicit_traces, explicit) = run(LanguageMode::Explicit)?;
        let (implicit_traces, implicit) = run(LanguageMode::Implicit)?;
        let differing = explicit_traces
            .iter()
            .zip(&implicit_traces)
            .filter(|(a, b)| traces_differ(a, b))
            .count();
        let ablation = ModeAblation {
            explicit,
            implicit,
            differing,
            total: test.len(),
            differing_share: differing as f64 / test.len().max(1) as f64,
        };
        let report_path = self.dir.report("ablate_language_mode");
        write_json(&report_path, &ablation)?;
        let inputs = [self.dir.data(Split::Test), self.dir.vocab(), self.dir.finetuned()];
        self.record("ablate-language-mode", self.run_seed, &inputs, &[report_path], start)?;
        Ok(ablation)
    }

    pub fn ablate_step_limit(&mut self) -> Result<StepLimitAblation> {
        let start = Instant::now();
        let test = load_split(&self.dir, Split::Test)?;
        let vocab = load_vocab(&self.dir)?;
        let model = load_model(&self.dir.finetuned())?;
        let rows = self
            .cfg
            .step_limits
            .iter()
            .map(|&limit| {
                let revise = self.cfg.revise_with(limit, self.cfg.mode);
                let traces = revise_samples(&model, &vocab, &test, &revise)?;
                summarize_traces(&test, &traces, &revise, self.run_seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let ablation = StepLimitAblation { rows };
        let report_path = self.dir.report("ablate_step_limit");
        write_json(&report_path, &ablation)?;
        let inputs = [self.dir.data(Split::Test), self.dir.vocab(), self.dir.finetuned()];
        self.record("ablate-step-limit", self.run_seed, &inputs, &[report_path], start)?;
        Ok(ablation)
    }

    /// Harvests corrected traces over the train split and, for each k,
    /// self-trains on paired ReVisE and answer-conditioned pseudo sets.
    pub fn compare_selftrain(&mut self) -> Result<SelfTrainComparison> {
        let start = Instant::now();
        let pool = load_split(&self.dir, Split::Train)?;
        let test = load_split(&self.dir, Split::Test)?;
        let vocab = load_vocab(&self.dir)?;
        let model = load_model(&self.dir.finetuned())?;
        let decode = self.cfg.decode();
        let traces = revise_samples(&model, &vocab, &pool, &self.cfg.revise())?;
        let control = evaluate(&model, &vocab, &test, &decode, self.run_seed)?;
        let mut rows = Vec::new();
        let mut outputs = Vec::new();
        let mut drawn = BTreeMap::new();
        let mut candidates = 0;
        for &k in &self.cfg.k {
            let st = self.cfg.selftrain(k, self.seed("selftrain", k as u64));
            let harvest = harvest_from_traces(&pool, &traces, &st)?;
            candidates = harvest.candidates;
            drawn.insert(k, harvest.pseudo.len());
            let paired = paired_pseudo(&model, &vocab, &pool, &harvest, &decode)?;
            for (strategy, set) in [
                (Strategy::Revise, &paired.revise),
                (Strategy::AnswerConditioned, &paired.answer_conditioned),
            ] {
                let path = self.dir.pseudo(k, strategy);
                std::fs::create_dir_all(path.parent().expect("pseudo path has a parent"))?;
                write_pseudo_jsonl(&path, set)?;
                outputs.push(path);
            }
            let mut control_row = control.clone();
            control_row.seed = st.seed;
            rows.extend(compare_strategies(
                &model,
                &vocab,
                &pool,
                &test,
                &paired,
                &st,
                &decode,
                Some(&control_row),
            )?);
        }
        let comparison = SelfTrainComparison {
            harvest: HarvestSummary {
                pool: pool.len(),
                candidates,
                drawn,
            },
            rows,
        };
        let report_path = self.dir.report("compare_selftrain");
        write_json(&report_path, &comparison)?;
        outputs.push(report_path);
        let inputs = [
            self.dir.data(Split::Train),
            self.dir.data(Split::Test),
            self.dir.vocab(),
            self.dir.finetuned(),
        ];
        self.record("compare-selftrain", self.run_seed, &inputs, &outputs, start)?;
        Ok(comparison)
    }

    /// Harvests with the first configured k and self-trains the query
    /// transformer on the ReVisE pseudo set; writes the new checkpoint.
    pub fn self_train(&mut self, k: usize) -> Result<MetricReport> {
        let start = Instant::now();
        let pool = load_split(&self.dir, Split::Train)?;
        let test = load_split(&self.dir, Split::Test)?;
        let vocab = load_vocab(&self.dir)?;
        let mut model = load_model(&self.dir.finetuned())?;
        let st = self.cfg.selftrain(k, self.seed("selftrain", k as u64));
        let traces = revise_samples(&model, &vocab, &pool, &self.cfg.revise())?;
        let harvest = harvest_from_traces(&pool, &traces, &st)?;
        if harvest.pseudo.is_empty() {
            bail!("no trace corrected a wrong step-0 answer; nothing to self-train on");
        }
        let pseudo_path = self.dir.pseudo(k, Strategy::Revise);
        std::fs::create_dir_all(pseudo_path.parent().expect("pseudo path has a parent"))?;
        write_pseudo_jsonl(&pseudo_path, &harvest.pseudo)?;
        selftrain_finetune(&mut model, &vocab, &pool, &harvest.pseudo, &st)?;
        checkpoint::save(&model, &self.dir.selftrained(k))?;
        let report = evaluate(&model, &vocab, &test, &self.cfg.decode(), st.seed)?;
        let report_path = self.dir.report(&format!("self_train_k{k}"));
        write_json(&report_path, &report)?;
        let inputs = [
            self.dir.data(Split::Train),
            self.dir.data(Split::Test),
            self.dir.vocab(),
            self.dir.finetuned(),
        ];
        let outputs = [pseudo_path, self.dir.selftrained(k), report_path];
        self.record("self-train", st.seed, &inputs, &outputs, start)?;
        Ok(report)
    }
}

pub fn changed_partitions(a: &Model<f32>, b: &Model<f32>) -> Vec<Partition> {
    let set: BTreeSet<Partition> = a.params.changed_params(&b.params).into_iter().map(|(_, p)| p).collect();
    set.into_iter().collect()
}

/// `trace_<id>.json` plus `trace_<id>_step<n>.pgm` for every step.
pub fn write_trace_files(dir: &Path, traces: &[ReviseTrace], model: &Model<f32>, max_steps: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let grid = model.config.image_size / model.config.patch_size;
    let mut written = Vec::new();
    for t in traces {
        let json = TraceJson::from(t);
        json.validate(max_steps)?;
        let path = dir.join(format!("trace_{}.json", t.id));
        write_json(&path, &json)?;
        written.push(path);
        for step in &t.steps {
            let heat = attention_heatmap(&step.attention, grid)?;
            let path = dir.join(format!("trace_{}_step{}.pgm", t.id, step.n));
            std::fs::write(&path, heat.to_pgm())?;
            written.push(path);
        }
    }
    Ok(written)
}

/// One self-training row of the final summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub k: usize,
    pub pseudo_count: usize,
    pub changed_partitions: Vec<Partition>,
    pub filtered_bleu1: f64,
    pub accuracy: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub pretrain: LossSummary,
    pub finetune: LossSummary,
    pub finetune_changed_partitions: Vec<Partition>,
    pub revise: ReviseSummary,
    pub language_mode: ModeAblation,
    pub step_limits: StepLimitAblation,
    pub harvest: Option<HarvestSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMean {
    pub strategy: Strategy,
    pub k: usize,
    pub mean_filtered_bleu1: f64,
    pub mean_accuracy: f64,
}

/// Cross-seed means of the headline comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub runs_with_fixes: usize,
    pub mean_wrong_subset_bleu1_without: f64,
    pub mean_wrong_subset_bleu1_with: f64,
    pub mean_converged_by_step3: f64,
    pub mean_failure_rate: f64,
    pub mean_mode_differing_share: f64,
    pub mean_explicit_filtered_bleu1: f64,
    pub mean_implicit_filtered_bleu1: f64,
    pub selftrain: Vec<StrategyMean>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub master_seed: u64,
    pub config: BTreeMap<String, String>,
    pub runs: Vec<RunSummary>,
    pub rows: Vec<SummaryRow>,
    pub aggregate: Aggregate,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn aggregate(runs: &[RunSummary], rows: &[SummaryRow]) -> Aggregate {
    let mut keys: Vec<(Strategy, usize)> = rows.iter().map(|r| (r.strategy, r.k)).collect();
    keys.sort();
    keys.dedup();
    let selftrain = keys
        .into_iter()
        .map(|(strategy, k)| {
            let matching = || rows.iter().filter(move |r| r.strategy == strategy && r.k == k);
            StrategyMean {
                strategy,
                k,
                mean_filtered_bleu1: mean(matching().map(|r| r.filtered_bleu1)),
                mean_accuracy: mean(matching().map(|r| r.accuracy)),
            }
        })
        .collect();
    Aggregate {
        runs: runs.len(),
        runs_with_fixes: runs.iter().filter(|r| r.revise.initially_wrong.fixed > 0).count(),
        mean_wrong_subset_bleu1_without: mean(runs.iter().map(|r| r.revise.initially_wrong.bleu1_without)),
        mean_wrong_subset_bleu1_with: mean(runs.iter().map(|r| r.revise.initially_wrong.bleu1_with)),
        mean_converged_by_step3: mean(runs.iter().map(|r| r.revise.converged_by_step3)),
        mean_failure_rate: mean(runs.iter().map(|r| r.revise.failure_rate)),
        mean_mode_differing_share: mean(runs.iter().map(|r| r.language_mode.differing_share)),
        mean_explicit_filtered_bleu1: mean(
            runs.iter()
                .map(|r| r.language_mode.explicit.final_step.filtered.bleu1_or_zero()),
        ),
        mean_implicit_filtered_bleu1: mean(
            runs.iter()
                .map(|r| r.language_mode.implicit.final_step.filtered.bleu1_or_zero()),
        ),
        selftrain,
    }
}

pub const SUMMARY_FILE: &str = "summary.json";

pub fn run_dir(out: &Path, run: usize) -> RunDir {
    RunDir(out.join(format!("run_{run}")))
}

/// Seed of run `index` under a master seed. Standalone subcommands use
/// run 0, so they reproduce the pipeline's first run.
pub fn run_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, "run", index as u64)
}

/// Every stage for one run.
pub fn run_once(cfg: &LabConfig, out: &Path, chain: &mut ManifestChain, run: usize) -> Result<(RunSummary, Vec<SummaryRow>)> {
    let seed = run_seed(cfg.seed, run);
    let mut stage = Stage {
        cfg,
        dir: run_dir(out, run),
        chain,
        run_seed: seed,
    };
    let named = |name: &'static str| move |e: anyhow::Error| e.context(format!("run {run}: stage `{name}` failed"));
    stage.generate_data().map_err(named("generate-data"))?;
    let pretrain = stage.pretrain().map_err(named("pretrain"))?;
    let (finetune, changed) = stage.finetune().map_err(named("finetune"))?;
    let revise = stage.revise(cfg.write_traces).map_err(named("revise"))?;
    let language_mode = stage.ablate_language_mode().map_err(named("ablate"))?;
    let step_limits = stage.ablate_step_limit().map_err(named("ablate"))?;
    let (harvest, rows) = if cfg.skip_selftrain {
        (None, Vec::new())
    } else {
        let cmp = stage.compare_selftrain().map_err(named("compare-selftrain"))?;
        let rows = cmp
            .rows
            .into_iter()
            .map(|r| SummaryRow {
                run,
                seed,
                strategy: r.strategy,
                k: r.k,
                pseudo_count: r.pseudo_count,
                changed_partitions: r.changed_partitions,
                filtered_bleu1: r.report.filtered.bleu1_or_zero(),
                accuracy: r.report.accuracy,
                report: r.report,
            })
            .collect();
        (Some(cmp.harvest), rows)
    };
    let summary = RunSummary {
        run,
        seed,
        pretrain,
        finetune,
        finetune_changed_partitions: changed,
        revise,
        language_mode,
        step_limits,
        harvest,
    };
    Ok((summary, rows))
}

/// The full experiment: `cfg.seeds` runs, then `summary.json` in `out`.
/// `progress` is called after each run.
pub fn experiment_pipeline(cfg: &LabConfig, out: &Path, mut progress: impl FnMut(&RunSummary)) -> Result<Summary> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut chain = ManifestChain::open(out)?;
    let start = Instant::now();
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for run in 0..cfg.seeds {
        let (summary, run_rows) = run_once(cfg, out, &mut chain, run)?;
        progress(&summary);
        runs.push(summary);
        rows.extend(run_rows);
    }
    let entries: BTreeMap<String, String> = cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let summary = Summary {
        master_seed: cfg.seed,
        config: entries.clone(),
        aggregate: aggregate(&runs, &rows),
        runs,
        rows,
    };
    let path = out.join(SUMMARY_FILE);
    write_json(&path, &summary)?;
    chain.record("pipeline", entries, cfg.seed, &[], &[path], start.elapsed().as_secs_f64())?;
    Ok(summary)
}
