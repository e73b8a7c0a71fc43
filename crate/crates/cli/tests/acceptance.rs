//! Runs every acceptance criterion at its tolerance on the default
//! configuration and prints one PASS/FAIL line per criterion. Exits
//! nonzero if any criterion fails.
//!
//! The full run trains five seeds twice (the second pass checks
//! determinism) and takes the better part of an hour on one core. Run
//! artifacts stay under the cargo target tmp directory for inspection.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use rayon::prelude::*;
use revise_cli::config::LabConfig;
use revise_cli::pipeline::{experiment_pipeline, run_dir, RunDir, Summary, SUMMARY_FILE};
use revise_core::metrics;
use revise_core::model::checkpoint;
use revise_core::nn::Partition;
use revise_core::revise::{classify_trace, run_loop, single_shot, StepOutput, TraceJson, TraceStatus};
use revise_core::scenegen::{read_jsonl, Split};
use revise_core::selftrain::Strategy;
use revise_core::text::Vocab;

#[path = "../../core/tests/support/mod.rs"]
mod support;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn lm_unchanged_by_finetune(dir: &RunDir) -> Result<bool> {
    let pre = checkpoint::load(&dir.pretrained())?;
    let fin = checkpoint::load(&dir.finetuned())?;
    Ok(pre.params.partition_hash(Partition::Lm) == fin.params.partition_hash(Partition::Lm))
}

fn freezing(out: &Path, s: &Summary) -> Result<Verdict> {
    let mut lm_kept = 0;
    for r in &s.runs {
        if lm_unchanged_by_finetune(&run_dir(out, r.run))? && !r.finetune_changed_partitions.contains(&Partition::Lm) {
            lm_kept += 1;
        }
    }
    let trained: Vec<_> = s.rows.iter().filter(|r| r.strategy != Strategy::Control && r.pseudo_count > 0).collect();
    let qformer_only = trained
        .iter()
        .filter(|r| r.changed_partitions == [Partition::Qformer])
        .count();
    Ok(Verdict::new(
        lm_kept == s.runs.len() && !trained.is_empty() && qformer_only == trained.len(),
        format!(
            "lm byte-identical after finetune on {lm_kept}/{} runs; {qformer_only}/{} self-trained models differ only in qformer",
            s.runs.len(),
            trained.len()
        ),
    ))
}

fn gradient_oracle() -> Verdict {
    let worst = (0..10)
        .map(|seed| support::tiny::gradient_check_case(seed).max_rel_error)
        .fold(0.0f64, f64::max);
    Verdict::new(worst < 1e-4, format!("max relative error {worst:.2e} over 10 configs"))
}

fn metric_conformance() -> Verdict {
    use support::metrics_oracle::{fixtures, oracle, owned};
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (i, f) in fixtures().iter().enumerate() {
        let (c, r) = owned(f);
        let (Ok(b), Ok(rouge), Ok(cider)) = (metrics::bleu(&c, &r), metrics::rouge_l(&c, &r), metrics::cider(&c, &r, 6.0))
        else {
            failures.push(format!("fixture {i} errored"));
            continue;
        };
        let want = oracle::bleu(&f.0, &f.1);
        for n in 0..4 {
            worst = worst.max((b[n] - want[n]).abs());
        }
        worst = worst.max((rouge - oracle::rouge(&f.0, &f.1)).abs());
        worst = worst.max((cider - oracle::cider(&f.0, &f.1, 6.0)).abs());
    }
    let hand_bleu = metrics::bleu(&["the cat sat".to_string()], &[vec!["the cat ran".to_string()]])
        .map(|b| (b[0] - 2.0 / 3.0).abs())
        .unwrap_or(f64::INFINITY);
    let f = (1.0 + 1.44) * (2.0 / 3.0) / (1.0 + 1.44 * 2.0 / 3.0);
    let hand_rouge = metrics::rouge_l(&["a b c".to_string()], &[vec!["a c".to_string()]])
        .map(|r| (r - f).abs())
        .unwrap_or(f64::INFINITY);
    worst = worst.max(hand_bleu).max(hand_rouge);
    Verdict::new(
        failures.is_empty() && worst < 1e-6 && fixtures().len() >= 10,
        format!(
            "{} fixtures plus hand examples, max deviation {worst:.1e}{}",
            fixtures().len(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(", ")) }
        ),
    )
}

fn read_traces(dir: &RunDir) -> Result<Vec<TraceJson>> {
    let mut traces = Vec::new();
    for entry in std::fs::read_dir(dir.traces())? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let body = std::fs::read(&path)?;
            traces.push(serde_json::from_slice(&body).with_context(|| format!("parsing {}", path.display()))?);
        }
    }
    traces.sort_by_key(|t: &TraceJson| t.id);
    Ok(traces)
}

fn loop_bound(out: &Path, s: &Summary, cfg: &LabConfig) -> Result<Verdict> {
    let (mut total, mut bounded, mut valid) = (0, 0, 0);
    for r in &s.runs {
        let traces = read_traces(&run_dir(out, r.run))?;
        total += traces.len();
        bounded += traces.iter().filter(|t| (1..=5).contains(&t.steps.len())).count();
        valid += traces.iter().filter(|t| t.validate(5).is_ok()).count();
    }
    let expected = cfg.test * s.runs.len();
    Ok(Verdict::new(
        cfg.max_steps == 5 && total == expected && bounded == total && valid == total,
        format!("{bounded}/{total} traces within 5 steps, {valid} schema-valid, {expected} expected"),
    ))
}

fn step0_purity(out: &Path, s: &Summary, cfg: &LabConfig) -> Result<Verdict> {
    let (mut total, mut equal) = (0, 0);
    for r in &s.runs {
        let dir = run_dir(out, r.run);
        let test = read_jsonl(&dir.data(Split::Test))?;
        let vocab = Vocab::load(&dir.vocab())?;
        let model = checkpoint::load(&dir.finetuned())?;
        let traces = read_traces(&dir)?;
        let decode = cfg.decode();
        let shots: Vec<(String, String)> = test
            .par_iter()
            .map(|x| single_shot(&model, &vocab, &x.image, &x.question, &decode))
            .collect::<revise_core::Result<_>>()?;
        for ((x, t), (answer, explanation)) in test.iter().zip(&traces).zip(&shots) {
            total += 1;
            let first = &t.steps[0];
            if t.id == x.id && &first.answer == answer && &first.explanation == explanation {
                equal += 1;
            }
        }
    }
    Ok(Verdict::new(total > 0 && equal == total, format!("{equal}/{total} step-0 records equal single-shot output")))
}

fn efficacy(s: &Summary) -> Verdict {
    let fixes: Vec<String> = s.runs.iter().map(|r| r.revise.initially_wrong.fixed.to_string()).collect();
    let with_fixes = s.aggregate.runs_with_fixes;
    let (without, with) = (s.aggregate.mean_wrong_subset_bleu1_without, s.aggregate.mean_wrong_subset_bleu1_with);
    Verdict::new(
        s.runs.len() == 5 && with_fixes >= 4 && with >= without,
        format!(
            "fixed per seed [{}], {with_fixes}/5 seeds with fixes; initially-wrong filtered BLEU-1 {without:.4} without, {with:.4} with",
            fixes.join(", ")
        ),
    )
}

fn convergence(s: &Summary) -> Verdict {
    let mut histogram = vec![0usize; 5];
    let mut emitted = true;
    for r in &s.runs {
        match &r.revise.final_step.traces {
            Some(t) => {
                for (h, c) in histogram.iter_mut().zip(&t.convergence_histogram) {
                    *h += c;
                }
            }
            None => emitted = false,
        }
    }
    let worst = s.runs.iter().map(|r| r.revise.converged_by_step3).fold(1.0f64, f64::min);
    Verdict::new(
        emitted && worst >= 0.8,
        format!(
            "histogram by step {histogram:?}; converged by step 3: mean {:.3}, worst seed {worst:.3}",
            s.aggregate.mean_converged_by_step3
        ),
    )
}

fn mean_of(s: &Summary, strategy: Strategy, k: usize) -> Option<f64> {
    s.aggregate
        .selftrain
        .iter()
        .find(|m| m.strategy == strategy && m.k == k)
        .map(|m| m.mean_filtered_bleu1)
}

fn selftrain_comparison(s: &Summary) -> Verdict {
    let rows: Vec<_> = s.rows.iter().filter(|r| r.k == 32).collect();
    let trained: Vec<_> = rows.iter().filter(|r| r.strategy != Strategy::Control).collect();
    let isolated = trained
        .iter()
        .all(|r| r.pseudo_count > 0 && r.changed_partitions == [Partition::Qformer]);
    let revise = mean_of(s, Strategy::Revise, 32);
    let answer = mean_of(s, Strategy::AnswerConditioned, 32);
    let paired = trained.len() == 2 * s.runs.len();
    match (revise, answer) {
        (Some(rv), Some(ac)) => Verdict::new(
            paired && isolated && rv >= ac - 0.005,
            format!(
                "k=32 filtered BLEU-1 mean: revise {rv:.4}, answer-conditioned {ac:.4}, gap {:+.4}; qformer-only changes {isolated}",
                rv - ac
            ),
        ),
        _ => Verdict::new(false, "no k=32 rows"),
    }
}

fn few_shot(s: &Summary) -> Verdict {
    let mut complete = true;
    for r in &s.runs {
        for k in [8, 16, 32] {
            for strategy in [Strategy::Control, Strategy::AnswerConditioned, Strategy::Revise] {
                let n = s.rows.iter().filter(|x| x.run == r.run && x.k == k && x.strategy == strategy).count();
                complete &= n == 1;
            }
        }
    }
    let trend: Vec<String> = [8, 16, 32]
        .iter()
        .map(|&k| {
            format!(
                "k={k} revise {:.4} answer-conditioned {:.4}",
                mean_of(s, Strategy::Revise, k).unwrap_or(f64::NAN),
                mean_of(s, Strategy::AnswerConditioned, k).unwrap_or(f64::NAN)
            )
        })
        .collect();
    Verdict::new(complete && s.rows.len() == 9 * s.runs.len(), format!("{} rows; {}", s.rows.len(), trend.join("; ")))
}

fn ablation(out: &Path, s: &Summary) -> Verdict {
    let differing: usize = s.runs.iter().map(|r| r.language_mode.differing).sum();
    let total: usize = s.runs.iter().map(|r| r.language_mode.total).sum();
    let reports = s
        .runs
        .iter()
        .all(|r| run_dir(out, r.run).report("ablate_language_mode").is_file());
    let per_seed: Vec<String> = s
        .runs
        .iter()
        .map(|r| {
            format!(
                "{:.4}/{:.4}",
                r.language_mode.explicit.final_step.filtered.bleu1_or_zero(),
                r.language_mode.implicit.final_step.filtered.bleu1_or_zero()
            )
        })
        .collect();
    let share = differing as f64 / total.max(1) as f64;
    Verdict::new(
        reports && total > 0 && share >= 0.01,
        format!(
            "traces differ on {differing}/{total} ({:.1}%); explicit/implicit filtered BLEU-1 per seed [{}]",
            share * 100.0,
            per_seed.join(", ")
        ),
    )
}

fn failure_classification(s: &Summary) -> Result<Verdict> {
    let vocab = Vocab::build(&["a b red blue x y"], 1)?;
    let scripted = |outputs: &[&str]| {
        let mut i = 0;
        run_loop(0, &vocab, 5, |_| {
            let text = outputs[i.min(outputs.len() - 1)];
            i += 1;
            Ok(StepOutput {
                tokens: vocab.tokenize(text),
                attention: vec![1.0],
                truncated_output: false,
                truncated_feedback: false,
            })
        })
    };
    let oscillating = scripted(&["a because x", "b because y", "a because x", "b because y", "a because x"])?;
    let regressed = scripted(&["red because x", "blue because y", "blue because y"])?;
    let stubs_ok = oscillating.status == TraceStatus::Oscillating
        && classify_trace(&regressed, Some("red")).regressed == Some(true);
    let rates: Vec<String> = s.runs.iter().map(|r| format!("{:.3}", r.revise.failure_rate)).collect();
    let worst = s.runs.iter().map(|r| r.revise.failure_rate).fold(0.0f64, f64::max);
    Ok(Verdict::new(
        stubs_ok && worst < 0.10,
        format!(
            "scripted oscillation and regression classified: {stubs_ok}; failure rate per seed [{}], mean {:.3}",
            rates.join(", "),
            s.aggregate.mean_failure_rate
        ),
    ))
}

fn fresh(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let start = Instant::now();
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let (first, second) = (root.join("first"), root.join("second"));
    let cfg = LabConfig::default();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |id, name, v: Result<Verdict>| {
        let v = v.unwrap_or_else(|e| Verdict::new(false, format!("error: {e:#}")));
        println!("[{}] {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((id, name, v));
    };

    record(2, "gradient oracle", Ok(gradient_oracle()));
    record(3, "metric conformance", Ok(metric_conformance()));

    let summary = fresh(&first).and_then(|_| {
        experiment_pipeline(&cfg, &first, |r| {
            eprintln!(
                "run {} done after {:.0}s: step-0 accuracy {:.3}, fixed {}",
                r.run,
                start.elapsed().as_secs_f64(),
                r.revise.step0.accuracy,
                r.revise.initially_wrong.fixed
            );
        })
    });
    match &summary {
        Ok(s) => {
            record(1, "freezing ledger", freezing(&first, s));
            record(4, "loop bound", loop_bound(&first, s, &cfg));
            record(5, "step-0 purity", step0_purity(&first, s, &cfg));
            record(6, "desk-scale efficacy", Ok(efficacy(s)));
            record(7, "convergence histogram", Ok(convergence(s)));
            record(8, "self-training comparison", Ok(selftrain_comparison(s)));
            record(9, "few-shot report", Ok(few_shot(s)));
            record(10, "ablation divergence", Ok(ablation(&first, s)));
            record(12, "failure classification", failure_classification(s));
            let rerun = fresh(&second)
                .and_then(|_| experiment_pipeline(&cfg, &second, |_| {}))
                .and_then(|_| {
                    let a = std::fs::read(first.join(SUMMARY_FILE))?;
                    let b = std::fs::read(second.join(SUMMARY_FILE))?;
                    Ok(Verdict::new(a == b, format!("summary.json of two runs: {} and {} bytes, identical {}", a.len(), b.len(), a == b)))
                });
            record(11, "determinism", rerun);
        }
        Err(e) => {
            for (id, name) in [
                (1, "freezing ledger"),
                (4, "loop bound"),
                (5, "step-0 purity"),
                (6, "desk-scale efficacy"),
                (7, "convergence histogram"),
                (8, "self-training comparison"),
                (9, "few-shot report"),
                (10, "ablation divergence"),
                (11, "determinism"),
                (12, "failure classification"),
            ] {
                record(id, name, Err(anyhow::anyhow!("pipeline failed: {e:#}")));
            }
        }
    }

    verdicts.sort_by_key(|(id, _, _)| *id);
    let failed: Vec<String> = verdicts
        .iter()
        .filter(|(_, _, v)| !v.pass)
        .map(|(id, name, _)| format!("{id} {name}"))
        .collect();
    println!(
        "{}/{} criteria passed in {:.0}s; artifacts in {}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        start.elapsed().as_secs_f64(),
        root.display()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
