use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use revise_cli::manifest::verify_chain;
use revise_cli::pipeline::{run_dir, Summary, SUMMARY_FILE};

const TINY: &str = "\
# small enough for a test run
train = 60
val = 10
test = 20
image_size = 16
patch_size = 8
d_model = 16
num_queries = 2
heads = 2
encoder_layers = 1
qformer_layers = 1
decoder_layers = 1
max_gen_len = 12
pretrain_epochs = 1
epochs = 1
batch_size = 8
seeds = 2
k = 2,4
selftrain_epochs = 1
selftrain_lr = 0.001
step_limits = 1,3
";

struct Lab {
    dir: tempfile::TempDir,
}

impl Lab {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_revise-lab"))
            .args(args)
            .current_dir(self.dir.path())
            .env("REVISE_LAB_THREADS", "1")
            .output()
            .unwrap()
    }

    /// Runs a subcommand on the tiny config and asserts success.
    fn ok(&self, command: &[&str], out: &str) -> String {
        let mut args = command.to_vec();
        args.extend(["--config", "tiny.conf", "--out", out]);
        let o = self.run(&args);
        assert!(
            o.status.success(),
            "{args:?} failed:\n{}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let lab = Lab::new();
    assert_eq!(code(&lab.run(&[])), 1);
    assert_eq!(code(&lab.run(&["pipeline", "--frobnicate"])), 1);
    assert_eq!(code(&lab.run(&["launch"])), 1);
    assert_eq!(code(&lab.run(&["revise", "--max-steps", "0", "--print-config"])), 1);
    assert_eq!(code(&lab.run(&["revise", "--mode", "sideways", "--print-config"])), 1);
    assert_eq!(code(&lab.run(&["revise", "--set", "lr", "--print-config"])), 1);
    assert_eq!(code(&lab.run(&["revise", "--config", "missing.conf"])), 1);
    assert_eq!(code(&lab.run(&["--help"])), 0);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let lab = Lab::new();
    let o = Command::new(env!("CARGO_BIN_EXE_revise-lab"))
        .args(["pipeline", "--print-config"])
        .env("REVISE_LAB_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    drop(lab);
}

#[test]
fn print_config_shows_flag_overrides() {
    let lab = Lab::new();
    let o = lab.run(&["pipeline", "--config", "tiny.conf", "--seed", "7", "--k", "8,16", "--print-config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 7\n"), "{text}");
    assert!(text.contains("k = 8,16\n"));
    assert!(text.contains("train = 60\n"));
    assert!(!lab.path("runs").exists(), "printing the config must not run anything");
}

#[test]
fn missing_inputs_are_a_runtime_error() {
    let lab = Lab::new();
    let o = lab.run(&["revise", "--config", "tiny.conf", "--out", "empty"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

fn steps_in(trace: &Path) -> usize {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(trace).unwrap()).unwrap();
    v["steps"].as_array().unwrap().len()
}

fn read_summary(dir: &Path) -> Summary {
    serde_json::from_slice(&std::fs::read(dir.join(SUMMARY_FILE)).unwrap()).unwrap()
}

/// The standalone subcommands reproduce the pipeline's first run, and
/// every manifest chain verifies.
#[test]
fn standalone_chain_matches_the_pipeline() {
    let lab = Lab::new();
    lab.ok(&["generate-data"], "solo");
    lab.ok(&["pretrain"], "solo");
    lab.ok(&["finetune"], "solo");
    lab.ok(&["revise", "--max-steps", "3"], "solo");
    let traces: Vec<PathBuf> = std::fs::read_dir(lab.path("solo/traces"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    assert_eq!(traces.len(), 20);
    for t in &traces {
        let n = steps_in(t);
        assert!((1..=3).contains(&n), "{} has {n} steps", t.display());
    }
    let out = lab.ok(&["ablate", "--axis", "language-mode"], "solo");
    assert!(out.contains("traces differ on"), "{out}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(lab.path("solo/reports/ablate_language_mode.json")).unwrap()).unwrap();
    assert_eq!(report["total"], 20);
    assert_eq!(report["explicit"]["mode"], "explicit");
    assert_eq!(report["implicit"]["mode"], "implicit");
    lab.ok(&["eval"], "solo");
    assert_eq!(verify_chain(&lab.path("solo")).unwrap(), 6);

    lab.ok(&["pipeline", "--seeds", "1", "--no-selftrain"], "piped");
    let solo = std::fs::read(lab.path("solo/finetuned.ckpt")).unwrap();
    let piped = std::fs::read(run_dir(&lab.path("piped"), 0).finetuned()).unwrap();
    assert_eq!(solo, piped, "standalone finetune differs from pipeline run 0");
    assert!(verify_chain(&lab.path("piped")).unwrap() > 0);
}

#[test]
fn pipeline_rows_cover_every_strategy_k_and_seed() {
    let lab = Lab::new();
    lab.ok(&["pipeline"], "full");
    let s = read_summary(&lab.path("full"));
    assert_eq!(s.runs.len(), 2);
    assert_eq!(s.rows.len(), 3 * 2 * 2);
    for run in 0..2 {
        for k in [2, 4] {
            let mut strategies: Vec<String> = s
                .rows
                .iter()
                .filter(|r| r.run == run && r.k == k)
                .map(|r| r.strategy.to_string())
                .collect();
            strategies.sort();
            assert_eq!(strategies, ["answer_conditioned", "control", "revise"]);
        }
    }
    for r in &s.rows {
        assert!(r.changed_partitions.iter().all(|p| p.to_string() == "qformer"), "{r:?}");
    }
    assert_ne!(s.runs[0].seed, s.runs[1].seed);
    assert!(verify_chain(&lab.path("full")).is_ok());

    lab.ok(&["pipeline", "--no-selftrain"], "lean");
    let lean = read_summary(&lab.path("lean"));
    assert!(lean.rows.is_empty());
    assert!(lean.runs.iter().all(|r| r.harvest.is_none()));
    assert_eq!(lean.runs[0].revise, s.runs[0].revise);
}
