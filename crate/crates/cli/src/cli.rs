//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::LabConfig;
use crate::manifest::ManifestChain;
use crate::pipeline::{experiment_pipeline, run_seed, ReviseSummary, RunDir, Stage};
use crate::Invalid;

#[derive(Debug, Parser)]
#[command(
    name = "revise-lab",
    version,
    about = "Seeded experiments with recursive visual explanations on a synthetic VQA task",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Flags override `--config`.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of the train split used for finetuning.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// `explicit` or `implicit`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Self-training pseudo-set sizes, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub beams: Option<usize>,
    /// Finetuning learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Finetuning epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of pipeline runs.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Any other config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory (the pipeline puts one run directory per seed inside).
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    LanguageMode,
    StepLimit,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/val/test splits.
    GenerateData(Common),
    /// Build the vocabulary and pretrain the decoder.
    Pretrain(Common),
    /// Train the vision encoder and query transformer with the decoder frozen.
    Finetune(Common),
    /// Run the recursive loop over the test split and write traces and heatmaps.
    Revise(Common),
    /// Self-train the query transformer on harvested pseudo-explanations.
    SelfTrain(Common),
    /// Control, answer-conditioned and ReVisE self-training for every k.
    CompareSelftrain(Common),
    /// Single-shot metrics of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run's finetuned checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Explicit-vs-implicit or step-limit sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Every stage for every seed, then a summary.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Leave out self-training and its summary rows.
        #[arg(long)]
        no_selftrain: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenerateData(c)
            | Command::Pretrain(c)
            | Command::Finetune(c)
            | Command::Revise(c)
            | Command::SelfTrain(c)
            | Command::CompareSelftrain(c) => c,
            Command::Eval { common, .. } | Command::Ablate { common, .. } | Command::Pipeline { common, .. } => common,
        }
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(common: &Common) -> Result<LabConfig, Invalid> {
    let mut cfg = LabConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.fraction {
        cfg.fraction = v;
    }
    if let Some(v) = common.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = &common.mode {
        cfg.set("mode", v)?;
    }
    if let Some(v) = &common.k {
        cfg.k = v.clone();
    }
    if let Some(v) = common.beams {
        cfg.beams = v;
    }
    if let Some(v) = common.lr {
        cfg.lr = v;
    }
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = common.seeds {
        cfg.seeds = v;
    }
    for pair in &common.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Invalid(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_revise(label: &str, s: &ReviseSummary) {
    println!(
        "{label}: steps<={} mode={} acc step0 {:.3} final {:.3}, fixed {} of {} wrong, converged by step 3 {:.3}, failure rate {:.3}",
        s.max_steps,
        s.mode,
        s.step0.accuracy,
        s.final_step.accuracy,
        s.initially_wrong.fixed,
        s.initially_wrong.count,
        s.converged_by_step3,
        s.failure_rate
    );
}

pub fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let mut cfg = resolve_config(common)?;
    if let Command::Pipeline { no_selftrain: true, .. } = cli.command {
        cfg.skip_selftrain = true;
    }
    if common.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let out = common.out.clone();
    if let Command::Pipeline { .. } = cli.command {
        let summary = experiment_pipeline(&cfg, &out, |r| {
            print_revise(&format!("run {} revise", r.run), &r.revise);
        })?;
        let a = &summary.aggregate;
        println!(
            "{} runs, {} with fixes; wrong-subset filtered BLEU-1 {:.4} -> {:.4}; summary in {}",
            a.runs,
            a.runs_with_fixes,
            a.mean_wrong_subset_bleu1_without,
            a.mean_wrong_subset_bleu1_with,
            out.join(crate::pipeline::SUMMARY_FILE).display()
        );
        return Ok(());
    }
    std::fs::create_dir_all(&out)?;
    let mut chain = ManifestChain::open(&out)?;
    let mut stage = Stage {
        cfg: &cfg,
        dir: RunDir(out.clone()),
        chain: &mut chain,
        run_seed: run_seed(cfg.seed, 0),
    };
    match &cli.command {
        Command::GenerateData(_) => {
            stage.generate_data()?;
            println!("wrote {} / {} / {} samples to {}", cfg.train, cfg.val, cfg.test, out.join("data").display());
        }
        Command::Pretrain(_) => {
            let r = stage.pretrain()?;
            println!("pretrain losses {:?}", r.epoch_losses);
        }
        Command::Finetune(_) => {
            let (r, changed) = stage.finetune()?;
            println!("finetune losses {:?}, val {:?}, changed {:?}", r.epoch_losses, r.final_val_loss, changed);
        }
        Command::Revise(_) => {
            let s = stage.revise(true)?;
            print_revise("revise", &s);
        }
        Command::SelfTrain(_) => {
            let k = cfg.k[0];
            let r = stage.self_train(k)?;
            println!("self-trained k={k}: accuracy {:.3}, filtered BLEU-1 {:?}", r.accuracy, r.filtered.bleu1);
        }
        Command::CompareSelftrain(_) => {
            let cmp = stage.compare_selftrain()?;
            for row in &cmp.rows {
                println!(
                    "k={:<3} {:<19} pseudo {:<3} accuracy {:.3} filtered BLEU-1 {:.4}",
                    row.k,
                    row.strategy.to_string(),
                    row.pseudo_count,
                    row.report.accuracy,
                    row.report.filtered.bleu1_or_zero()
                );
            }
        }
        Command::Eval { checkpoint, .. } => {
            let r = stage.eval(checkpoint.as_deref())?;
            println!(
                "accuracy {:.3} ({} of {}), filtered BLEU-1 {:.4}",
                r.accuracy,
                r.counts.correct,
                r.counts.total,
                r.filtered.bleu1_or_zero()
            );
        }
        Command::Ablate { axis, .. } => match axis {
            Axis::LanguageMode => {
                let a = stage.ablate_language_mode()?;
                print_revise("explicit", &a.explicit);
                print_revise("implicit", &a.implicit);
                println!("traces differ on {} of {} samples", a.differing, a.total);
            }
            Axis::StepLimit => {
                for row in &stage.ablate_step_limit()?.rows {
                    print_revise("limit", row);
                }
            }
        },
        Command::Pipeline { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// True when the error is a usage or configuration problem.
pub fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.downcast_ref::<Invalid>().is_some()
            || matches!(c.downcast_ref::<revise_core::Error>(), Some(revise_core::Error::Config(_)))
    })
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 for usage and validation errors, 2 for runtime failures.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                1
            } else {
                2
            }
        }
    }
}
