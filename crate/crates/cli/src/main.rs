use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use neuroute::harness::{
    emit_report, evaluate, load_checkpoint, read_metrics, train, EvalReport, ExperimentConfig,
};
use neuroute::problems::io::{read_instances, write_instances, SolutionRecord};
use neuroute::problems::{generate_instance, ProblemInstance, ProblemKind};
use neuroute::search::{run_strategy, SearchOptions, Strategy};
use neuroute::seeds::derive_seed;

/// Attention-model routing heuristics: training, evaluation and search.
#[derive(Parser, Debug)]
#[command(name = "neuroute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct SearchArgs {
    /// Beam width.
    #[arg(long, env = "NEUROUTE_WIDTH", default_value_t = 5)]
    width: usize,
    /// Sampled rollouts (sampling) or rollouts per epoch (active search).
    #[arg(long, env = "NEUROUTE_SAMPLES", default_value_t = 128)]
    samples: usize,
    /// Number of forced start nodes for multi-greedy; all nodes when omitted.
    #[arg(long, env = "NEUROUTE_STARTS")]
    starts: Option<usize>,
    /// Active-search epochs.
    #[arg(long, env = "NEUROUTE_EPOCHS", default_value_t = 10)]
    epochs: usize,
    /// Active-search learning rate.
    #[arg(long, env = "NEUROUTE_ACTIVE_LR", default_value_t = 1e-4)]
    active_lr: f64,
    #[arg(long, env = "NEUROUTE_SEED", default_value_t = 0)]
    seed: u64,
}

impl SearchArgs {
    fn options(&self) -> SearchOptions {
        SearchOptions {
            width: self.width,
            samples: self.samples,
            starts: self.starts,
            epochs: self.epochs,
            seed: self.seed,
            learning_rate: self.active_lr,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy from a flat TOML config.
    Train {
        #[arg(long, env = "NEUROUTE_CONFIG")]
        config: Option<PathBuf>,
        /// `key=value` config overrides, applied after the file and NEUROUTE_<KEY> variables.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write curve.csv, comparison.csv and report.json into the output directory.
        #[arg(long)]
        report: bool,
    },
    /// Evaluate a checkpoint with one or more strategies on an instance file.
    Eval {
        #[arg(long, env = "NEUROUTE_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "NEUROUTE_INSTANCES")]
        instances: PathBuf,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', default_value = "greedy,multi-greedy")]
        strategies: Vec<Strategy>,
        #[command(flatten)]
        search: SearchArgs,
        /// Write the full report as JSON.
        #[arg(long, env = "NEUROUTE_OUT")]
        out: Option<PathBuf>,
    },
    /// Solve every instance of a file with one strategy and write solution JSON lines.
    Solve {
        #[arg(long, env = "NEUROUTE_STRATEGY")]
        strategy: Strategy,
        #[arg(long, env = "NEUROUTE_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "NEUROUTE_INSTANCES")]
        instances: PathBuf,
        #[arg(long, env = "NEUROUTE_OUT")]
        out: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Generate seeded random instances as JSON lines.
    GenInstances {
        #[arg(long, env = "NEUROUTE_KIND")]
        kind: ProblemKind,
        #[arg(long, env = "NEUROUTE_N")]
        n: usize,
        #[arg(long, env = "NEUROUTE_COUNT")]
        count: usize,
        #[arg(long, env = "NEUROUTE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "NEUROUTE_OUT")]
        out: PathBuf,
    },
    /// Rebuild report files from a metric log and saved evaluation reports.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// JSON files written by `eval --out`.
        #[arg(long)]
        eval: Vec<PathBuf>,
        /// Greedy-length targets for the time-to-threshold statistic.
        #[arg(long, value_delimiter = ',')]
        threshold: Vec<f64>,
        #[arg(long, env = "NEUROUTE_OUT")]
        out: PathBuf,
    },
}

fn load_instances(path: &Path, kind: ProblemKind) -> Result<Vec<Arc<ProblemInstance>>> {
    let instances = read_instances(path).with_context(|| format!("reading {}", path.display()))?;
    if instances.is_empty() {
        bail!("{} contains no instances", path.display());
    }
    if let Some(bad) = instances.iter().position(|i| i.kind() != kind) {
        bail!("instance {bad} is {}, the checkpoint was trained on {kind}", instances[bad].kind());
    }
    Ok(instances.into_iter().map(Arc::new).collect())
}

fn print_report(report: &EvalReport) {
    println!(
        "{} instances, reference {} (mean length {:.4})",
        report.instances,
        report.reference.as_str(),
        report.reference_mean_length
    );
    println!("{:<14} {:>12} {:>10} {:>10} {:>10}", "strategy", "mean_length", "std", "gap_%", "time_s");
    for s in &report.strategies {
        println!(
            "{:<14} {:>12.4} {:>10.4} {:>10.3} {:>10.2}",
            s.strategy.as_str(),
            s.mean_length,
            s.std_length,
            100.0 * s.mean_gap,
            s.wall_time_s
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides, report } => {
            let cfg = ExperimentConfig::from_sources(config.as_deref(), std::env::vars(), &overrides)?;
            eprintln!(
                "training {}{} for {} env steps into {}",
                cfg.kind,
                cfg.n,
                cfg.total_env_steps,
                cfg.output_dir.display()
            );
            let out = train(&cfg)?;
            println!(
                "collections {} env_steps {} optimizer_steps {} best_eval_length {}",
                out.collections,
                out.env_steps,
                out.global_step,
                out.best_eval_length.map_or("-".into(), |v| format!("{v:.4}"))
            );
            println!("final checkpoint {}", out.final_checkpoint.display());
            if report {
                let rows = read_metrics(&out.metrics)?;
                let files = emit_report(&rows, &[], &[], &cfg.output_dir)?;
                println!("report {}", files.summary.display());
            }
        }
        Command::Eval { checkpoint, instances, strategies, search, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let insts = load_instances(&instances, ck.model.kind())?;
            let report = evaluate(&ck.model, &insts, &strategies, &search.options(), ck.env_steps)?;
            print_report(&report);
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Solve { strategy, checkpoint, instances, out, search } => {
            let ck = load_checkpoint(&checkpoint)?;
            let insts = load_instances(&instances, ck.model.kind())?;
            let opts = search.options();
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = BufWriter::new(file);
            for (i, inst) in insts.iter().enumerate() {
                let r = run_strategy(strategy, inst, &ck.model, &opts)?;
                let record = SolutionRecord { instance: (**inst).clone(), tour: r.best_tour, length: r.best_length };
                let mut line = serde_json::to_value(&record)?;
                line["index"] = i.into();
                line["strategy"] = strategy.as_str().into();
                line["samples_or_expansions"] = r.samples_or_expansions.into();
                line["wall_time_s"] = r.wall_time.into();
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            eprintln!("wrote {} solutions to {}", insts.len(), out.display());
        }
        Command::GenInstances { kind, n, count, seed, out } => {
            let insts: Vec<ProblemInstance> = (0..count as u64)
                .map(|i| generate_instance(kind, n, derive_seed(seed, i)))
                .collect::<Result<_, _>>()?;
            write_instances(&out, &insts)?;
            eprintln!("wrote {count} {kind}{n} instances to {}", out.display());
        }
        Command::Report { metrics, eval, threshold, out } => {
            let rows = read_metrics(&metrics)?;
            let reports: Vec<EvalReport> = eval
                .iter()
                .map(|p| -> Result<EvalReport> {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
                })
                .collect::<Result<_>>()?;
            let files = emit_report(&rows, &reports, &threshold, &out)?;
            println!("{}\n{}\n{}", files.curve.display(), files.table.display(), files.summary.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
