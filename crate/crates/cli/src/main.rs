//! `mocl`: run continual-learning experiments from a TOML config, or any
//! single stage of one against serialized artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mocl_core::checkpoint::{self, Stamp};
use mocl_core::eval::{self, AccuracyMatrix, Metrics, ReferenceScores};
use mocl_core::experiment::{self, MeanStd, SeedOutcome, SuiteFile};
use mocl_core::{ExperimentConfig, MoclError};

#[derive(Parser)]
#[command(name = "mocl", version, about = "Modular compositional continual learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, train, and evaluate every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the task suite (suite.json and suite.jsonl) for each seed.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Only this seed (default: every seed in the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a written suite and save the checkpoint and reference scores.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Suite file (default: `<output_dir>/<method>/<seed>/suite.json`).
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint and write matrices and metrics.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Forward transfer and final average of an accuracy-matrix CSV.
    Fwt {
        #[arg(long)]
        matrix: PathBuf,
        /// `task,accuracy` CSV of isolated per-task accuracies.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Recompute the matching-weight heatmap of a saved MoCL checkpoint.
    Heatmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
}

/// 2: bad configuration or mismatched artifacts; 3: training diverged;
/// 4: filesystem trouble; 1: anything else.
fn exit_code(err: &MoclError) -> u8 {
    match err {
        MoclError::Config(_) | MoclError::UnsupportedKind(_) | MoclError::ArtifactMismatch(_) => 2,
        MoclError::Divergence { .. } | MoclError::NumericalInstability(_) => 3,
        MoclError::Io(_) => 4,
        _ => 1,
    }
}

fn seeds(cfg: &ExperimentConfig, only: Option<u64>) -> Vec<u64> {
    only.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn suite_for(cfg: &ExperimentConfig, seed: u64, path: Option<&Path>) -> Result<SuiteFile, MoclError> {
    let default = cfg.seed_dir(seed).join("suite.json");
    let path = path.unwrap_or(&default);
    if !path.exists() {
        return Err(MoclError::ArtifactMismatch(format!(
            "{} not found; run `mocl gen-data` first",
            path.display()
        )));
    }
    let suite = experiment::read_suite(path)?;
    Stamp::new(seed, cfg.hash()).check(&suite.stamp, "suite")?;
    Ok(suite)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:+.4}"))
}

fn summary_line(seed: u64, metrics: &[&Metrics]) -> String {
    let mut line = format!("seed {seed}:");
    for m in metrics {
        line.push_str(&format!("  {} avg {:.4} fwt {}", m.protocol, m.avg, fmt_opt(m.fwt)));
    }
    line
}

fn print_aggregate(agg: &experiment::Aggregate) {
    let show = |m: Option<MeanStd>| m.map_or_else(|| "-".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.std));
    println!("{:<10} {:<8} {:<22} {:<22}", "method", "protocol", "avg", "fwt");
    for p in &agg.protocols {
        println!(
            "{:<10} {:<8} {:<22} {:<22}",
            agg.method.name(),
            p.protocol.name(),
            show(Some(p.avg)),
            show(p.fwt)
        );
    }
}

fn run(config: &Path) -> Result<(), MoclError> {
    let cfg = ExperimentConfig::load(config)?;
    let mut all = Vec::new();
    for seed in &cfg.seeds {
        let SeedOutcome { evaluation, .. } = experiment::run_seed(&cfg, *seed)?;
        let metrics: Vec<&Metrics> = evaluation.results.iter().map(|r| &r.metrics).collect();
        println!("{}", summary_line(*seed, &metrics));
        all.extend(evaluation.results.into_iter().map(|r| r.metrics));
    }
    let agg = experiment::aggregate(&cfg, &all);
    experiment::write_aggregate(&cfg, &agg)?;
    print_aggregate(&agg);
    Ok(())
}

fn gen_data(config: &Path, only: Option<u64>) -> Result<(), MoclError> {
    let cfg = ExperimentConfig::load(config)?;
    for seed in seeds(&cfg, only) {
        let suite = experiment::make_suite(&cfg, seed)?;
        let dir = cfg.seed_dir(seed);
        experiment::write_suite(&dir, &suite)?;
        println!("seed {seed}: {} tasks -> {}", suite.tasks.len(), dir.join("suite.json").display());
    }
    Ok(())
}

fn train(config: &Path, only: Option<u64>, suite: Option<&Path>) -> Result<(), MoclError> {
    let cfg = ExperimentConfig::load(config)?;
    for seed in seeds(&cfg, only) {
        let suite = suite_for(&cfg, seed, suite)?;
        let trained = experiment::train(&cfg, &suite, true)?;
        let dir = cfg.seed_dir(seed);
        experiment::save_trained(&dir, &trained, &suite.stamp)?;
        println!(
            "seed {seed}: trained {} tasks -> {}",
            trained.state.n_tasks(),
            dir.join("checkpoint").display()
        );
    }
    Ok(())
}

fn evaluate(config: &Path, only: Option<u64>, suite: Option<&Path>) -> Result<(), MoclError> {
    let cfg = ExperimentConfig::load(config)?;
    for seed in seeds(&cfg, only) {
        let suite = suite_for(&cfg, seed, suite)?;
        let dir = cfg.seed_dir(seed);
        let trained = experiment::load_trained(&dir, &suite.stamp)?;
        let ev = experiment::evaluate(&cfg, &suite, &trained)?;
        experiment::write_evaluation(&dir, &ev)?;
        let metrics: Vec<&Metrics> = ev.results.iter().map(|r| &r.metrics).collect();
        println!("{}", summary_line(seed, &metrics));
    }
    Ok(())
}

fn fwt(matrix: &Path, reference: &Path) -> Result<(), MoclError> {
    let m = AccuracyMatrix::from_csv(&fs::read_to_string(matrix)?)?;
    let m = AccuracyMatrix::accuracy(m.names, m.rows)?;
    let r = ReferenceScores::from_csv(&fs::read_to_string(reference)?)?;
    if r.names.len() >= m.n() && r.names[..m.n()] != m.names[..] {
        return Err(MoclError::ArtifactMismatch(format!(
            "reference tasks {:?} do not match matrix tasks {:?}",
            r.names, m.names
        )));
    }
    let value = eval::fwt(&m, &r.accuracy)?;
    let avg = eval::avg_final(&m)?;
    println!(
        "{}",
        serde_json::json!({ "fwt": value, "avg": avg, "n_tasks": m.n() })
    );
    Ok(())
}

fn heatmap(config: &Path, only: Option<u64>, suite: Option<&Path>) -> Result<(), MoclError> {
    let cfg = ExperimentConfig::load(config)?;
    for seed in seeds(&cfg, only) {
        let suite = suite_for(&cfg, seed, suite)?;
        let dir = cfg.seed_dir(seed);
        let (state, manifest) = checkpoint::load(&dir.join("checkpoint"))?;
        suite.stamp.check(&manifest.stamp, "checkpoint")?;
        let h = eval::heatmap(&state, &suite.tasks)?;
        experiment::write_heatmap(&dir, &h, &manifest.stamp)?;
        println!("seed {seed}: heatmap -> {}", dir.join("heatmap.csv").display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => run(config),
        Command::GenData { config, seed } => gen_data(config, *seed),
        Command::Train { config, seed, suite } => train(config, *seed, suite.as_deref()),
        Command::Eval { config, seed, suite } => evaluate(config, *seed, suite.as_deref()),
        Command::Fwt { matrix, reference } => fwt(matrix, reference),
        Command::Heatmap { config, seed, suite } => heatmap(config, *seed, suite.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
