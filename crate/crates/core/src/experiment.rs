//! End-to-end experiment stages: suite → backbone → learner → evaluation,
//! each with a serialized artifact so any stage can be rerun on its own.
//!
//! Per seed, everything lives under `<output_dir>/<method>/<seed>/`:
//!
//! ```text
//! suite.json  suite.jsonl
//! checkpoint/            learner state (see the checkpoint module)
//! reference.csv          isolated per-task accuracies for forward transfer
//! matrix_<protocol>.csv  metrics_<protocol>.json
//! heatmap.csv            (MoCL only)
//! ```
//!
//! and `<output_dir>/<method>/aggregate.json` summarizes all seeds.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::checkpoint::{self, Stamp, CODE_VERSION};
use crate::config::ExperimentConfig;
use crate::data::{self, TaskSpec};
use crate::error::{MoclError, Result};
use crate::eval::{self, AccuracyMatrix, HeatmapMatrix, Metrics, Protocol, ReferenceScores};
use crate::learner::{LearnerState, Method};
use crate::model::{Backbone, Vocab};
use crate::rng::SeedTree;
use crate::train::{warm_train, FitReport};

/// A generated or loaded task sequence, stamped with its seed and config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub tasks: Vec<TaskSpec>,
}

/// Builds the (ordered) task sequence for `seed`.
pub fn make_suite(cfg: &ExperimentConfig, seed: u64) -> Result<SuiteFile> {
    let tasks = cfg.tasks(seed)?;
    data::validate_suite(&tasks)?;
    Ok(SuiteFile {
        stamp: Stamp::new(seed, cfg.hash()),
        tasks,
    })
}

/// Writes `suite.json` and its corpus-format twin `suite.jsonl`.
pub fn write_suite(dir: &Path, suite: &SuiteFile) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("suite.json"), serde_json::to_string(suite)? + "\n")?;
    fs::write(dir.join("suite.jsonl"), data::to_jsonl(&suite.tasks)?)?;
    Ok(())
}

pub fn read_suite(path: &Path) -> Result<SuiteFile> {
    let suite: SuiteFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    data::validate_suite(&suite.tasks)?;
    Ok(suite)
}

/// Vocabulary from every task's training text, and a randomly initialized
/// backbone that is warm-trained (if enabled) and frozen.
pub fn build_backbone(
    cfg: &ExperimentConfig,
    tasks: &[TaskSpec],
    seed: u64,
) -> Result<(Vocab, Backbone, Option<FitReport>)> {
    let texts = tasks.iter().flat_map(|t| t.train.iter().map(|e| e.text.as_str()));
    let vocab = Vocab::build(texts, cfg.model.max_vocab)?;
    let seeds = SeedTree::new(seed);
    let mut backbone = Backbone::init(cfg.model.backbone(vocab.len()), &seeds)?;
    let warm = warm_train(&mut backbone, &vocab, tasks, &cfg.warm, &seeds)?;
    Ok((vocab, backbone, warm))
}

/// Accuracy of task `task` learned in isolation by per-task fine-tuning from
/// the same frozen backbone and seed.
pub fn isolated_accuracy(template: &LearnerState, task: &TaskSpec) -> Result<f64> {
    let mut solo = LearnerState::new(
        Method::PerTask,
        template.peft.clone(),
        template.train.clone(),
        template.seed,
        template.vocab.clone(),
        template.backbone.clone(),
    )?;
    baselines::train_per_task(&mut solo, task)?;
    if task.test.is_empty() {
        return Err(MoclError::Data(format!("task {} has an empty test set", task.name)));
    }
    let mut correct = 0usize;
    for e in &task.test {
        let tokens = solo.tokenize(&e.text)?;
        correct += usize::from(baselines::infer_per_task(&solo, &tokens, 1)? == e.label);
    }
    Ok(correct as f64 / task.test.len() as f64)
}

/// `ã_i` for every task.
pub fn reference_scores(template: &LearnerState, tasks: &[TaskSpec]) -> Result<ReferenceScores> {
    Ok(ReferenceScores {
        names: tasks.iter().map(|t| t.name.clone()).collect(),
        accuracy: tasks
            .iter()
            .map(|t| isolated_accuracy(template, t))
            .collect::<Result<Vec<f64>>>()?,
    })
}

/// A trained learner and the references needed to score it.
#[derive(Debug, Clone)]
pub struct Trained {
    pub state: LearnerState,
    pub reference: Option<ReferenceScores>,
    pub warm: Option<FitReport>,
}

/// Trains the configured method over the suite. References are computed
/// when `with_reference` is set and the suite has at least two tasks.
pub fn train(cfg: &ExperimentConfig, suite: &SuiteFile, with_reference: bool) -> Result<Trained> {
    let seed = suite.stamp.seed;
    let (vocab, backbone, warm) = build_backbone(cfg, &suite.tasks, seed)?;
    let fresh = LearnerState::new(cfg.method, cfg.peft.clone(), cfg.train.clone(), seed, vocab, backbone)?;
    let reference = if with_reference && suite.tasks.len() >= 2 {
        Some(reference_scores(&fresh, &suite.tasks)?)
    } else {
        None
    };
    let mut state = fresh;
    state.train_all(&suite.tasks)?;
    Ok(Trained {
        state,
        reference,
        warm,
    })
}

/// Writes `checkpoint/` and, if present, `reference.csv`.
pub fn save_trained(dir: &Path, trained: &Trained, stamp: &Stamp) -> Result<()> {
    fs::create_dir_all(dir)?;
    checkpoint::save(&trained.state, stamp, &dir.join("checkpoint"))?;
    let path = dir.join("reference.csv");
    match &trained.reference {
        Some(r) => fs::write(path, stamp.comment() + &r.to_csv())?,
        None if path.exists() => fs::remove_file(path)?,
        None => {}
    }
    Ok(())
}

/// Reads `checkpoint/` and `reference.csv`, refusing artifacts whose stamp
/// differs from `expected`.
pub fn load_trained(dir: &Path, expected: &Stamp) -> Result<Trained> {
    let (state, manifest) = checkpoint::load(&dir.join("checkpoint"))?;
    expected.check(&manifest.stamp, "checkpoint")?;
    let path = dir.join("reference.csv");
    let reference = if path.exists() {
        let text = fs::read_to_string(&path)?;
        let stamp = Stamp::from_comment(&text).ok_or_else(|| {
            MoclError::ArtifactMismatch(format!("{} carries no stamp line", path.display()))
        })?;
        expected.check(&stamp, "reference scores")?;
        Some(ReferenceScores::from_csv(&text)?)
    } else {
        None
    };
    Ok(Trained {
        state,
        reference,
        warm: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub matrix: AccuracyMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub stamp: Stamp,
    pub results: Vec<ProtocolResult>,
    pub heatmap: Option<HeatmapMatrix>,
}

/// Scores a trained learner under every configured protocol.
pub fn evaluate(cfg: &ExperimentConfig, suite: &SuiteFile, trained: &Trained) -> Result<Evaluation> {
    let stamp = Stamp::new(suite.stamp.seed, cfg.hash());
    stamp.check(&suite.stamp, "suite")?;
    let names: Vec<&str> = suite.tasks.iter().map(|t| t.name.as_str()).collect();
    let trained_names: Vec<&str> = trained.state.tasks.iter().map(|t| t.name.as_str()).collect();
    if names != trained_names {
        return Err(MoclError::ArtifactMismatch(format!(
            "checkpoint was trained on {trained_names:?} but the suite has {names:?}"
        )));
    }
    let mut results = Vec::new();
    for protocol in cfg.protocols() {
        let matrix = eval::accuracy_matrix(&trained.state, &suite.tasks, protocol)?;
        let fwt = match (protocol, &trained.reference) {
            (Protocol::Til, Some(r)) if matrix.n() >= 2 => Some(eval::fwt(&matrix, &r.accuracy)?),
            _ => None,
        };
        let metrics = Metrics {
            method: cfg.method,
            protocol,
            seed: stamp.seed,
            config_hash: stamp.config_hash.clone(),
            code_version: CODE_VERSION.to_string(),
            avg: eval::avg_final(&matrix)?,
            fwt,
            per_task: matrix.last_row().unwrap_or_default().to_vec(),
        };
        results.push(ProtocolResult { matrix, metrics });
    }
    let heatmap = if cfg.method == Method::Mocl {
        Some(eval::heatmap(&trained.state, &suite.tasks)?)
    } else {
        None
    };
    Ok(Evaluation {
        stamp,
        results,
        heatmap,
    })
}

/// Writes matrices, metrics and the heatmap of one seed.
pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in &ev.results {
        let p = r.metrics.protocol;
        fs::write(dir.join(format!("matrix_{p}.csv")), ev.stamp.comment() + &r.matrix.to_csv())?;
        fs::write(
            dir.join(format!("metrics_{p}.json")),
            serde_json::to_string_pretty(&r.metrics)? + "\n",
        )?;
    }
    if let Some(h) = &ev.heatmap {
        write_heatmap(dir, h, &ev.stamp)?;
    }
    Ok(())
}

pub fn write_heatmap(dir: &Path, heatmap: &HeatmapMatrix, stamp: &Stamp) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("heatmap.csv"), stamp.comment() + &heatmap.to_csv())?;
    Ok(())
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub trained: Trained,
    pub evaluation: Evaluation,
}

/// Runs all stages for one seed and writes every artifact.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let dir = cfg.seed_dir(seed);
    let suite = make_suite(cfg, seed)?;
    write_suite(&dir, &suite)?;
    let trained = train(cfg, &suite, true)?;
    save_trained(&dir, &trained, &suite.stamp)?;
    let evaluation = evaluate(cfg, &suite, &trained)?;
    write_evaluation(&dir, &evaluation)?;
    Ok(SeedOutcome {
        seed,
        trained,
        evaluation,
    })
}

/// Sample mean and standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolAggregate {
    pub protocol: Protocol,
    pub avg: MeanStd,
    pub fwt: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub config_hash: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub protocols: Vec<ProtocolAggregate>,
}

pub fn aggregate(cfg: &ExperimentConfig, metrics: &[Metrics]) -> Aggregate {
    let protocols = cfg
        .protocols()
        .into_iter()
        .filter_map(|p| {
            let of_p: Vec<&Metrics> = metrics.iter().filter(|m| m.protocol == p).collect();
            let avgs: Vec<f64> = of_p.iter().map(|m| m.avg).collect();
            let fwts: Vec<f64> = of_p.iter().filter_map(|m| m.fwt).collect();
            Some(ProtocolAggregate {
                protocol: p,
                avg: MeanStd::of(&avgs)?,
                fwt: if fwts.len() == of_p.len() { MeanStd::of(&fwts) } else { None },
            })
        })
        .collect();
    let mut seeds: Vec<u64> = metrics.iter().map(|m| m.seed).collect();
    seeds.dedup();
    Aggregate {
        method: cfg.method,
        config_hash: cfg.hash(),
        code_version: CODE_VERSION.to_string(),
        seeds,
        protocols,
    }
}

pub fn write_aggregate(cfg: &ExperimentConfig, agg: &Aggregate) -> Result<()> {
    let dir = cfg.output_dir.join(cfg.method.name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("aggregate.json"), serde_json::to_string_pretty(agg)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std() {
        assert_eq!(MeanStd::of(&[]), None);
        assert_eq!(MeanStd::of(&[0.5]), Some(MeanStd { mean: 0.5, std: 0.0 }));
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert!((m.mean - 2.0).abs() < 1e-15);
        assert!((m.std - 1.0).abs() < 1e-15);
    }
}
