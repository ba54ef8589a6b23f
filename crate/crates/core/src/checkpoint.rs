//! On-disk learner state: a manifest plus one file per component.
//!
//! ```text
//! checkpoint/
//!   manifest.json      method, seed, config hash, task order, module files
//!   backbone.json
//!   vocab.txt
//!   modules/task_<k>.json
//!   features.json
//!   heads.json
//!   prototypes.json
//!   history.json       per-boundary shared parameters (sequential methods)
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{MoclError, Result};
use crate::learner::{Boundary, LearnerState, Method, TaskMeta};
use crate::mocl::FeatureVector;
use crate::model::{Backbone, Head, Vocab};
use crate::peft::{PeftConfig, PeftModule};
use crate::tensor::Tensor;
use crate::train::{FitReport, TrainConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed, config hash and code version shared by every emitted artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

impl Stamp {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            config_hash: config_hash.into(),
            code_version: CODE_VERSION.to_string(),
        }
    }

    /// `# seed=… config_hash=… code_version=…`, the stamp line
    /// prepended to CSV artifacts.
    pub fn comment(&self) -> String {
        format!(
            "# seed={} config_hash={} code_version={}\n",
            self.seed, self.config_hash, self.code_version
        )
    }

    /// Reads the stamp line of a CSV artifact, if present.
    pub fn from_comment(text: &str) -> Option<Stamp> {
        let line = text.lines().find(|l| l.starts_with('#'))?;
        let mut seed = None;
        let mut hash = None;
        let mut version = None;
        for part in line.trim_start_matches('#').split_whitespace() {
            match part.split_once('=')? {
                ("seed", v) => seed = v.parse().ok(),
                ("config_hash", v) => hash = Some(v.to_string()),
                ("code_version", v) => version = Some(v.to_string()),
                _ => {}
            }
        }
        Some(Stamp {
            seed: seed?,
            config_hash: hash?,
            code_version: version?,
        })
    }

    /// Refuses artifacts produced under another seed or configuration.
    pub fn check(&self, other: &Stamp, what: &str) -> Result<()> {
        if self.config_hash != other.config_hash {
            return Err(MoclError::ArtifactMismatch(format!(
                "{what} was produced with config {} but the current config hashes to {}; \
                 regenerate it with the current config",
                other.config_hash, self.config_hash
            )));
        }
        if self.seed != other.seed {
            return Err(MoclError::ArtifactMismatch(format!(
                "{what} was produced with seed {} but seed {} was requested",
                other.seed, self.seed
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub method: Method,
    pub peft: PeftConfig,
    pub train: TrainConfig,
    pub tasks: Vec<TaskMeta>,
    /// Module files in task order, relative to the checkpoint directory.
    pub modules: Vec<String>,
    pub reports: Vec<FitReport>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `state` under `dir`, replacing any earlier checkpoint files.
pub fn save(state: &LearnerState, stamp: &Stamp, dir: &Path) -> Result<()> {
    let module_dir = dir.join("modules");
    if module_dir.exists() {
        fs::remove_dir_all(&module_dir)?;
    }
    fs::create_dir_all(&module_dir)?;
    let mut files = Vec::with_capacity(state.modules.len());
    for (i, m) in state.modules.iter().enumerate() {
        let name = format!("modules/task_{}.json", i + 1);
        write_json(&dir.join(&name), m)?;
        files.push(name);
    }
    write_json(&dir.join("backbone.json"), &state.backbone)?;
    fs::write(dir.join("vocab.txt"), state.vocab.to_text())?;
    write_json(&dir.join("features.json"), &state.features)?;
    write_json(&dir.join("heads.json"), &state.heads)?;
    write_json(&dir.join("prototypes.json"), &state.prototypes)?;
    write_json(&dir.join("history.json"), &state.history)?;
    let manifest = Manifest {
        stamp: stamp.clone(),
        method: state.method,
        peft: state.peft.clone(),
        train: state.train.clone(),
        tasks: state.tasks.clone(),
        modules: files,
        reports: state.reports.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Reads a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<(LearnerState, Manifest)> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let backbone: Backbone = read_json(&dir.join("backbone.json"))?;
    let vocab = Vocab::from_text(&fs::read_to_string(dir.join("vocab.txt"))?)?;
    let modules = manifest
        .modules
        .iter()
        .map(|f| {
            let m: PeftModule = read_json(&dir.join(f))?;
            m.validate(&backbone.config)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let features: Vec<FeatureVector> = read_json(&dir.join("features.json"))?;
    let heads: Vec<Head> = read_json(&dir.join("heads.json"))?;
    let prototypes: Vec<Tensor> = read_json(&dir.join("prototypes.json"))?;
    let history: Vec<Boundary> = read_json(&dir.join("history.json"))?;
    let state = LearnerState {
        method: manifest.method,
        peft: manifest.peft.clone(),
        train: manifest.train.clone(),
        seed: manifest.stamp.seed,
        vocab,
        backbone,
        modules,
        features,
        heads,
        prototypes,
        tasks: manifest.tasks.clone(),
        history,
        reports: manifest.reports.clone(),
    };
    Ok((state, manifest))
}
