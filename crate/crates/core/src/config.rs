//! Experiment configuration: a TOML document with one section per layer.
//!
//! ```toml
//! method = "mocl"
//! protocol = "both"
//! seeds = [1, 2, 3]
//! output_dir = "runs"
//!
//! [model]
//! d_model = 64
//!
//! [peft]
//! kind = "prefix"
//!
//! [data.generate]
//! relatedness = 0.9
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, SuiteConfig, TaskSpec};
use crate::error::{MoclError, Result};
use crate::eval::Protocol;
use crate::learner::Method;
use crate::model::BackboneConfig;
use crate::peft::{PeftConfig, PeftKind};
use crate::train::{TrainConfig, WarmConfig};

/// Backbone dimensions. The embedding table is sized to the vocabulary
/// actually built from the data, capped at `max_vocab`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub max_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            d_model: b.d_model,
            n_layers: b.n_layers,
            n_heads: b.n_heads,
            ffn_dim: b.ffn_dim,
            max_len: b.max_len,
            max_vocab: b.vocab_size,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
        }
    }
}

/// Where tasks come from: a JSON-lines corpus or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<SuiteConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            generate: Some(SuiteConfig::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolChoice {
    Til,
    Cil,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default = "default_protocol")]
    pub protocol: ProtocolChoice,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// 1-based task ids in the order they should be learned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<usize>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub peft: PeftConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub warm: WarmConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_protocol() -> ProtocolChoice {
    ProtocolChoice::Both
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            protocol: default_protocol(),
            seeds: default_seeds(),
            order: None,
            output_dir: default_output_dir(),
            model: ModelConfig::default(),
            peft: PeftConfig::default(),
            train: TrainConfig::default(),
            warm: WarmConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// Parses and validates a TOML document. Relative corpus paths are
    /// resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| MoclError::Config(e.to_string()))?;
        if let (Some(base), Some(corpus)) = (base_dir, cfg.data.corpus.as_mut()) {
            if corpus.is_relative() {
                *corpus = base.join(&*corpus);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MoclError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MoclError::Config(e.to_string()))
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MoclError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        self.model.backbone(self.model.max_vocab).validate()?;
        self.train.validate()?;
        if self.peft.kind == PeftKind::Lora && self.peft.lora_rank == 0 {
            return bad("lora_rank must be >= 1".into());
        }
        if self.method == Method::Progressive && self.peft.kind != PeftKind::Prefix {
            return Err(MoclError::UnsupportedKind(
                "progressive concatenation only works with prefix modules".into(),
            ));
        }
        if self.protocol == ProtocolChoice::Cil && !self.method.supports_cil() {
            return bad(format!("{} cannot be evaluated class-incrementally", self.method));
        }
        match (&self.data.corpus, &self.data.generate) {
            (Some(_), Some(_)) => return bad("[data] needs either corpus or generate, not both".into()),
            (None, None) => return bad("[data] needs corpus or generate".into()),
            (None, Some(g)) => g.validate()?,
            (Some(_), None) => {}
        }
        if let Some(order) = &self.order {
            let mut o = order.clone();
            o.sort_unstable();
            if o != (1..=order.len()).collect::<Vec<_>>() {
                return bad(format!("order {order:?} is not a permutation of 1..={}", order.len()));
            }
            if let Some(g) = &self.data.generate {
                if order.len() != g.n_tasks {
                    return bad(format!("order lists {} tasks, suite has {}", order.len(), g.n_tasks));
                }
            }
        }
        Ok(())
    }

    /// Protocols to evaluate. `both` silently drops CIL for methods without
    /// class-incremental inference.
    pub fn protocols(&self) -> Vec<Protocol> {
        match self.protocol {
            ProtocolChoice::Til => vec![Protocol::Til],
            ProtocolChoice::Cil => vec![Protocol::Cil],
            ProtocolChoice::Both if self.method.supports_cil() => vec![Protocol::Til, Protocol::Cil],
            ProtocolChoice::Both => vec![Protocol::Til],
        }
    }

    /// SHA-256 of the canonical JSON form with the seed list and output
    /// directory cleared: two configs that train and evaluate identically for
    /// a given seed share a hash.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.seeds = Vec::new();
        canon.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        crate::tensor::hex_digest(hasher)
    }

    /// Tasks for `seed`, in the configured order.
    pub fn tasks(&self, seed: u64) -> Result<Vec<TaskSpec>> {
        let tasks = match (&self.data.corpus, &self.data.generate) {
            (Some(path), _) => data::load_jsonl(path)?,
            (None, Some(g)) => data::gen_suite(g, seed)?,
            (None, None) => return Err(MoclError::Config("[data] needs corpus or generate".into())),
        };
        match &self.order {
            Some(order) => data::apply_order(tasks, order),
            None => Ok(tasks),
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(self.method.name()).join(seed.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("method = \"per_task\"", None).unwrap();
        assert_eq!(cfg.method, Method::PerTask);
        assert_eq!(cfg.peft.prefix_len, 16);
        assert_eq!(cfg.peft.lora_rank, 4);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.protocols(), vec![Protocol::Til]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("method = \"mocl\"\nlearning_rate = 1", None).is_err());
        assert!(ExperimentConfig::from_toml("method = \"mocl\"\n[train]\nlr_typo = 1", None).is_err());
    }

    #[test]
    fn cil_requires_capable_method() {
        let err = ExperimentConfig::from_toml("method = \"per_task\"\nprotocol = \"cil\"", None);
        assert!(matches!(err, Err(MoclError::Config(_))));
    }

    #[test]
    fn progressive_lora_is_unsupported() {
        let err = ExperimentConfig::from_toml("method = \"progressive\"\n[peft]\nkind = \"lora\"", None);
        assert!(matches!(err, Err(MoclError::UnsupportedKind(_))));
    }

    #[test]
    fn hash_ignores_seeds_and_output_dir() {
        let a = ExperimentConfig::new(Method::Mocl);
        let mut b = a.clone();
        b.seeds = vec![7, 8];
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.train.lr = 1e-3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip() {
        let a = ExperimentConfig::new(Method::Mocl);
        let b = ExperimentConfig::from_toml(&a.to_toml().unwrap(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_order_is_rejected() {
        let err = ExperimentConfig::from_toml("method = \"mocl\"\norder = [1, 1, 2, 3]", None);
        assert!(matches!(err, Err(MoclError::Config(_))));
        let err = ExperimentConfig::from_toml("method = \"mocl\"\norder = [2, 1]", None);
        assert!(matches!(err, Err(MoclError::Config(_))));
    }
}
