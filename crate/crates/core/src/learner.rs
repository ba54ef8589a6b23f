//! The continual learner's state and method dispatch.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::data::TaskSpec;
use crate::error::{MoclError, Result};
use crate::mocl::{self, FeatureVector};
use crate::model::{Backbone, Head, TokenSeq, Vocab};
use crate::peft::{PeftConfig, PeftKind, PeftModule};
use crate::tensor::Tensor;
use crate::train::{FitReport, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mocl,
    SeqFtFull,
    SeqFtPeft,
    PerTask,
    Progressive,
    PrototypeCil,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Mocl,
        Method::SeqFtFull,
        Method::SeqFtPeft,
        Method::PerTask,
        Method::Progressive,
        Method::PrototypeCil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mocl => "mocl",
            Method::SeqFtFull => "seq_ft_full",
            Method::SeqFtPeft => "seq_ft_peft",
            Method::PerTask => "per_task",
            Method::Progressive => "progressive",
            Method::PrototypeCil => "prototype_cil",
        }
    }

    /// Whether the method can predict without being told the task.
    pub fn supports_cil(self) -> bool {
        matches!(self, Method::Mocl | Method::PrototypeCil)
    }

    /// Sequential fine-tuning keeps one shared parameter set, so earlier
    /// states are not recoverable from the final one and are kept as history.
    fn is_sequential(self) -> bool {
        matches!(self, Method::SeqFtFull | Method::SeqFtPeft)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = MoclError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MoclError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub id: usize,
    pub name: String,
    pub n_classes: usize,
    pub label_offset: usize,
}

impl From<&TaskSpec> for TaskMeta {
    fn from(t: &TaskSpec) -> Self {
        Self {
            id: t.id,
            name: t.name.clone(),
            n_classes: t.n_classes(),
            label_offset: t.label_offset,
        }
    }
}

/// Shared parameters of a sequential fine-tuning run after one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub backbone: Option<Backbone>,
    pub module: Option<PeftModule>,
    pub head: Head,
}

/// Everything a trained learner knows.
///
/// For MoCL, per-task and progressive runs, `modules`, `heads` (and
/// `features` or `prototypes` where used) hold one entry per task, in task
/// order, all frozen except during their own task. Sequential fine-tuning
/// keeps a single shared module and head instead.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub method: Method,
    pub peft: PeftConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub vocab: Vocab,
    pub backbone: Backbone,
    pub modules: Vec<PeftModule>,
    pub features: Vec<FeatureVector>,
    pub heads: Vec<Head>,
    pub prototypes: Vec<Tensor>,
    pub tasks: Vec<TaskMeta>,
    pub history: Vec<Boundary>,
    pub reports: Vec<FitReport>,
}

/// A class-incremental prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct CilPrediction {
    pub task_id: usize,
    pub label: usize,
    /// Composition weights (MoCL) or prototype similarities.
    pub scores: Vec<f64>,
}

impl LearnerState {
    pub fn new(
        method: Method,
        peft: PeftConfig,
        train: TrainConfig,
        seed: u64,
        vocab: Vocab,
        backbone: Backbone,
    ) -> Result<Self> {
        train.validate()?;
        if method == Method::Progressive && peft.kind != PeftKind::Prefix {
            return Err(MoclError::UnsupportedKind(
                "progressive concatenation only works with prefix modules".into(),
            ));
        }
        if vocab.len() > backbone.config.vocab_size {
            return Err(MoclError::Config(format!(
                "vocabulary has {} entries, backbone embeds {}",
                vocab.len(),
                backbone.config.vocab_size
            )));
        }
        if !backbone.frozen {
            return Err(MoclError::Protocol("learner needs a frozen backbone".into()));
        }
        Ok(Self {
            method,
            peft,
            train,
            seed,
            vocab,
            backbone,
            modules: Vec::new(),
            features: Vec::new(),
            heads: Vec::new(),
            prototypes: Vec::new(),
            tasks: Vec::new(),
            history: Vec::new(),
            reports: Vec::new(),
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        self.vocab.tokenize(text, self.backbone.config.max_len)
    }

    /// Trains the next task of the sequence. Task ids must arrive as 1, 2, ...
    pub fn train_task(&mut self, task: &TaskSpec) -> Result<FitReport> {
        let expected = self.n_tasks() + 1;
        if task.id != expected {
            return Err(MoclError::Protocol(format!(
                "expected task {expected}, got task {} ({})",
                task.id, task.name
            )));
        }
        let report = match self.method {
            Method::Mocl => mocl::train_task(self, task)?,
            Method::PerTask => baselines::train_per_task(self, task)?,
            Method::PrototypeCil => baselines::train_prototype(self, task)?,
            Method::Progressive => baselines::train_progressive(self, task)?,
            Method::SeqFtPeft => baselines::train_sequential_peft(self, task)?,
            Method::SeqFtFull => baselines::train_sequential_full(self, task)?,
        };
        self.tasks.push(TaskMeta::from(task));
        self.reports.push(report.clone());
        Ok(report)
    }

    pub fn train_all(&mut self, tasks: &[TaskSpec]) -> Result<Vec<FitReport>> {
        tasks.iter().map(|t| self.train_task(t)).collect()
    }

    /// The learner as it stood right after training task `n`.
    pub fn view(&self, n: usize) -> Result<LearnerState> {
        if n == 0 || n > self.n_tasks() {
            return Err(MoclError::Lookup(format!(
                "no boundary after task {n}; {} tasks trained",
                self.n_tasks()
            )));
        }
        let mut out = self.clone();
        out.tasks.truncate(n);
        out.reports.truncate(n);
        if self.method.is_sequential() {
            let b = &self.history[n - 1];
            if let Some(bb) = &b.backbone {
                out.backbone = bb.clone();
            }
            out.modules = b.module.iter().cloned().collect();
            out.heads = vec![b.head.clone()];
            out.history.truncate(n);
        } else {
            out.modules.truncate(n);
            out.heads.truncate(n);
            out.features.truncate(n);
            out.prototypes.truncate(n);
        }
        Ok(out)
    }

    fn check_task(&self, task_id: usize) -> Result<()> {
        if task_id == 0 || task_id > self.n_tasks() {
            return Err(MoclError::Lookup(format!(
                "task {task_id} not trained (have {})",
                self.n_tasks()
            )));
        }
        Ok(())
    }

    /// Task-incremental prediction: the gold task id picks the module and
    /// head. Returns a task-local label.
    pub fn predict_til(&self, tokens: &TokenSeq, task_id: usize) -> Result<usize> {
        self.check_task(task_id)?;
        match self.method {
            Method::Mocl => mocl::infer_til(self, tokens, task_id),
            Method::PerTask | Method::PrototypeCil => baselines::infer_per_task(self, tokens, task_id),
            Method::Progressive => baselines::infer_progressive(self, tokens, task_id),
            Method::SeqFtPeft | Method::SeqFtFull => baselines::infer_sequential(self, tokens, task_id),
        }
    }

    /// Class-incremental prediction without a task id.
    pub fn predict_cil(&self, tokens: &TokenSeq) -> Result<CilPrediction> {
        if self.n_tasks() == 0 {
            return Err(MoclError::Protocol("no tasks trained".into()));
        }
        match self.method {
            Method::Mocl => mocl::infer_cil(self, tokens),
            Method::PrototypeCil => baselines::infer_prototype_cil(self, tokens),
            m => Err(MoclError::Protocol(format!(
                "{m} has no class-incremental inference"
            ))),
        }
    }
}
