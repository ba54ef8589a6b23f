//! Minibatch training loop shared by every method, plus backbone
//! warm-training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::error::{MoclError, Result};
use crate::model::{Backbone, TokenSeq, Vocab, UNK_ID};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::SeedTree;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How matching scores become composition weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Raw cosine similarities.
    Cosine,
    /// Softmax over the cosine similarities.
    Softmax,
    /// Every weight fixed to 1 (ablation).
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Weight of the cosine-matching term in the task loss.
    pub lambda_cos: f64,
    pub alpha_mode: AlphaMode,
    /// Treat the current task's matching score as a constant in the
    /// composition (the cosine loss term still trains the feature vector).
    pub stop_grad_alpha: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 40,
            patience: 5,
            lambda_cos: 1.0,
            alpha_mode: AlphaMode::Cosine,
            stop_grad_alpha: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(MoclError::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !self.lambda_cos.is_finite() {
            return Err(MoclError::Config("lr must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// A tokenized example with its bare-backbone pooled embedding.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub tokens: TokenSeq,
    pub label: usize,
    pub pooled: Vec<f64>,
}

/// Tokenizes a split and, when `backbone` is given, caches pooled embeddings.
pub fn prepare(
    examples: &[crate::data::Example],
    vocab: &Vocab,
    max_len: usize,
    backbone: Option<&Backbone>,
) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .map(|e| {
            let tokens = vocab.tokenize(&e.text, max_len)?;
            let pooled = match backbone {
                Some(b) => b.pooled(&tokens)?,
                None => Vec::new(),
            };
            Ok(Prepared {
                tokens,
                label: e.label,
                pooled,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A trainable parameter set with a per-batch loss.
pub trait Objective {
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn snapshot(&self) -> Vec<Tensor>;

    fn restore(&mut self, snapshot: Vec<Tensor>) {
        for (p, s) in self.params_mut().into_iter().zip(snapshot) {
            *p = s;
        }
    }

    fn len(&self, split: Split) -> usize;

    /// Records the mean loss over `batch` of `split`. Returns the loss node
    /// and the trainable leaves in [`Objective::params_mut`] order.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        trainable: bool,
        split: Split,
        batch: &[usize],
    ) -> Result<(Var, Vec<Var>)>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub task_id: usize,
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Loss of the very first minibatch, before any update.
    pub first_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

fn eval_loss(obj: &dyn Objective, split: Split, batch_size: usize) -> Result<f64> {
    let n = obj.len(split);
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size) {
        let mut tape = Tape::new();
        let (loss, _) = obj.batch_loss(&mut tape, false, split, chunk)?;
        tape.check_finite()?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// AdamW over shuffled minibatches with early stopping on validation loss.
/// The parameters with the best validation loss are restored at the end.
pub fn fit(
    obj: &mut dyn Objective,
    cfg: &TrainConfig,
    seeds: &SeedTree,
    task_id: usize,
) -> Result<FitReport> {
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut shuffle_rng = seeds.stream("shuffle", task_id as u64);
    let mut report = FitReport {
        task_id,
        ..Default::default()
    };
    let n_train = obj.len(Split::Train);
    if n_train == 0 {
        return Err(MoclError::Data(format!("task {task_id} has no training examples")));
    }
    let has_val = obj.len(Split::Val) > 0;
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let (loss, vars) = obj.batch_loss(&mut tape, true, Split::Train, batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() || tape.check_finite().is_err() {
                return Err(MoclError::Divergence {
                    task: task_id,
                    step: report.steps,
                });
            }
            if report.steps == 0 {
                report.first_loss = value;
            }
            epoch_loss += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(&tape, v)).collect();
            opt.step(&mut obj.params_mut(), &grads);
            report.steps += 1;
        }
        report.train_loss.push(epoch_loss / n_train as f64);
        report.epochs_run = epoch + 1;

        if has_val {
            let val = eval_loss(obj, Split::Val, cfg.batch_size)?;
            report.val_loss.push(val);
            let improved = best.as_ref().is_none_or(|(b, _)| val < *b);
            if improved {
                best = Some((val, obj.snapshot()));
                report.best_epoch = epoch + 1;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    match best {
        Some((val, snapshot)) => {
            report.best_val_loss = Some(val);
            obj.restore(snapshot);
        }
        None => report.best_epoch = report.epochs_run,
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for WarmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 3,
            lr: 1e-3,
            batch_size: 8,
        }
    }
}

/// Masked-token objective over unlabeled text: one random real token per
/// sequence is replaced by UNK and predicted from its final state.
struct WarmObjective<'a> {
    backbone: Backbone,
    out_weight: Tensor,
    out_bias: Tensor,
    /// (masked ids, position, original id)
    items: &'a [(Vec<usize>, usize, usize)],
}

impl Objective for WarmObjective<'_> {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.backbone.params_mut();
        p.push(&mut self.out_weight);
        p.push(&mut self.out_bias);
        p
    }

    fn snapshot(&self) -> Vec<Tensor> {
        let mut p: Vec<Tensor> = self.backbone.params().into_iter().cloned().collect();
        p.push(self.out_weight.clone());
        p.push(self.out_bias.clone());
        p
    }

    fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.items.len(),
            Split::Val => 0,
        }
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        trainable: bool,
        _split: Split,
        batch: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let bb = self.backbone.bind(tape, trainable);
        let w = tape.leaf(self.out_weight.clone(), trainable);
        let b = tape.leaf(self.out_bias.clone(), trainable);
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let (ids, pos, target) = &self.items[i];
            let enc = bb.forward(tape, ids, None)?;
            let row = tape.gather(enc.states, &[*pos]);
            let logits = tape.matmul(row, w);
            let logits = tape.add_row(logits, b);
            losses.push(tape.cross_entropy(logits, *target)?);
        }
        let total = tape.add_n(&losses);
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let mut vars = bb.vars().to_vec();
        vars.push(w);
        vars.push(b);
        Ok((loss, vars))
    }
}

/// Briefly trains a fresh backbone on the unlabeled training text of every
/// task, then freezes it.
pub fn warm_train(
    backbone: &mut Backbone,
    vocab: &Vocab,
    tasks: &[TaskSpec],
    cfg: &WarmConfig,
    seeds: &SeedTree,
) -> Result<Option<FitReport>> {
    if !cfg.enabled || cfg.epochs == 0 {
        backbone.frozen = true;
        return Ok(None);
    }
    if backbone.frozen {
        return Err(MoclError::Protocol("cannot warm-train a frozen backbone".into()));
    }
    let max_len = backbone.config.max_len;
    let mut mask_rng = seeds.stream("warm-mask", 0);
    let mut items = Vec::new();
    for t in tasks {
        for e in &t.train {
            let tokens = vocab.tokenize(&e.text, max_len)?;
            if tokens.len < 2 {
                continue;
            }
            let mut ids = tokens.active().to_vec();
            let pos = mask_rng.random_range(1..ids.len());
            let target = ids[pos];
            ids[pos] = UNK_ID;
            items.push((ids, pos, target));
        }
    }
    if items.is_empty() {
        backbone.frozen = true;
        return Ok(None);
    }
    let d = backbone.config.d_model;
    let v = backbone.config.vocab_size;
    let mut head_rng = seeds.stream("warm-head", 0);
    let mut obj = WarmObjective {
        backbone: backbone.clone(),
        out_weight: Tensor::randn(&[d, v], 0.02, &mut head_rng),
        out_bias: Tensor::zeros(&[v]),
        items: &items,
    };
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        ..TrainConfig::default()
    };
    let report = fit(&mut obj, &train_cfg, seeds, 0)?;
    *backbone = obj.backbone;
    backbone.frozen = true;
    Ok(Some(report))
}
