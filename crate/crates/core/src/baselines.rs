//! Reference learners: independent per-task modules, progressive prefix
//! concatenation, sequential fine-tuning (shared module or full backbone)
//! and a prototype-routed variant of per-task fine-tuning.

use std::borrow::Cow;

use crate::data::TaskSpec;
use crate::error::{MoclError, Result};
use crate::learner::{Boundary, CilPrediction, LearnerState};
use crate::model::{Backbone, Head, TokenSeq};
use crate::numeric::{argmax, cosine_similarity};
use crate::peft::{concat_prefixes_on_tape, init_module, ComposedModule, PeftModule};
use crate::rng::SeedTree;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{fit, prepare, FitReport, Objective, Prepared, Split};

/// Cross-entropy over one task with optional frozen prefixes stacked in
/// front of the trained module.
struct TaskObjective<'a> {
    backbone: Cow<'a, Backbone>,
    train_backbone: bool,
    stacked: &'a [PeftModule],
    module: Option<PeftModule>,
    head: Head,
    /// Only the first `n_classes` logits take part (shared heads are wider
    /// than the current task's label space).
    n_classes: usize,
    train: Vec<Prepared>,
    val: Vec<Prepared>,
}

impl<'a> TaskObjective<'a> {
    fn new(state: &'a LearnerState, task: &TaskSpec, module: Option<PeftModule>, head: Head) -> Result<Self> {
        let max_len = state.backbone.config.max_len;
        Ok(Self {
            backbone: Cow::Borrowed(&state.backbone),
            train_backbone: false,
            stacked: &[],
            module,
            head,
            n_classes: task.n_classes(),
            train: prepare(&task.train, &state.vocab, max_len, None)?,
            val: prepare(&task.val, &state.vocab, max_len, None)?,
        })
    }

    fn examples(&self, split: Split) -> &[Prepared] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

impl Objective for TaskObjective<'_> {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        if self.train_backbone {
            p.extend(self.backbone.to_mut().params_mut());
        }
        if let Some(m) = self.module.as_mut() {
            p.extend(m.params_mut().expect("training module is unfrozen"));
        }
        p.extend(self.head.params_mut());
        p
    }

    fn snapshot(&self) -> Vec<Tensor> {
        let mut p: Vec<Tensor> = Vec::new();
        if self.train_backbone {
            p.extend(self.backbone.params().into_iter().cloned());
        }
        if let Some(m) = &self.module {
            p.extend(m.params().into_iter().cloned());
        }
        p.push(self.head.weight.clone());
        p.push(self.head.bias.clone());
        p
    }

    fn len(&self, split: Split) -> usize {
        self.examples(split).len()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        trainable: bool,
        split: Split,
        batch: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let bb = self.backbone.bind(tape, trainable && self.train_backbone);
        let mut vars = Vec::new();
        if self.train_backbone {
            vars.extend_from_slice(bb.vars());
        }
        let injection = match &self.module {
            Some(m) => {
                let mv = m.bind(tape, trainable);
                vars.extend_from_slice(mv.vars());
                let own = mv.effective(tape);
                if self.stacked.is_empty() {
                    Some(own)
                } else {
                    let mut parts: Vec<_> = self.stacked.iter().map(|p| p.bind_effective(tape)).collect();
                    parts.push(own);
                    Some(concat_prefixes_on_tape(tape, &parts)?)
                }
            }
            None => None,
        };
        let head = self.head.bind(tape, trainable);
        vars.push(head.weight);
        vars.push(head.bias);

        let examples = self.examples(split);
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &examples[i];
            let enc = bb.forward(tape, ex.tokens.active(), injection.as_ref())?;
            let mut logits = head.logits(tape, enc.pooled);
            if self.n_classes < self.head.n_classes() {
                logits = tape.slice_cols(logits, 0, self.n_classes);
            }
            losses.push(tape.cross_entropy(logits, ex.label)?);
        }
        let total = tape.add_n(&losses);
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        Ok((loss, vars))
    }
}

fn fresh_module(state: &LearnerState, index: usize) -> Result<PeftModule> {
    let seeds = SeedTree::new(state.seed);
    init_module(&state.peft, &state.backbone.config, index, &mut seeds.stream("module", index as u64))
}

fn fresh_head(state: &LearnerState, task: &TaskSpec) -> Head {
    let seeds = SeedTree::new(state.seed);
    Head::init(
        task.id,
        state.backbone.config.d_model,
        task.n_classes(),
        &mut seeds.stream("head", task.id as u64),
    )
}

fn fit_task(state: &LearnerState, obj: &mut TaskObjective<'_>, task_id: usize) -> Result<FitReport> {
    fit(obj, &state.train, &SeedTree::new(state.seed), task_id)
}

/// Trains an independent module and head for `task` and freezes the module.
pub fn train_per_task(state: &mut LearnerState, task: &TaskSpec) -> Result<FitReport> {
    let module = fresh_module(state, task.id)?;
    let head = fresh_head(state, task);
    let mut obj = TaskObjective::new(state, task, Some(module), head)?;
    let report = fit_task(state, &mut obj, task.id)?;
    let (mut module, head) = (obj.module.take().expect("module present"), obj.head);
    module.freeze();
    state.modules.push(module);
    state.heads.push(head);
    Ok(report)
}

/// Per-task training plus the mean bare-backbone embedding of the task's
/// training inputs, used to route inputs without a task id.
pub fn train_prototype(state: &mut LearnerState, task: &TaskSpec) -> Result<FitReport> {
    let report = train_per_task(state, task)?;
    let d = state.backbone.config.d_model;
    let mut sum = vec![0.0; d];
    for e in &task.train {
        let x = state.backbone.pooled(&state.tokenize(&e.text)?)?;
        for (s, v) in sum.iter_mut().zip(x) {
            *s += v;
        }
    }
    let n = task.train.len().max(1) as f64;
    state.prototypes.push(Tensor::vector(sum.into_iter().map(|s| s / n).collect()));
    Ok(report)
}

/// Trains a new prefix concatenated after every earlier (frozen) prefix.
pub fn train_progressive(state: &mut LearnerState, task: &TaskSpec) -> Result<FitReport> {
    let module = fresh_module(state, task.id)?;
    let head = fresh_head(state, task);
    let mut obj = TaskObjective::new(state, task, Some(module), head)?;
    obj.stacked = &state.modules;
    let report = fit_task(state, &mut obj, task.id)?;
    let (mut module, head) = (obj.module.take().expect("module present"), obj.head);
    module.freeze();
    state.modules.push(module);
    state.heads.push(head);
    Ok(report)
}

/// The shared head, widened when a task has more classes than any before.
fn shared_head(state: &LearnerState, task: &TaskSpec) -> Head {
    match state.heads.first() {
        Some(h) => {
            let mut h = h.clone();
            let seeds = SeedTree::new(state.seed);
            h.grow(task.n_classes(), &mut seeds.stream("head-grow", task.id as u64));
            h
        }
        None => fresh_head(state, task),
    }
}

/// Keeps training one shared module and head across all tasks.
pub fn train_sequential_peft(state: &mut LearnerState, task: &TaskSpec) -> Result<FitReport> {
    let module = match state.modules.first() {
        Some(m) => m.clone(),
        None => fresh_module(state, 1)?,
    };
    let head = shared_head(state, task);
    let mut obj = TaskObjective::new(state, task, Some(module), head)?;
    let report = fit_task(state, &mut obj, task.id)?;
    let (module, head) = (obj.module.take().expect("module present"), obj.head);
    let mut snapshot = module.clone();
    snapshot.freeze();
    state.history.push(Boundary {
        backbone: None,
        module: Some(snapshot),
        head: head.clone(),
    });
    state.modules = vec![module];
    state.heads = vec![head];
    Ok(report)
}

/// Fine-tunes every backbone weight plus a shared head, task after task.
pub fn train_sequential_full(state: &mut LearnerState, task: &TaskSpec) -> Result<FitReport> {
    let head = shared_head(state, task);
    let mut obj = TaskObjective::new(state, task, None, head)?;
    obj.train_backbone = true;
    let mut backbone = obj.backbone.clone().into_owned();
    backbone.frozen = false;
    obj.backbone = Cow::Owned(backbone);
    let report = fit_task(state, &mut obj, task.id)?;
    let mut backbone = obj.backbone.into_owned();
    let head = obj.head;
    backbone.frozen = true;
    state.history.push(Boundary {
        backbone: Some(backbone.clone()),
        module: None,
        head: head.clone(),
    });
    state.backbone = backbone;
    state.heads = vec![head];
    Ok(report)
}

fn predict(backbone: &Backbone, head: &Head, tokens: &TokenSeq, module: Option<&ComposedModule>, n_classes: usize) -> Result<usize> {
    let (_, pooled) = backbone.encode(tokens, module)?;
    let logits = head.classify(pooled.data())?;
    Ok(argmax(&logits[..n_classes]))
}

fn task_index(state: &LearnerState, task_id: usize) -> Result<usize> {
    task_id
        .checked_sub(1)
        .filter(|&i| i < state.heads.len())
        .ok_or_else(|| MoclError::Lookup(format!("no head for task {task_id}")))
}

/// Task `k`'s own module and head.
pub fn infer_per_task(state: &LearnerState, tokens: &TokenSeq, task_id: usize) -> Result<usize> {
    let i = task_index(state, task_id)?;
    let composed = crate::peft::compose(&[&state.modules[i]], &[1.0])?;
    let head = &state.heads[i];
    predict(&state.backbone, head, tokens, Some(&composed), head.n_classes())
}

/// Prefixes `1..=k` concatenated, with head `k`.
pub fn infer_progressive(state: &LearnerState, tokens: &TokenSeq, task_id: usize) -> Result<usize> {
    let i = task_index(state, task_id)?;
    let stack: Vec<&PeftModule> = state.modules[..=i].iter().collect();
    let composed = ComposedModule::concatenated(&stack)?;
    let head = &state.heads[i];
    predict(&state.backbone, head, tokens, Some(&composed), head.n_classes())
}

/// The shared parameters, restricted to task `k`'s label space.
pub fn infer_sequential(state: &LearnerState, tokens: &TokenSeq, task_id: usize) -> Result<usize> {
    let meta = state
        .tasks
        .get(task_id.wrapping_sub(1))
        .ok_or_else(|| MoclError::Lookup(format!("task {task_id} not trained")))?;
    let head = state
        .heads
        .first()
        .ok_or_else(|| MoclError::Protocol("no shared head".into()))?;
    let composed = match state.modules.first() {
        Some(m) => Some(crate::peft::compose(&[m], &[1.0])?),
        None => None,
    };
    predict(&state.backbone, head, tokens, composed.as_ref(), meta.n_classes)
}

/// Routes to the task whose prototype is most similar (ties go to the
/// earliest task), then predicts with that task's module and head.
pub fn infer_prototype_cil(state: &LearnerState, tokens: &TokenSeq) -> Result<CilPrediction> {
    if state.prototypes.is_empty() {
        return Err(MoclError::Protocol("no prototypes stored".into()));
    }
    let x = state.backbone.pooled(tokens)?;
    let scores = state
        .prototypes
        .iter()
        .map(|p| cosine_similarity(&x, p.data()))
        .collect::<Result<Vec<f64>>>()?;
    let best = argmax(&scores);
    let label = infer_per_task(state, tokens, best + 1)?;
    Ok(CilPrediction {
        task_id: best + 1,
        label,
        scores,
    })
}
