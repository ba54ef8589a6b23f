//! The MoCL learner: per-task feature vectors, cosine matching scores,
//! training with composed modules, and TIL/CIL inference.

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::error::{MoclError, Result};
use crate::learner::{CilPrediction, LearnerState};
use crate::model::{Backbone, Head, TokenSeq};
use crate::numeric::{argmax, cosine_similarity, softmax};
use crate::peft::{compose, compose_on_tape, init_module, PeftModule, INIT_STD};
use crate::rng::SeedTree;
use crate::tape::{Tape, Var};
use crate::tensor::{hash_tensors, Tensor};
use crate::train::{fit, prepare, AlphaMode, FitReport, Objective, Prepared, Split, TrainConfig};

/// Trainable key `v_n` matched against pooled input embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub task_id: usize,
    pub v: Tensor,
    pub frozen: bool,
}

impl FeatureVector {
    pub fn init(task_id: usize, d_model: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            task_id,
            v: Tensor::randn(&[d_model], INIT_STD, rng),
            frozen: false,
        }
    }

    pub fn param_hash(&self) -> String {
        hash_tensors([&self.v])
    }
}

/// `α_k = cos(x, v_k)` for every feature vector.
pub fn matching_scores(x: &[f64], features: &[FeatureVector]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(MoclError::Protocol("no feature vectors to match".into()));
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(MoclError::DegenerateInput("zero input embedding".into()));
    }
    features
        .iter()
        .map(|f| cosine_similarity(x, f.v.data()))
        .collect()
}

/// Turns matching scores into composition weights.
pub fn composition_weights(scores: &[f64], mode: AlphaMode) -> Vec<f64> {
    match mode {
        AlphaMode::Cosine => scores.to_vec(),
        AlphaMode::Softmax => softmax(scores),
        AlphaMode::Ones => vec![1.0; scores.len()],
    }
}

struct MoclObjective<'a> {
    backbone: &'a Backbone,
    frozen_modules: &'a [PeftModule],
    frozen_features: &'a [FeatureVector],
    module: PeftModule,
    feature: Tensor,
    head: Head,
    train: &'a [Prepared],
    val: &'a [Prepared],
    cfg: &'a TrainConfig,
}

impl MoclObjective<'_> {
    fn examples(&self, split: Split) -> &[Prepared] {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
        }
    }

    /// Weights for one example as tape scalars. Only the current task's score
    /// can carry gradient; earlier feature vectors are frozen.
    fn alpha_vars(&self, tape: &mut Tape, x: Var, v: Var, pooled: &[f64]) -> Result<(Vec<Var>, Var)> {
        let mut scores = Vec::with_capacity(self.frozen_features.len() + 1);
        for f in self.frozen_features {
            let c = cosine_similarity(pooled, f.v.data())?;
            scores.push(tape.constant(&Tensor::scalar(c)));
        }
        let current = tape.cosine(x, v)?;
        let routed = if self.cfg.stop_grad_alpha {
            let c = tape.value(current).clone();
            tape.constant(&c)
        } else {
            current
        };
        scores.push(routed);
        let alpha = match self.cfg.alpha_mode {
            AlphaMode::Cosine => scores,
            AlphaMode::Ones => {
                let one = tape.constant(&Tensor::scalar(1.0));
                vec![one; scores.len()]
            }
            AlphaMode::Softmax => {
                let cells: Vec<Var> = scores.iter().map(|&s| tape.reshape(s, &[1, 1])).collect();
                let row = tape.concat_cols(&cells);
                let soft = tape.softmax_rows(row);
                (0..cells.len()).map(|k| tape.slice_cols(soft, k, 1)).collect()
            }
        };
        Ok((alpha, current))
    }
}

impl Objective for MoclObjective<'_> {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.module.params_mut().expect("training module is unfrozen");
        p.push(&mut self.feature);
        p.extend(self.head.params_mut());
        p
    }

    fn snapshot(&self) -> Vec<Tensor> {
        let mut p: Vec<Tensor> = self.module.params().into_iter().cloned().collect();
        p.push(self.feature.clone());
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
        let bb = self.backbone.bind(tape, false);
        let mut parts: Vec<_> = self
            .frozen_modules
            .iter()
            .map(|m| m.bind_effective(tape))
            .collect();
        let module_vars = self.module.bind(tape, trainable);
        parts.push(module_vars.effective(tape));
        let v = tape.leaf(self.feature.clone(), trainable);
        let head = self.head.bind(tape, trainable);

        let examples = self.examples(split);
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &examples[i];
            let x = tape.constant(&Tensor::vector(ex.pooled.clone()));
            let (alpha, cos_current) = self.alpha_vars(tape, x, v, &ex.pooled)?;
            let composed = compose_on_tape(tape, &parts, &alpha)?;
            let enc = bb.forward(tape, ex.tokens.active(), Some(&composed))?;
            let logits = head.logits(tape, enc.pooled);
            let ce = tape.cross_entropy(logits, ex.label)?;
            let matched = tape.scale(cos_current, self.cfg.lambda_cos);
            losses.push(tape.sub(ce, matched));
        }
        let total = tape.add_n(&losses);
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let mut vars = module_vars.vars().to_vec();
        vars.push(v);
        vars.push(head.weight);
        vars.push(head.bias);
        Ok((loss, vars))
    }
}

/// Adds `P_n`, `v_n` and `head_n` for `task`, trains them against the
/// composed module, then freezes `P_n` and `v_n`.
pub fn train_task(state: &mut LearnerState, task: &TaskSpec) -> Result<FitReport> {
    if state.modules.iter().any(|m| !m.is_frozen()) || state.features.iter().any(|f| !f.frozen) {
        return Err(MoclError::Protocol("earlier modules must be frozen".into()));
    }
    let n = task.id;
    let seeds = SeedTree::new(state.seed);
    let cfg = &state.backbone.config;
    let module = init_module(&state.peft, cfg, n, &mut seeds.stream("module", n as u64))?;
    let feature = FeatureVector::init(n, cfg.d_model, &mut seeds.stream("feature", n as u64));
    let head = Head::init(n, cfg.d_model, task.n_classes(), &mut seeds.stream("head", n as u64));
    let train = prepare(&task.train, &state.vocab, cfg.max_len, Some(&state.backbone))?;
    let val = prepare(&task.val, &state.vocab, cfg.max_len, Some(&state.backbone))?;

    let mut obj = MoclObjective {
        backbone: &state.backbone,
        frozen_modules: &state.modules,
        frozen_features: &state.features,
        module,
        feature: feature.v,
        head,
        train: &train,
        val: &val,
        cfg: &state.train,
    };
    let report = fit(&mut obj, &state.train, &seeds, n)?;
    let MoclObjective {
        mut module,
        feature,
        head,
        ..
    } = obj;
    module.freeze();
    state.modules.push(module);
    state.features.push(FeatureVector {
        task_id: n,
        v: feature,
        frozen: true,
    });
    state.heads.push(head);
    Ok(report)
}

fn classify(backbone: &Backbone, head: &Head, tokens: &TokenSeq, module: &crate::peft::ComposedModule, n_classes: usize) -> Result<usize> {
    let (_, pooled) = backbone.encode(tokens, Some(module))?;
    let logits = head.classify(pooled.data())?;
    Ok(argmax(&logits[..n_classes]))
}

/// TIL: task `k`'s own module at unit weight with head `k`.
pub fn infer_til(state: &LearnerState, tokens: &TokenSeq, task_id: usize) -> Result<usize> {
    let idx = task_id
        .checked_sub(1)
        .filter(|&i| i < state.modules.len())
        .ok_or_else(|| MoclError::Lookup(format!("no module for task {task_id}")))?;
    let composed = compose(&[&state.modules[idx]], &[1.0])?;
    let head = &state.heads[idx];
    classify(&state.backbone, head, tokens, &composed, head.n_classes())
}

/// CIL: compose every module by matching weight; the best-matching task's
/// head makes the prediction.
pub fn infer_cil(state: &LearnerState, tokens: &TokenSeq) -> Result<CilPrediction> {
    let x = state.backbone.pooled(tokens)?;
    let scores = matching_scores(&x, &state.features)?;
    let alpha = composition_weights(&scores, state.train.alpha_mode);
    let best = argmax(&scores);
    let modules: Vec<&PeftModule> = state.modules.iter().collect();
    let composed = compose(&modules, &alpha)?;
    let head = &state.heads[best];
    let label = classify(&state.backbone, head, tokens, &composed, head.n_classes())?;
    Ok(CilPrediction {
        task_id: best + 1,
        label,
        scores: alpha,
    })
}

/// Mean composition weights over each task's training inputs, as seen while
/// that task was trained: row `n` covers modules `1..=n`.
pub fn heatmap_rows(state: &LearnerState, tasks: &[TaskSpec]) -> Result<Vec<Vec<f64>>> {
    if tasks.len() > state.features.len() {
        return Err(MoclError::Lookup(format!(
            "{} tasks but only {} feature vectors",
            tasks.len(),
            state.features.len()
        )));
    }
    tasks
        .iter()
        .enumerate()
        .map(|(n, task)| {
            let feats = &state.features[..=n];
            let mut sum = vec![0.0; n + 1];
            for e in &task.train {
                let x = state.backbone.pooled(&state.tokenize(&e.text)?)?;
                let w = composition_weights(&matching_scores(&x, feats)?, state.train.alpha_mode);
                for (s, a) in sum.iter_mut().zip(w) {
                    *s += a;
                }
            }
            let count = task.train.len().max(1) as f64;
            Ok(sum.into_iter().map(|s| s / count).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: Vec<f64>) -> FeatureVector {
        FeatureVector {
            task_id: 1,
            v: Tensor::vector(v),
            frozen: true,
        }
    }

    #[test]
    fn single_vector_equal_to_input() {
        let x = vec![0.3, -1.2, 0.5];
        let s = matching_scores(&x, &[fv(x.clone())]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        let s = matching_scores(&[1.0, 0.0, 0.0], &[fv(vec![0.0, 2.0, 0.0]), fv(vec![0.0, 0.0, -1.0])]).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_input_is_degenerate() {
        assert!(matches!(
            matching_scores(&[0.0, 0.0], &[fv(vec![1.0, 0.0])]),
            Err(MoclError::DegenerateInput(_))
        ));
        assert!(matches!(matching_scores(&[1.0], &[]), Err(MoclError::Protocol(_))));
    }

    #[test]
    fn weight_modes() {
        assert_eq!(composition_weights(&[0.2, -0.5], AlphaMode::Cosine), vec![0.2, -0.5]);
        assert_eq!(composition_weights(&[0.2, -0.5], AlphaMode::Ones), vec![1.0, 1.0]);
        let s = composition_weights(&[0.0, 0.0], AlphaMode::Softmax);
        assert!((s[0] - 0.5).abs() < 1e-15);
    }
}
