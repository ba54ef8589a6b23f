//! Seeded finite-difference probes of the differentiable building blocks:
//! each draws a random parameter point and compares tape gradients with
//! central differences through [`grad_check`].

use std::fmt;

use rand::Rng;

use crate::error::Result;
use crate::model::{Backbone, BackboneConfig, Head, Injection, LoraDelta, PrefixKv};
use crate::numeric::{grad_check, GradCheck};
use crate::rng::SeedTree;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step used by [`probe`].
pub const PROBE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Cosine similarity against a fixed vector.
    Cosine,
    /// Softmax cross-entropy of a logit row.
    CrossEntropy,
    /// One attention block's projection weights, through the full encoder
    /// and a classification loss.
    Attention,
    /// Prefix key or value rows injected into one layer.
    PrefixInjection,
    /// A low-rank factor whose update is added to a query or value weight.
    LoraInjection,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Cosine,
        Family::CrossEntropy,
        Family::Attention,
        Family::PrefixInjection,
        Family::LoraInjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Cosine => "cosine",
            Family::CrossEntropy => "cross_entropy",
            Family::Attention => "attention",
            Family::PrefixInjection => "prefix_injection",
            Family::LoraInjection => "lora_injection",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const N_CLASSES: usize = 3;

fn probe_backbone(seeds: &SeedTree) -> Result<Backbone> {
    let config = BackboneConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 6,
    };
    Backbone::init(config, seeds)
}

/// Random tokens, a unit-scale head and a label, so the loss is far from
/// saturation and every parameter carries gradient.
struct Scenario {
    backbone: Backbone,
    head: Head,
    ids: Vec<usize>,
    label: usize,
}

impl Scenario {
    fn new(seeds: &SeedTree) -> Result<Self> {
        let backbone = probe_backbone(seeds)?;
        let mut rng = seeds.stream("probe-scenario", 0);
        let d = backbone.config.d_model;
        let len = rng.random_range(2..=backbone.config.max_len - 2);
        let ids = (0..len)
            .map(|_| rng.random_range(0..backbone.config.vocab_size))
            .collect();
        let head = Head {
            task_id: 1,
            weight: Tensor::randn(&[d, N_CLASSES], 1.0, &mut rng),
            bias: Tensor::randn(&[N_CLASSES], 0.1, &mut rng),
        };
        Ok(Self {
            backbone,
            head,
            ids,
            label: rng.random_range(0..N_CLASSES),
        })
    }

    fn loss(
        &self,
        tape: &mut Tape,
        replace: Option<(usize, Var)>,
        injection: Option<&Injection>,
    ) -> Result<Var> {
        let mut vars = self.backbone.bind(tape, false);
        if let Some((index, var)) = replace {
            vars.replace(tape, index, var)?;
        }
        let enc = vars.forward(tape, &self.ids, injection)?;
        let head = self.head.bind(tape, false);
        let logits = head.logits(tape, enc.pooled);
        tape.cross_entropy(logits, self.label)
    }
}

/// One random point of `family`, fully determined by `seed`.
pub fn probe(family: Family, seed: u64) -> Result<GradCheck> {
    let seeds = SeedTree::new(seed);
    let mut rng = seeds.stream("probe", 0);
    match family {
        Family::Cosine => {
            let theta = Tensor::randn(&[1, 8], 1.0, &mut rng);
            let other = Tensor::randn(&[1, 8], 1.0, &mut rng);
            grad_check(
                |tape, x| {
                    let b = tape.constant(&other);
                    tape.cosine(x, b)
                },
                &theta,
                PROBE_EPS,
            )
        }
        Family::CrossEntropy => {
            let theta = Tensor::randn(&[1, 6], 2.0, &mut rng);
            let label = rng.random_range(0..6);
            grad_check(|tape, x| tape.cross_entropy(x, label), &theta, PROBE_EPS)
        }
        Family::Attention => {
            let sc = Scenario::new(&seeds)?;
            // Query, key, value or output weight of a random layer.
            let layer = rng.random_range(0..sc.backbone.config.n_layers);
            let which = 2 * rng.random_range(1..=4);
            let index = 2 + layer * 16 + which;
            let theta = sc.backbone.params()[index].clone();
            grad_check(|tape, x| sc.loss(tape, Some((index, x)), None), &theta, PROBE_EPS)
        }
        Family::PrefixInjection => {
            let sc = Scenario::new(&seeds)?;
            let d = sc.backbone.config.d_model;
            let layers = sc.backbone.config.n_layers;
            let prefix_len = rng.random_range(1..=3);
            let fixed: Vec<(Tensor, Tensor)> = (0..layers)
                .map(|_| {
                    (
                        Tensor::randn(&[prefix_len, d], 0.5, &mut rng),
                        Tensor::randn(&[prefix_len, d], 0.5, &mut rng),
                    )
                })
                .collect();
            let layer = rng.random_range(0..layers);
            let keys = rng.random_bool(0.5);
            let theta = if keys { &fixed[layer].0 } else { &fixed[layer].1 }.clone();
            grad_check(
                |tape, x| {
                    let kv = fixed
                        .iter()
                        .enumerate()
                        .map(|(l, (k, v))| {
                            let mut k = tape.constant(k);
                            let mut v = tape.constant(v);
                            if l == layer {
                                if keys {
                                    k = x;
                                } else {
                                    v = x;
                                }
                            }
                            PrefixKv { keys: k, values: v }
                        })
                        .collect();
                    sc.loss(tape, None, Some(&Injection::Prefix(kv)))
                },
                &theta,
                PROBE_EPS,
            )
        }
        Family::LoraInjection => {
            let sc = Scenario::new(&seeds)?;
            let d = sc.backbone.config.d_model;
            let layers = sc.backbone.config.n_layers;
            let rank = rng.random_range(1..=3);
            let scale = rng.random_range(0.5..2.0);
            let a = Tensor::randn(&[rank, d], 0.5, &mut rng);
            let theta = Tensor::randn(&[d, rank], 0.5, &mut rng);
            let layer = rng.random_range(0..layers);
            let query = rng.random_bool(0.5);
            grad_check(
                |tape, b| {
                    let a = tape.constant(&a);
                    let ba = tape.matmul(b, a);
                    let delta = tape.scale(ba, scale);
                    let zero = tape.constant(&Tensor::zeros(&[d, d]));
                    let deltas = (0..layers)
                        .map(|l| match (l == layer, query) {
                            (true, true) => LoraDelta { query: delta, value: zero },
                            (true, false) => LoraDelta { query: zero, value: delta },
                            (false, _) => LoraDelta { query: zero, value: zero },
                        })
                        .collect();
                    sc.loss(tape, None, Some(&Injection::Lora(deltas)))
                },
                &theta,
                PROBE_EPS,
            )
        }
    }
}
