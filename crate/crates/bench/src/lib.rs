//! Shared fixtures for the criterion benchmarks in `benches/`.

use mocl_core::data::SuiteConfig;
use mocl_core::model::{Backbone, BackboneConfig, Head, TokenSeq};
use mocl_core::peft::{init_module, PeftConfig, PeftKind, PeftModule};
use mocl_core::{ExperimentConfig, Method, SeedTree, Tensor};

/// The default desk-scale backbone, initialized from a fixed seed.
pub fn backbone() -> Backbone {
    let mut b = Backbone::init(BackboneConfig::default(), &SeedTree::new(7)).expect("default config is valid");
    b.frozen = true;
    b
}

/// A full-length input for `backbone`.
pub fn tokens(backbone: &Backbone) -> TokenSeq {
    let cfg = &backbone.config;
    TokenSeq {
        ids: (0..cfg.max_len).map(|i| 4 + (i * 37) % (cfg.vocab_size - 4)).collect(),
        len: cfg.max_len,
    }
}

/// `n` modules of `kind` with every parameter drawn at unit scale.
pub fn modules(backbone: &Backbone, kind: PeftKind, n: usize) -> Vec<PeftModule> {
    let cfg = PeftConfig {
        kind,
        ..PeftConfig::default()
    };
    let seeds = SeedTree::new(3);
    (1..=n)
        .map(|k| {
            let mut rng = seeds.stream("bench-module", k as u64);
            let mut m = init_module(&cfg, &backbone.config, k, &mut rng).expect("valid module config");
            for p in m.params_mut().expect("fresh modules are trainable") {
                *p = Tensor::randn(p.shape(), 1.0, &mut rng);
            }
            m
        })
        .collect()
}

/// A three-class head over `backbone`'s width.
pub fn head(backbone: &Backbone) -> Head {
    let mut rng = SeedTree::new(5).stream("bench-head", 0);
    Head {
        task_id: 1,
        weight: Tensor::randn(&[backbone.config.d_model, 3], 0.1, &mut rng),
        bias: Tensor::zeros(&[3]),
    }
}

/// A small single-task experiment: one epoch over 60 training examples.
pub fn one_task_experiment(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(method);
    cfg.train.epochs = 1;
    cfg.warm.epochs = 0;
    cfg.data.generate = Some(SuiteConfig {
        n_tasks: 1,
        train_size: 60,
        val_size: 12,
        test_size: 12,
        ..SuiteConfig::default()
    });
    cfg
}
