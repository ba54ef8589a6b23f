use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mocl_bench::{backbone, head, modules, one_task_experiment, tokens};
use mocl_core::experiment;
use mocl_core::gradcheck::{self, Family};
use mocl_core::peft::{compose, PeftKind, PeftModule};
use mocl_core::{LearnerState, Method, Tape};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let b = backbone();
    let input = tokens(&b);
    let mut group = c.benchmark_group("forward");
    group.bench_function("bare", |bench| bench.iter(|| b.encode(black_box(&input), None).unwrap()));
    for kind in [PeftKind::Prefix, PeftKind::Lora] {
        let ms = modules(&b, kind, 4);
        let refs: Vec<&PeftModule> = ms.iter().collect();
        let composed = compose(&refs, &[0.4, 0.3, 0.2, 0.1]).unwrap();
        group.bench_function(format!("{kind}"), |bench| {
            bench.iter(|| b.encode(black_box(&input), Some(&composed)).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let b = backbone();
    let input = tokens(&b);
    let h = head(&b);
    let ms = modules(&b, PeftKind::Prefix, 1);
    c.bench_function("backward/prefix_module", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let vars = b.bind(&mut tape, false);
            let injection = ms[0].bind(&mut tape, true).effective(&mut tape);
            let out = vars.forward(&mut tape, input.active(), Some(&injection)).unwrap();
            let head = h.bind(&mut tape, true);
            let logits = head.logits(&mut tape, out.pooled);
            let loss = tape.cross_entropy(logits, 1).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

fn composition(c: &mut Criterion) {
    let b = backbone();
    let mut group = c.benchmark_group("compose");
    for kind in [PeftKind::Prefix, PeftKind::Lora] {
        let ms = modules(&b, kind, 8);
        let refs: Vec<&PeftModule> = ms.iter().collect();
        let alpha: Vec<f64> = (0..8).map(|k| 1.0 / (k + 1) as f64).collect();
        group.bench_function(format!("{kind}_x8"), |bench| {
            bench.iter(|| compose(black_box(&refs), black_box(&alpha)).unwrap())
        });
    }
    group.finish();
}

fn gradient_probes(c: &mut Criterion) {
    let mut group = c.benchmark_group("grad_probe");
    for family in Family::ALL {
        group.bench_function(family.name(), |bench| bench.iter(|| gradcheck::probe(family, black_box(3)).unwrap()));
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_task");
    group.sample_size(10);
    for method in [Method::Mocl, Method::PerTask] {
        let cfg = one_task_experiment(method);
        let suite = experiment::make_suite(&cfg, 1).unwrap();
        let (vocab, backbone, _) = experiment::build_backbone(&cfg, &suite.tasks, 1).unwrap();
        let state = LearnerState::new(method, cfg.peft.clone(), cfg.train.clone(), 1, vocab, backbone).unwrap();
        group.bench_function(method.name(), |bench| {
            bench.iter_batched(
                || state.clone(),
                |mut s| s.train_task(&suite.tasks[0]).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, forward, backward, composition, gradient_probes, training);
criterion_main!(benches);
