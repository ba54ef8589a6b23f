//! Algebra of weighted module composition and of the injections it feeds:
//! one-hot, zero and linear weightings, no-op injections, and how gradients
//! flow back through a composition.

use mocl_core::model::{Backbone, BackboneConfig, Injection, LoraDelta, PrefixKv, TokenSeq};
use mocl_core::numeric::{cosine_similarity, softmax};
use mocl_core::peft::{self, compose, compose_on_tape, init_module, ComposedModule, PeftConfig, PeftKind, PeftModule};
use mocl_core::{MoclError, SeedTree, Tape, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn config() -> BackboneConfig {
    BackboneConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 8,
    }
}

fn backbone() -> Backbone {
    let mut b = Backbone::init(config(), &SeedTree::new(11)).unwrap();
    b.frozen = true;
    b
}

fn peft_config(kind: PeftKind, prefix_len: usize) -> PeftConfig {
    PeftConfig {
        kind,
        prefix_len,
        lora_rank: 2,
        lora_scale: 1.5,
    }
}

/// A module with every parameter drawn at unit scale, including the LoRA
/// `B` factors that initialize to zero.
fn random_module(kind: PeftKind, task_id: usize, seed: u64) -> PeftModule {
    let seeds = SeedTree::new(seed);
    let mut rng = seeds.stream("module", task_id as u64);
    let mut m = init_module(&peft_config(kind, 3), &config(), task_id, &mut rng).unwrap();
    for p in m.params_mut().unwrap() {
        *p = Tensor::randn(p.shape(), 1.0, &mut rng);
    }
    m
}

fn modules(kind: PeftKind, seed: u64) -> Vec<PeftModule> {
    (1..=3).map(|k| random_module(kind, k, seed)).collect()
}

fn tokens() -> TokenSeq {
    TokenSeq {
        ids: vec![0, 5, 9, 3, 12, 1, 1, 1],
        len: 5,
    }
}

fn max_diff(a: &[(Tensor, Tensor)], b: &[(Tensor, Tensor)]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|((a0, a1), (b0, b1))| a0.max_abs_diff(b0).max(a1.max_abs_diff(b1)))
        .fold(0.0, f64::max)
}

fn kind_strategy() -> impl Strategy<Value = PeftKind> {
    prop_oneof![Just(PeftKind::Prefix), Just(PeftKind::Lora)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn one_hot_weights_select_a_module(kind in kind_strategy(), seed in 0u64..1000, k in 0usize..3) {
        let ms = modules(kind, seed);
        let refs: Vec<&PeftModule> = ms.iter().collect();
        let mut alpha = vec![0.0; 3];
        alpha[k] = 1.0;
        let c = compose(&refs, &alpha).unwrap();
        prop_assert!(max_diff(&c.layers, &ms[k].effective()) <= TOL);
    }

    #[test]
    fn zero_weights_give_zero_module(kind in kind_strategy(), seed in 0u64..1000) {
        let ms = modules(kind, seed);
        let refs: Vec<&PeftModule> = ms.iter().collect();
        let c = compose(&refs, &[0.0; 3]).unwrap();
        prop_assert!(c.tensors().all(|t| t.data().iter().all(|v| v.abs() <= TOL)));
    }

    #[test]
    fn composition_is_linear_in_the_weights(
        kind in kind_strategy(),
        seed in 0u64..1000,
        alpha in prop::array::uniform3(-1.0f64..1.0),
        beta in prop::array::uniform3(-1.0f64..1.0),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let ms = modules(kind, seed);
        let refs: Vec<&PeftModule> = ms.iter().collect();
        let mixed: Vec<f64> = (0..3).map(|i| a * alpha[i] + b * beta[i]).collect();
        let lhs = compose(&refs, &mixed).unwrap();
        let ca = compose(&refs, &alpha).unwrap();
        let cb = compose(&refs, &beta).unwrap();
        let rhs: Vec<(Tensor, Tensor)> = ca
            .layers
            .iter()
            .zip(&cb.layers)
            .map(|((x0, x1), (y0, y1))| {
                (x0.scale(a).add(&y0.scale(b)).unwrap(), x1.scale(a).add(&y1.scale(b)).unwrap())
            })
            .collect();
        prop_assert!(max_diff(&lhs.layers, &rhs) <= TOL);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        xs in prop::collection::vec(-30.0f64..30.0, 1..10),
        c in -100.0f64..100.0,
    ) {
        let p = softmax(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= TOL);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let mut tape = Tape::new();
        let row = tape.constant(&Tensor::matrix(1, xs.len(), xs.clone()).unwrap());
        let s = tape.softmax_rows(row);
        prop_assert_eq!(tape.value(s).to_vec(), p);
    }

    #[test]
    fn cosine_ignores_positive_scale(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        c in 1e-3f64..1e3,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let base = cosine_similarity(&a, &b).unwrap();
        let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
        prop_assert!((cosine_similarity(&scaled, &b).unwrap() - base).abs() <= 1e-12);
        let flipped: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert!((cosine_similarity(&flipped, &b).unwrap() + base).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }
}

#[test]
fn lora_composes_updates_not_factors() {
    let ms = modules(PeftKind::Lora, 4);
    let refs: Vec<&PeftModule> = ms[..2].iter().collect();
    let c = compose(&refs, &[0.5, 0.5]).unwrap();
    // Mixing the factors first would give 1.5 · (½B₁+½B₂)(½A₁+½A₂).
    let (PeftModule::Lora(m1), PeftModule::Lora(m2)) = (&ms[0], &ms[1]) else {
        unreachable!()
    };
    let avg = |x: &Tensor, y: &Tensor| x.scale(0.5).add(&y.scale(0.5)).unwrap();
    let b = avg(&m1.layers[0].b_query, &m2.layers[0].b_query);
    let a = avg(&m1.layers[0].a_query, &m2.layers[0].a_query);
    let mut tape = Tape::new();
    let (bv, av) = (tape.constant(&b), tape.constant(&a));
    let ba = tape.matmul(bv, av);
    let factor_mix = tape.value(ba).scale(1.5);
    assert!(c.layers[0].0.max_abs_diff(&factor_mix) > 1e-3);
}

fn encode_pooled(b: &Backbone, module: Option<&ComposedModule>) -> Tensor {
    b.encode(&tokens(), module).unwrap().1
}

#[test]
fn empty_prefix_is_an_exact_no_op() {
    let b = backbone();
    let mut rng = SeedTree::new(1).stream("module", 1);
    let m = init_module(&peft_config(PeftKind::Prefix, 0), &config(), 1, &mut rng).unwrap();
    assert_eq!(m.prefix_len(), 0);
    let c = compose(&[&m], &[1.0]).unwrap();
    assert!(encode_pooled(&b, Some(&c)).bit_eq(&encode_pooled(&b, None)));
}

#[test]
fn zero_low_rank_update_is_an_exact_no_op() {
    let b = backbone();
    // Fresh low-rank modules start with B = 0.
    let mut rng = SeedTree::new(1).stream("module", 1);
    let fresh = init_module(&peft_config(PeftKind::Lora, 0), &config(), 1, &mut rng).unwrap();
    let c = compose(&[&fresh], &[1.0]).unwrap();
    assert!(encode_pooled(&b, Some(&c)).bit_eq(&encode_pooled(&b, None)));
    // So is a zero-weighted mixture of non-zero updates.
    let ms = modules(PeftKind::Lora, 2);
    let refs: Vec<&PeftModule> = ms.iter().collect();
    let zero = compose(&refs, &[0.0; 3]).unwrap();
    assert!(encode_pooled(&b, Some(&zero)).bit_eq(&encode_pooled(&b, None)));
    assert!(!encode_pooled(&b, Some(&compose(&refs, &[1.0, 0.0, 0.0]).unwrap())).bit_eq(&encode_pooled(&b, None)));
}

fn injection(kind: PeftKind, layers: &[(Var, Var)]) -> Injection {
    match kind {
        PeftKind::Prefix => Injection::Prefix(layers.iter().map(|&(keys, values)| PrefixKv { keys, values }).collect()),
        PeftKind::Lora => Injection::Lora(layers.iter().map(|&(query, value)| LoraDelta { query, value }).collect()),
    }
}

/// Loss of the backbone with `injection`, through a fixed linear read-out.
fn readout_loss(tape: &mut Tape, b: &Backbone, injection: &Injection) -> Var {
    let vars = b.bind(tape, false);
    let enc = vars.forward(tape, tokens().active(), Some(injection)).unwrap();
    let w = tape.constant(&Tensor::matrix(1, 8, (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect()).unwrap());
    let m = tape.mul(enc.pooled, w);
    tape.sum(m)
}

#[test]
fn composed_gradient_is_weighted_by_alpha() {
    // d loss / d P_k = α_k · d loss / d P' for P' = Σ α_k P_k.
    let b = backbone();
    for kind in [PeftKind::Prefix, PeftKind::Lora] {
        let ms = modules(kind, 9);
        let alpha = [0.7, -0.3];
        let refs: Vec<&PeftModule> = ms[..2].iter().collect();

        let mut tape = Tape::new();
        let parts: Vec<_> = refs
            .iter()
            .map(|m| m.effective().iter().map(|(x, y)| (tape.param(x), tape.param(y))).collect::<Vec<_>>())
            .collect();
        let injections: Vec<Injection> = parts.iter().map(|layers| injection(kind, layers)).collect();
        let weights: Vec<_> = alpha.iter().map(|&a| tape.constant(&Tensor::scalar(a))).collect();
        let composed = compose_on_tape(&mut tape, &injections, &weights).unwrap();
        let loss = readout_loss(&mut tape, &b, &composed);
        let grads = tape.backward(loss).unwrap();

        // Gradient at the composed point, computed directly.
        let c = compose(&refs, &alpha).unwrap();
        let mut direct = Tape::new();
        let layers: Vec<_> = c.layers.iter().map(|(x, y)| (direct.param(x), direct.param(y))).collect();
        let inj = injection(kind, &layers);
        let loss = readout_loss(&mut direct, &b, &inj);
        let g = direct.backward(loss).unwrap();

        for (k, layers_k) in parts.iter().enumerate() {
            for (l, &(x, y)) in layers_k.iter().enumerate() {
                for (part, whole) in [(x, layers[l].0), (y, layers[l].1)] {
                    let got = grads.tensor(&tape, part);
                    let want = g.tensor(&direct, whole).scale(alpha[k]);
                    let scale = want.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                    assert!(got.max_abs_diff(&want) <= 1e-12 * scale, "{kind} module {k} layer {l}");
                }
            }
        }
    }
}

#[test]
fn frozen_contributors_receive_no_gradient() {
    let b = backbone();
    let ms = modules(PeftKind::Prefix, 3);
    let mut tape = Tape::new();
    let frozen = ms[0].bind_effective(&mut tape);
    let trainable = ms[1].bind(&mut tape, true);
    let current = trainable.effective(&mut tape);
    let w = [tape.constant(&Tensor::scalar(0.4)), tape.constant(&Tensor::scalar(0.9))];
    let composed = compose_on_tape(&mut tape, &[frozen.clone(), current], &w).unwrap();
    let loss = readout_loss(&mut tape, &b, &composed);
    let grads = tape.backward(loss).unwrap();
    for (k, v) in peft::injection_layers(&frozen) {
        assert!(!tape.requires_grad(k) && !tape.requires_grad(v));
        assert!(grads.is_zero(k) && grads.is_zero(v));
    }
    assert!(trainable.vars().iter().all(|&v| !grads.is_zero(v)));
}

#[test]
fn incompatible_compositions_are_rejected() {
    let prefix = modules(PeftKind::Prefix, 1);
    let lora = modules(PeftKind::Lora, 1);
    assert!(matches!(compose(&[], &[]), Err(MoclError::Composition(_))));
    assert!(matches!(compose(&[&prefix[0], &lora[0]], &[1.0, 1.0]), Err(MoclError::Composition(_))));
    assert!(matches!(compose(&[&prefix[0]], &[1.0, 1.0]), Err(MoclError::Composition(_))));
    let mut rng = SeedTree::new(1).stream("module", 1);
    let longer = init_module(&peft_config(PeftKind::Prefix, 5), &config(), 4, &mut rng).unwrap();
    assert!(matches!(compose(&[&prefix[0], &longer], &[1.0, 1.0]), Err(MoclError::Composition(_))));
    assert!(matches!(
        ComposedModule::concatenated(&[&lora[0]]),
        Err(MoclError::UnsupportedKind(_))
    ));
}

#[test]
fn concatenation_stacks_prefix_rows() {
    let ms = modules(PeftKind::Prefix, 6);
    for n in 1..=3 {
        let refs: Vec<&PeftModule> = ms[..n].iter().collect();
        let c = ComposedModule::concatenated(&refs).unwrap();
        for (l, (keys, values)) in c.layers.iter().enumerate() {
            assert_eq!(keys.shape(), &[3 * n, 8]);
            assert_eq!(values.shape(), &[3 * n, 8]);
            let first = &ms[0].effective()[l].0;
            assert_eq!(&keys.data()[..first.len()], first.data());
        }
    }
}

#[test]
fn composition_leaves_contributors_untouched() {
    let ms = modules(PeftKind::Lora, 8);
    let before: Vec<String> = ms.iter().map(PeftModule::param_hash).collect();
    let refs: Vec<&PeftModule> = ms.iter().collect();
    compose(&refs, &[0.2, 0.3, 0.5]).unwrap();
    let after: Vec<String> = ms.iter().map(PeftModule::param_hash).collect();
    assert_eq!(before, after);
}
