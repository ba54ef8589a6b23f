//! Tape gradients against central finite differences, and the linearity of
//! reverse-mode accumulation.

use mocl_core::gradcheck::{probe, Family};
use mocl_core::numeric::grad_check;
use mocl_core::{Tape, Tensor};
use proptest::prelude::*;

const TOLERANCE: f64 = 1e-5;
const POINTS_PER_FAMILY: u64 = 20;

fn check_family(family: Family) {
    let mut worst = 0.0f64;
    for seed in 0..POINTS_PER_FAMILY {
        let r = probe(family, seed).unwrap();
        assert!(
            r.max_rel_error <= TOLERANCE,
            "{family} seed {seed}: relative error {:.3e}",
            r.max_rel_error
        );
        assert!(r.analytic.iter().any(|g| g.abs() > 1e-8), "{family} seed {seed}: vanishing gradient");
        worst = worst.max(r.max_rel_error);
    }
    eprintln!("{family}: worst relative error {worst:.3e}");
}

#[test]
fn cosine_gradient() {
    check_family(Family::Cosine);
}

#[test]
fn cross_entropy_gradient() {
    check_family(Family::CrossEntropy);
}

#[test]
fn attention_projection_gradient() {
    check_family(Family::Attention);
}

#[test]
fn prefix_injection_gradient() {
    check_family(Family::PrefixInjection);
}

#[test]
fn lora_injection_gradient() {
    check_family(Family::LoraInjection);
}

#[test]
fn layer_norm_softmax_and_gelu_gradients() {
    let theta = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
    let weights = Tensor::matrix(2, 3, vec![0.5, -0.7, 1.1, 0.2, 0.9, -1.3]).unwrap();
    let r = grad_check(
        |tape, x| {
            let n = tape.layer_norm_rows(x, 1e-5);
            let g = tape.gelu(n);
            let s = tape.softmax_rows(g);
            let w = tape.constant(&weights);
            let m = tape.mul(s, w);
            Ok(tape.sum(m))
        },
        &theta,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= TOLERANCE, "{:.3e}", r.max_rel_error);
}

#[test]
fn checker_rejects_out_of_range_steps() {
    let theta = Tensor::vector(vec![1.0]);
    assert!(grad_check(|tape, x| Ok(tape.sum(x)), &theta, 1e-9).is_err());
    assert!(grad_check(|tape, x| Ok(tape.sum(x)), &theta, 1e-1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// grad(a·f + b·g) = a·grad f + b·grad g.
    #[test]
    fn backward_is_linear(
        xs in prop::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let theta = Tensor::matrix(2, 3, xs).unwrap();
        let grad = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let x = tape.param(&theta);
            let s = tape.softmax_rows(x);
            let f = tape.sum(s);
            let t = tape.transpose(x);
            let xx = tape.matmul(x, t);
            let g = tape.sum(xx);
            let f = tape.scale(f, ca);
            let g = tape.scale(g, cb);
            let y = tape.add(f, g);
            tape.backward(y).unwrap().tensor(&tape, x).to_vec()
        };
        let combined = grad(a, b);
        let (gf, gg) = (grad(1.0, 0.0), grad(0.0, 1.0));
        for i in 0..combined.len() {
            let want = a * gf[i] + b * gg[i];
            prop_assert!((combined[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }
}
