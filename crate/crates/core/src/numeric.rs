//! Scalar numerical primitives and the finite-difference gradient checker.

use crate::error::{MoclError, Result};
use crate::tape::{dot, softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

/// `<a, b> / (|a| |b|)`.
///
/// Both-zero inputs are a degenerate-input error. If exactly one side is zero
/// the similarity is defined as 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MoclError::Config(format!(
            "cosine_similarity needs equal non-empty lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 && nb == 0.0 {
        return Err(MoclError::DegenerateInput(
            "cosine similarity of two zero vectors".into(),
        ));
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Max-shifted `logsumexp(logits) - logits[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(MoclError::Index {
            what: "logits",
            index: label,
            size: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    Ok(max + sum.ln() - logits[label])
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

/// Denominator floor for relative errors, so components whose true gradient
/// is ~0 are judged on absolute error instead of dividing noise by noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of `f` at `theta` against central finite
/// differences with step `eps`, component by component.
///
/// The difference quotient is the fourth-order central stencil
/// `(f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h`: the plain two-point quotient
/// leaves truncation errors near 1e-10, which is already a 1e-4 relative
/// error on gradient components of size 1e-6.
///
/// The relative error of a component is `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(MoclError::Config(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.param(theta);
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.tensor(&tape, x).to_vec();

    let eval = |point: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_parts(theta.shape().to_vec(), point));
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item();
        if !v.is_finite() || tape.check_finite().is_err() {
            return Err(MoclError::NumericalInstability(
                "non-finite function value during finite differencing".into(),
            ));
        }
        Ok(v)
    };

    let base = theta.to_vec();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let at = |steps: f64| {
            let mut p = base.clone();
            p[i] += steps * eps;
            eval(p)
        };
        let quotient = (at(-2.0)? - 8.0 * at(-1.0)? + 8.0 * at(1.0)? - at(2.0)?) / (12.0 * eps);
        numeric.push(quotient);
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / sqrt(14 * 77), evaluated by hand
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((c - 0.974_631_846).abs() < 1e-9);
    }

    #[test]
    fn cosine_rejects_two_zero_vectors() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]),
            Err(MoclError::DegenerateInput(_))
        ));
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[100.0, 0.0], 0).unwrap() < 1e-40);
        // ln(1 + e^-1 + e^-2)
        assert!((cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap() - 0.407_605_96).abs() < 1e-6);
        assert!(matches!(
            cross_entropy(&[1.0, 2.0], 2),
            Err(MoclError::Index { .. })
        ));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.5, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn grad_check_square() {
        let res = grad_check(|t, x| Ok(t.mul(x, x)), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((res.analytic[0] - 6.0).abs() < 1e-12);
        assert!((res.numeric[0] - 6.0).abs() < 1e-8);
        assert!(res.max_rel_error < 1e-8);
    }

    #[test]
    fn grad_check_rejects_bad_step_and_blowups() {
        assert!(grad_check(|t, x| Ok(t.mul(x, x)), &Tensor::scalar(1.0), 1e-1).is_err());
        let huge = Tensor::scalar(1e200);
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x);
                Ok(t.mul(y, y))
            },
            &huge,
            1e-5,
        );
        assert!(matches!(err, Err(MoclError::NumericalInstability(_))));
    }
}
