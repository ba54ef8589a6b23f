//! The encoder forward pass against values computed by an independent
//! implementation, on a hand-parameterized four-dimensional, single-head
//! block.

use mocl_core::model::{Backbone, BackboneConfig, EncoderLayer, Vocab, CLS_ID, PAD_ID, UNK_ID};
use mocl_core::{SeedTree, Tape, Tensor};

const D: usize = 4;
const F: usize = 4;

fn pattern(rows: usize, cols: usize, offset: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|k| (((k + offset) % 7) as f64 - 3.0) / 5.0)
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn small(n: usize, offset: usize) -> Tensor {
    Tensor::vector((0..n).map(|j| (((j + offset) % 5) as f64 - 2.0) / 10.0).collect())
}

fn gain(n: usize, offset: usize) -> Tensor {
    small(n, offset).map(|v| 1.0 + v)
}

fn hand_backbone() -> Backbone {
    let config = BackboneConfig {
        vocab_size: 3,
        d_model: D,
        n_layers: 1,
        n_heads: 1,
        ffn_dim: F,
        max_len: 2,
    };
    Backbone {
        config,
        token_embedding: pattern(3, D, 0).scale(2.0),
        position_embedding: pattern(2, D, 3).scale(0.5),
        layers: vec![EncoderLayer {
            ln1_gain: gain(D, 1),
            ln1_bias: small(D, 2),
            w_q: pattern(D, D, 1),
            b_q: small(D, 3),
            w_k: pattern(D, D, 2),
            b_k: small(D, 4),
            w_v: pattern(D, D, 4),
            b_v: small(D, 0),
            w_o: pattern(D, D, 5),
            b_o: small(D, 1),
            ln2_gain: gain(D, 3),
            ln2_bias: small(D, 4),
            w_ff1: pattern(D, F, 6),
            b_ff1: small(F, 2),
            w_ff2: pattern(F, D, 3),
            b_ff2: small(D, 3),
        }],
        final_gain: gain(D, 0),
        final_bias: small(D, 1),
        frozen: true,
    }
}

fn pooled(b: &Backbone, ids: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = b.bind(&mut tape, false);
    let enc = vars.forward(&mut tape, ids, None).unwrap();
    tape.value(enc.pooled).to_vec()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol, "component {i}: {g} vs {w}");
    }
}

#[test]
fn single_token_block_matches_reference_values() {
    let want = [
        -0.766_989_544_927_288_7,
        1.103_770_556_728_783,
        0.832_013_929_641_557_5,
        -1.037_157_600_999_204_3,
    ];
    assert_close(&pooled(&hand_backbone(), &[1]), &want, 1e-12);
}

#[test]
fn two_token_block_matches_reference_values() {
    let want = [
        -1.180_278_232_062_204_7,
        0.773_469_680_025_430_3,
        1.037_239_539_124_284,
        -0.290_932_755_093_373_35,
    ];
    assert_close(&pooled(&hand_backbone(), &[1, 2]), &want, 1e-12);
}

#[test]
fn single_token_attention_ignores_queries_and_keys() {
    // With one key the softmax weight is exactly 1, so the attention output
    // is the value row whatever the query and key projections are.
    let base = hand_backbone();
    let mut scrambled = base.clone();
    scrambled.layers[0].w_q = pattern(D, D, 0).scale(-3.0);
    scrambled.layers[0].w_k = pattern(D, D, 6).scale(7.0);
    scrambled.layers[0].b_k = small(D, 2);
    assert_eq!(pooled(&base, &[2]), pooled(&scrambled, &[2]));

    let mut other_values = base.clone();
    other_values.layers[0].w_v = pattern(D, D, 1);
    assert_ne!(pooled(&base, &[2]), pooled(&other_values, &[2]));
}

#[test]
fn pooled_output_is_layer_normalized() {
    // Unit final gain and zero bias leave a standardized vector.
    let mut b = Backbone::init(
        BackboneConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            max_len: 4,
        },
        &SeedTree::new(5),
    )
    .unwrap();
    b.frozen = true;
    let out = pooled(&b, &[3]);
    let mean = out.iter().sum::<f64>() / 8.0;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-3, "variance {var}");
}

#[test]
fn tokenizer_pads_and_maps_unknown_words() {
    let vocab = Vocab::build(["alpha beta", "beta gamma"], 100).unwrap();
    let seq = vocab.tokenize("beta delta alpha", 6).unwrap();
    let (alpha, beta) = (vocab.id("alpha"), vocab.id("beta"));
    assert_eq!(seq.ids, vec![CLS_ID, beta, UNK_ID, alpha, PAD_ID, PAD_ID]);
    assert_eq!(seq.len, 4);
    assert_eq!(seq.mask().iter().filter(|m| **m).count(), seq.len);
    let again = Vocab::from_text(&vocab.to_text()).unwrap();
    assert_eq!(again.tokenize("beta delta alpha", 6).unwrap(), seq);
}
