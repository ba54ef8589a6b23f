//! Pre-layer-norm transformer encoder standing in for the pretrained model.

use serde::{Deserialize, Serialize};

use crate::error::{MoclError, Result};
use crate::model::vocab::TokenSeq;
use crate::rng::SeedTree;
use crate::tape::{Tape, Var};
use crate::tensor::{hash_tensors, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 32,
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MoclError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 3 || self.max_len < 2 || self.ffn_dim == 0 {
            return Err(MoclError::Config(
                "vocab_size >= 3, max_len >= 2 and ffn_dim >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

/// One encoder block. Linear weights are stored `[in, out]` and applied as
/// `x · W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

impl EncoderLayer {
    fn params(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub frozen: bool,
}

fn linear(rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Backbone {
    /// Random initialization: unit-variance token embeddings, small position
    /// embeddings, `1/sqrt(fan_in)` linear weights, identity layer norms.
    pub fn init(config: BackboneConfig, seeds: &SeedTree) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_dim;
        let mut rng = seeds.stream("backbone", 0);
        let token_embedding = Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng);
        let position_embedding = Tensor::randn(&[config.max_len, d], 0.1, &mut rng);
        let ones = || Tensor::vector(vec![1.0; d]);
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                ln1_gain: ones(),
                ln1_bias: zeros(d),
                w_q: linear(&mut rng, d, d),
                b_q: zeros(d),
                w_k: linear(&mut rng, d, d),
                b_k: zeros(d),
                w_v: linear(&mut rng, d, d),
                b_v: zeros(d),
                w_o: linear(&mut rng, d, d),
                b_o: zeros(d),
                ln2_gain: ones(),
                ln2_bias: zeros(d),
                w_ff1: linear(&mut rng, d, f),
                b_ff1: zeros(f),
                w_ff2: linear(&mut rng, f, d),
                b_ff2: zeros(d),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gain: ones(),
            final_bias: zeros(d),
            frozen: false,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.params());
        }
        out.push(&self.final_gain);
        out.push(&self.final_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn param_hash(&self) -> String {
        hash_tensors(self.params())
    }

    /// Puts every parameter on `tape`, trainable or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let vars = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        BackboneVars {
            config: self.config.clone(),
            vars,
        }
    }

    /// Final-layer states and masked-mean pooled vector, optionally with a
    /// composed PEFT module injected.
    pub fn encode(
        &self,
        tokens: &TokenSeq,
        module: Option<&crate::peft::ComposedModule>,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let injection = module.map(|m| m.bind(&mut tape)).transpose()?;
        let out = bound.forward(&mut tape, tokens.active(), injection.as_ref())?;
        tape.check_finite()?;
        Ok((tape.value(out.states).clone(), tape.value(out.pooled).clone()))
    }

    /// Pooled embedding of the bare backbone: the vector matched against
    /// task feature vectors.
    pub fn pooled(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        Ok(self.encode(tokens, None)?.1.to_vec())
    }
}

/// Per-layer PEFT tensors spliced into a forward pass.
#[derive(Debug, Clone)]
pub enum Injection {
    /// Key and value rows (`[prefix_len, d_model]`, heads as column blocks)
    /// prepended to every layer's attention keys and values.
    Prefix(Vec<PrefixKv>),
    /// Updates `[d_model(out), d_model(in)]` added to the query and value
    /// projections of every layer.
    Lora(Vec<LoraDelta>),
}

#[derive(Debug, Clone, Copy)]
pub struct PrefixKv {
    pub keys: Var,
    pub values: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraDelta {
    pub query: Var,
    pub value: Var,
}

/// Backbone parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    config: BackboneConfig,
    vars: Vec<Var>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[len, d_model]` final-layer states for the non-PAD positions.
    pub states: Var,
    /// `[1, d_model]` mean of `states`.
    pub pooled: Var,
}

const PER_LAYER: usize = 16;

impl BackboneVars {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// All bound leaves, in [`Backbone::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Swaps the leaf at `index` (in [`Backbone::params`] order) for another
    /// node of the same shape, e.g. to differentiate through one weight.
    pub fn replace(&mut self, tape: &Tape, index: usize, var: Var) -> Result<()> {
        let Some(&old) = self.vars.get(index) else {
            return Err(MoclError::Index {
                what: "backbone parameter",
                index,
                size: self.vars.len(),
            });
        };
        if tape.value(old).shape() != tape.value(var).shape() {
            return Err(MoclError::Config(format!(
                "replacement shape {:?} differs from {:?}",
                tape.value(var).shape(),
                tape.value(old).shape()
            )));
        }
        self.vars[index] = var;
        Ok(())
    }

    fn layer(&self, l: usize, i: usize) -> Var {
        self.vars[2 + l * PER_LAYER + i]
    }

    fn check_injection(&self, tape: &Tape, injection: &Injection) -> Result<()> {
        let d = self.config.d_model;
        let layers = self.config.n_layers;
        let mismatch = |what: String| Err(MoclError::Config(format!("injection {what}")));
        match injection {
            Injection::Prefix(kv) => {
                if kv.len() != layers {
                    return mismatch(format!("has {} layers, backbone {layers}", kv.len()));
                }
                for p in kv {
                    let ks = tape.value(p.keys).shape();
                    let vs = tape.value(p.values).shape();
                    if ks.len() != 2 || ks[1] != d || ks != vs {
                        return mismatch(format!(
                            "prefix shapes {ks:?}/{vs:?} do not fit d_model {d}"
                        ));
                    }
                }
            }
            Injection::Lora(deltas) => {
                if deltas.len() != layers {
                    return mismatch(format!("has {} layers, backbone {layers}", deltas.len()));
                }
                for delta in deltas {
                    for v in [delta.query, delta.value] {
                        if tape.value(v).shape() != [d, d] {
                            return mismatch(format!(
                                "low-rank update shape {:?} does not fit d_model {d}",
                                tape.value(v).shape()
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
        let n = tape.layer_norm_rows(x, LN_EPS);
        let g = tape.mul_row(n, gain);
        tape.add_row(g, bias)
    }

    fn project(&self, tape: &mut Tape, x: Var, w: Var, b: Var, delta: Option<Var>) -> Var {
        let w = match delta {
            Some(d) => {
                let dt = tape.transpose(d);
                tape.add(w, dt)
            }
            None => w,
        };
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Runs the encoder over the real (non-PAD) token ids.
    ///
    /// PAD keys are masked out of attention and pooling, so dropping them up
    /// front gives bit-identical states for the real positions.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        injection: Option<&Injection>,
    ) -> Result<Encoded> {
        let cfg = &self.config;
        if ids.is_empty() || ids.len() > cfg.max_len {
            return Err(MoclError::Config(format!(
                "sequence length {} outside 1..={}",
                ids.len(),
                cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(MoclError::Index {
                what: "vocabulary",
                index: bad,
                size: cfg.vocab_size,
            });
        }
        if let Some(inj) = injection {
            self.check_injection(tape, inj)?;
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather(self.vars[0], ids);
        let pos = tape.gather(self.vars[1], &positions);
        let mut h = tape.add(tok, pos);

        let dh = cfg.head_dim();
        let score_scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let p = |i| self.layer(l, i);
            let a = self.layer_norm(tape, h, p(0), p(1));
            let (dq, dv, prefix) = match injection {
                Some(Injection::Lora(d)) => (Some(d[l].query), Some(d[l].value), None),
                Some(Injection::Prefix(kv)) => (None, None, Some(kv[l])),
                None => (None, None, None),
            };
            let q = self.project(tape, a, p(2), p(3), dq);
            let mut k = self.project(tape, a, p(4), p(5), None);
            let mut v = self.project(tape, a, p(6), p(7), dv);
            if let Some(kv) = prefix {
                if tape.value(kv.keys).rows() > 0 {
                    k = tape.concat_rows(&[kv.keys, k]);
                    v = tape.concat_rows(&[kv.values, v]);
                }
            }
            let heads: Vec<Var> = (0..cfg.n_heads)
                .map(|hd| {
                    let qh = tape.slice_cols(q, hd * dh, dh);
                    let kh = tape.slice_cols(k, hd * dh, dh);
                    let vh = tape.slice_cols(v, hd * dh, dh);
                    let kt = tape.transpose(kh);
                    let s = tape.matmul(qh, kt);
                    let s = tape.scale(s, score_scale);
                    let w = tape.softmax_rows(s);
                    tape.matmul(w, vh)
                })
                .collect();
            let attn = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)
            };
            let o = self.project(tape, attn, p(8), p(9), None);
            h = tape.add(h, o);

            let f = self.layer_norm(tape, h, p(10), p(11));
            let f = self.project(tape, f, p(12), p(13), None);
            let f = tape.gelu(f);
            let f = self.project(tape, f, p(14), p(15), None);
            h = tape.add(h, f);
        }
        let n = self.vars.len();
        let states = self.layer_norm(tape, h, self.vars[n - 2], self.vars[n - 1]);
        let pooled = tape.mean_rows(states);
        Ok(Encoded { states, pooled })
    }
}
