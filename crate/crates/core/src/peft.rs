//! Task-specific PEFT modules, their weighted composition, and the tensors
//! they inject into the backbone.
//!
//! Prefix modules compose by elementwise weighted sums of their key/value
//! rows. Low-rank modules compose on the effective update `s·B·A` rather than
//! on the factors, since a sum of factor pairs is not the sum of the updates.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoclError, Result};
use crate::model::{BackboneConfig, Injection, LoraDelta, PrefixKv};
use crate::tape::{matmul_raw, Tape, Var};
use crate::tensor::{hash_tensors, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Prefix,
    Lora,
}

impl fmt::Display for PeftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeftKind::Prefix => "prefix",
            PeftKind::Lora => "lora",
        })
    }
}

impl std::str::FromStr for PeftKind {
    type Err = MoclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(PeftKind::Prefix),
            "lora" => Ok(PeftKind::Lora),
            other => Err(MoclError::UnsupportedKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub kind: PeftKind,
    pub prefix_len: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            kind: PeftKind::Prefix,
            prefix_len: 16,
            lora_rank: 4,
            lora_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixLayer {
    /// `[prefix_len, d_model]`; head `h` owns columns `h*head_dim..(h+1)*head_dim`.
    pub keys: Tensor,
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    /// `[rank, d_model]`
    pub a_query: Tensor,
    /// `[d_model, rank]`
    pub b_query: Tensor,
    pub a_value: Tensor,
    pub b_value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixModule {
    pub task_id: usize,
    pub layers: Vec<PrefixLayer>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraModule {
    pub task_id: usize,
    pub rank: usize,
    pub scale: f64,
    pub layers: Vec<LoraLayer>,
    pub frozen: bool,
}

/// One task's parameter block `P_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PeftModule {
    Prefix(PrefixModule),
    Lora(LoraModule),
}

/// Initializes a trainable module for `task_id`: prefix rows ~ N(0, 0.02²);
/// low-rank `A` ~ N(0, 0.02²) with `B = 0`, so the initial update is zero.
pub fn init_module(
    cfg: &PeftConfig,
    backbone: &BackboneConfig,
    task_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PeftModule> {
    let d = backbone.d_model;
    match cfg.kind {
        PeftKind::Prefix => {
            let layers = (0..backbone.n_layers)
                .map(|_| PrefixLayer {
                    keys: Tensor::randn(&[cfg.prefix_len, d], INIT_STD, rng),
                    values: Tensor::randn(&[cfg.prefix_len, d], INIT_STD, rng),
                })
                .collect();
            Ok(PeftModule::Prefix(PrefixModule {
                task_id,
                layers,
                frozen: false,
            }))
        }
        PeftKind::Lora => {
            if cfg.lora_rank == 0 {
                return Err(MoclError::Config("lora rank must be >= 1".into()));
            }
            let r = cfg.lora_rank;
            let layers = (0..backbone.n_layers)
                .map(|_| LoraLayer {
                    a_query: Tensor::randn(&[r, d], INIT_STD, rng),
                    b_query: Tensor::zeros(&[d, r]),
                    a_value: Tensor::randn(&[r, d], INIT_STD, rng),
                    b_value: Tensor::zeros(&[d, r]),
                })
                .collect();
            Ok(PeftModule::Lora(LoraModule {
                task_id,
                rank: r,
                scale: cfg.lora_scale,
                layers,
                frozen: false,
            }))
        }
    }
}

fn lora_update(a: &Tensor, b: &Tensor, scale: f64) -> Tensor {
    let (d_out, r) = (b.rows(), b.cols());
    let d_in = a.cols();
    let prod = matmul_raw(b.data(), a.data(), d_out, r, d_in);
    Tensor::from_parts(vec![d_out, d_in], prod.into_iter().map(|v| v * scale).collect())
}

impl PeftModule {
    pub fn kind(&self) -> PeftKind {
        match self {
            PeftModule::Prefix(_) => PeftKind::Prefix,
            PeftModule::Lora(_) => PeftKind::Lora,
        }
    }

    pub fn task_id(&self) -> usize {
        match self {
            PeftModule::Prefix(m) => m.task_id,
            PeftModule::Lora(m) => m.task_id,
        }
    }

    pub fn is_frozen(&self) -> bool {
        match self {
            PeftModule::Prefix(m) => m.frozen,
            PeftModule::Lora(m) => m.frozen,
        }
    }

    pub fn freeze(&mut self) {
        match self {
            PeftModule::Prefix(m) => m.frozen = true,
            PeftModule::Lora(m) => m.frozen = true,
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            PeftModule::Prefix(m) => m.layers.len(),
            PeftModule::Lora(m) => m.layers.len(),
        }
    }

    /// Prefix length (0 for low-rank modules).
    pub fn prefix_len(&self) -> usize {
        match self {
            PeftModule::Prefix(m) => m.layers.first().map_or(0, |l| l.keys.rows()),
            PeftModule::Lora(_) => 0,
        }
    }

    /// Shape signature used to decide whether two modules can be combined.
    fn dims(&self) -> (PeftKind, usize, Vec<usize>) {
        let shape = match self {
            PeftModule::Prefix(m) => m.layers.first().map(|l| l.keys.shape().to_vec()),
            PeftModule::Lora(m) => m.layers.first().map(|l| l.a_query.shape().to_vec()),
        };
        (self.kind(), self.n_layers(), shape.unwrap_or_default())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            PeftModule::Prefix(m) => m.layers.iter().flat_map(|l| [&l.keys, &l.values]).collect(),
            PeftModule::Lora(m) => m
                .layers
                .iter()
                .flat_map(|l| [&l.a_query, &l.b_query, &l.a_value, &l.b_value])
                .collect(),
        }
    }

    /// Mutable parameters; refused once the module is frozen.
    pub fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.is_frozen() {
            return Err(MoclError::Protocol(format!(
                "module for task {} is frozen",
                self.task_id()
            )));
        }
        Ok(match self {
            PeftModule::Prefix(m) => m
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.keys, &mut l.values])
                .collect(),
            PeftModule::Lora(m) => m
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.a_query, &mut l.b_query, &mut l.a_value, &mut l.b_value])
                .collect(),
        })
    }

    pub fn param_hash(&self) -> String {
        hash_tensors(self.params())
    }

    /// Checks the module fits a backbone.
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let d = backbone.d_model;
        if self.n_layers() != backbone.n_layers {
            return Err(MoclError::Config(format!(
                "module for task {} has {} layers, backbone {}",
                self.task_id(),
                self.n_layers(),
                backbone.n_layers
            )));
        }
        let ok = match self {
            PeftModule::Prefix(m) => m.layers.iter().all(|l| {
                l.keys.shape().len() == 2 && l.keys.cols() == d && l.keys.shape() == l.values.shape()
            }),
            PeftModule::Lora(m) => m.layers.iter().all(|l| {
                l.a_query.shape() == [m.rank, d]
                    && l.a_value.shape() == [m.rank, d]
                    && l.b_query.shape() == [d, m.rank]
                    && l.b_value.shape() == [d, m.rank]
            }),
        };
        if !ok {
            return Err(MoclError::Config(format!(
                "module for task {} does not match d_model {d}",
                self.task_id()
            )));
        }
        Ok(())
    }

    /// Per-layer effective tensors: prefix key/value rows, or the query and
    /// value updates `s·B·A` (`[d_out, d_in]`).
    pub fn effective(&self) -> Vec<(Tensor, Tensor)> {
        match self {
            PeftModule::Prefix(m) => m
                .layers
                .iter()
                .map(|l| (l.keys.clone(), l.values.clone()))
                .collect(),
            PeftModule::Lora(m) => m
                .layers
                .iter()
                .map(|l| {
                    (
                        lora_update(&l.a_query, &l.b_query, m.scale),
                        lora_update(&l.a_value, &l.b_value, m.scale),
                    )
                })
                .collect(),
        }
    }

    /// Binds raw parameters onto `tape`, in [`PeftModule::params`] order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModuleVars {
        ModuleVars {
            kind: self.kind(),
            scale: match self {
                PeftModule::Prefix(_) => 1.0,
                PeftModule::Lora(m) => m.scale,
            },
            vars: self.params().into_iter().map(|p| tape.leaf(p.clone(), trainable)).collect(),
        }
    }

    /// Effective tensors as tape constants. Cheaper than [`PeftModule::bind`]
    /// for frozen contributors since the low-rank product is precomputed.
    pub fn bind_effective(&self, tape: &mut Tape) -> Injection {
        let kind = self.kind();
        let layers = self
            .effective()
            .iter()
            .map(|(a, b)| (tape.constant(a), tape.constant(b)))
            .collect();
        make_injection(kind, layers)
    }
}

/// A module's raw parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct ModuleVars {
    kind: PeftKind,
    scale: f64,
    vars: Vec<Var>,
}

impl ModuleVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Effective per-layer tensors as differentiable tape nodes.
    pub fn effective(&self, tape: &mut Tape) -> Injection {
        let layers = match self.kind {
            PeftKind::Prefix => self.vars.chunks(2).map(|c| (c[0], c[1])).collect(),
            PeftKind::Lora => self
                .vars
                .chunks(4)
                .map(|c| {
                    let q = tape.matmul(c[1], c[0]);
                    let v = tape.matmul(c[3], c[2]);
                    (tape.scale(q, self.scale), tape.scale(v, self.scale))
                })
                .collect(),
        };
        make_injection(self.kind, layers)
    }
}

fn make_injection(kind: PeftKind, layers: Vec<(Var, Var)>) -> Injection {
    match kind {
        PeftKind::Prefix => Injection::Prefix(
            layers
                .into_iter()
                .map(|(keys, values)| PrefixKv { keys, values })
                .collect(),
        ),
        PeftKind::Lora => Injection::Lora(
            layers
                .into_iter()
                .map(|(query, value)| LoraDelta { query, value })
                .collect(),
        ),
    }
}

pub fn injection_kind(inj: &Injection) -> PeftKind {
    match inj {
        Injection::Prefix(_) => PeftKind::Prefix,
        Injection::Lora(_) => PeftKind::Lora,
    }
}

pub fn injection_layers(inj: &Injection) -> Vec<(Var, Var)> {
    match inj {
        Injection::Prefix(kv) => kv.iter().map(|p| (p.keys, p.values)).collect(),
        Injection::Lora(d) => d.iter().map(|p| (p.query, p.value)).collect(),
    }
}

/// `Σ_k α_k · P_k` on the tape, with the weights themselves as nodes so the
/// loss can reach whatever produced them.
pub fn compose_on_tape(tape: &mut Tape, parts: &[Injection], alpha: &[Var]) -> Result<Injection> {
    if parts.is_empty() {
        return Err(MoclError::Composition("no modules to compose".into()));
    }
    if parts.len() != alpha.len() {
        return Err(MoclError::Composition(format!(
            "{} modules but {} weights",
            parts.len(),
            alpha.len()
        )));
    }
    let kind = injection_kind(&parts[0]);
    if parts.iter().any(|p| injection_kind(p) != kind) {
        return Err(MoclError::Composition("mixed module kinds".into()));
    }
    let per_part: Vec<Vec<(Var, Var)>> = parts.iter().map(injection_layers).collect();
    let n_layers = per_part[0].len();
    if per_part.iter().any(|p| p.len() != n_layers) {
        return Err(MoclError::Composition("modules differ in layer count".into()));
    }
    for layers in &per_part[1..] {
        for (l, &(a, b)) in layers.iter().enumerate() {
            let (a0, b0) = per_part[0][l];
            if tape.value(a).shape() != tape.value(a0).shape()
                || tape.value(b).shape() != tape.value(b0).shape()
            {
                return Err(MoclError::Composition("modules differ in dimensions".into()));
            }
        }
    }
    let mut out = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut firsts = Vec::with_capacity(parts.len());
        let mut seconds = Vec::with_capacity(parts.len());
        for (p, &a) in per_part.iter().zip(alpha) {
            firsts.push(tape.scale_by(p[l].0, a));
            seconds.push(tape.scale_by(p[l].1, a));
        }
        out.push((tape.add_n(&firsts), tape.add_n(&seconds)));
    }
    Ok(make_injection(kind, out))
}

/// Concatenation `[P_1; ...; P_n]` of prefix modules along the prefix axis.
pub fn concat_prefixes_on_tape(tape: &mut Tape, parts: &[Injection]) -> Result<Injection> {
    if parts.is_empty() {
        return Err(MoclError::Composition("no modules to concatenate".into()));
    }
    if parts.iter().any(|p| injection_kind(p) != PeftKind::Prefix) {
        return Err(MoclError::UnsupportedKind(
            "progressive concatenation needs prefix modules".into(),
        ));
    }
    let per_part: Vec<Vec<(Var, Var)>> = parts.iter().map(injection_layers).collect();
    let n_layers = per_part[0].len();
    let mut out = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let keys: Vec<Var> = per_part.iter().map(|p| p[l].0).collect();
        let values: Vec<Var> = per_part.iter().map(|p| p[l].1).collect();
        out.push((tape.concat_rows(&keys), tape.concat_rows(&values)));
    }
    Ok(make_injection(PeftKind::Prefix, out))
}

/// Effective parameters after combining contributors.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedModule {
    pub kind: PeftKind,
    /// Per layer: prefix (keys, values) or low-rank (query update, value update).
    pub layers: Vec<(Tensor, Tensor)>,
    pub alpha: Vec<f64>,
}

fn check_compatible(modules: &[&PeftModule]) -> Result<()> {
    let first = modules
        .first()
        .ok_or_else(|| MoclError::Composition("no modules to compose".into()))?;
    let (kind, layers, shape) = first.dims();
    for m in &modules[1..] {
        let (k, l, s) = m.dims();
        if k != kind {
            return Err(MoclError::Composition(format!(
                "cannot mix {kind} and {k} modules"
            )));
        }
        if l != layers || s != shape {
            return Err(MoclError::Composition(format!(
                "module for task {} has different dimensions",
                m.task_id()
            )));
        }
    }
    Ok(())
}

/// `P' = Σ_k α_k P_k` over effective parameters. Contributors are untouched.
pub fn compose(modules: &[&PeftModule], alpha: &[f64]) -> Result<ComposedModule> {
    check_compatible(modules)?;
    if modules.len() != alpha.len() {
        return Err(MoclError::Composition(format!(
            "{} modules but {} weights",
            modules.len(),
            alpha.len()
        )));
    }
    let effective: Vec<Vec<(Tensor, Tensor)>> = modules.iter().map(|m| m.effective()).collect();
    let layers = (0..modules[0].n_layers())
        .map(|l| {
            let weighted = |pick: fn(&(Tensor, Tensor)) -> &Tensor| {
                let shape = pick(&effective[0][l]).shape().to_vec();
                let mut acc = vec![0.0; pick(&effective[0][l]).len()];
                for (eff, &a) in effective.iter().zip(alpha) {
                    for (o, v) in acc.iter_mut().zip(pick(&eff[l]).data()) {
                        *o += a * v;
                    }
                }
                Tensor::from_parts(shape, acc)
            };
            (weighted(|p| &p.0), weighted(|p| &p.1))
        })
        .collect();
    Ok(ComposedModule {
        kind: modules[0].kind(),
        layers,
        alpha: alpha.to_vec(),
    })
}

impl ComposedModule {
    /// Prefix modules stacked along the prefix axis, each at unit weight.
    pub fn concatenated(modules: &[&PeftModule]) -> Result<Self> {
        if modules.iter().any(|m| m.kind() != PeftKind::Prefix) {
            return Err(MoclError::UnsupportedKind(
                "progressive concatenation needs prefix modules".into(),
            ));
        }
        check_compatible(modules)?;
        let effective: Vec<Vec<(Tensor, Tensor)>> = modules.iter().map(|m| m.effective()).collect();
        let d = effective[0].first().map_or(0, |l| l.0.cols());
        let layers = (0..modules[0].n_layers())
            .map(|l| {
                let stack = |pick: fn(&(Tensor, Tensor)) -> &Tensor| {
                    let data: Vec<f64> = effective
                        .iter()
                        .flat_map(|e| pick(&e[l]).data().to_vec())
                        .collect();
                    Tensor::from_parts(vec![data.len() / d.max(1), d], data)
                };
                (stack(|p| &p.0), stack(|p| &p.1))
            })
            .collect();
        Ok(Self {
            kind: PeftKind::Prefix,
            layers,
            alpha: vec![1.0; modules.len()],
        })
    }

    /// Constant tape nodes for the effective tensors.
    pub fn bind(&self, tape: &mut Tape) -> Result<Injection> {
        let layers = self
            .layers
            .iter()
            .map(|(a, b)| (tape.constant(a), tape.constant(b)))
            .collect();
        Ok(make_injection(self.kind, layers))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|(a, b)| [a, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn bb() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            max_len: 6,
        }
    }

    fn module(kind: PeftKind, seed: u64, task: usize) -> PeftModule {
        let cfg = PeftConfig {
            kind,
            prefix_len: 3,
            lora_rank: 2,
            lora_scale: 0.5,
        };
        let mut rng = SeedTree::new(seed).stream("module", task as u64);
        init_module(&cfg, &bb(), task, &mut rng).unwrap()
    }

    #[test]
    fn lora_init_has_zero_update() {
        let m = module(PeftKind::Lora, 1, 1);
        for (q, v) in m.effective() {
            assert!(q.data().iter().chain(v.data()).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn init_is_seeded() {
        for kind in [PeftKind::Prefix, PeftKind::Lora] {
            assert_eq!(module(kind, 4, 1), module(kind, 4, 1));
            assert_ne!(module(kind, 4, 1), module(kind, 5, 1));
        }
    }

    #[test]
    fn one_hot_and_zero_weights() {
        let ms = [module(PeftKind::Prefix, 1, 1), module(PeftKind::Prefix, 1, 2)];
        let refs: Vec<&PeftModule> = ms.iter().collect();
        let c = compose(&refs, &[0.0, 1.0]).unwrap();
        for (l, (k, v)) in c.layers.iter().enumerate() {
            let (ek, ev) = &ms[1].effective()[l];
            assert!(k.bit_eq(ek) && v.bit_eq(ev));
        }
        let z = compose(&refs, &[0.0, 0.0]).unwrap();
        assert!(z.tensors().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn composition_errors() {
        let p = module(PeftKind::Prefix, 1, 1);
        let l = module(PeftKind::Lora, 1, 2);
        assert!(matches!(compose(&[], &[]), Err(MoclError::Composition(_))));
        assert!(matches!(compose(&[&p, &l], &[1.0, 1.0]), Err(MoclError::Composition(_))));
        assert!(matches!(compose(&[&p], &[1.0, 1.0]), Err(MoclError::Composition(_))));
        assert!(matches!(
            ComposedModule::concatenated(&[&l]),
            Err(MoclError::UnsupportedKind(_))
        ));
    }

    #[test]
    fn composition_leaves_contributors_untouched() {
        let ms = [module(PeftKind::Lora, 1, 1), module(PeftKind::Lora, 2, 2)];
        let before = ms.clone();
        compose(&[&ms[0], &ms[1]], &[0.3, 0.9]).unwrap();
        assert_eq!(ms, before);
    }

    #[test]
    fn frozen_module_refuses_mutation() {
        let mut m = module(PeftKind::Prefix, 1, 1);
        assert!(m.params_mut().is_ok());
        m.freeze();
        assert!(matches!(m.params_mut(), Err(MoclError::Protocol(_))));
    }

    #[test]
    fn concatenation_stacks_prefix_rows() {
        let ms = [module(PeftKind::Prefix, 1, 1), module(PeftKind::Prefix, 1, 2)];
        let c = ComposedModule::concatenated(&[&ms[0], &ms[1]]).unwrap();
        assert_eq!(c.layers[0].0.shape(), &[6, 8]);
        assert_eq!(&c.layers[1].1.data()[..24], ms[0].effective()[1].1.data());
    }

    #[test]
    fn tape_effective_matches_value_effective() {
        let m = module(PeftKind::Lora, 3, 1);
        let mut m2 = m.clone();
        // give B some mass so the update is non-trivial
        if let PeftModule::Lora(l) = &mut m2 {
            let mut rng = SeedTree::new(9).stream("b", 0);
            for layer in &mut l.layers {
                layer.b_query = Tensor::randn(&[8, 2], 0.1, &mut rng);
            }
        }
        let mut tape = Tape::new();
        let vars = m2.bind(&mut tape, true);
        let inj = vars.effective(&mut tape);
        let value = m2.effective();
        for (l, (q, v)) in injection_layers(&inj).into_iter().enumerate() {
            assert!(tape.value(q).max_abs_diff(&value[l].0) < 1e-15);
            assert!(tape.value(v).max_abs_diff(&value[l].1) < 1e-15);
        }
    }
}
