//! Parameter layout, initialization and binding to a tape.
//!
//! Every trainable tensor has a stable dotted name and a position in the
//! canonical order returned by [`param_specs`]. Initialization draws each
//! tensor from its own ChaCha stream (stream = canonical index), so a
//! materialized [`ParamStore`] and an on-demand [`LazyParams`] built from
//! the same seed produce identical values.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, N_PATHOLOGIES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of initial embeddings and vocabulary heads. Other
/// linear weights use `1/sqrt(fan_in)`.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn materialize(&self, seed: u64, index: usize) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, 1.0),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(&self.shape, |_| dist.sample(&mut rng))
            }
        }
    }
}

struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.push(format!("{prefix}.w"), vec![d_in, d_out], Init::Normal((d_in as f64).sqrt().recip()));
        self.push(format!("{prefix}.b"), vec![d_out], Init::Zeros);
    }

    /// Vocabulary projection: small weights so initial predictions are near uniform.
    fn vocab_head(&mut self, prefix: &str, d_in: usize, vocab: usize) {
        self.push(format!("{prefix}.w"), vec![d_in, vocab], Init::Normal(INIT_STD));
        self.push(format!("{prefix}.b"), vec![vocab], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), vec![d], Init::Ones);
        self.push(format!("{prefix}.b"), vec![d], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, d_q: usize, d_kv: usize) {
        self.linear(&format!("{prefix}.q"), d_q, d_q);
        self.linear(&format!("{prefix}.k"), d_kv, d_q);
        self.linear(&format!("{prefix}.v"), d_kv, d_q);
        self.linear(&format!("{prefix}.o"), d_q, d_q);
    }

    fn ffn(&mut self, prefix: &str, d: usize, mult: usize) {
        self.linear(&format!("{prefix}.up"), d, d * mult);
        self.linear(&format!("{prefix}.down"), d * mult, d);
    }

    fn encoder_block(&mut self, prefix: &str, d: usize, mult: usize) {
        self.norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.attn"), d, d);
        self.norm(&format!("{prefix}.ln2"), d);
        self.ffn(&format!("{prefix}.ffn"), d, mult);
    }
}

/// The model's parameters in canonical order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut b = SpecBuilder(Vec::new());
    let m = cfg.ffn_multiplier;
    let normal = Init::Normal(INIT_STD);

    let dv = cfg.d_vision;
    b.linear("vision.patch", cfg.patch_dim(), dv);
    b.push("vision.pos".into(), vec![cfg.n_patches(), dv], normal);
    b.push("vision.mask_token".into(), vec![dv], normal);
    for i in 0..cfg.vision_layers {
        b.encoder_block(&format!("vision.blocks.{i}"), dv, m);
    }
    b.norm("vision.ln_f", dv);

    let dt = cfg.d_text;
    b.push("text.tok".into(), vec![cfg.vocab_size, dt], normal);
    b.push("text.pos".into(), vec![cfg.max_text_len, dt], normal);
    for i in 0..cfg.text_layers {
        b.encoder_block(&format!("text.blocks.{i}"), dt, m);
    }
    b.norm("text.ln_f", dt);

    let df = cfg.d_fused;
    for i in 0..cfg.fusion_layers {
        let p = format!("fusion.blocks.{i}");
        b.norm(&format!("{p}.ln_q"), df);
        b.norm(&format!("{p}.ln_kv"), dv);
        b.attention(&format!("{p}.attn"), df, dv);
        b.norm(&format!("{p}.ln2"), df);
        b.ffn(&format!("{p}.ffn"), df, m);
    }
    b.norm("fusion.ln_f", df);

    let dd = cfg.d_decoder;
    b.push("decoder.tok".into(), vec![cfg.vocab_size, dd], normal);
    b.push("decoder.pos".into(), vec![cfg.max_report_len, dd], normal);
    b.linear("decoder.bridge", df, dd);
    for i in 0..cfg.decoder_layers {
        let p = format!("decoder.blocks.{i}");
        b.norm(&format!("{p}.ln1"), dd);
        b.attention(&format!("{p}.self_attn"), dd, dd);
        b.norm(&format!("{p}.ln2"), dd);
        b.attention(&format!("{p}.cross_attn"), dd, dd);
        b.norm(&format!("{p}.ln3"), dd);
        b.ffn(&format!("{p}.ffn"), dd, m);
    }
    b.norm("decoder.ln_f", dd);
    b.vocab_head("decoder.head", dd, cfg.vocab_size);

    b.linear("heads.mim", dv, cfg.patch_dim());
    b.vocab_head("heads.mlm", dt, cfg.vocab_size);
    b.linear("heads.detect", dv, N_PATHOLOGIES);
    b.0
}

/// Trainable scalar counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ParameterCount {
    pub vision: usize,
    pub text: usize,
    pub fusion: usize,
    pub decoder: usize,
    /// MIM, MLM and detection heads.
    pub heads: usize,
    pub total: usize,
}

/// Exact trainable scalar count for `cfg`, split by component.
pub fn count_parameters(cfg: &ModelConfig) -> ParameterCount {
    let mut c = ParameterCount::default();
    for spec in param_specs(cfg) {
        let n = spec.numel();
        let slot = match spec.name.split('.').next() {
            Some("vision") => &mut c.vision,
            Some("text") => &mut c.text,
            Some("fusion") => &mut c.fusion,
            Some("decoder") => &mut c.decoder,
            _ => &mut c.heads,
        };
        *slot += n;
        c.total += n;
    }
    c
}

/// Anything the forward passes can pull named parameters from.
pub trait ParamSource {
    fn param(&self, tape: &Tape, name: &str) -> Result<Var>;
}

/// Materialized parameters in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Arc<Tensor>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let entries = param_specs(cfg)
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let t = spec.materialize(seed, i);
                (spec.name, Arc::new(t))
            })
            .collect();
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<(String, Arc<Tensor>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ParamStore { entries, index }
    }

    /// Builds a store from named tensors, checking them against the layout of `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let specs = param_specs(cfg);
        if specs.len() != named.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut by_name: HashMap<String, Tensor> = named.into_iter().collect();
        let mut entries = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = by_name
                .remove(&spec.name)
                .ok_or_else(|| Error::contract(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            entries.push((spec.name, Arc::new(t)));
        }
        Ok(Self::from_entries(entries))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| self.entries[i].1.as_ref())
    }

    /// Mutable access; copies the tensor first if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.entries[i].1))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Binds the store to a tape so gradients can be collected by name.
    pub fn bind(&self) -> Bound<'_> {
        Bound {
            store: self,
            vars: RefCell::new(HashMap::new()),
        }
    }

    fn shared(&self, name: &str) -> Option<Arc<Tensor>> {
        self.index.get(name).map(|&i| Arc::clone(&self.entries[i].1))
    }
}

/// A store registered as leaves on one tape. Each parameter becomes a single
/// leaf however many times the forward pass asks for it.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: RefCell<HashMap<String, Var>>,
}

impl Bound<'_> {
    /// Gradients of every parameter the forward pass touched.
    pub fn gradients(&self, tape: &Tape) -> HashMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(name, var)| tape.grad(var).map(|g| (name.clone(), g)))
            .collect()
    }

    /// The leaf a name is bound to, if the forward pass used it.
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }
}

impl ParamSource for Bound<'_> {
    fn param(&self, tape: &Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self
            .store
            .shared(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = tape.leaf(t);
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }
}

/// Read-only access to a store without leaf registration (inference).
impl ParamSource for ParamStore {
    fn param(&self, tape: &Tape, name: &str) -> Result<Var> {
        self.shared(name)
            .map(|t| tape.constant(t))
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }
}

/// Parameters generated on request and never retained.
///
/// Used to run the full-size architecture, whose materialized parameters
/// would not fit in memory at `f64`.
pub struct LazyParams {
    specs: HashMap<String, (usize, ParamSpec)>,
    seed: u64,
}

impl LazyParams {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let specs = param_specs(cfg)
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), (i, s)))
            .collect();
        LazyParams { specs, seed }
    }
}

impl ParamSource for LazyParams {
    fn param(&self, tape: &Tape, name: &str) -> Result<Var> {
        let (i, spec) = self
            .specs
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        Ok(tape.constant(spec.materialize(self.seed, *i)))
    }
}
