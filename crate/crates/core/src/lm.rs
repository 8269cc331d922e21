//! Tiny decoder-only transformer with a hand-written backward pass.
//!
//! Pre-norm residual blocks, learned token and position embeddings, GELU
//! feed-forward, untied output head. Everything is generic over [`Real`] so
//! the same code trains in `f32` and is gradient-checked in `f64`.
//!
//! [`forward_with`] can restrict the top block to the rows from `first_row`
//! onward; lower blocks always compute every position because later rows
//! attend to them. Training and prediction only need the answer row, which
//! skips most of the top block and the vocabulary projection.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lora::{AdaptedLinear, LinearCache, LinearGrads, LoraConfig, TargetModule, Weight};
use crate::nf4::{QuantError, QuantizedTensor};
use crate::real::Real;
use crate::seeds;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty token sequence")]
    EmptyInput,
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab}")]
    BadToken { position: usize, id: u32, vocab: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("labels/mask length {labels}/{mask} does not match {tokens} tokens")]
    MaskLength { tokens: usize, labels: usize, mask: usize },
    #[error("loss mask selects no position")]
    EmptyMask,
    #[error("masked position {position} precedes the first computed row {first_row}")]
    MaskOutsideRows { position: usize, first_row: usize },
    #[error("trace is stale: trainable parameters changed since the forward pass")]
    StaleTrace,
    #[error("unknown LoRA target module {0:?} (expected q, k, v or o)")]
    UnknownTarget(String),
    #[error("model has no adapters attached")]
    NoAdapters,
    #[error("adapter was trained on base {expected}, this base hashes to {actual}")]
    BaseMismatch { expected: String, actual: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// 0 means "take it from the vocabulary".
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 0,
            max_seq_len: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_layers == 0 {
            return bad("model.n_layers must be >= 1");
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad("model.d_model must be a positive multiple of model.n_heads");
        }
        if self.d_ff == 0 {
            return bad("model.d_ff must be >= 1");
        }
        if self.vocab_size == 0 {
            return bad("model.vocab_size must be >= 1");
        }
        if self.max_seq_len == 0 {
            return bad("model.max_seq_len must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1_gain: Array2<F>,
    pub ln1_bias: Array2<F>,
    pub q: AdaptedLinear<F>,
    pub k: AdaptedLinear<F>,
    pub v: AdaptedLinear<F>,
    pub o: AdaptedLinear<F>,
    pub ln2_gain: Array2<F>,
    pub ln2_bias: Array2<F>,
    pub ff_in: AdaptedLinear<F>,
    pub ff_in_bias: Array2<F>,
    pub ff_out: AdaptedLinear<F>,
    pub ff_out_bias: Array2<F>,
}

impl<F> Block<F> {
    pub fn projection(&self, t: TargetModule) -> &AdaptedLinear<F> {
        match t {
            TargetModule::Q => &self.q,
            TargetModule::K => &self.k,
            TargetModule::V => &self.v,
            TargetModule::O => &self.o,
        }
    }

    pub fn projection_mut(&mut self, t: TargetModule) -> &mut AdaptedLinear<F> {
        match t {
            TargetModule::Q => &mut self.q,
            TargetModule::K => &mut self.k,
            TargetModule::V => &mut self.v,
            TargetModule::O => &mut self.o,
        }
    }
}

/// All model tensors. Gains and biases are stored as `1 × n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub tok_emb: Weight<F>,
    pub pos_emb: Weight<F>,
    pub blocks: Vec<Block<F>>,
    pub lnf_gain: Array2<F>,
    pub lnf_bias: Array2<F>,
    pub head: Weight<F>,
    pub lora: Option<LoraConfig>,
    /// When set only adapter factors are trainable.
    pub frozen_base: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Embedding,
    Norm,
    Bias,
    Projection,
    Head,
    LoraA,
    LoraB,
}

impl TensorRole {
    pub fn is_adapter(self) -> bool {
        matches!(self, TensorRole::LoraA | TensorRole::LoraB)
    }
}

pub enum Entry<'a, F> {
    Array(&'a Array2<F>, TensorRole),
    Weight(&'a Weight<F>, TensorRole),
}

pub enum EntryMut<'a, F> {
    Array(&'a mut Array2<F>, TensorRole),
    Weight(&'a mut Weight<F>, TensorRole),
}

impl<F: Real> Entry<'_, F> {
    pub fn role(&self) -> TensorRole {
        match self {
            Entry::Array(_, r) | Entry::Weight(_, r) => *r,
        }
    }

    pub fn is_dense(&self) -> bool {
        !matches!(self, Entry::Weight(Weight::Nf4(_), _))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Entry::Array(a, _) => a.dim(),
            Entry::Weight(w, _) => w.shape(),
        }
    }

    pub fn dense(&self) -> Cow<'_, Array2<F>> {
        match self {
            Entry::Array(a, _) => Cow::Borrowed(*a),
            Entry::Weight(w, _) => w.dense(),
        }
    }
}

fn gaussian<F: Real>(rng: &mut impl rand::Rng, shape: (usize, usize), std: f64) -> Array2<F> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || F::of(normal.sample(rng)))
}

/// Deterministic initialization from `cfg.seed`.
///
/// Projections are `N(0, 1/fan_in)`, token embeddings `N(0, 1)`, position
/// embeddings `N(0, 0.1²)`, norms unit gain and zero bias.
pub fn init_model<F: Real>(cfg: &ModelConfig) -> Result<ModelParams<F>, ModelError> {
    cfg.validate()?;
    let mut rng = seeds::labeled_rng(cfg.seed, "model-init");
    let (d, dff) = (cfg.d_model, cfg.d_ff);
    let proj = |rng: &mut rand_chacha::ChaCha8Rng, out: usize, inp: usize| {
        AdaptedLinear::dense(gaussian::<F>(rng, (out, inp), 1.0 / (inp as f64).sqrt()))
    };
    let tok_emb = Weight::Dense(gaussian(&mut rng, (cfg.vocab_size, d), 1.0));
    let pos_emb = Weight::Dense(gaussian(&mut rng, (cfg.max_seq_len, d), 0.1));
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        blocks.push(Block {
            ln1_gain: Array2::ones((1, d)),
            ln1_bias: Array2::zeros((1, d)),
            q: proj(&mut rng, d, d),
            k: proj(&mut rng, d, d),
            v: proj(&mut rng, d, d),
            o: proj(&mut rng, d, d),
            ln2_gain: Array2::ones((1, d)),
            ln2_bias: Array2::zeros((1, d)),
            ff_in: proj(&mut rng, dff, d),
            ff_in_bias: Array2::zeros((1, dff)),
            ff_out: proj(&mut rng, d, dff),
            ff_out_bias: Array2::zeros((1, d)),
        });
    }
    let head = Weight::Dense(gaussian(&mut rng, (cfg.vocab_size, d), 1.0 / (d as f64).sqrt()));
    Ok(ModelParams {
        config: cfg.clone(),
        tok_emb,
        pos_emb,
        blocks,
        lnf_gain: Array2::ones((1, d)),
        lnf_bias: Array2::zeros((1, d)),
        head,
        lora: None,
        frozen_base: false,
    })
}

fn push_linear<'a, F>(v: &mut Vec<(String, Entry<'a, F>)>, name: String, lin: &'a AdaptedLinear<F>) {
    v.push((format!("{name}.weight"), Entry::Weight(&lin.weight, TensorRole::Projection)));
    if let Some(l) = &lin.lora {
        v.push((format!("{name}.lora_a"), Entry::Array(&l.a, TensorRole::LoraA)));
        v.push((format!("{name}.lora_b"), Entry::Array(&l.b, TensorRole::LoraB)));
    }
}

fn push_linear_mut<'a, F>(v: &mut Vec<(String, EntryMut<'a, F>)>, name: String, lin: &'a mut AdaptedLinear<F>) {
    v.push((format!("{name}.weight"), EntryMut::Weight(&mut lin.weight, TensorRole::Projection)));
    if let Some(l) = &mut lin.lora {
        v.push((format!("{name}.lora_a"), EntryMut::Array(&mut l.a, TensorRole::LoraA)));
        v.push((format!("{name}.lora_b"), EntryMut::Array(&mut l.b, TensorRole::LoraB)));
    }
}

impl<F: Real> ModelParams<F> {
    /// Every tensor with its canonical name, in checkpoint order.
    pub fn entries(&self) -> Vec<(String, Entry<'_, F>)> {
        use TensorRole::*;
        let mut v = vec![
            ("tok_emb".to_string(), Entry::Weight(&self.tok_emb, Embedding)),
            ("pos_emb".to_string(), Entry::Weight(&self.pos_emb, Embedding)),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}");
            v.push((format!("{p}.ln1.gain"), Entry::Array(&b.ln1_gain, Norm)));
            v.push((format!("{p}.ln1.bias"), Entry::Array(&b.ln1_bias, Norm)));
            for (t, lin) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("o", &b.o)] {
                push_linear(&mut v, format!("{p}.attn.{t}"), lin);
            }
            v.push((format!("{p}.ln2.gain"), Entry::Array(&b.ln2_gain, Norm)));
            v.push((format!("{p}.ln2.bias"), Entry::Array(&b.ln2_bias, Norm)));
            push_linear(&mut v, format!("{p}.ff.in"), &b.ff_in);
            v.push((format!("{p}.ff.in.bias"), Entry::Array(&b.ff_in_bias, Bias)));
            push_linear(&mut v, format!("{p}.ff.out"), &b.ff_out);
            v.push((format!("{p}.ff.out.bias"), Entry::Array(&b.ff_out_bias, Bias)));
        }
        v.push(("ln_f.gain".to_string(), Entry::Array(&self.lnf_gain, Norm)));
        v.push(("ln_f.bias".to_string(), Entry::Array(&self.lnf_bias, Norm)));
        v.push(("head.weight".to_string(), Entry::Weight(&self.head, Head)));
        v
    }

    pub fn entries_mut(&mut self) -> Vec<(String, EntryMut<'_, F>)> {
        use TensorRole::*;
        let mut v = vec![
            ("tok_emb".to_string(), EntryMut::Weight(&mut self.tok_emb, Embedding)),
            ("pos_emb".to_string(), EntryMut::Weight(&mut self.pos_emb, Embedding)),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{l}");
            v.push((format!("{p}.ln1.gain"), EntryMut::Array(&mut b.ln1_gain, Norm)));
            v.push((format!("{p}.ln1.bias"), EntryMut::Array(&mut b.ln1_bias, Norm)));
            for (t, lin) in [("q", &mut b.q), ("k", &mut b.k), ("v", &mut b.v), ("o", &mut b.o)] {
                push_linear_mut(&mut v, format!("{p}.attn.{t}"), lin);
            }
            v.push((format!("{p}.ln2.gain"), EntryMut::Array(&mut b.ln2_gain, Norm)));
            v.push((format!("{p}.ln2.bias"), EntryMut::Array(&mut b.ln2_bias, Norm)));
            push_linear_mut(&mut v, format!("{p}.ff.in"), &mut b.ff_in);
            v.push((format!("{p}.ff.in.bias"), EntryMut::Array(&mut b.ff_in_bias, Bias)));
            push_linear_mut(&mut v, format!("{p}.ff.out"), &mut b.ff_out);
            v.push((format!("{p}.ff.out.bias"), EntryMut::Array(&mut b.ff_out_bias, Bias)));
        }
        v.push(("ln_f.gain".to_string(), EntryMut::Array(&mut self.lnf_gain, Norm)));
        v.push(("ln_f.bias".to_string(), EntryMut::Array(&mut self.lnf_bias, Norm)));
        v.push(("head.weight".to_string(), EntryMut::Weight(&mut self.head, Head)));
        v
    }

    /// All linear maps inside blocks, named without the `.weight` suffix.
    pub fn linears(&self) -> Vec<(String, &AdaptedLinear<F>)> {
        let mut v = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            for (t, lin) in [("attn.q", &b.q), ("attn.k", &b.k), ("attn.v", &b.v), ("attn.o", &b.o), ("ff.in", &b.ff_in), ("ff.out", &b.ff_out)] {
                v.push((format!("blocks.{l}.{t}"), lin));
            }
        }
        v
    }

    pub fn linears_mut(&mut self) -> Vec<(String, &mut AdaptedLinear<F>)> {
        let mut v = Vec::new();
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (t, lin) in [
                ("attn.q", &mut b.q),
                ("attn.k", &mut b.k),
                ("attn.v", &mut b.v),
                ("attn.o", &mut b.o),
                ("ff.in", &mut b.ff_in),
                ("ff.out", &mut b.ff_out),
            ] {
                v.push((format!("blocks.{l}.{t}"), lin));
            }
        }
        v
    }

    pub fn is_trainable(&self, entry: &Entry<'_, F>) -> bool {
        entry.role().is_adapter() || (!self.frozen_base && entry.is_dense())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries()
            .into_iter()
            .filter(|(_, e)| self.is_trainable(e))
            .map(|(n, _)| n)
            .collect()
    }

    /// Mutable references to the trainable tensors, in canonical order.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let frozen = self.frozen_base;
        self.entries_mut()
            .into_iter()
            .filter_map(|(n, e)| match e {
                EntryMut::Array(a, role) if role.is_adapter() || !frozen => Some((n, a)),
                EntryMut::Weight(Weight::Dense(a), _) if !frozen => Some((n, a)),
                _ => None,
            })
            .collect()
    }

    /// Dense copy of a named tensor.
    pub fn tensor(&self, name: &str) -> Option<Array2<F>> {
        self.entries()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e.dense().into_owned())
    }

    /// Mutable access to a dense tensor; quantized tensors are not mutable.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.entries_mut().into_iter().find(|(n, _)| n == name).and_then(|(_, e)| match e {
            EntryMut::Array(a, _) => Some(a),
            EntryMut::Weight(Weight::Dense(a), _) => Some(a),
            EntryMut::Weight(Weight::Nf4(_), _) => None,
        })
    }

    /// Exact element count of the tensors accepted by `filter(name, role, trainable)`.
    pub fn count_params(&self, filter: impl Fn(&str, TensorRole, bool) -> bool) -> usize {
        self.entries()
            .iter()
            .filter(|(n, e)| filter(n, e.role(), self.is_trainable(e)))
            .map(|(_, e)| {
                let (r, c) = e.shape();
                r * c
            })
            .sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.count_params(|_, _, t| t)
    }

    pub fn count_all(&self) -> usize {
        self.count_params(|_, _, _| true)
    }

    /// SHA-256 over names, shapes and contents of every non-adapter tensor.
    /// Dense values are hashed as `f64` so the digest is dtype independent.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.entries() {
            if e.role().is_adapter() {
                continue;
            }
            h.update(name.as_bytes());
            let (r, c) = e.shape();
            h.update((r as u64).to_le_bytes());
            h.update((c as u64).to_le_bytes());
            match e {
                Entry::Weight(Weight::Nf4(q), _) => {
                    h.update(b"nf4");
                    h.update((q.block_size as u64).to_le_bytes());
                    h.update(&q.packed);
                    for s in &q.scales {
                        h.update(s.to_le_bytes());
                    }
                }
                e => {
                    for v in e.dense().iter() {
                        h.update(v.f64().to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Cheap fingerprint of the trainable tensors, used to detect stale traces.
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, e) in self.entries() {
            if !self.is_trainable(&e) {
                continue;
            }
            for v in e.dense().iter() {
                h ^= v.f64().to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Same model in another precision; quantized tensors are shared as is.
    pub fn convert<G: Real>(&self) -> ModelParams<G> {
        let arr = |a: &Array2<F>| a.mapv(|x| G::of(x.f64()));
        let weight = |w: &Weight<F>| match w {
            Weight::Dense(a) => Weight::Dense(arr(a)),
            Weight::Nf4(q) => Weight::Nf4(q.clone()),
        };
        let lin = |l: &AdaptedLinear<F>| AdaptedLinear {
            weight: weight(&l.weight),
            lora: l.lora.as_ref().map(|f| crate::lora::LoraFactors {
                a: arr(&f.a),
                b: arr(&f.b),
                alpha: f.alpha,
                dropout: f.dropout,
            }),
        };
        ModelParams {
            config: self.config.clone(),
            tok_emb: weight(&self.tok_emb),
            pos_emb: weight(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: arr(&b.ln1_gain),
                    ln1_bias: arr(&b.ln1_bias),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    o: lin(&b.o),
                    ln2_gain: arr(&b.ln2_gain),
                    ln2_bias: arr(&b.ln2_bias),
                    ff_in: lin(&b.ff_in),
                    ff_in_bias: arr(&b.ff_in_bias),
                    ff_out: lin(&b.ff_out),
                    ff_out_bias: arr(&b.ff_out_bias),
                })
                .collect(),
            lnf_gain: arr(&self.lnf_gain),
            lnf_bias: arr(&self.lnf_bias),
            head: weight(&self.head),
            lora: self.lora.clone(),
            frozen_base: self.frozen_base,
        }
    }
}

/// `L · targets · 2 · d · r` adapter parameters for square `d × d` targets.
pub fn lora_param_formula(n_layers: u64, n_targets: u64, d_model: u64, rank: u64) -> u64 {
    n_layers * n_targets * 2 * d_model * rank
}

// ---------------------------------------------------------------------------
// forward

#[derive(Debug, Clone)]
struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Vec<F>,
}

fn layer_norm<F: Real>(x: ArrayView2<F>, gain: &Array2<F>, bias: &Array2<F>) -> (Array2<F>, LnCache<F>) {
    let n = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).sum::<F>() / n;
        let r = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * r);
        rstd.push(r);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
fn ln_backward<F: Real>(dy: ArrayView2<F>, c: &LnCache<F>, gain: &Array2<F>) -> (Array2<F>, Array2<F>, Array2<F>) {
    let n = F::of(dy.ncols() as f64);
    let dgain = (&dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut dx = &dy * gain;
    for ((mut row, xh), r) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(&c.rstd) {
        let m1 = row.sum() / n;
        let m2 = row.iter().zip(xh.iter()).map(|(a, b)| *a * *b).sum::<F>() / n;
        for (d, x) in row.iter_mut().zip(xh.iter()) {
            *d = (*d - m1 - *x * m2) * *r;
        }
    }
    (dx, dgain, dbias)
}

/// Query rows per attention tile; keys past a tile's last row are skipped.
const ATTN_CHUNK: usize = 64;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh_fast())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh_fast();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

fn reborrow<'a>(r: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match r {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Softmax of each row restricted to the causal prefix; masked entries are 0.
fn causal_softmax<F: Real>(s: &mut Array2<F>, q0: usize) {
    for (i, mut row) in s.rows_mut().into_iter().enumerate() {
        let valid = q0 + i + 1;
        let (mut head, mut tail) = row.view_mut().split_at(Axis(0), valid);
        let max = head.iter().fold(F::neg_infinity(), |m, v| m.max(*v));
        head.mapv_inplace(|v| (v - max).exp_fast());
        let sum = head.sum();
        head.mapv_inplace(|v| v / sum);
        tail.fill(F::zero());
    }
}

#[derive(Debug, Clone)]
struct BlockCache<F> {
    q0: usize,
    a: Array2<F>,
    ln1: LnCache<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention probabilities per head, one `rows × keys` tile per row chunk.
    probs: Vec<Vec<Array2<F>>>,
    ctx: Array2<F>,
    b: Array2<F>,
    ln2: LnCache<F>,
    h: Array2<F>,
    g: Array2<F>,
    cq: LinearCache<F>,
    ck: LinearCache<F>,
    cv: LinearCache<F>,
    co: LinearCache<F>,
    cfi: LinearCache<F>,
    cfo: LinearCache<F>,
}

fn block_forward<F: Real>(
    blk: &Block<F>,
    x: &Array2<F>,
    q0: usize,
    n_heads: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> (Array2<F>, BlockCache<F>) {
    let (a, ln1) = layer_norm(x.view(), &blk.ln1_gain, &blk.ln1_bias);
    let (k, ck) = blk.k.forward_rows(a.view(), reborrow(&mut rng));
    let (v, cv) = blk.v.forward_rows(a.view(), reborrow(&mut rng));
    let (q, cq) = blk.q.forward_rows(a.slice(s![q0.., ..]), reborrow(&mut rng));

    let d = x.ncols();
    let dh = d / n_heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let tq = q.nrows();
    let mut ctx = Array2::zeros((tq, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let hc = h * dh..(h + 1) * dh;
        let mut tiles = Vec::with_capacity(tq.div_ceil(ATTN_CHUNK));
        for r0 in (0..tq).step_by(ATTN_CHUNK) {
            let r1 = (r0 + ATTN_CHUNK).min(tq);
            let kend = q0 + r1;
            let mut sc = q.slice(s![r0..r1, hc.clone()]).dot(&k.slice(s![..kend, hc.clone()]).t()) * scale;
            causal_softmax(&mut sc, q0 + r0);
            ctx.slice_mut(s![r0..r1, hc.clone()]).assign(&sc.dot(&v.slice(s![..kend, hc.clone()])));
            tiles.push(sc);
        }
        probs.push(tiles);
    }
    let (att, co) = blk.o.forward_rows(ctx.view(), reborrow(&mut rng));
    let x1 = &x.slice(s![q0.., ..]) + &att;

    let (b, ln2) = layer_norm(x1.view(), &blk.ln2_gain, &blk.ln2_bias);
    let (mut h, cfi) = blk.ff_in.forward_rows(b.view(), reborrow(&mut rng));
    h += &blk.ff_in_bias;
    let g = h.mapv(gelu);
    let (mut f, cfo) = blk.ff_out.forward_rows(g.view(), reborrow(&mut rng));
    f += &blk.ff_out_bias;
    let out = x1 + f;
    let cache = BlockCache { q0, a, ln1, q, k, v, probs, ctx, b, ln2, h, g, cq, ck, cv, co, cfi, cfo };
    (out, cache)
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    /// Logits for positions `first_row..len`, one row each.
    pub logits: Array2<F>,
    pub first_row: usize,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache<F>>,
    lnf: LnCache<F>,
    z: Array2<F>,
    stamp: u64,
}

impl<F: Real> ForwardTrace<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Logits at absolute position `pos`.
    pub fn logits_at(&self, pos: usize) -> Option<ndarray::ArrayView1<'_, F>> {
        pos.checked_sub(self.first_row)
            .filter(|r| *r < self.logits.nrows())
            .map(|r| self.logits.row(r))
    }
}

/// Dropout switch for a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

fn check_tokens<F: Real>(p: &ModelParams<F>, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tokens.len() > p.config.max_seq_len {
        return Err(ModelError::TooLong { len: tokens.len(), max: p.config.max_seq_len });
    }
    let vocab = p.config.vocab_size;
    if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, t)| **t as usize >= vocab) {
        return Err(ModelError::BadToken { position, id, vocab });
    }
    Ok(())
}

/// Full forward in evaluation mode; logits for every position.
pub fn forward<F: Real>(p: &ModelParams<F>, tokens: &[u32]) -> Result<ForwardTrace<F>, ModelError> {
    forward_with(p, tokens, 0, Mode::Eval)
}

pub fn forward_with<F: Real>(
    p: &ModelParams<F>,
    tokens: &[u32],
    first_row: usize,
    mode: Mode<'_>,
) -> Result<ForwardTrace<F>, ModelError> {
    check_tokens(p, tokens)?;
    let t = tokens.len();
    let first_row = first_row.min(t - 1);
    let mut rng: Option<&mut dyn RngCore> = match mode {
        Mode::Eval => None,
        Mode::Train(r) => Some(r),
    };
    let d = p.config.d_model;
    let tok = p.tok_emb.dense();
    let pos = p.pos_emb.dense();
    let mut x = Array2::zeros((t, d));
    for (i, &id) in tokens.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&tok.row(id as usize));
        row += &pos.row(i);
    }
    let n = p.blocks.len();
    let mut caches = Vec::with_capacity(n);
    for (l, blk) in p.blocks.iter().enumerate() {
        let q0 = if l + 1 == n { first_row } else { 0 };
        let (out, cache) = block_forward(blk, &x, q0, p.config.n_heads, reborrow(&mut rng));
        x = out;
        caches.push(cache);
    }
    let (z, lnf) = layer_norm(x.view(), &p.lnf_gain, &p.lnf_bias);
    let logits = z.dot(&p.head.dense().t());
    Ok(ForwardTrace {
        logits,
        first_row,
        tokens: tokens.to_vec(),
        blocks: caches,
        lnf,
        z,
        stamp: p.fingerprint(),
    })
}

/// Next-token logits after the last input token.
pub fn last_logits<F: Real>(p: &ModelParams<F>, tokens: &[u32]) -> Result<Array1<F>, ModelError> {
    let trace = forward_with(p, tokens, tokens.len().saturating_sub(1), Mode::Eval)?;
    Ok(trace.logits.row(trace.logits.nrows() - 1).to_owned())
}

// ---------------------------------------------------------------------------
// loss

fn masked_positions<F: Real>(trace: &ForwardTrace<F>, labels: &[u32], mask: &[bool]) -> Result<Vec<usize>, ModelError> {
    if labels.len() != trace.len() || mask.len() != trace.len() {
        return Err(ModelError::MaskLength { tokens: trace.len(), labels: labels.len(), mask: mask.len() });
    }
    let positions: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
    if positions.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    if let Some(&position) = positions.iter().find(|i| **i < trace.first_row) {
        return Err(ModelError::MaskOutsideRows { position, first_row: trace.first_row });
    }
    let vocab = trace.logits.ncols();
    for &i in &positions {
        if labels[i] as usize >= vocab {
            return Err(ModelError::BadToken { position: i, id: labels[i], vocab });
        }
    }
    Ok(positions)
}

fn log_softmax_row<F: Real>(row: ndarray::ArrayView1<F>) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.f64() - lse).collect()
}

/// Mean over masked positions of `-log softmax(logits)[label]`. Unmasked
/// positions are never read.
pub fn masked_nll<F: Real>(trace: &ForwardTrace<F>, labels: &[u32], mask: &[bool]) -> Result<f64, ModelError> {
    let positions = masked_positions(trace, labels, mask)?;
    let total: f64 = positions
        .iter()
        .map(|&i| -log_softmax_row(trace.logits.row(i - trace.first_row))[labels[i] as usize])
        .sum();
    Ok(total / positions.len() as f64)
}

// ---------------------------------------------------------------------------
// backward

/// Gradients keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<F> {
    pub tensors: BTreeMap<String, Array2<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn new() -> Self {
        Gradients { tensors: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: String, g: Array2<F>) {
        self.tensors.insert(name, g);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Elementwise sum; names missing on either side are kept.
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        for (name, g) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(acc) => *acc += g,
                None => {
                    self.tensors.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let f = F::of(factor);
        for g in self.tensors.values_mut() {
            g.mapv_inplace(|v| v * f);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

fn store<F: Real>(grads: &mut Gradients<F>, name: &str, r: &mut LinearGrads<F>) {
    if let Some(dw) = r.dw.take() {
        grads.insert(format!("{name}.weight"), dw);
    }
    if let Some(da) = r.da.take() {
        grads.insert(format!("{name}.lora_a"), da);
    }
    if let Some(db) = r.db.take() {
        grads.insert(format!("{name}.lora_b"), db);
    }
}

#[allow(clippy::too_many_arguments)]
fn block_backward<F: Real>(
    blk: &Block<F>,
    c: &BlockCache<F>,
    dout: Array2<F>,
    n_heads: usize,
    full: bool,
    need_dx: bool,
    prefix: &str,
    grads: &mut Gradients<F>,
) -> Option<Array2<F>> {
    let q0 = c.q0;
    // feed-forward
    if full {
        grads.insert(format!("{prefix}.ff.out.bias"), dout.sum_axis(Axis(0)).insert_axis(Axis(0)));
    }
    let mut r = blk.ff_out.backward_rows(c.g.view(), &c.cfo, dout.view(), true, full, true);
    store(grads, &format!("{prefix}.ff.out"), &mut r);
    let mut dh = r.dx.expect("dx requested");
    dh.zip_mut_with(&c.h, |d, h| *d *= gelu_grad(*h));
    if full {
        grads.insert(format!("{prefix}.ff.in.bias"), dh.sum_axis(Axis(0)).insert_axis(Axis(0)));
    }
    let mut r = blk.ff_in.backward_rows(c.b.view(), &c.cfi, dh.view(), true, full, true);
    store(grads, &format!("{prefix}.ff.in"), &mut r);
    let (dx1_ln, dg2, db2) = ln_backward(r.dx.expect("dx requested").view(), &c.ln2, &blk.ln2_gain);
    if full {
        grads.insert(format!("{prefix}.ln2.gain"), dg2);
        grads.insert(format!("{prefix}.ln2.bias"), db2);
    }
    let dx1 = dout + dx1_ln;

    // attention
    let mut r = blk.o.backward_rows(c.ctx.view(), &c.co, dx1.view(), true, full, true);
    store(grads, &format!("{prefix}.attn.o"), &mut r);
    let dctx = r.dx.expect("dx requested");
    let d = dctx.ncols();
    let dh = d / n_heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let t = c.k.nrows();
    let mut dq = Array2::zeros((dctx.nrows(), d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    let tq = dctx.nrows();
    for (h, tiles) in c.probs.iter().enumerate() {
        let hc = h * dh..(h + 1) * dh;
        for (pc, r0) in tiles.iter().zip((0..tq).step_by(ATTN_CHUNK)) {
            let r1 = (r0 + ATTN_CHUNK).min(tq);
            let kend = q0 + r1;
            let dctx_c = dctx.slice(s![r0..r1, hc.clone()]);
            let mut ds = dctx_c.dot(&c.v.slice(s![..kend, hc.clone()]).t());
            {
                let mut dvh = dv.slice_mut(s![..kend, hc.clone()]);
                dvh += &pc.t().dot(&dctx_c);
            }
            for (mut row, prow) in ds.rows_mut().into_iter().zip(pc.rows()) {
                let dot: F = row.iter().zip(prow.iter()).map(|(a, b)| *a * *b).sum();
                row.zip_mut_with(&prow, |x, pv| *x = *pv * (*x - dot));
            }
            dq.slice_mut(s![r0..r1, hc.clone()]).assign(&(ds.dot(&c.k.slice(s![..kend, hc.clone()])) * scale));
            let mut dkh = dk.slice_mut(s![..kend, hc.clone()]);
            dkh.scaled_add(scale, &ds.t().dot(&c.q.slice(s![r0..r1, hc.clone()])));
        }
    }
    let aq = c.a.slice(s![q0.., ..]);
    let mut rq = blk.q.backward_rows(aq, &c.cq, dq.view(), need_dx, full, true);
    let mut rk = blk.k.backward_rows(c.a.view(), &c.ck, dk.view(), need_dx, full, true);
    let mut rv = blk.v.backward_rows(c.a.view(), &c.cv, dv.view(), need_dx, full, true);
    store(grads, &format!("{prefix}.attn.q"), &mut rq);
    store(grads, &format!("{prefix}.attn.k"), &mut rk);
    store(grads, &format!("{prefix}.attn.v"), &mut rv);
    if !need_dx {
        return None;
    }
    let mut da = rk.dx.expect("dx requested") + rv.dx.expect("dx requested");
    {
        let mut tail = da.slice_mut(s![q0.., ..]);
        tail += &rq.dx.expect("dx requested");
    }
    let (mut dx, dg1, db1) = ln_backward(da.view(), &c.ln1, &blk.ln1_gain);
    if full {
        grads.insert(format!("{prefix}.ln1.gain"), dg1);
        grads.insert(format!("{prefix}.ln1.bias"), db1);
    }
    {
        let mut tail = dx.slice_mut(s![q0.., ..]);
        tail += &dx1;
    }
    Some(dx)
}

/// Exact gradients of [`masked_nll`] for every trainable tensor.
///
/// Returns the loss together with the gradients. Fails with
/// [`ModelError::StaleTrace`] when trainable tensors changed after `trace`
/// was computed.
pub fn backward<F: Real>(
    p: &ModelParams<F>,
    trace: &ForwardTrace<F>,
    labels: &[u32],
    mask: &[bool],
) -> Result<(f64, Gradients<F>), ModelError> {
    if trace.stamp != p.fingerprint() || trace.blocks.len() != p.blocks.len() {
        return Err(ModelError::StaleTrace);
    }
    let positions = masked_positions(trace, labels, mask)?;
    let full = !p.frozen_base;
    let inv = 1.0 / positions.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Array2::<F>::zeros(trace.logits.dim());
    for &i in &positions {
        let r = i - trace.first_row;
        let ls = log_softmax_row(trace.logits.row(r));
        let target = labels[i] as usize;
        loss -= ls[target];
        for (j, v) in dlogits.row_mut(r).iter_mut().enumerate() {
            let onehot = if j == target { 1.0 } else { 0.0 };
            *v += F::of((ls[j].exp() - onehot) * inv);
        }
    }
    loss *= inv;

    let mut grads = Gradients::new();
    let head = p.head.dense();
    if full && !p.head.is_quantized() {
        grads.insert("head.weight".into(), dlogits.t().dot(&trace.z));
    }
    let dz = dlogits.dot(&*head);
    let (mut dx, dg, db) = ln_backward(dz.view(), &trace.lnf, &p.lnf_gain);
    if full {
        grads.insert("ln_f.gain".into(), dg);
        grads.insert("ln_f.bias".into(), db);
    }
    let emb_trainable = full && (!p.tok_emb.is_quantized() || !p.pos_emb.is_quantized());
    for l in (0..p.blocks.len()).rev() {
        let need_dx = l > 0 || emb_trainable;
        match block_backward(
            &p.blocks[l],
            &trace.blocks[l],
            dx,
            p.config.n_heads,
            full,
            need_dx,
            &format!("blocks.{l}"),
            &mut grads,
        ) {
            Some(next) => dx = next,
            None => return Ok((loss, grads)),
        }
    }
    if full && !p.tok_emb.is_quantized() {
        let mut dtok = Array2::zeros(p.tok_emb.shape());
        for (i, &id) in trace.tokens.iter().enumerate() {
            let mut row = dtok.row_mut(id as usize);
            row += &dx.row(i);
        }
        grads.insert("tok_emb".into(), dtok);
    }
    if full && !p.pos_emb.is_quantized() {
        let mut dpos = Array2::zeros(p.pos_emb.shape());
        dpos.slice_mut(s![..dx.nrows(), ..]).assign(&dx);
        grads.insert("pos_emb".into(), dpos);
    }
    Ok((loss, grads))
}

/// Forward then backward on a shifted training instance, computing only the
/// rows from the first masked position onward.
pub fn loss_and_grad<F: Real>(
    p: &ModelParams<F>,
    inputs: &[u32],
    labels: &[u32],
    mask: &[bool],
    mode: Mode<'_>,
) -> Result<(f64, Gradients<F>), ModelError> {
    let first = mask.iter().position(|m| *m).ok_or(ModelError::EmptyMask)?;
    let trace = forward_with(p, inputs, first, mode)?;
    backward(p, &trace, labels, mask)
}

// ---------------------------------------------------------------------------
// checkpoints

/// One serialized tensor: little-endian values, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// `f32`, `f64` or `nf4`.
    pub dtype: String,
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    /// nf4 only: per-block `f32` scales, base64.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<String>,
}

impl TensorRecord {
    pub fn dense<F: Real>(name: &str, a: &Array2<F>) -> Self {
        let mut bytes = Vec::with_capacity(a.len() * 8);
        for v in a.iter() {
            if F::DTYPE == "f32" {
                bytes.extend((v.f64() as f32).to_le_bytes());
            } else {
                bytes.extend(v.f64().to_le_bytes());
            }
        }
        TensorRecord {
            name: name.to_string(),
            shape: [a.nrows(), a.ncols()],
            dtype: F::DTYPE.to_string(),
            data: B64.encode(bytes),
            block_size: None,
            scales: None,
        }
    }

    pub fn nf4(name: &str, q: &QuantizedTensor) -> Self {
        let scales: Vec<u8> = q.scales.iter().flat_map(|s| s.to_le_bytes()).collect();
        TensorRecord {
            name: name.to_string(),
            shape: [q.shape.0, q.shape.1],
            dtype: "nf4".to_string(),
            data: B64.encode(&q.packed),
            block_size: Some(q.block_size),
            scales: Some(B64.encode(scales)),
        }
    }

    fn bytes(&self) -> Result<Vec<u8>, ModelError> {
        B64.decode(&self.data)
            .map_err(|e| ModelError::Checkpoint(format!("{}: bad base64: {e}", self.name)))
    }

    pub fn to_dense<F: Real>(&self) -> Result<Array2<F>, ModelError> {
        let bytes = self.bytes()?;
        let n = self.shape[0] * self.shape[1];
        let values: Vec<F> = match self.dtype.as_str() {
            "f32" if bytes.len() == 4 * n => bytes
                .chunks_exact(4)
                .map(|c| F::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            "f64" if bytes.len() == 8 * n => bytes
                .chunks_exact(8)
                .map(|c| F::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
            "nf4" => return Ok(self.to_nf4()?.dequantize()),
            other => {
                return Err(ModelError::Checkpoint(format!(
                    "{}: dtype {other} with {} bytes for {n} values",
                    self.name,
                    bytes.len()
                )))
            }
        };
        Ok(Array2::from_shape_vec((self.shape[0], self.shape[1]), values).expect("length checked"))
    }

    pub fn to_nf4(&self) -> Result<QuantizedTensor, ModelError> {
        let scales = self
            .scales
            .as_ref()
            .ok_or_else(|| ModelError::Checkpoint(format!("{}: nf4 tensor without scales", self.name)))?;
        let scales = B64
            .decode(scales)
            .map_err(|e| ModelError::Checkpoint(format!("{}: bad base64: {e}", self.name)))?;
        if scales.len() % 4 != 0 {
            return Err(ModelError::Checkpoint(format!("{}: truncated scales", self.name)));
        }
        let q = QuantizedTensor {
            shape: (self.shape[0], self.shape[1]),
            block_size: self.block_size.unwrap_or(0),
            packed: self.bytes()?,
            scales: scales
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        };
        q.validate()?;
        Ok(q)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    config: ModelConfig,
    vocab_hash: String,
    lora: Option<LoraConfig>,
    frozen_base: bool,
    tensors: Vec<TensorRecord>,
}

const MODEL_FORMAT: &str = "xwalk-model/1";

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ModelError> {
    let text = serde_json::to_string(value).map_err(|source| ModelError::Json { path: path.into(), source })?;
    fs::write(path, text).map_err(|source| ModelError::Io { path: path.into(), source })
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| ModelError::Json { path: path.into(), source })
}

/// Serialize config, vocabulary hash and every tensor (adapters included).
pub fn save_checkpoint<F: Real>(p: &ModelParams<F>, vocab_hash: &str, path: &Path) -> Result<(), ModelError> {
    let tensors = p
        .entries()
        .into_iter()
        .map(|(name, e)| match e {
            Entry::Weight(Weight::Nf4(q), _) => TensorRecord::nf4(&name, q),
            e => TensorRecord::dense(&name, &e.dense()),
        })
        .collect();
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        config: p.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        lora: p.lora.clone(),
        frozen_base: p.frozen_base,
        tensors,
    };
    write_json(path, &file)
}

/// Inverse of [`save_checkpoint`]; returns the model and its vocabulary hash.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(ModelParams<F>, String), ModelError> {
    let file: ModelFile = read_json(path)?;
    if file.format != MODEL_FORMAT {
        return Err(ModelError::Checkpoint(format!("unknown model format {:?}", file.format)));
    }
    let mut p = init_model::<F>(&file.config)?;
    if let Some(lora) = &file.lora {
        p = crate::lora::attach(p, lora, 0)?;
    }
    p.frozen_base = file.frozen_base;
    let mut records: BTreeMap<&str, &TensorRecord> = file.tensors.iter().map(|r| (r.name.as_str(), r)).collect();
    for (name, slot) in p.entries_mut() {
        let rec = records
            .remove(name.as_str())
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
        let expect = match &slot {
            EntryMut::Array(a, _) => a.dim(),
            EntryMut::Weight(w, _) => w.shape(),
        };
        if (rec.shape[0], rec.shape[1]) != expect {
            return Err(ModelError::Checkpoint(format!("shape mismatch for {name}")));
        }
        match slot {
            EntryMut::Array(a, _) => *a = rec.to_dense()?,
            EntryMut::Weight(w, _) if rec.dtype == "nf4" => *w = Weight::Nf4(rec.to_nf4()?),
            EntryMut::Weight(w, _) => *w = Weight::Dense(rec.to_dense()?),
        }
    }
    if let Some(extra) = records.keys().next() {
        return Err(ModelError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((p, file.vocab_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 12,
            seed: 3,
        }
    }

    #[test]
    fn config_checks() {
        assert_eq!(ModelConfig::default().head_dim(), 16);
        let bad = ModelConfig { n_heads: 3, ..tiny_config() };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model::<f32>(&tiny_config()).unwrap();
        let b = init_model::<f32>(&tiny_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let c = tiny_config();
        let p = init_model::<f32>(&c).unwrap();
        let (v, t, d, f, l) = (c.vocab_size, c.max_seq_len, c.d_model, c.d_ff, c.n_layers);
        let per_block = 4 * d + 4 * d * d + 2 * d * f + f + d;
        assert_eq!(p.count_all(), v * d + t * d + l * per_block + 2 * d + v * d);
        assert_eq!(p.count_params(|_, _, _| false), 0);
    }

    #[test]
    fn shapes_and_errors() {
        let p = init_model::<f64>(&tiny_config()).unwrap();
        let tr = forward(&p, &[4]).unwrap();
        assert_eq!(tr.logits.dim(), (1, 11));
        assert!(matches!(forward(&p, &[]), Err(ModelError::EmptyInput)));
        assert!(matches!(forward(&p, &[11]), Err(ModelError::BadToken { position: 0, id: 11, .. })));
        assert!(matches!(forward(&p, &[1; 13]), Err(ModelError::TooLong { len: 13, max: 12 })));
    }

    #[test]
    fn uniform_logits_loss_is_ln_v() {
        let mut p = init_model::<f64>(&tiny_config()).unwrap();
        p.head = Weight::Dense(Array2::zeros((11, 8)));
        let tr = forward(&p, &[1, 2, 3]).unwrap();
        let loss = masked_nll(&tr, &[0, 0, 5], &[false, false, true]).unwrap();
        assert!((loss - (11f64).ln()).abs() < 1e-12);
        assert!(matches!(masked_nll(&tr, &[0, 0, 5], &[false; 3]), Err(ModelError::EmptyMask)));
    }

    #[test]
    fn first_row_matches_full_forward() {
        let p = init_model::<f64>(&tiny_config()).unwrap();
        let toks = [2, 5, 7, 1, 9, 3];
        let full = forward(&p, &toks).unwrap();
        let part = forward_with(&p, &toks, 4, Mode::Eval).unwrap();
        for pos in 4..6 {
            let a = full.logits_at(pos).unwrap();
            let b = part.logits_at(pos).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(part.logits_at(3).is_none());
    }

    #[test]
    fn stale_trace_detected() {
        let mut p = init_model::<f64>(&tiny_config()).unwrap();
        let tr = forward(&p, &[1, 2]).unwrap();
        p.tensor_mut("ln_f.bias").unwrap()[[0, 0]] += 1.0;
        assert!(matches!(backward(&p, &tr, &[0, 3], &[false, true]), Err(ModelError::StaleTrace)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = crate::lora::attach(init_model::<f32>(&tiny_config()).unwrap(), &LoraConfig::default(), 1).unwrap();
        save_checkpoint(&p, "abc", &path).unwrap();
        let (q, h) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(h, "abc");
        assert_eq!(p, q);
    }

    fn loss_at(p: &ModelParams<f64>, inp: &[u32], lab: &[u32], mask: &[bool], first: usize, seed: Option<u64>) -> f64 {
        let mut rng = seed.map(seeds::rng);
        let mode = match rng.as_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let tr = forward_with(p, inp, first, mode).unwrap();
        masked_nll(&tr, lab, mask).unwrap()
    }

    /// Largest per-element relative error between analytic and central
    /// finite-difference gradients over every trainable tensor.
    fn max_grad_error(p: &ModelParams<f64>, first: usize, seed: Option<u64>) -> (f64, usize) {
        let inp = [2u32, 5, 7, 1, 9, 3, 4];
        let lab = [5u32, 7, 1, 9, 3, 4, 8];
        let mask = [false, false, false, false, true, false, true];
        let mut rng = seed.map(seeds::rng);
        let mode = match rng.as_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let tr = forward_with(p, &inp, first, mode).unwrap();
        let (_, grads) = backward(p, &tr, &lab, &mask).unwrap();
        let names = p.trainable_names();
        assert_eq!(names.len(), grads.len(), "{names:?}");
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for name in names {
            let g = grads.get(&name).unwrap().clone();
            let shape = g.dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut q = p.clone();
                    q.tensor_mut(&name).unwrap()[[i, j]] += h;
                    let up = loss_at(&q, &inp, &lab, &mask, first, seed);
                    q.tensor_mut(&name).unwrap()[[i, j]] -= 2.0 * h;
                    let down = loss_at(&q, &inp, &lab, &mask, first, seed);
                    let num = (up - down) / (2.0 * h);
                    let ana = g[[i, j]];
                    let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                    worst = worst.max(err);
                    checked += 1;
                }
            }
        }
        (worst, checked)
    }

    fn randomize_b(p: &mut ModelParams<f64>) {
        let mut rng = seeds::rng(99);
        for (_, lin) in p.linears_mut() {
            if let Some(l) = lin.lora.as_mut() {
                l.b = gaussian(&mut rng, l.b.dim(), 0.5);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut p = crate::lora::attach(init_model::<f64>(&tiny_config()).unwrap(), &LoraConfig { rank: 2, ..Default::default() }, 5).unwrap();
        randomize_b(&mut p);
        p.frozen_base = false;
        let (err, n) = max_grad_error(&p, 0, None);
        assert!(err < 1e-4, "max rel err {err} over {n}");
        let (err, _) = max_grad_error(&p, 4, Some(17));
        assert!(err < 1e-4, "dropout: max rel err {err}");
        let mut p = crate::nf4::quantize_frozen(p, 16).unwrap();
        randomize_b(&mut p);
        let (err, n) = max_grad_error(&p, 4, None);
        assert_eq!(n, 2 * 4 * 2 * (2 * 8));
        assert!(err < 1e-4, "nf4: max rel err {err}");
    }
}
