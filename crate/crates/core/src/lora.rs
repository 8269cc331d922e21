//! Low-rank adapters: `h = W0·x + (alpha/r)·B·(A·x)` on the attention projections.

use std::borrow::Cow;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::lm::{ModelError, ModelParams, TensorRecord};
use crate::nf4::QuantizedTensor;
use crate::real::Real;
use crate::seeds;

/// Attention projection that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetModule {
    Q,
    K,
    V,
    O,
}

impl TargetModule {
    pub const ALL: [TargetModule; 4] = [TargetModule::Q, TargetModule::K, TargetModule::V, TargetModule::O];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetModule::Q => "q",
            TargetModule::K => "k",
            TargetModule::V => "v",
            TargetModule::O => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let s = s.trim().trim_end_matches("_proj");
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ModelError::UnknownTarget(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target_modules: Vec<TargetModule>,
}

impl Default for LoraConfig {
    /// Toy scale: rank 8, alpha 16 (scaling 2).
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            dropout: 0.1,
            target_modules: TargetModule::ALL.to_vec(),
        }
    }
}

impl LoraConfig {
    /// Rank 32, alpha 64, as used with a 7B base model.
    pub fn large() -> Self {
        LoraConfig { rank: 32, alpha: 64.0, ..Default::default() }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rank == 0 {
            return Err(ModelError::Config("lora.rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::Config("lora.alpha must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("lora.dropout must be in [0, 1)".into()));
        }
        if self.target_modules.is_empty() {
            return Err(ModelError::Config("lora.target_modules is empty".into()));
        }
        Ok(())
    }

    pub fn targets(&self, t: TargetModule) -> bool {
        self.target_modules.contains(&t)
    }
}

/// Base weight of a linear map, `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight<F> {
    Dense(Array2<F>),
    Nf4(QuantizedTensor),
}

impl<F: Real> Weight<F> {
    /// Dense view; quantized weights are dequantized on every call.
    pub fn dense(&self) -> Cow<'_, Array2<F>> {
        match self {
            Weight::Dense(w) => Cow::Borrowed(w),
            Weight::Nf4(q) => Cow::Owned(q.dequantize()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Weight::Dense(w) => w.dim(),
            Weight::Nf4(q) => q.shape,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Weight::Nf4(_))
    }
}

/// Trainable factors: `a` is `r × in`, `b` is `out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors<F> {
    pub a: Array2<F>,
    pub b: Array2<F>,
    pub alpha: f64,
    pub dropout: f64,
}

impl<F: Real> LoraFactors<F> {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear<F> {
    pub weight: Weight<F>,
    pub lora: Option<LoraFactors<F>>,
}

/// Activations kept by a linear forward for its backward.
#[derive(Debug, Clone)]
pub(crate) struct LinearCache<F> {
    /// Dropout mask already divided by the keep probability.
    mask: Option<Array2<F>>,
    /// `dropout(x)·Aᵀ`.
    u: Option<Array2<F>>,
}

pub(crate) struct LinearGrads<F> {
    pub dx: Option<Array2<F>>,
    pub dw: Option<Array2<F>>,
    pub da: Option<Array2<F>>,
    pub db: Option<Array2<F>>,
}

impl<F: Real> AdaptedLinear<F> {
    pub fn dense(w: Array2<F>) -> Self {
        AdaptedLinear { weight: Weight::Dense(w), lora: None }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().1
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().0
    }

    /// `W0 + (alpha/r)·B·A`; the layer itself is untouched.
    pub fn merge(&self) -> Array2<F> {
        let mut w = self.weight.dense().into_owned();
        if let Some(l) = &self.lora {
            w.scaled_add(F::of(l.scaling()), &l.b.dot(&l.a));
        }
        w
    }

    /// Row-batched forward: `x` is `rows × in`. Dropout on the bypass input
    /// is applied only when `rng` is given.
    pub(crate) fn forward_rows(
        &self,
        x: ArrayView2<F>,
        rng: Option<&mut dyn RngCore>,
    ) -> (Array2<F>, LinearCache<F>) {
        let w = self.weight.dense();
        let mut y = x.dot(&w.t());
        let mut cache = LinearCache { mask: None, u: None };
        if let Some(l) = &self.lora {
            let u = match rng {
                Some(rng) if l.dropout > 0.0 => {
                    let keep = F::of(1.0 / (1.0 - l.dropout));
                    let cut = (l.dropout * 4_294_967_296.0).min(u32::MAX as f64) as u32;
                    let mask = Array2::from_shape_simple_fn(x.dim(), || {
                        if rng.next_u32() < cut {
                            F::zero()
                        } else {
                            keep
                        }
                    });
                    let u = (&x * &mask).dot(&l.a.t());
                    cache.mask = Some(mask);
                    u
                }
                _ => x.dot(&l.a.t()),
            };
            y.scaled_add(F::of(l.scaling()), &u.dot(&l.b.t()));
            cache.u = Some(u);
        }
        (y, cache)
    }

    pub(crate) fn backward_rows(
        &self,
        x: ArrayView2<F>,
        cache: &LinearCache<F>,
        dy: ArrayView2<F>,
        need_dx: bool,
        need_dw: bool,
        need_lora: bool,
    ) -> LinearGrads<F> {
        let mut out = LinearGrads { dx: None, dw: None, da: None, db: None };
        if need_dx {
            out.dx = Some(dy.dot(&*self.weight.dense()));
        }
        if need_dw && !self.weight.is_quantized() {
            out.dw = Some(dy.t().dot(&x));
        }
        if let (Some(l), Some(u)) = (&self.lora, &cache.u) {
            if !need_lora && !need_dx {
                return out;
            }
            let s = F::of(l.scaling());
            // du = s·dy·B  (rows × r)
            let du = dy.dot(&l.b) * s;
            if need_lora {
                out.db = Some(dy.t().dot(u) * s);
                out.da = Some(match &cache.mask {
                    Some(m) => du.t().dot(&(&x * m)),
                    None => du.t().dot(&x),
                });
            }
            if let Some(dx) = out.dx.as_mut() {
                let dxd = du.dot(&l.a);
                match &cache.mask {
                    Some(m) => *dx += &(&dxd * m),
                    None => *dx += &dxd,
                }
            }
        }
        out
    }
}

/// Single-vector form of the adapted projection (no dropout).
pub fn adapted_forward<F: Real>(layer: &AdaptedLinear<F>, x: &[F]) -> Result<Vec<F>, ModelError> {
    if x.len() != layer.in_features() {
        return Err(ModelError::DimensionMismatch {
            expected: layer.in_features(),
            actual: x.len(),
        });
    }
    let xm = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let (y, _) = layer.forward_rows(xm, None);
    Ok(y.index_axis(Axis(0), 0).to_vec())
}

/// Attach fresh adapters to the targeted projections of every layer and mark
/// the base frozen. `A ~ N(0, 1/in)`, `B = 0`.
pub fn attach<F: Real>(mut model: ModelParams<F>, cfg: &LoraConfig, seed: u64) -> Result<ModelParams<F>, ModelError> {
    cfg.validate()?;
    let mut rng = seeds::labeled_rng(seed, "lora-init");
    for block in model.blocks.iter_mut() {
        for t in TargetModule::ALL {
            if !cfg.targets(t) {
                continue;
            }
            let lin = block.projection_mut(t);
            let (out_f, in_f) = lin.weight.shape();
            let normal = Normal::new(0.0, 1.0 / (in_f as f64).sqrt()).expect("finite std");
            let a = Array2::from_shape_simple_fn((cfg.rank, in_f), || F::of(normal.sample(&mut rng)));
            lin.lora = Some(LoraFactors {
                a,
                b: Array2::zeros((out_f, cfg.rank)),
                alpha: cfg.alpha,
                dropout: cfg.dropout,
            });
        }
    }
    model.lora = Some(cfg.clone());
    model.frozen_base = true;
    Ok(model)
}

/// Names of the adapter tensors, in checkpoint order.
pub fn trainable_tensors<F: Real>(model: &ModelParams<F>) -> Vec<String> {
    model
        .linears()
        .into_iter()
        .filter(|(_, l)| l.lora.is_some())
        .flat_map(|(name, _)| [format!("{name}.lora_a"), format!("{name}.lora_b")])
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterFile {
    format: String,
    lora: LoraConfig,
    base_hash: String,
    tensors: Vec<TensorRecord>,
}

const ADAPTER_FORMAT: &str = "xwalk-adapter/1";

pub fn save_adapters<F: Real>(model: &ModelParams<F>, path: &Path) -> Result<(), ModelError> {
    let lora = model.lora.clone().ok_or(ModelError::NoAdapters)?;
    let mut tensors = Vec::new();
    for (name, lin) in model.linears() {
        if let Some(l) = &lin.lora {
            tensors.push(TensorRecord::dense(&format!("{name}.lora_a"), &l.a));
            tensors.push(TensorRecord::dense(&format!("{name}.lora_b"), &l.b));
        }
    }
    let file = AdapterFile {
        format: ADAPTER_FORMAT.into(),
        lora,
        base_hash: model.frozen_hash(),
        tensors,
    };
    crate::lm::write_json(path, &file)
}

/// Load adapters saved by [`save_adapters`] onto a base with the same frozen hash.
pub fn load_adapters<F: Real>(model: ModelParams<F>, path: &Path) -> Result<ModelParams<F>, ModelError> {
    let file: AdapterFile = crate::lm::read_json(path)?;
    if file.format != ADAPTER_FORMAT {
        return Err(ModelError::Checkpoint(format!("unknown adapter format {:?}", file.format)));
    }
    let base_hash = model.frozen_hash();
    if file.base_hash != base_hash {
        return Err(ModelError::BaseMismatch { expected: file.base_hash, actual: base_hash });
    }
    let mut model = attach(model, &file.lora, 0)?;
    for rec in &file.tensors {
        let value: Array2<F> = rec.to_dense()?;
        let slot = model
            .tensor_mut(&rec.name)
            .ok_or_else(|| ModelError::Checkpoint(format!("adapter tensor {} has no slot", rec.name)))?;
        if slot.dim() != value.dim() {
            return Err(ModelError::Checkpoint(format!("shape mismatch for {}", rec.name)));
        }
        *slot = value;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn layer(w: Array2<f64>, a: Array2<f64>, b: Array2<f64>, alpha: f64) -> AdaptedLinear<f64> {
        AdaptedLinear {
            weight: Weight::Dense(w),
            lora: Some(LoraFactors { a, b, alpha, dropout: 0.0 }),
        }
    }

    #[test]
    fn zero_bypass_is_identity() {
        let l = layer(Array2::eye(2), Array2::eye(2), Array2::zeros((2, 2)), 4.0);
        assert_eq!(adapted_forward(&l, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn scaled_bypass() {
        let l = layer(Array2::eye(2), Array2::eye(2), Array2::eye(2), 4.0);
        assert_eq!(adapted_forward(&l, &[1.0, 2.0]).unwrap(), vec![3.0, 6.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let l = layer(Array2::eye(2), Array2::eye(2), Array2::eye(2), 4.0);
        assert!(matches!(
            adapted_forward(&l, &[1.0]),
            Err(ModelError::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn merge_doubles_with_alpha() {
        let w = array![[1.0, 0.5], [0.0, 2.0]];
        let a = array![[0.3, -0.2]];
        let b = array![[1.0], [0.5]];
        let m1 = layer(w.clone(), a.clone(), b.clone(), 1.0).merge();
        let m2 = layer(w.clone(), a, b, 2.0).merge();
        let d1 = &m1 - &w;
        let d2 = &m2 - &w;
        for (x, y) in d1.iter().zip(d2.iter()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn target_parsing() {
        assert_eq!(TargetModule::parse("q_proj").unwrap(), TargetModule::Q);
        assert!(matches!(TargetModule::parse("gate"), Err(ModelError::UnknownTarget(_))));
    }

    #[test]
    fn config_validation() {
        assert!(LoraConfig::default().validate().is_ok());
        assert_eq!(LoraConfig::default().scaling(), 2.0);
        assert_eq!(LoraConfig::large().scaling(), 2.0);
        assert!(LoraConfig { rank: 0, ..Default::default() }.validate().is_err());
        assert!(LoraConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
    }
}
