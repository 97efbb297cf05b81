use ndarray::{Array1, Array2};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Numeric type the network runs in: `f32` for training and inference,
/// `f64` for gradient checks.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Float
    + FromPrimitive
    + NumAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: ndarray::LinalgScalar
        + ndarray::ScalarOperand
        + Float
        + FromPrimitive
        + NumAssign
        + std::fmt::Debug
        + Send
        + Sync
        + 'static
{
}

pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("literal representable")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Covariate slots per token.
    pub d_max: usize,
    /// Only 0 is supported; kept so configs round-trip.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            ffn_dim: 128,
            d_max: 16,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_dim == 0 || self.d_max == 0 {
            return Err(Error::config("ffn_dim and d_max must be positive"));
        }
        if self.dropout != 0.0 {
            return Err(Error::config("dropout is not supported; set it to 0"));
        }
        Ok(())
    }

    /// Token width: covariate slots, treatment flag, outcome, query flag.
    pub fn input_dim(&self) -> usize {
        self.d_max + 3
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    pub config: ModelConfig,
    pub embed_w: Array2<T>,
    pub embed_b: Array1<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Array1<T>,
    pub final_bias: Array1<T>,
    pub head_w: Array1<T>,
    pub head_b: Array1<T>,
}

/// Name and shape of one registered tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.ffn_dim;
        let layer = || LayerParams {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        };
        ModelParameters {
            config: config.clone(),
            embed_w: Array2::zeros((config.input_dim(), d)),
            embed_b: Array1::zeros(d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_gain: Array1::zeros(d),
            final_bias: Array1::zeros(d),
            head_w: Array1::zeros(d),
            head_b: Array1::zeros(1),
        }
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)` (residual projections
    /// further by `1/sqrt(2·n_layers)`), unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = rng_from_seed(seed);
        let residual = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let mut fill = |a: &mut [T], fan_in: usize, extra: f64| {
            let scale = extra / (fan_in as f64).sqrt();
            for v in a.iter_mut() {
                *v = lit(scale * rng.sample::<f64, _>(StandardNormal));
            }
        };
        let d = config.d_model;
        fill(p.embed_w.as_slice_mut().unwrap(), config.input_dim(), 1.0);
        for l in &mut p.layers {
            l.ln1_gain.fill(T::one());
            l.ln2_gain.fill(T::one());
            fill(l.wq.as_slice_mut().unwrap(), d, 1.0);
            fill(l.wk.as_slice_mut().unwrap(), d, 1.0);
            fill(l.wv.as_slice_mut().unwrap(), d, 1.0);
            fill(l.wo.as_slice_mut().unwrap(), d, residual);
            fill(l.w1.as_slice_mut().unwrap(), d, 1.0);
            fill(l.w2.as_slice_mut().unwrap(), config.ffn_dim, residual);
        }
        p.final_gain.fill(T::one());
        fill(p.head_w.as_slice_mut().unwrap(), d, 1.0);
        Ok(p)
    }

    /// Registry of `(name, shape, data)` in a fixed order shared by
    /// checkpoints, the optimizer and gradient checks.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        fn entry<T, D: ndarray::Dimension>(name: String, a: &ndarray::Array<T, D>) -> (String, Vec<usize>, &[T]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let mut out = vec![entry("embed.w".into(), &self.embed_w), entry("embed.b".into(), &self.embed_b)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(entry(format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push(entry(format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push(entry(format!("layer{i}.wq"), &l.wq));
            out.push(entry(format!("layer{i}.bq"), &l.bq));
            out.push(entry(format!("layer{i}.wk"), &l.wk));
            out.push(entry(format!("layer{i}.bk"), &l.bk));
            out.push(entry(format!("layer{i}.wv"), &l.wv));
            out.push(entry(format!("layer{i}.bv"), &l.bv));
            out.push(entry(format!("layer{i}.wo"), &l.wo));
            out.push(entry(format!("layer{i}.bo"), &l.bo));
            out.push(entry(format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push(entry(format!("layer{i}.ln2_bias"), &l.ln2_bias));
            out.push(entry(format!("layer{i}.w1"), &l.w1));
            out.push(entry(format!("layer{i}.b1"), &l.b1));
            out.push(entry(format!("layer{i}.w2"), &l.w2));
            out.push(entry(format!("layer{i}.b2"), &l.b2));
        }
        out.push(entry("final.gain".into(), &self.final_gain));
        out.push(entry("final.bias".into(), &self.final_bias));
        out.push(entry("head.w".into(), &self.head_w));
        out.push(entry("head.b".into(), &self.head_b));
        out
    }

    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        self.named_tensors()
            .into_iter()
            .map(|(name, shape, _)| TensorInfo { name, shape })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.named_tensors().into_iter().map(|(_, _, d)| d).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.embed_w.as_slice_mut().unwrap(),
            self.embed_b.as_slice_mut().unwrap(),
        ];
        for l in self.layers.iter_mut() {
            out.extend([
                l.ln1_gain.as_slice_mut().unwrap(),
                l.ln1_bias.as_slice_mut().unwrap(),
                l.wq.as_slice_mut().unwrap(),
                l.bq.as_slice_mut().unwrap(),
                l.wk.as_slice_mut().unwrap(),
                l.bk.as_slice_mut().unwrap(),
                l.wv.as_slice_mut().unwrap(),
                l.bv.as_slice_mut().unwrap(),
                l.wo.as_slice_mut().unwrap(),
                l.bo.as_slice_mut().unwrap(),
                l.ln2_gain.as_slice_mut().unwrap(),
                l.ln2_bias.as_slice_mut().unwrap(),
                l.w1.as_slice_mut().unwrap(),
                l.b1.as_slice_mut().unwrap(),
                l.w2.as_slice_mut().unwrap(),
                l.b2.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([
            self.final_gain.as_slice_mut().unwrap(),
            self.final_bias.as_slice_mut().unwrap(),
            self.head_w.as_slice_mut().unwrap(),
            self.head_b.as_slice_mut().unwrap(),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for a in self.tensors_mut() {
            for x in a.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        let mut out = ModelParameters::<U>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from(*s).expect("cast between floats");
            }
        }
        out
    }
}
