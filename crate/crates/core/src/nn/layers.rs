//! Parameterised building blocks recorded onto a [`Graph`].
//!
//! Feature maps are `[channels, tokens]` matrices: one column per image
//! column, so every block here is position-wise or attends over columns
//! without positional information, and all of them commute with circular
//! column shifts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthPadding {
    Circular,
    None,
}

/// Geometry of a 2-D convolution over `[c, h, w]` feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub width_padding: WidthPadding,
}

impl Conv2dSpec {
    /// Width-1 kernel with unit width stride, the only shape the encoder uses.
    pub fn column(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        stride_h: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w: 1,
            stride_h,
            stride_w: 1,
            width_padding: WidthPadding::None,
        }
    }

    /// Rejects geometries whose output would not keep the input width, which
    /// would break the column-shift property the descriptor relies on.
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
        {
            return Err(Error::Config(format!("degenerate convolution {self:?}")));
        }
        if self.stride_h == 0 {
            return Err(Error::Config("height stride must be >= 1".into()));
        }
        if self.stride_w != 1 {
            return Err(Error::EquivarianceViolation(format!(
                "width stride {} would not preserve width",
                self.stride_w
            )));
        }
        if self.kernel_w > 1 && self.width_padding != WidthPadding::Circular {
            return Err(Error::EquivarianceViolation(format!(
                "kernel width {} needs circular width padding",
                self.kernel_w
            )));
        }
        Ok(())
    }

    pub fn output_height(&self, h: usize) -> Result<usize> {
        if h < self.kernel_h {
            return Err(Error::ShapeMismatch {
                expected: format!("height >= {}", self.kernel_h),
                found: format!("height {h}"),
            });
        }
        Ok((h - self.kernel_h) / self.stride_h + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let bound = fan_in_bound(fan_in);
        // He-uniform: every convolution here feeds a ReLU
        let weight = params.add_uniform(
            format!("{name}.weight"),
            &[
                spec.out_channels,
                spec.in_channels,
                spec.kernel_h,
                spec.kernel_w,
            ],
            6f64.sqrt() * bound,
            rng,
        );
        let bias = params.add_uniform(format!("{name}.bias"), &[spec.out_channels], bound, rng);
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Var {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        g.conv2d(x, w, b, self.spec.stride_h)
    }

    pub fn param_count(spec: &Conv2dSpec) -> usize {
        spec.out_channels * spec.in_channels * spec.kernel_h * spec.kernel_w + spec.out_channels
    }
}

/// Position-wise affine map `[in, n] -> [out, n]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(inputs);
        let weight = params.add_uniform(format!("{name}.weight"), &[outputs, inputs], bound, rng);
        let bias = params.add_uniform(format!("{name}.bias"), &[outputs], bound, rng);
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Var {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        g.linear(w, x, b)
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }
}

/// Normalises each column over its channels.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Var {
        let gamma = g.param(params, self.gamma);
        let beta = g.param(params, self.beta);
        g.layer_norm_cols(x, gamma, beta, T::from_f64(LAYER_NORM_EPS))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        let cfg = Self { dim, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Multi-head self-attention with query, key and value all projected from
/// the same input. No positional encoding is added.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadSelfAttention {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(Self {
            cfg,
            query: Linear::new(params, &format!("{name}.q"), d, d, rng),
            key: Linear::new(params, &format!("{name}.k"), d, d, rng),
            value: Linear::new(params, &format!("{name}.v"), d, d, rng),
            output: Linear::new(params, &format!("{name}.o"), d, d, rng),
        })
    }

    /// Returns the output and the per-head `[n, n]` attention weights
    /// (row `i` holds the weights token `i` assigns to every token).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        x: Var,
    ) -> (Var, Vec<Var>) {
        let dk = self.cfg.head_dim();
        let q = self.query.forward(g, params, x);
        let k = self.key.forward(g, params, x);
        let v = self.value.forward(g, params, x);
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_rows(q, h * dk, dk);
            let kh = g.slice_rows(k, h * dk, dk);
            let vh = g.slice_rows(v, h * dk, dk);
            let logits = g.matmul(qh, true, kh, false);
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits);
            heads.push(g.matmul(vh, false, attn, true));
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_rows(&heads)
        };
        (self.output.forward(g, params, merged), weights)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Var {
        self.forward_with_weights(g, params, x).0
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub attention: AttentionConfig,
    pub ffn_mult: usize,
}

/// Post-norm encoder layer: `LN(x + MHSA(x))` then `LN(y + FFN(y))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: MultiHeadSelfAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cfg: TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be >= 1".into()));
        }
        let d = cfg.attention.dim;
        let hidden = d * cfg.ffn_mult;
        Ok(Self {
            attn: MultiHeadSelfAttention::new(params, &format!("{name}.attn"), cfg.attention, rng)?,
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), d),
            ffn_in: Linear::new(params, &format!("{name}.ffn_in"), d, hidden, rng),
            ffn_out: Linear::new(params, &format!("{name}.ffn_out"), hidden, d, rng),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), d),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Var {
        let a = self.attn.forward(g, params, x);
        let r1 = g.add(x, a);
        let y = self.norm1.forward(g, params, r1);
        let h = self.ffn_in.forward(g, params, y);
        let h = g.relu(h);
        let f = self.ffn_out.forward(g, params, h);
        let r2 = g.add(y, f);
        self.norm2.forward(g, params, r2)
    }

    pub fn param_count(dim: usize, ffn_mult: usize) -> usize {
        let hidden = dim * ffn_mult;
        MultiHeadSelfAttention::param_count(dim)
            + 4 * dim
            + Linear::param_count(dim, hidden)
            + Linear::param_count(hidden, dim)
    }
}
