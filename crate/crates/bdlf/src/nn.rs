//! Small building blocks recorded onto the tape: affine layers, strided 3x3
//! convolutions via im2col, and layer normalization with learnable gain/bias.

use rand_chacha::ChaCha8Rng;

use crate::params::{self, ParamId, Params};
use crate::tape::{Graph, NodeId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = params.register(
            format!("{name}.w"),
            params::fan_in_normal(rng, &[in_dim, out_dim], in_dim),
        );
        let b = params.register(format!("{name}.b"), params::zeros(&[1, out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    /// A layer whose initial output is exactly zero (weights and bias zero);
    /// coupling subnets start as the identity map this way.
    pub fn new_zeroed(params: &mut Params, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = params.register(format!("{name}.w"), params::zeros(&[in_dim, out_dim]));
        let b = params.register(format!("{name}.b"), params::zeros(&[1, out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.p(self.w);
        let b = g.p(self.b);
        let xw = g.tape.matmul(x, w);
        g.tape.add_rowvec(xw, b)
    }
}

///3x3 convolution with padding 1, arbitrary stride, as im2col + matmul.
/// The kernel is stored flat as `[c_out, c_in * 9]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let fan_in = c_in * 9;
        let w = params.register(
            format!("{name}.w"),
            params::fan_in_normal(rng, &[c_out, fan_in], fan_in),
        );
        let b = params.register(format!("{name}.b"), params::zeros(&[1, c_out]));
        Self { w, b, c_in, c_out, stride }
    }

    pub fn new_zeroed(params: &mut Params, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = params.register(format!("{name}.w"), params::zeros(&[c_out, c_in * 9]));
        let b = params.register(format!("{name}.b"), params::zeros(&[1, c_out]));
        Self { w, b, c_in, c_out, stride: 1 }
    }

    /// `[n, c_in, h, w] -> [n, c_out, oh, ow]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shape = g.tape.value(x).shape().to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let oh = (h + 2 - 3) / self.stride + 1;
        let ow = (w + 2 - 3) / self.stride + 1;
        let cols = g.tape.im2col(x, 3, 3, self.stride, 1);
        let wp = g.p(self.w);
        let bp = g.p(self.b);
        let wt = g.tape.transpose(wp);
        let y = g.tape.matmul(cols, wt);
        let y = g.tape.add_rowvec(y, bp);
        let y = g.tape.reshape(y, &[n, oh, ow, self.c_out]);
        g.tape.permute(y, &[0, 3, 1, 2])
    }
}

/// Layer normalization across the feature axis with learnable gain and bias.
/// For NCHW inputs the normalization runs over channels at each spatial site.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        let gamma = params.register(format!("{name}.gamma"), params::ones(&[1, dim]));
        let beta = params.register(format!("{name}.beta"), params::zeros(&[1, dim]));
        Self { gamma, beta, dim }
    }

    /// Normalize each row of a `[n, d]` value.
    pub fn forward_rows(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let d = g.tape.value(x).shape()[1];
        assert_eq!(d, self.dim, "layer norm width");
        let t = &mut g.tape;
        let s = t.sum_cols(x);
        let neg_mean = t.scale(s, -1.0 / d as f64);
        let xc = t.add_colvec(x, neg_mean);
        let sq = t.mul(xc, xc);
        let var = t.sum_cols(sq);
        let var = t.scale(var, 1.0 / d as f64);
        let var = t.add_scalar(var, LAYER_NORM_EPS);
        let std = t.sqrt(var);
        let xn = t.div_colvec(xc, std);
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        let y = g.tape.mul_rowvec(xn, gamma);
        g.tape.add_rowvec(y, beta)
    }

    /// Normalize across channels per spatial site of a `[n, c, h, w]` value.
    pub fn forward_nchw(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shape = g.tape.value(x).shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.dim, "layer norm channels");
        let p = g.tape.permute(x, &[0, 2, 3, 1]);
        let rows = g.tape.reshape(p, &[n * h * w, c]);
        let y = self.forward_rows(g, rows);
        let y = g.tape.reshape(y, &[n, h, w, c]);
        g.tape.permute(y, &[0, 3, 1, 2])
    }
}

/// Global average pooling `[n, c, h, w] -> [n, c]`.
pub fn gap(g: &mut Graph, x: NodeId) -> NodeId {
    let shape = g.tape.value(x).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let rows = g.tape.reshape(x, &[n * c, h * w]);
    let s = g.tape.sum_cols(rows);
    let s = g.tape.scale(s, 1.0 / (h * w) as f64);
    g.tape.reshape(s, &[n, c])
}
