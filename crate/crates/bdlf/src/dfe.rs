//! Detail feature extraction: a stack of invertible affine-coupling blocks
//! with layer normalization, half-channel pooling, and a cross-modal
//! cross-attention step producing the detail embedding, plus its losses.
//!
//! The coupling map splits channels in half and updates one half from
//! functions of the other:
//!
//! ```text
//! y2 = x2 + f1(x1)
//! y1 = f2(y2) + x1 * exp(f3(y2))
//! out = layer_norm(concat(y1, y2))
//! ```
//!
//! The pre-normalization map has the closed-form inverse
//! `x1 = (y1 - f2(y2)) * exp(-f3(y2))`, `x2 = y2 - f1(x1)`, implemented here
//! on plain arrays (generic over `f32`/`f64`) so invertibility can be checked
//! independently of the tape path that training uses.

use ndarray::{ArrayD, Axis, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::{self, LossError};
use crate::nn::{gap, Conv2d, LayerNorm, Linear};
use crate::params::{ParamId, Params};
use crate::tape::{Graph, NodeId};

/// Default coupling-stack depth; accuracy plateaus there in the depth sweep.
pub const DEFAULT_INN_BLOCKS: usize = 6;

const SUBNET_LEAK: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DfeError {
    #[error("channel count {0} must be even for the half-channel split")]
    OddChannels(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("labels differ between modality halves at pair {0}")]
    LabelMismatch(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
}

// ── Coupling subnets ────────────────────────────────────────────────────

enum SubnetLayers {
    Flat { l1: Linear, l2: Linear },
    Conv { c1: Conv2d, c2: Conv2d },
}

/// Two-layer map on the half-channel slice. The final layer starts zeroed so
/// a fresh stack is the identity (pre-normalization). `bounded` routes the
/// output through tanh, keeping the exponential scale well behaved; that is
/// used for the scale branch only.
pub struct CouplingSubnet {
    layers: SubnetLayers,
    bounded: bool,
}

impl CouplingSubnet {
    fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        half: usize,
        flat: bool,
        bounded: bool,
    ) -> Self {
        let layers = if flat {
            SubnetLayers::Flat {
                l1: Linear::new(params, rng, &format!("{name}.l1"), half, half),
                l2: Linear::new_zeroed(params, &format!("{name}.l2"), half, half),
            }
        } else {
            SubnetLayers::Conv {
                c1: Conv2d::new(params, rng, &format!("{name}.c1"), half, half, 1),
                c2: Conv2d::new_zeroed(params, &format!("{name}.c2"), half, half),
            }
        };
        Self { layers, bounded }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = match &self.layers {
            SubnetLayers::Flat { l1, l2 } => {
                let h = l1.forward(g, x);
                let h = g.tape.leaky_relu(h, SUBNET_LEAK);
                l2.forward(g, h)
            }
            SubnetLayers::Conv { c1, c2 } => {
                let h = c1.forward(g, x);
                let h = g.tape.leaky_relu(h, SUBNET_LEAK);
                c2.forward(g, h)
            }
        };
        if self.bounded {
            g.tape.tanh(h)
        } else {
            h
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match &self.layers {
            SubnetLayers::Flat { l1, l2 } => vec![l1.w, l1.b, l2.w, l2.b],
            SubnetLayers::Conv { c1, c2 } => vec![c1.w, c1.b, c2.w, c2.b],
        }
    }

    fn plain<T: PlainFloat>(&self, params: &Params) -> PlainSubnet<T> {
        let (w1, b1, w2, b2, conv) = match &self.layers {
            SubnetLayers::Flat { l1, l2 } => (l1.w, l1.b, l2.w, l2.b, false),
            SubnetLayers::Conv { c1, c2 } => (c1.w, c1.b, c2.w, c2.b, true),
        };
        PlainSubnet {
            w1: cast(params.value(w1)),
            b1: cast(params.value(b1)),
            w2: cast(params.value(w2)),
            b2: cast(params.value(b2)),
            conv,
            bounded: self.bounded,
        }
    }
}

// ── Plain (tape-free) evaluation, generic over float width ─────────────

pub trait PlainFloat: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
}

impl PlainFloat for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl PlainFloat for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn cast<T: PlainFloat>(a: &ArrayD<f64>) -> ArrayD<T> {
    a.mapv(T::from_f64)
}

/// Snapshot of one coupling subnet for tape-free evaluation.
pub struct PlainSubnet<T> {
    w1: ArrayD<T>,
    b1: ArrayD<T>,
    w2: ArrayD<T>,
    b2: ArrayD<T>,
    conv: bool,
    bounded: bool,
}

fn plain_conv3x3_same<T: PlainFloat>(x: &ArrayD<T>, wflat: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    let x = x.view().into_dimensionality::<Ix4>().expect("NCHW");
    let w = wflat.view().into_dimensionality::<Ix2>().unwrap();
    let (n, cin, h, wd) = x.dim();
    let cout = w.nrows();
    let mut out = ndarray::Array4::<T>::zeros((n, cout, h, wd));
    for ni in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xw in 0..wd {
                    let mut acc = b[[0, co]];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xw as isize + kx as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc = acc
                                        + x[[ni, ci, iy as usize, ix as usize]]
                                            * w[[co, (ci * 3 + ky) * 3 + kx]];
                                }
                            }
                        }
                    }
                    out[[ni, co, y, xw]] = acc;
                }
            }
        }
    }
    out.into_dyn()
}

impl<T: PlainFloat> PlainSubnet<T> {
    fn forward(&self, x: &ArrayD<T>) -> ArrayD<T> {
        let leak = T::from_f64(SUBNET_LEAK);
        let act = |h: ArrayD<T>| h.mapv(|v| if v > T::zero() { v } else { leak * v });
        let h = if self.conv {
            let h = act(plain_conv3x3_same(x, &self.w1, &self.b1));
            plain_conv3x3_same(&h, &self.w2, &self.b2)
        } else {
            let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
            let w1 = self.w1.view().into_dimensionality::<Ix2>().unwrap();
            let mut h = x2.dot(&w1).into_dyn();
            h = &h + &self.b1;
            let h = act(h);
            let h2 = h.view().into_dimensionality::<Ix2>().unwrap();
            let w2 = self.w2.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = h2.dot(&w2).into_dyn();
            out = &out + &self.b2;
            out
        };
        if self.bounded {
            h.mapv(|v| v.tanh())
        } else {
            h
        }
    }
}

/// Tape-free snapshot of one coupling block (without its normalization).
pub struct PlainCoupling<T> {
    f1: PlainSubnet<T>,
    f2: PlainSubnet<T>,
    f3: PlainSubnet<T>,
    half: usize,
}

fn split_channels<T: Clone>(x: &ArrayD<T>, half: usize) -> (ArrayD<T>, ArrayD<T>) {
    let a = x.slice_axis(Axis(1), ndarray::Slice::from(0..half)).to_owned();
    let b = x
        .slice_axis(Axis(1), ndarray::Slice::from(half..2 * half))
        .to_owned();
    (a, b)
}

fn concat_channels<T: Clone>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap()
}

impl<T: PlainFloat> PlainCoupling<T> {
    /// Pre-normalization coupling map.
    pub fn forward_pre_ln(&self, x: &ArrayD<T>) -> ArrayD<T> {
        let (x1, x2) = split_channels(x, self.half);
        let y2 = &x2 + &self.f1.forward(&x1);
        let scale = self.f3.forward(&y2).mapv(|v| v.exp());
        let y1 = &self.f2.forward(&y2) + &(&x1 * &scale);
        concat_channels(&y1, &y2)
    }

    /// Closed-form inverse of [`PlainCoupling::forward_pre_ln`].
    pub fn inverse_pre_ln(&self, y: &ArrayD<T>) -> ArrayD<T> {
        let (y1, y2) = split_channels(y, self.half);
        let inv_scale = self.f3.forward(&y2).mapv(|v| (-v).exp());
        let x1 = (&y1 - &self.f2.forward(&y2)) * &inv_scale;
        let x2 = &y2 - &self.f1.forward(&x1);
        concat_channels(&x1, &x2)
    }
}

// ── Invertible block (tape path) ────────────────────────────────────────

/// One coupling block: three subnets plus layer normalization.
pub struct InnBlock {
    pub f1: CouplingSubnet,
    pub f2: CouplingSubnet,
    pub f3: CouplingSubnet,
    pub ln: LayerNorm,
    pub half: usize,
    flat: bool,
}

impl InnBlock {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_mid: usize,
        flat: bool,
    ) -> Result<Self, DfeError> {
        if c_mid % 2 != 0 {
            return Err(DfeError::OddChannels(c_mid));
        }
        let half = c_mid / 2;
        Ok(Self {
            f1: CouplingSubnet::new(params, rng, &format!("{name}.f1"), half, flat, false),
            f2: CouplingSubnet::new(params, rng, &format!("{name}.f2"), half, flat, false),
            f3: CouplingSubnet::new(params, rng, &format!("{name}.f3"), half, flat, true),
            ln: LayerNorm::new(params, &format!("{name}.ln"), c_mid),
            half,
            flat,
        })
    }

    fn check_width(&self, g: &Graph, x: NodeId) -> Result<(), DfeError> {
        let c = g.tape.value(x).shape()[1];
        if c != 2 * self.half {
            return Err(DfeError::Shape(format!(
                "block expects {} channels, got {c}",
                2 * self.half
            )));
        }
        Ok(())
    }

    /// Coupling map without the closing normalization.
    pub fn forward_pre_ln(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, DfeError> {
        self.check_width(g, x)?;
        let x1 = g.tape.slice_axis(x, 1, 0, self.half);
        let x2 = g.tape.slice_axis(x, 1, self.half, 2 * self.half);
        let f1x1 = self.f1.forward(g, x1);
        let y2 = g.tape.add(x2, f1x1);
        let f3y2 = self.f3.forward(g, y2);
        let scale = g.tape.exp(f3y2);
        let scaled = g.tape.mul(x1, scale);
        let f2y2 = self.f2.forward(g, y2);
        let y1 = g.tape.add(f2y2, scaled);
        Ok(g.tape.concat(1, y1, y2))
    }

    /// Full block: coupling followed by layer normalization (per spatial site
    /// across channels in conv mode, per row in flat mode).
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, DfeError> {
        let pre = self.forward_pre_ln(g, x)?;
        Ok(if self.flat {
            self.ln.forward_rows(g, pre)
        } else {
            self.ln.forward_nchw(g, pre)
        })
    }

    /// Tape-free snapshot at the requested float width.
    pub fn plain<T: PlainFloat>(&self, params: &Params) -> PlainCoupling<T> {
        PlainCoupling {
            f1: self.f1.plain(params),
            f2: self.f2.plain(params),
            f3: self.f3.plain(params),
            half: self.half,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.f1.param_ids();
        ids.extend(self.f2.param_ids());
        ids.extend(self.f3.param_ids());
        ids.push(self.ln.gamma);
        ids.push(self.ln.beta);
        ids
    }
}

// ── Cross-modal attention ───────────────────────────────────────────────

/// Symmetric cross-attention on the pooled half-channel features: queries
/// from one modality, keys and values from the other, residual, layer norm.
/// No `1/sqrt(d)` scaling is applied.
pub struct DetailCrossAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ln: LayerNorm,
    pub dim: usize,
}

impl DetailCrossAttention {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let mk = |params: &mut Params, rng: &mut ChaCha8Rng, suffix: &str| {
            params.register(
                format!("{name}.{suffix}"),
                crate::params::fan_in_normal(rng, &[dim, dim], dim),
            )
        };
        let w_q = mk(params, rng, "w_q");
        let w_k = mk(params, rng, "w_k");
        let w_v = mk(params, rng, "w_v");
        let ln = LayerNorm::new(params, &format!("{name}.ln"), dim);
        Self { w_q, w_k, w_v, ln, dim }
    }

    /// One attention direction; returns the normalized output and the softmax
    /// attention matrix (rows sum to 1).
    fn attend(&self, g: &mut Graph, queries: NodeId, keysvals: NodeId) -> (NodeId, NodeId) {
        let wq = g.p(self.w_q);
        let wk = g.p(self.w_k);
        let wv = g.p(self.w_v);
        let q = g.tape.matmul(queries, wq);
        let k = g.tape.matmul(keysvals, wk);
        let v = g.tape.matmul(keysvals, wv);
        let kt = g.tape.transpose(k);
        let scores = g.tape.matmul(q, kt);
        let attn = g.tape.softmax_rows(scores);
        let mixed = g.tape.matmul(attn, v);
        let res = g.tape.add(mixed, queries);
        (self.ln.forward_rows(g, res), attn)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_q, self.w_k, self.w_v, self.ln.gamma, self.ln.beta]
    }
}

/// Private classifier for the detail feature plus the adapter that maps
/// comprehensive-width features down to detail width for classification and
/// correlation against the detail embedding.
pub struct DetailHead {
    pub cls_d: Linear,
    pub adapter: Linear,
}

impl DetailHead {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        detail_dim: usize,
        full_dim: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            cls_d: Linear::new(params, rng, "head.cls_d", detail_dim, n_classes),
            adapter: Linear::new(params, rng, "head.adapter", full_dim, detail_dim),
        }
    }
}

// ── Module assembly ─────────────────────────────────────────────────────

/// Output handles of the detail extractor.
#[derive(Debug, Clone, Copy)]
pub struct DfeForward {
    pub zd_v: NodeId,
    pub zd_i: NodeId,
    /// `[2n, c_mid/2]`, visible rows first.
    pub zd: NodeId,
    pub attn_v: NodeId,
    pub attn_i: NodeId,
}

/// The detail feature extractor: `k` coupling blocks (parameters shared
/// across modalities) plus the cross-modal attention step.
pub struct DfeModule {
    pub blocks: Vec<InnBlock>,
    pub attention: DetailCrossAttention,
    pub half: usize,
    flat: bool,
}

impl DfeModule {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        c_mid: usize,
        k_blocks: usize,
        flat: bool,
    ) -> Result<Self, DfeError> {
        if c_mid % 2 != 0 {
            return Err(DfeError::OddChannels(c_mid));
        }
        let blocks = (0..k_blocks)
            .map(|i| InnBlock::new(params, rng, &format!("dfe.block{}", i + 1), c_mid, flat))
            .collect::<Result<Vec<_>, _>>()?;
        let attention = DetailCrossAttention::new(params, rng, "dfe.attn", c_mid / 2);
        Ok(Self {
            blocks,
            attention,
            half: c_mid / 2,
            flat,
        })
    }

    /// Pooled first-half-channel slice of an intermediate feature.
    fn pool_half(&self, g: &mut Graph, zm: NodeId) -> NodeId {
        let sliced = g.tape.slice_axis(zm, 1, 0, self.half);
        if self.flat {
            sliced
        } else {
            gap(g, sliced)
        }
    }

    /// Run the coupling stack and attention for both modalities.
    pub fn forward(&self, g: &mut Graph, zm_v: NodeId, zm_i: NodeId) -> Result<DfeForward, DfeError> {
        let mut v = zm_v;
        let mut i = zm_i;
        for block in &self.blocks {
            v = block.forward(g, v)?;
            i = block.forward(g, i)?;
        }
        let zp_v = self.pool_half(g, v);
        let zp_i = self.pool_half(g, i);
        let (zd_v, attn_v) = self.attention.attend(g, zp_v, zp_i);
        let (zd_i, attn_i) = self.attention.attend(g, zp_i, zp_v);
        let zd = g.tape.concat(0, zd_v, zd_i);
        Ok(DfeForward {
            zd_v,
            zd_i,
            zd,
            attn_v,
            attn_i,
        })
    }

    /// Detail stand-in used when the extractor is ablated away: the pooled
    /// first-half channels of the raw intermediate features.
    pub fn pooled_proxy(
        g: &mut Graph,
        zm_v: NodeId,
        zm_i: NodeId,
        half: usize,
        flat: bool,
    ) -> (NodeId, NodeId, NodeId) {
        let pool = |g: &mut Graph, zm: NodeId| {
            let sliced = g.tape.slice_axis(zm, 1, 0, half);
            if flat {
                sliced
            } else {
                gap(g, sliced)
            }
        };
        let zd_v = pool(g, zm_v);
        let zd_i = pool(g, zm_i);
        let zd = g.tape.concat(0, zd_v, zd_i);
        (zd_v, zd_i, zd)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.param_ids()).collect();
        ids.extend(self.attention.param_ids());
        ids
    }
}

/// A coupling stack whose zero-initialized final layers are replaced with
/// random weights, so round-trip checks exercise non-trivial transforms.
pub fn random_stack(
    params: &mut Params,
    rng: &mut ChaCha8Rng,
    c_mid: usize,
    k_blocks: usize,
    flat: bool,
) -> Result<Vec<InnBlock>, DfeError> {
    let blocks = (0..k_blocks)
        .map(|i| InnBlock::new(params, rng, &format!("stack.block{}", i + 1), c_mid, flat))
        .collect::<Result<Vec<_>, _>>()?;
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        if name.starts_with("stack.") && (name.ends_with("l2.w") || name.ends_with("c2.w")) {
            let shape = params.value(id).shape().to_vec();
            *params.value_mut(id) = crate::params::normal(rng, &shape, 0.4);
        }
    }
    Ok(blocks)
}

/// Loss handles of the detail branch.
#[derive(Debug, Clone, Copy)]
pub struct DfeLossNodes {
    pub l_id_d: NodeId,
    pub l_odkl: NodeId,
    pub l_dfe: NodeId,
}

/// Identity loss on the detail classifier plus alignment of the detail
/// distribution to the (detached) comprehensive distribution.
pub fn dfe_loss(
    g: &mut Graph,
    zd: NodeId,
    z: NodeId,
    head: &DetailHead,
    cls_b: &Linear,
    labels: &[usize],
) -> Result<DfeLossNodes, DfeError> {
    let rows = g.tape.value(zd).shape()[0];
    if labels.len() != rows {
        return Err(DfeError::Shape(format!(
            "{} labels for {rows} detail rows",
            labels.len()
        )));
    }
    let n = rows / 2;
    for p in 0..n {
        if labels[p] != labels[n + p] {
            return Err(DfeError::LabelMismatch(p));
        }
    }
    let logits_d = head.cls_d.forward(g, zd);
    let logits_z = cls_b.forward(g, z);
    let l_id_d = losses::id_loss(&mut g.tape, logits_d, labels)?;
    let l_odkl = losses::align_ce(&mut g.tape, logits_d, logits_z)?;
    let l_dfe = g.tape.add(l_id_d, l_odkl);
    Ok(DfeLossNodes {
        l_id_d,
        l_odkl,
        l_dfe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        crate::params::normal(rng, shape, 1.0)
    }

    fn rand_block(seed: u64, c_mid: usize, flat: bool) -> (Params, InnBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let block = InnBlock::new(&mut params, &mut rng, "b", c_mid, flat).unwrap();
        // The zero-initialized final subnet layers would make the coupling the
        // identity; randomize them so round-trips exercise real transforms.
        for id in params.ids().collect::<Vec<_>>() {
            if params.name(id).ends_with("l2.w") || params.name(id).ends_with("c2.w") {
                let shape = params.value(id).shape().to_vec();
                *params.value_mut(id) = crate::params::normal(&mut rng, &shape, 0.4);
            }
        }
        (params, block)
    }

    #[test]
    fn zero_initialized_block_is_identity_pre_ln() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        let block = InnBlock::new(&mut params, &mut rng, "b", 8, true).unwrap();
        let x = randn(&mut rng, &[5, 8]);
        let mut g = Graph::new(&params);
        let xn = g.tape.leaf(x.clone());
        let y = block.forward_pre_ln(&mut g, xn).unwrap();
        let out = g.tape.value(y);
        for (a, b) in out.iter().zip(x.iter()) {
            assert_eq!(a, b, "fresh coupling must be the exact identity");
        }
        // And the plain path agrees.
        let plain = block.plain::<f64>(&params);
        let y2 = plain.forward_pre_ln(&x);
        assert_eq!(y2, x);
    }

    #[test]
    fn odd_channel_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        assert!(matches!(
            InnBlock::new(&mut params, &mut rng, "b", 7, true),
            Err(DfeError::OddChannels(7))
        ));
    }

    #[test]
    fn tape_and_plain_coupling_agree() {
        let (params, block) = rand_block(2, 12, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[4, 12]);
        let mut g = Graph::new(&params);
        let xn = g.tape.leaf(x.clone());
        let y_tape = block.forward_pre_ln(&mut g, xn).unwrap();
        let plain = block.plain::<f64>(&params);
        let y_plain = plain.forward_pre_ln(&x);
        for (a, b) in g.tape.value(y_tape).iter().zip(y_plain.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn round_trip_64_bit_flat_and_conv() {
        for (flat, shape) in [(true, vec![6, 12]), (false, vec![2, 12, 4, 3])] {
            let (params, block) = rand_block(4, 12, flat);
            let plain = block.plain::<f64>(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..20 {
                let x = randn(&mut rng, &shape);
                let y = plain.forward_pre_ln(&x);
                let back = plain.inverse_pre_ln(&y);
                let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(err <= 1e-10, "64-bit round trip error {err}");
            }
        }
    }

    #[test]
    fn round_trip_32_bit() {
        let (params, block) = rand_block(6, 12, true);
        let plain = block.plain::<f32>(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = randn(&mut rng, &[6, 12]).mapv(|v| v as f32);
            let y = plain.forward_pre_ln(&x);
            let back = plain.inverse_pre_ln(&y);
            let err = (&back - &x).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(err <= 1e-5, "32-bit round trip error {err}");
        }
    }

    #[test]
    fn two_block_stack_inverts_block_by_block_in_reverse() {
        let (params_a, block_a) = rand_block(8, 10, true);
        let (params_b, block_b) = rand_block(9, 10, true);
        let pa = block_a.plain::<f64>(&params_a);
        let pb = block_b.plain::<f64>(&params_b);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[4, 10]);
        let y = pb.forward_pre_ln(&pa.forward_pre_ln(&x));
        let back = pa.inverse_pre_ln(&pb.inverse_pre_ln(&y));
        let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-10, "stack round trip error {err}");
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = Params::new();
        let dfe = DfeModule::new(&mut params, &mut rng, 16, 3, true).unwrap();
        let zm_v = randn(&mut rng, &[8, 16]);
        let zm_i = randn(&mut rng, &[8, 16]);
        let mut g = Graph::new(&params);
        let (av, ai) = (g.tape.leaf(zm_v), g.tape.leaf(zm_i));
        let out = dfe.forward(&mut g, av, ai).unwrap();
        assert_eq!(g.tape.value(out.zd).shape(), &[16, 8]);
        // Softmax attention rows sum to one.
        for attn in [out.attn_v, out.attn_i] {
            let a = g.tape.value(attn);
            for i in 0..a.shape()[0] {
                let s: f64 = (0..a.shape()[1]).map(|j| a[[i, j]]).sum();
                assert_relative_eq!(s, 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn default_stack_depth_is_six() {
        assert_eq!(DEFAULT_INN_BLOCKS, 6);
    }

    #[test]
    fn identical_modalities_give_identical_detail_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = Params::new();
        let dfe = DfeModule::new(&mut params, &mut rng, 12, 2, true).unwrap();
        let zm = randn(&mut rng, &[5, 12]);
        let mut g = Graph::new(&params);
        let (av, ai) = (g.tape.leaf(zm.clone()), g.tape.leaf(zm));
        let out = dfe.forward(&mut g, av, ai).unwrap();
        assert_eq!(g.tape.value(out.zd_v), g.tape.value(out.zd_i));
    }

    #[test]
    fn batch_order_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = Params::new();
        let dfe = DfeModule::new(&mut params, &mut rng, 12, 2, true).unwrap();
        let zm_v = randn(&mut rng, &[4, 12]);
        let zm_i = randn(&mut rng, &[4, 12]);
        let perm = [2usize, 0, 3, 1];
        let permute = |x: &ArrayD<f64>| {
            let mut out = x.clone();
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..12 {
                    out[[dst, j]] = x[[src, j]];
                }
            }
            out
        };
        let mut g = Graph::new(&params);
        let (av, ai) = (g.tape.leaf(zm_v.clone()), g.tape.leaf(zm_i.clone()));
        let base = dfe.forward(&mut g, av, ai).unwrap();
        let mut g2 = Graph::new(&params);
        let (pv, pi) = (g2.tape.leaf(permute(&zm_v)), g2.tape.leaf(permute(&zm_i)));
        let shuf = dfe.forward(&mut g2, pv, pi).unwrap();
        let zd_base = g.tape.value(base.zd_v);
        let zd_shuf = g2.tape.value(shuf.zd_v);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..6 {
                assert_relative_eq!(zd_shuf[[dst, j]], zd_base[[src, j]], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn dfe_loss_composition_and_uniform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params = Params::new();
        let n_classes = 8;
        let head = DetailHead::new(&mut params, &mut rng, 6, 10, n_classes);
        let cls_b = Linear::new(&mut params, &mut rng, "cls_b", 10, n_classes);
        // Zero the detail classifier so its logits are uniform.
        for id in [head.cls_d.w, head.cls_d.b] {
            params.value_mut(id).fill(0.0);
        }
        let labels = vec![0usize, 1, 2, 3, 0, 1, 2, 3];
        let mut g = Graph::new(&params);
        let zd = g.tape.leaf(randn(&mut rng, &[8, 6]));
        let z = g.tape.leaf(randn(&mut rng, &[8, 10]));
        let out = dfe_loss(&mut g, zd, z, &head, &cls_b, &labels).unwrap();
        assert_relative_eq!(
            g.tape.scalar(out.l_id_d),
            (n_classes as f64).ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            g.tape.scalar(out.l_dfe),
            g.tape.scalar(out.l_id_d) + g.tape.scalar(out.l_odkl),
            epsilon = 1e-15
        );
        // Matching distributions: alignment hits the teacher entropy.
        for id in [cls_b.w, cls_b.b] {
            params.value_mut(id).fill(0.0);
        }
        let mut g = Graph::new(&params);
        let zd = g.tape.leaf(randn(&mut rng, &[8, 6]));
        let z = g.tape.leaf(randn(&mut rng, &[8, 10]));
        let out = dfe_loss(&mut g, zd, z, &head, &cls_b, &labels).unwrap();
        assert_relative_eq!(
            g.tape.scalar(out.l_odkl),
            (n_classes as f64).ln(),
            epsilon = 1e-12
        );

        // Mismatched modality-half labels are rejected.
        let mut g = Graph::new(&params);
        let zd = g.tape.leaf(randn(&mut rng, &[4, 6]));
        let z = g.tape.leaf(randn(&mut rng, &[4, 10]));
        assert!(matches!(
            dfe_loss(&mut g, zd, z, &head, &cls_b, &[0, 1, 1, 0]),
            Err(DfeError::LabelMismatch(_))
        ));
    }

    /// Gradients of the detail losses with respect to every detail-module
    /// parameter match finite differences through frozen-detach replay.
    #[test]
    fn dfe_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut params = Params::new();
        let dfe = DfeModule::new(&mut params, &mut rng, 8, 2, true).unwrap();
        let head = DetailHead::new(&mut params, &mut rng, 4, 10, 4);
        let cls_b = Linear::new(&mut params, &mut rng, "cls_b", 10, 4);
        let labels = vec![0usize, 1, 2, 3, 0, 1, 2, 3];
        let mut g = Graph::new(&params);
        let zm_v = g.tape.leaf(randn(&mut rng, &[4, 8]));
        let zm_i = g.tape.leaf(randn(&mut rng, &[4, 8]));
        let z = g.tape.leaf(randn(&mut rng, &[8, 10]));
        let fwd = dfe.forward(&mut g, zm_v, zm_i).unwrap();
        let loss = dfe_loss(&mut g, fwd.zd, z, &head, &cls_b, &labels).unwrap();
        let grads = g.tape.backward(loss.l_dfe);
        let mut fd_rng = ChaCha8Rng::seed_from_u64(99);
        let bindings: Vec<(ParamId, crate::tape::NodeId)> =
            g.tape.param_bindings().to_vec();
        let dfe_ids: std::collections::HashSet<usize> =
            dfe.param_ids().iter().map(|p| p.index()).collect();
        let mut checked = 0;
        for (pid, node) in bindings {
            if !dfe_ids.contains(&pid.index()) {
                continue;
            }
            let (err, n) =
                oracle::fd_check_leaf(&g.tape, loss.l_dfe, &grads, node, 1e-5, 12, &mut fd_rng);
            assert!(
                err <= 1e-4,
                "gradient mismatch {err} on {}",
                params.name(pid)
            );
            checked += n;
        }
        assert!(checked > 0);
    }
}
