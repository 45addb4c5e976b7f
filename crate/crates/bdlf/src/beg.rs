//! Base embedding generation: a learnable projection decomposing the
//! comprehensive feature into detail and base subspaces under a soft
//! symmetric-idempotency penalty, the approach losses pulling the projected
//! detail toward the extracted detail, and the two-stage channel/batch
//! attention fusion with its alignment losses.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dfe::DetailHead;
use crate::losses::{self, LossError, SkdConfig};
use crate::nn::Linear;
use crate::params::{self, ParamId, Params};
use crate::tape::{Graph, NodeId, Tape};

#[derive(Debug, Error)]
pub enum BegError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("feature pack slot {0} missing for the base losses")]
    MissingSlot(&'static str),
    #[error(transparent)]
    Loss(#[from] LossError),
}

// ── Projection ──────────────────────────────────────────────────────────

/// Learnable square projection `P`; `z P` is the projected detail part and
/// `z (I - P) = z - z P` the base part, so the two always sum to `z` exactly.
pub struct ProjectionHead {
    pub p_matrix: ParamId,
    pub dim: usize,
}

impl ProjectionHead {
    /// Initialized near `0.5 I` plus small noise: between the two trivial
    /// projections, with broken symmetry.
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let mut init = params::normal(rng, &[dim, dim], 0.01);
        for i in 0..dim {
            init[[i, i]] += 0.5;
        }
        let p_matrix = params.register("beg.projection", init);
        Self { p_matrix, dim }
    }

    /// `(zd_bar, zb)` with `zd_bar + zb = z` bitwise by construction.
    pub fn project(&self, g: &mut Graph, z: NodeId) -> (NodeId, NodeId) {
        let p = g.p(self.p_matrix);
        let zd_bar = g.tape.matmul(z, p);
        let zb = g.tape.sub(z, zd_bar);
        (zd_bar, zb)
    }

    /// Mean squared violation of idempotency plus mean squared asymmetry:
    /// `mean((P^2 - P)^2) + mean((P - P^T)^2)`.
    pub fn orth_penalty(&self, g: &mut Graph) -> NodeId {
        let p = g.p(self.p_matrix);
        let pp = g.tape.matmul(p, p);
        let idem = g.tape.sub(pp, p);
        let idem2 = g.tape.mul(idem, idem);
        let idem_term = g.tape.mean_all(idem2);
        let pt = g.tape.transpose(p);
        let asym = g.tape.sub(p, pt);
        let asym2 = g.tape.mul(asym, asym);
        let asym_term = g.tape.mean_all(asym2);
        g.tape.add(idem_term, asym_term)
    }
}

// ── Fusion ──────────────────────────────────────────────────────────────

/// Learnable maps of the two fusion stages (channel attention, then batch
/// attention).
pub struct BaseFusion {
    pub p_q: ParamId,
    pub p_k: ParamId,
    pub p_v: ParamId,
    pub q_q: ParamId,
    pub q_k: ParamId,
    pub q_v: ParamId,
    pub dim: usize,
}

/// Stage outputs of the fusion.
#[derive(Debug, Clone, Copy)]
pub struct FusionNodes {
    pub zbf_bar: NodeId,
    pub zbf: NodeId,
}

impl BaseFusion {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let mk = |name: &str, params: &mut Params, rng: &mut ChaCha8Rng| {
            params.register(
                format!("beg.fusion.{name}"),
                params::fan_in_normal(rng, &[dim, dim], dim),
            )
        };
        let p_q = mk("p_q", params, rng);
        let p_k = mk("p_k", params, rng);
        let p_v = mk("p_v", params, rng);
        let q_q = mk("q_q", params, rng);
        let q_k = mk("q_k", params, rng);
        let q_v = mk("q_v", params, rng);
        Self { p_q, p_k, p_v, q_q, q_k, q_v, dim }
    }

    /// Stage 1 (channel attention over `[c, c]`, scaled by `1/c`):
    /// `zbf_bar = (zb_i P_v) ((zb_v P_q)^T (zb_i P_k)) / c + zb_v`.
    /// Stage 2 (batch attention over `[n, n]`, scaled by `2/B` with `B = 2n`):
    /// `zbf = ((zb_i Q_q)(zbf_bar Q_k)^T) (zbf_bar Q_v) * 2/B + zb_i`.
    pub fn fuse(&self, g: &mut Graph, zb_v: NodeId, zb_i: NodeId) -> Result<FusionNodes, BegError> {
        let (sv, si) = (
            g.tape.value(zb_v).shape().to_vec(),
            g.tape.value(zb_i).shape().to_vec(),
        );
        if sv != si {
            return Err(BegError::Shape(format!(
                "modality halves differ: {sv:?} vs {si:?}"
            )));
        }
        let n = sv[0];
        let c = sv[1];
        let pq = g.p(self.p_q);
        let pk = g.p(self.p_k);
        let pv = g.p(self.p_v);
        let q = g.tape.matmul(zb_v, pq);
        let k = g.tape.matmul(zb_i, pk);
        let v = g.tape.matmul(zb_i, pv);
        let qt = g.tape.transpose(q);
        let chan = g.tape.matmul(qt, k);
        let chan = g.tape.scale(chan, 1.0 / c as f64);
        let mixed = g.tape.matmul(v, chan);
        let zbf_bar = g.tape.add(mixed, zb_v);

        let qq = g.p(self.q_q);
        let qk = g.p(self.q_k);
        let qv = g.p(self.q_v);
        let q2 = g.tape.matmul(zb_i, qq);
        let k2 = g.tape.matmul(zbf_bar, qk);
        let v2 = g.tape.matmul(zbf_bar, qv);
        let k2t = g.tape.transpose(k2);
        let batch = g.tape.matmul(q2, k2t);
        let batch = g.tape.scale(batch, 2.0 / (2 * n) as f64);
        let mixed2 = g.tape.matmul(batch, v2);
        let zbf = g.tape.add(mixed2, zb_i);
        Ok(FusionNodes { zbf_bar, zbf })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.p_q, self.p_k, self.p_v, self.q_q, self.q_k, self.q_v]
    }
}

// ── Approach losses ─────────────────────────────────────────────────────

/// Loss handles pulling the projected detail toward the extracted detail.
#[derive(Debug, Clone, Copy)]
pub struct ApproachNodes {
    pub l_fkl: NodeId,
    pub l_dkl: NodeId,
    pub l_dcorr: NodeId,
    pub l_app: NodeId,
    /// Row softmax of the Gram difference, before squaring.
    pub softmax_pre_square: NodeId,
    /// The squared map whose mean is `l_fkl`.
    pub m: NodeId,
}

/// The squared-softmax Gram difference map with its row-sum invariant.
#[derive(Debug, Clone)]
pub struct DifferenceMap {
    pub pre_squaring: Array2<f64>,
    pub m: Array2<f64>,
}

impl DifferenceMap {
    pub fn validate(&self) -> Result<(), String> {
        for (i, row) in self.pre_squaring.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(format!("softmax row {i} sums to {s}"));
            }
        }
        if self.m.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err("difference map entries must lie in [0, 1]".into());
        }
        Ok(())
    }
}

impl ApproachNodes {
    pub fn difference_map(&self, tape: &Tape) -> DifferenceMap {
        let pre = tape
            .value(self.softmax_pre_square)
            .clone()
            .into_dimensionality()
            .unwrap();
        let m = tape.value(self.m).clone().into_dimensionality().unwrap();
        DifferenceMap { pre_squaring: pre, m }
    }
}

/// Feature-space, semantic, and correlation approach terms:
/// `l_fkl` = mean of the squared row-softmax of the Gram difference,
/// `l_dkl` = alignment of the adapted projection's class distribution to the
/// detail distribution (detail side detached),
/// `l_dcorr` = squared cross-modality correlation gap over the correlation
/// consistency denominator.
pub fn approach_losses(
    g: &mut Graph,
    zd_bar: NodeId,
    zd: NodeId,
    head: &DetailHead,
    cfg: &SkdConfig,
) -> Result<ApproachNodes, BegError> {
    let rows = g.tape.value(zd_bar).shape()[0];
    let rows_d = g.tape.value(zd).shape()[0];
    if rows != rows_d {
        return Err(BegError::Shape(format!(
            "projected detail has {rows} rows, extracted detail {rows_d}"
        )));
    }
    if rows % 2 != 0 {
        return Err(BegError::Shape(format!(
            "stacked features need even row count, got {rows}"
        )));
    }
    let n = rows / 2;

    // Gram matrices are dimension-free, so no adapter is needed here.
    let zdbt = g.tape.transpose(zd_bar);
    let g_bar = g.tape.matmul(zd_bar, zdbt);
    let zdt = g.tape.transpose(zd);
    let g_d = g.tape.matmul(zd, zdt);
    let diff = g.tape.sub(g_bar, g_d);
    let soft = g.tape.softmax_rows(diff);
    let m = g.tape.mul(soft, soft);
    let l_fkl = g.tape.mean_all(m);

    let adapted = head.adapter.forward(g, zd_bar);
    let student = head.cls_d.forward(g, adapted);
    let teacher = head.cls_d.forward(g, zd);
    let l_dkl = losses::align_ce(&mut g.tape, student, teacher)?;

    let a_v = g.tape.slice_axis(adapted, 0, 0, n);
    let a_i = g.tape.slice_axis(adapted, 0, n, 2 * n);
    let zd_v = g.tape.slice_axis(zd, 0, 0, n);
    let zd_i = g.tape.slice_axis(zd, 0, n, 2 * n);
    let c_bar = losses::pearson_corr(&mut g.tape, a_v, a_i)?;
    let c_d = losses::pearson_corr(&mut g.tape, zd_v, zd_i)?;
    let gap = g.tape.sub(c_bar, c_d);
    let num = g.tape.mul(gap, gap);
    let c_vv = losses::pearson_corr(&mut g.tape, a_v, zd_v)?;
    let c_ii = losses::pearson_corr(&mut g.tape, a_i, zd_i)?;
    let c_vv2 = g.tape.mul(c_vv, c_vv);
    let c_ii2 = g.tape.mul(c_ii, c_ii);
    let den = g.tape.add(c_vv2, c_ii2);
    let den = g.tape.add_scalar(den, cfg.gamma);
    let l_dcorr = g.tape.div(num, den);

    let partial = g.tape.add(l_fkl, l_dkl);
    let l_app = g.tape.add(partial, l_dcorr);
    Ok(ApproachNodes {
        l_fkl,
        l_dkl,
        l_dcorr,
        l_app,
        softmax_pre_square: soft,
        m,
    })
}

// ── Base losses ─────────────────────────────────────────────────────────

/// Loss handles of the base branch per the five-term decomposition.
#[derive(Debug, Clone, Copy)]
pub struct BegLossNodes {
    pub l_id_b: NodeId,
    pub l_bkl: NodeId,
    pub l_id_f: NodeId,
    pub l_fbkl: NodeId,
    pub l_cmf: NodeId,
    pub l_orth: NodeId,
    pub l_beg: NodeId,
}

/// Identity and alignment losses of the base branch, combined with the
/// already-built approach and orthogonality terms into the base total
/// (absent terms enter as constant zeros so the decomposition identity is
/// preserved under ablations).
#[allow(clippy::too_many_arguments)]
pub fn beg_loss(
    g: &mut Graph,
    zb: NodeId,
    zbf: NodeId,
    cls_b: &Linear,
    labels_stacked: &[usize],
    labels_pairs: &[usize],
    l_app: Option<NodeId>,
    l_orth: Option<NodeId>,
) -> Result<BegLossNodes, BegError> {
    let rows = g.tape.value(zb).shape()[0];
    if labels_stacked.len() != rows {
        return Err(BegError::Shape(format!(
            "{} labels for {rows} base rows",
            labels_stacked.len()
        )));
    }
    let n = rows / 2;
    if labels_pairs.len() != n || g.tape.value(zbf).shape()[0] != n {
        return Err(BegError::Shape(format!(
            "fused rows must match {n} pairs"
        )));
    }

    let logits_b = cls_b.forward(g, zb);
    let l_id_b = losses::id_loss(&mut g.tape, logits_b, labels_stacked)?;
    let logits_b_v = g.tape.slice_axis(logits_b, 0, 0, n);
    let logits_b_i = g.tape.slice_axis(logits_b, 0, n, 2 * n);
    let l_bkl = losses::align_ce_symmetric(&mut g.tape, logits_b_v, logits_b_i)?;

    let logits_f = cls_b.forward(g, zbf);
    let l_id_f = losses::id_loss(&mut g.tape, logits_f, labels_pairs)?;
    let fb_v = losses::align_ce(&mut g.tape, logits_b_v, logits_f)?;
    let fb_i = losses::align_ce(&mut g.tape, logits_b_i, logits_f)?;
    let fb_sum = g.tape.add(fb_v, fb_i);
    let l_fbkl = g.tape.scale(fb_sum, 0.5);
    let l_cmf = g.tape.add(l_id_f, l_fbkl);

    let zero = g.tape.constant(ArrayD::zeros(IxDyn(&[1])));
    let l_app = l_app.unwrap_or(zero);
    let l_orth = l_orth.unwrap_or(zero);
    let s1 = g.tape.add(l_id_b, l_app);
    let s2 = g.tape.add(s1, l_bkl);
    let s3 = g.tape.add(s2, l_cmf);
    let l_beg = g.tape.add(s3, l_orth);
    Ok(BegLossNodes {
        l_id_b,
        l_bkl,
        l_id_f,
        l_fbkl,
        l_cmf,
        l_orth,
        l_beg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use approx::assert_relative_eq;
    use ndarray::{Array2, ArrayD, IxDyn};
    use rand_chacha::rand_core::SeedableRng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        params::normal(rng, shape, 1.0)
    }

    fn set_p(params: &mut Params, head: &ProjectionHead, p: &Array2<f64>) {
        params
            .value_mut(head.p_matrix)
            .assign(&p.clone().into_dyn());
    }

    #[test]
    fn trivial_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        let head = ProjectionHead::new(&mut params, &mut rng, 5);
        let z = randn(&mut rng, &[4, 5]);

        set_p(&mut params, &head, &Array2::zeros((5, 5)));
        let mut g = Graph::new(&params);
        let zn = g.tape.leaf(z.clone());
        let (zd_bar, zb) = head.project(&mut g, zn);
        assert!(g.tape.value(zd_bar).iter().all(|&v| v == 0.0));
        assert_eq!(g.tape.value(zb), &z);

        set_p(&mut params, &head, &Array2::eye(5));
        let mut g = Graph::new(&params);
        let zn = g.tape.leaf(z.clone());
        let (zd_bar, zb) = head.project(&mut g, zn);
        assert_eq!(g.tape.value(zd_bar), &z);
        assert!(g.tape.value(zb).iter().all(|&v| v == 0.0));
    }

    /// The base part is the bitwise complement of the projected part: no
    /// information is lost in the decomposition, for any parameter values.
    /// (An exact fl-sum `zd_bar + zb == z` is not achievable in floating
    /// point for arbitrary P; the construction identity is the guarantee.)
    #[test]
    fn decomposition_identity_holds_bitwise_for_any_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = Params::new();
        let head = ProjectionHead::new(&mut params, &mut rng, 6);
        for trial in 0..5 {
            if trial > 0 {
                let noisy = params::normal(&mut rng, &[6, 6], 1.0);
                params.value_mut(head.p_matrix).assign(&noisy);
            }
            let z = randn(&mut rng, &[5, 6]);
            let mut g = Graph::new(&params);
            let zn = g.tape.leaf(z.clone());
            let (zd_bar, zb) = head.project(&mut g, zn);
            let vd = g.tape.value(zd_bar);
            let vb = g.tape.value(zb);
            for ((a, b), c) in vd.iter().zip(vb.iter()).zip(z.iter()) {
                assert_eq!(*b, c - a, "base part must be the bitwise complement");
                // Reconstruction lands within one ulp of the larger part.
                let scale = a.abs().max(b.abs()).max(c.abs());
                assert!((a + b - c).abs() <= scale * f64::EPSILON);
            }
        }
    }

    #[test]
    fn exact_projector_zeroes_penalty_and_row_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::new();
        let dim = 10;
        let head = ProjectionHead::new(&mut params, &mut rng, dim);
        let u = oracle::random_orthonormal_rows(&mut rng, 4, dim);
        let p = u.t().dot(&u);
        set_p(&mut params, &head, &p);
        let mut g = Graph::new(&params);
        let pen = head.orth_penalty(&mut g);
        assert!(g.tape.scalar(pen) <= 1e-10, "penalty {}", g.tape.scalar(pen));

        let z = randn(&mut rng, &[7, dim]);
        let zn = g.tape.leaf(z);
        let (zd_bar, zb) = head.project(&mut g, zn);
        let vd = g.tape.value(zd_bar);
        let vb = g.tape.value(zb);
        for i in 0..7 {
            let dot: f64 = (0..dim).map(|j| vd[[i, j]] * vb[[i, j]]).sum();
            assert!(dot.abs() <= 1e-8, "row {i} subspaces not orthogonal: {dot}");
        }
    }

    #[test]
    fn orth_penalty_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = Params::new();
        let head = ProjectionHead::new(&mut params, &mut rng, 4);
        for (p, expect) in [
            (Array2::eye(4), 0.0),
            (Array2::zeros((4, 4)), 0.0),
            (Array2::eye(4) * 2.0, 1.0),
        ] {
            set_p(&mut params, &head, &p);
            let mut g = Graph::new(&params);
            let pen = head.orth_penalty(&mut g);
            assert_relative_eq!(g.tape.scalar(pen), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn approach_uniform_gram_case() {
        // zd_bar = [zd | 0] has the same Gram matrix as zd, so the softmax is
        // uniform and l_fkl = 1 / (2n)^2.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = Params::new();
        let head = DetailHead::new(&mut params, &mut rng, 3, 8, 4);
        let n = 3usize;
        let zd = randn(&mut rng, &[2 * n, 3]);
        let mut zd_bar = ArrayD::zeros(IxDyn(&[2 * n, 8]));
        for i in 0..2 * n {
            for j in 0..3 {
                zd_bar[[i, j]] = zd[[i, j]];
            }
        }
        let mut g = Graph::new(&params);
        let zdb = g.tape.leaf(zd_bar);
        let zdn = g.tape.leaf(zd);
        let out = approach_losses(&mut g, zdb, zdn, &head, &SkdConfig::default()).unwrap();
        let expect = 1.0 / ((2 * n) as f64).powi(2);
        assert_relative_eq!(g.tape.scalar(out.l_fkl), expect, epsilon = 1e-12);
        out.difference_map(&g.tape).validate().unwrap();
        // Additivity is exact.
        assert_relative_eq!(
            g.tape.scalar(out.l_app),
            g.tape.scalar(out.l_fkl) + g.tape.scalar(out.l_dkl) + g.tape.scalar(out.l_dcorr),
            epsilon = 1e-15
        );
    }

    #[test]
    fn approach_perfect_adapter_zeroes_correlation_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = Params::new();
        let head = DetailHead::new(&mut params, &mut rng, 3, 8, 4);
        // Adapter = leading-slice selector.
        let mut w = Array2::zeros((8, 3));
        for j in 0..3 {
            w[[j, j]] = 1.0;
        }
        params.value_mut(head.adapter.w).assign(&w.into_dyn());
        params.value_mut(head.adapter.b).fill(0.0);
        let n = 3usize;
        let zd = randn(&mut rng, &[2 * n, 3]);
        let mut zd_bar = ArrayD::zeros(IxDyn(&[2 * n, 8]));
        for i in 0..2 * n {
            for j in 0..3 {
                zd_bar[[i, j]] = zd[[i, j]];
            }
            for j in 3..8 {
                zd_bar[[i, j]] = randn(&mut rng, &[1])[[0]];
            }
        }
        let mut g = Graph::new(&params);
        let zdb = g.tape.leaf(zd_bar);
        let zdn = g.tape.leaf(zd);
        let out = approach_losses(&mut g, zdb, zdn, &head, &SkdConfig::default()).unwrap();
        assert!(g.tape.scalar(out.l_dcorr).abs() < 1e-12);
    }

    #[test]
    fn fusion_zero_parameters_reduce_to_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = Params::new();
        let fusion = BaseFusion::new(&mut params, &mut rng, 6);
        for id in fusion.param_ids() {
            params.value_mut(id).fill(0.0);
        }
        let zb_v = randn(&mut rng, &[4, 6]);
        let zb_i = randn(&mut rng, &[4, 6]);
        let mut g = Graph::new(&params);
        let (av, ai) = (g.tape.leaf(zb_v.clone()), g.tape.leaf(zb_i.clone()));
        let out = fusion.fuse(&mut g, av, ai).unwrap();
        assert_eq!(g.tape.value(out.zbf_bar), &zb_v);
        assert_eq!(g.tape.value(out.zbf), &zb_i);
    }

    /// Independent dense-array evaluation of both fusion stages, exactly as
    /// printed (1/c and 2/B scalings), must agree with the tape path.
    #[test]
    fn fusion_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = Params::new();
        let c = 5usize;
        let n = 4usize;
        let fusion = BaseFusion::new(&mut params, &mut rng, c);
        let zb_v: Array2<f64> = randn(&mut rng, &[n, c]).into_dimensionality().unwrap();
        let zb_i: Array2<f64> = randn(&mut rng, &[n, c]).into_dimensionality().unwrap();
        let mut g = Graph::new(&params);
        let (av, ai) = (
            g.tape.leaf(zb_v.clone().into_dyn()),
            g.tape.leaf(zb_i.clone().into_dyn()),
        );
        let out = fusion.fuse(&mut g, av, ai).unwrap();

        let m = |id: ParamId| -> Array2<f64> {
            params.value(id).clone().into_dimensionality().unwrap()
        };
        let a = zb_v.dot(&m(fusion.p_q)).t().dot(&zb_i.dot(&m(fusion.p_k))) / c as f64;
        let zbf_bar = zb_i.dot(&m(fusion.p_v)).dot(&a) + &zb_v;
        let s = zb_i
            .dot(&m(fusion.q_q))
            .dot(&zbf_bar.dot(&m(fusion.q_k)).t().to_owned())
            * (2.0 / (2 * n) as f64);
        let zbf = s.dot(&zbf_bar.dot(&m(fusion.q_v))) + &zb_i;

        let tape_bar = g.tape.value(out.zbf_bar);
        let tape_f = g.tape.value(out.zbf);
        for i in 0..n {
            for j in 0..c {
                assert_relative_eq!(tape_bar[[i, j]], zbf_bar[[i, j]], epsilon = 1e-12);
                assert_relative_eq!(tape_f[[i, j]], zbf[[i, j]], epsilon = 1e-12);
            }
        }
        assert_eq!(tape_f.shape(), &[n, c]);
    }

    #[test]
    fn fusion_is_pair_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = Params::new();
        let fusion = BaseFusion::new(&mut params, &mut rng, 5);
        let zb_v = randn(&mut rng, &[4, 5]);
        let zb_i = randn(&mut rng, &[4, 5]);
        let perm = [3usize, 1, 0, 2];
        let permute = |x: &ArrayD<f64>| {
            let mut out = x.clone();
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..5 {
                    out[[dst, j]] = x[[src, j]];
                }
            }
            out
        };
        let mut g = Graph::new(&params);
        let (av, ai) = (g.tape.leaf(zb_v.clone()), g.tape.leaf(zb_i.clone()));
        let base = fusion.fuse(&mut g, av, ai).unwrap();
        let mut g2 = Graph::new(&params);
        let (pv, pi) = (g2.tape.leaf(permute(&zb_v)), g2.tape.leaf(permute(&zb_i)));
        let shuf = fusion.fuse(&mut g2, pv, pi).unwrap();
        let vb = g.tape.value(base.zbf);
        let vs = g2.tape.value(shuf.zbf);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..5 {
                assert_relative_eq!(vs[[dst, j]], vb[[src, j]], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn beg_loss_composition_and_gibbs_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = Params::new();
        let cls_b = Linear::new(&mut params, &mut rng, "cls_b", 6, 4);
        let n = 4usize;
        let labels_pairs = vec![0usize, 1, 2, 3];
        let labels: Vec<usize> = labels_pairs
            .iter()
            .chain(labels_pairs.iter())
            .copied()
            .collect();
        let half = randn(&mut rng, &[n, 6]);
        let zb_arr = ndarray::concatenate(
            ndarray::Axis(0),
            &[half.view(), half.view()],
        )
        .unwrap();
        let mut g = Graph::new(&params);
        let zb = g.tape.leaf(zb_arr);
        let zbf = g.tape.leaf(randn(&mut rng, &[n, 6]));
        let l_app = g.tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.37));
        let l_orth = g.tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.11));
        let out = beg_loss(
            &mut g,
            zb,
            zbf,
            &cls_b,
            &labels,
            &labels_pairs,
            Some(l_app),
            Some(l_orth),
        )
        .unwrap();
        // Identical modality halves: the symmetric alignment equals the
        // shared distribution's entropy (its Gibbs minimum).
        let logits: Array2<f64> = {
            let w: Array2<f64> = params.value(cls_b.w).clone().into_dimensionality().unwrap();
            let b = params.value(cls_b.b).clone();
            let mut l = half
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .dot(&w);
            for mut row in l.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += b[[0, j]];
                }
            }
            l
        };
        let ent = oracle::mean_softmax_entropy(&logits);
        assert_relative_eq!(g.tape.scalar(out.l_bkl), ent, epsilon = 1e-10);
        // Exact composition.
        assert_relative_eq!(
            g.tape.scalar(out.l_cmf),
            g.tape.scalar(out.l_id_f) + g.tape.scalar(out.l_fbkl),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            g.tape.scalar(out.l_beg),
            g.tape.scalar(out.l_id_b)
                + 0.37
                + g.tape.scalar(out.l_bkl)
                + g.tape.scalar(out.l_cmf)
                + 0.11,
            epsilon = 1e-12
        );
    }

    /// Finite differences through the projection matrix and both fusion
    /// stages on the full base total.
    #[test]
    fn beg_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = Params::new();
        let c = 6usize;
        let n = 4usize;
        let projection = ProjectionHead::new(&mut params, &mut rng, c);
        let fusion = BaseFusion::new(&mut params, &mut rng, c);
        let head = DetailHead::new(&mut params, &mut rng, 3, c, 4);
        let cls_b = Linear::new(&mut params, &mut rng, "cls_b", c, 4);
        let labels_pairs = vec![0usize, 1, 2, 3];
        let labels: Vec<usize> = labels_pairs
            .iter()
            .chain(labels_pairs.iter())
            .copied()
            .collect();

        let mut g = Graph::new(&params);
        let z = g.tape.leaf(randn(&mut rng, &[2 * n, c]));
        let zd = g.tape.leaf(randn(&mut rng, &[2 * n, 3]));
        let (zd_bar, zb) = projection.project(&mut g, z);
        let zb_v = g.tape.slice_axis(zb, 0, 0, n);
        let zb_i = g.tape.slice_axis(zb, 0, n, 2 * n);
        let fused = fusion.fuse(&mut g, zb_v, zb_i).unwrap();
        let app = approach_losses(&mut g, zd_bar, zd, &head, &SkdConfig::default()).unwrap();
        let orth = projection.orth_penalty(&mut g);
        let out = beg_loss(
            &mut g,
            zb,
            fused.zbf,
            &cls_b,
            &labels,
            &labels_pairs,
            Some(app.l_app),
            Some(orth),
        )
        .unwrap();
        let grads = g.tape.backward(out.l_beg);
        let mut fd_rng = ChaCha8Rng::seed_from_u64(50);
        let mut targets = vec![projection.p_matrix];
        targets.extend(fusion.param_ids());
        targets.push(head.adapter.w);
        targets.push(cls_b.w);
        for (pid, node) in g.tape.param_bindings().to_vec() {
            if !targets.contains(&pid) {
                continue;
            }
            let (err, _) =
                oracle::fd_check_leaf(&g.tape, out.l_beg, &grads, node, 1e-5, 10, &mut fd_rng);
            assert!(
                err <= 1e-4,
                "gradient mismatch {err} on {}",
                params.name(pid)
            );
        }
    }
}
