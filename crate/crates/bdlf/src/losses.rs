//! Shared loss primitives: row-paired Pearson correlation, the
//! specific-shared correlation-ratio distillation loss, identity
//! cross-entropy, distribution-alignment cross-entropy, and batch-hard
//! triplet loss. All builders record onto a [`Tape`] and return node handles
//! so analytic gradients flow through every term.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{NodeId, Tape};

/// Keeps a zero-variance row's correlation contribution at exactly zero
/// without poisoning gradients of healthy rows.
const PEARSON_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("triplet batch invalid: {0}")]
    TripletBatch(String),
    #[error("invalid distillation config: {0}")]
    Config(String),
}

/// Constants of the specific-shared distillation loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SkdConfig {
    /// Denominator offset keeping the ratio finite.
    pub gamma: f64,
    /// Correlations are clamped to `[eps, 1 - eps]` before the logs.
    pub corr_clamp_eps: f64,
}

impl Default for SkdConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-2,
            corr_clamp_eps: 1e-3,
        }
    }
}

impl SkdConfig {
    /// The denominator `cbrt(log c_D) + gamma` stays strictly negative on the
    /// clamped interval iff `gamma < |cbrt(log(1 - eps))|`.
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(LossError::Config("gamma must be a positive real".into()));
        }
        if !(self.corr_clamp_eps > 0.0 && self.corr_clamp_eps < 0.5) {
            return Err(LossError::Config(
                "corr_clamp_eps must lie in (0, 0.5)".into(),
            ));
        }
        let bound = (1.0 - self.corr_clamp_eps).ln().cbrt().abs();
        if self.gamma >= bound {
            return Err(LossError::Config(format!(
                "gamma {} must be < |cbrt(log(1 - eps))| = {bound}",
                self.gamma
            )));
        }
        Ok(())
    }
}

fn check_finite(t: &Tape, id: NodeId, what: &'static str) -> Result<(), LossError> {
    if t.value(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite(what))
    }
}

fn dims2(t: &Tape, id: NodeId, what: &str) -> Result<(usize, usize), LossError> {
    let s = t.value(id).shape();
    if s.len() != 2 {
        return Err(LossError::Shape(format!("{what} must be 2-D, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Mean over rows of the per-row Pearson correlation between `a` and `b`:
/// each row is centered across the feature dimension and the cosine of the
/// centered rows is averaged. Zero-variance rows contribute 0.
pub fn pearson_corr(t: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId, LossError> {
    let (n, d) = dims2(t, a, "pearson lhs")?;
    let (nb, db) = dims2(t, b, "pearson rhs")?;
    if (n, d) != (nb, db) {
        return Err(LossError::Shape(format!(
            "pearson operands differ: [{n}, {d}] vs [{nb}, {db}]"
        )));
    }
    if n < 1 || d < 2 {
        return Err(LossError::Shape(format!(
            "pearson needs n >= 1 and d >= 2, got [{n}, {d}]"
        )));
    }
    check_finite(t, a, "pearson lhs")?;
    check_finite(t, b, "pearson rhs")?;

    let centered = |t: &mut Tape, x: NodeId| {
        let s = t.sum_cols(x);
        let neg_mean = t.scale(s, -1.0 / d as f64);
        t.add_colvec(x, neg_mean)
    };
    let ac = centered(t, a);
    let bc = centered(t, b);
    let prod = t.mul(ac, bc);
    let dot = t.sum_cols(prod);
    let asq = t.mul(ac, ac);
    let asum = t.sum_cols(asq);
    let na = t.sqrt(asum);
    let bsq = t.mul(bc, bc);
    let bsum = t.sum_cols(bsq);
    let nb = t.sqrt(bsum);
    let norms = t.mul(na, nb);
    let denom = t.add_scalar(norms, PEARSON_GUARD);
    let rows = t.div(dot, denom);
    Ok(t.mean_all(rows))
}

/// Handles produced by [`skd_loss`]: the loss plus the raw (unclamped)
/// cross-modality correlations for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct SkdNodes {
    pub loss: NodeId,
    pub corr_base: NodeId,
    pub corr_detail: NodeId,
}

/// Correlation-ratio distillation: `log(c_B) / (cbrt(log(c_D)) + gamma)` with
/// both correlations clamped to `[eps, 1 - eps]`. Driving the loss down pushes
/// the base correlation up and the detail correlation down.
pub fn skd_loss(
    t: &mut Tape,
    zb_v: NodeId,
    zb_i: NodeId,
    zd_v: NodeId,
    zd_i: NodeId,
    cfg: &SkdConfig,
) -> Result<SkdNodes, LossError> {
    cfg.validate()?;
    let corr_base = pearson_corr(t, zb_v, zb_i)?;
    let corr_detail = pearson_corr(t, zd_v, zd_i)?;
    check_finite(t, corr_base, "base correlation")?;
    check_finite(t, corr_detail, "detail correlation")?;
    let eps = cfg.corr_clamp_eps;
    let cb = t.clamp(corr_base, eps, 1.0 - eps);
    let cd = t.clamp(corr_detail, eps, 1.0 - eps);
    let num = t.ln(cb);
    let ld = t.ln(cd);
    let root = t.signed_cbrt(ld);
    let den = t.add_scalar(root, cfg.gamma);
    let loss = t.div(num, den);
    Ok(SkdNodes {
        loss,
        corr_base,
        corr_detail,
    })
}

/// Mean softmax cross-entropy of `logits` against integer labels.
pub fn id_loss(t: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId, LossError> {
    let (n, k) = dims2(t, logits, "id logits")?;
    if labels.len() != n {
        return Err(LossError::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= k {
            return Err(LossError::LabelOutOfRange {
                label: l,
                n_classes: k,
            });
        }
    }
    let mut onehot = ArrayD::zeros(ndarray::IxDyn(&[n, k]));
    for (i, &l) in labels.iter().enumerate() {
        onehot[[i, l]] = 1.0;
    }
    let mask = t.constant(onehot);
    let lp = t.log_softmax_rows(logits);
    let picked = t.mul(lp, mask);
    let s = t.sum_all(picked);
    Ok(t.scale(s, -1.0 / n as f64))
}

/// Mean cross-entropy between the student's softmax and the teacher's softmax
/// with the teacher detached, so gradients reach only the student branch.
pub fn align_ce(t: &mut Tape, student: NodeId, teacher: NodeId) -> Result<NodeId, LossError> {
    let (n, k) = dims2(t, student, "student logits")?;
    let (nt, kt) = dims2(t, teacher, "teacher logits")?;
    if (n, k) != (nt, kt) {
        return Err(LossError::Shape(format!(
            "student [{n}, {k}] vs teacher [{nt}, {kt}]"
        )));
    }
    let frozen = t.detach(teacher);
    let q = t.softmax_rows(frozen);
    let lp = t.log_softmax_rows(student);
    let prod = t.mul(q, lp);
    let s = t.sum_all(prod);
    Ok(t.scale(s, -1.0 / n as f64))
}

/// `align_ce` applied in both directions with the respective teacher detached,
/// averaged; avoids choosing one side as the permanent teacher.
pub fn align_ce_symmetric(t: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId, LossError> {
    let ab = align_ce(t, a, b)?;
    let ba = align_ce(t, b, a)?;
    let s = t.add(ab, ba);
    Ok(t.scale(s, 0.5))
}

/// Batch-hard triplet loss with Euclidean distances: per anchor, hardest
/// positive minus hardest negative plus margin, hinged at zero, averaged.
pub fn triplet_loss(
    t: &mut Tape,
    embeddings: NodeId,
    labels: &[usize],
    margin: f64,
) -> Result<NodeId, LossError> {
    let (n, _) = dims2(t, embeddings, "triplet embeddings")?;
    if labels.len() != n {
        return Err(LossError::Shape(format!(
            "{} labels for {n} embedding rows",
            labels.len()
        )));
    }
    check_finite(t, embeddings, "triplet embeddings")?;
    for (i, &l) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, &m)| j != i && m == l) {
            return Err(LossError::TripletBatch(format!(
                "label {l} has no positive partner"
            )));
        }
        if !labels.iter().any(|&m| m != l) {
            return Err(LossError::TripletBatch(format!(
                "label {l} has no negative sample"
            )));
        }
    }
    Ok(t.batch_hard_triplet(embeddings, labels, margin))
}

// ── Loss breakdown ──────────────────────────────────────────────────────

/// Every named scalar of one training step plus the total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_tri: f64,
    pub l_okl: f64,
    pub l_id_d: f64,
    pub l_odkl: f64,
    pub l_dfe: f64,
    pub l_fkl: f64,
    pub l_dkl: f64,
    pub l_dcorr: f64,
    pub l_app: f64,
    pub l_id_b: f64,
    pub l_bkl: f64,
    pub l_id_f: f64,
    pub l_fbkl: f64,
    pub l_cmf: f64,
    pub l_orth: f64,
    pub l_beg: f64,
    pub l_skd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 19] = [
        "l_id", "l_tri", "l_okl", "l_id_d", "l_odkl", "l_dfe", "l_fkl", "l_dkl", "l_dcorr",
        "l_app", "l_id_b", "l_bkl", "l_id_f", "l_fbkl", "l_cmf", "l_orth", "l_beg", "l_skd",
        "total",
    ];

    pub fn values(&self) -> [f64; 19] {
        [
            self.l_id, self.l_tri, self.l_okl, self.l_id_d, self.l_odkl, self.l_dfe, self.l_fkl,
            self.l_dkl, self.l_dcorr, self.l_app, self.l_id_b, self.l_bkl, self.l_id_f,
            self.l_fbkl, self.l_cmf, self.l_orth, self.l_beg, self.l_skd, self.total,
        ]
    }

    /// Name of the first non-finite term, if any (used by the NaN abort).
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }

    /// Relative residuals of the composite-term identities:
    /// detail total, approach total, fusion total, base total, grand total.
    pub fn composition_residuals(&self) -> [(&'static str, f64); 5] {
        let rel = |lhs: f64, rhs: f64| {
            let denom = lhs.abs().max(rhs.abs()).max(1.0);
            (lhs - rhs).abs() / denom
        };
        [
            ("l_dfe", rel(self.l_dfe, self.l_id_d + self.l_odkl)),
            ("l_app", rel(self.l_app, self.l_fkl + self.l_dkl + self.l_dcorr)),
            ("l_cmf", rel(self.l_cmf, self.l_id_f + self.l_fbkl)),
            (
                "l_beg",
                rel(
                    self.l_beg,
                    self.l_id_b + self.l_app + self.l_bkl + self.l_cmf + self.l_orth,
                ),
            ),
            (
                "total",
                rel(
                    self.total,
                    self.l_id + self.l_tri + self.l_okl + self.l_dfe + self.l_beg + self.l_skd,
                ),
            ),
        ]
    }

    /// Check every composite identity to a relative tolerance.
    pub fn check_composition(&self, tol: f64) -> Result<(), String> {
        for (name, r) in self.composition_residuals() {
            if !(r <= tol) {
                return Err(format!("composition identity for {name} off by {r:.3e}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use approx::assert_relative_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    #[test]
    fn pearson_self_is_one_and_negation_is_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[5, 8]);
        let mut t = Tape::new();
        let a = t.leaf(x.clone());
        let b = t.leaf(x.clone());
        let c = pearson_corr(&mut t, a, b).unwrap();
        assert_relative_eq!(t.scalar(c), 1.0, epsilon = 1e-9);

        let mut t = Tape::new();
        let a = t.leaf(x.clone());
        let b = t.leaf(x.mapv(|v| -v));
        let c = pearson_corr(&mut t, a, b).unwrap();
        assert_relative_eq!(t.scalar(c), -1.0, epsilon = 1e-9);
    }

    #[test]
    fn pearson_matches_textbook_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[4, 8]);
        let y = randn(&mut rng, &[4, 8]);
        let mut t = Tape::new();
        let a = t.leaf(x.clone());
        let b = t.leaf(y.clone());
        let c = pearson_corr(&mut t, a, b).unwrap();
        let expect = oracle::pearson_rowwise(
            &x.into_dimensionality().unwrap(),
            &y.into_dimensionality().unwrap(),
        );
        assert_relative_eq!(t.scalar(c), expect, epsilon = 1e-10);
    }

    #[test]
    fn pearson_zero_variance_rows_contribute_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = randn(&mut rng, &[3, 6]);
        let y = randn(&mut rng, &[3, 6]);
        for j in 0..6 {
            x[[1, j]] = 2.5; // constant row
        }
        let mut t = Tape::new();
        let a = t.leaf(x.clone());
        let b = t.leaf(y.clone());
        let c = pearson_corr(&mut t, a, b).unwrap();
        let x2: ndarray::Array2<f64> = x.into_dimensionality().unwrap();
        let y2: ndarray::Array2<f64> = y.into_dimensionality().unwrap();
        let r0 = oracle::pearson_row(&x2.row(0).to_owned(), &y2.row(0).to_owned());
        let r2 = oracle::pearson_row(&x2.row(2).to_owned(), &y2.row(2).to_owned());
        assert_relative_eq!(t.scalar(c), (r0 + 0.0 + r2) / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn pearson_rejects_nan_input() {
        let mut t = Tape::new();
        let x = ArrayD::from_elem(IxDyn(&[2, 3]), f64::NAN);
        let a = t.leaf(x);
        let b = t.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
        assert!(matches!(
            pearson_corr(&mut t, a, b),
            Err(LossError::NonFinite(_))
        ));
    }

    /// Scalar hand evaluation of the distillation ratio at pinned correlation
    /// values, driven through rank-1 feature fixtures that realize them.
    #[test]
    fn skd_matches_scalar_hand_evaluation() {
        let cfg = SkdConfig::default();
        let expect = |c_b: f64, c_d: f64| c_b.ln() / (c_d.ln().cbrt() + cfg.gamma);

        // c_B = 0.999, c_D = 0.001: approx 5.28e-4.
        assert_relative_eq!(expect(0.999, 0.001), 5.28e-4, max_relative = 1e-2);
        // c_B = c_D = 0.5: approx 0.7921.
        assert_relative_eq!(expect(0.5, 0.5), 0.7921, max_relative = 1e-3);

        // The tape evaluation reproduces the scalar formula on features whose
        // correlations are exactly the requested values.
        for (c_b, c_d) in [(0.999, 0.001), (0.5, 0.5), (0.9, 0.1)] {
            let mut t = Tape::new();
            let (zb_v, zb_i) = corr_pair(&mut t, c_b);
            let (zd_v, zd_i) = corr_pair(&mut t, c_d);
            let nodes = skd_loss(&mut t, zb_v, zb_i, zd_v, zd_i, &cfg).unwrap();
            assert_relative_eq!(t.scalar(nodes.corr_base), c_b, epsilon = 1e-9);
            assert_relative_eq!(t.scalar(nodes.corr_detail), c_d, epsilon = 1e-9);
            assert_relative_eq!(t.scalar(nodes.loss), expect(c_b, c_d), epsilon = 1e-9);
        }
    }

    /// Rows engineered so the rowwise Pearson correlation equals `rho`.
    fn corr_pair(t: &mut Tape, rho: f64) -> (NodeId, NodeId) {
        let d = 64usize;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = randn(&mut rng, &[1, d]);
        let v = randn(&mut rng, &[1, d]);
        let center = |x: &ArrayD<f64>| {
            let m = x.sum() / d as f64;
            x.mapv(|e| e - m)
        };
        let norm = |x: &ArrayD<f64>| x.mapv(|e| e * e).sum().sqrt();
        let uc = center(&u);
        let un = &uc / norm(&uc);
        let vc = center(&v);
        // Orthogonalize v against u, then mix to hit the target correlation.
        let dot = (&vc * &un).sum();
        let vperp = &vc - &un.mapv(|e| e * dot);
        let vn = &vperp / norm(&vperp);
        let b = un.mapv(|e| e * rho) + vn.mapv(|e| e * (1.0 - rho * rho).sqrt());
        (t.leaf(un.clone()), t.leaf(b))
    }

    #[test]
    fn skd_is_monotone_in_both_correlations() {
        let cfg = SkdConfig::default();
        let f = |c_b: f64, c_d: f64| c_b.ln() / (c_d.ln().cbrt() + cfg.gamma);
        let h = 1e-6;
        for c_b in [0.05, 0.3, 0.7, 0.95] {
            for c_d in [0.05, 0.3, 0.7, 0.95] {
                let db = (f(c_b + h, c_d) - f(c_b - h, c_d)) / (2.0 * h);
                let dd = (f(c_b, c_d + h) - f(c_b, c_d - h)) / (2.0 * h);
                assert!(db < 0.0, "loss must fall as base correlation rises");
                assert!(dd > 0.0, "loss must fall as detail correlation falls");
                assert!(f(c_b, c_d) >= 0.0, "nonnegative on the clamped box");
            }
        }
    }

    #[test]
    fn skd_config_invariant_is_enforced() {
        assert!(SkdConfig::default().validate().is_ok());
        let bad = SkdConfig {
            gamma: 0.2,
            corr_clamp_eps: 1e-3,
        };
        assert!(bad.validate().is_err());
        let bad = SkdConfig {
            gamma: -0.01,
            corr_clamp_eps: 1e-3,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn id_loss_uniform_and_confident_cases() {
        let n = 4;
        let k = 8;
        let labels: Vec<usize> = (0..n).collect();
        let mut t = Tape::new();
        let logits = t.leaf(ArrayD::zeros(IxDyn(&[n, k])));
        let l = id_loss(&mut t, logits, &labels).unwrap();
        assert_relative_eq!(t.scalar(l), (k as f64).ln(), epsilon = 1e-12);

        let mut conf = ArrayD::zeros(IxDyn(&[n, k]));
        for (i, &lab) in labels.iter().enumerate() {
            conf[[i, lab]] = 50.0;
        }
        let mut t = Tape::new();
        let logits = t.leaf(conf);
        let l = id_loss(&mut t, logits, &labels).unwrap();
        assert!(t.scalar(l) < 1e-12);
    }

    #[test]
    fn id_loss_is_permutation_invariant_and_checks_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = randn(&mut rng, &[5, 4]);
        let labels = [0usize, 1, 2, 3, 1];
        let mut t = Tape::new();
        let a = t.leaf(logits.clone());
        let base = id_loss(&mut t, a, &labels).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let mut permuted = logits.clone();
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        for (row, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                permuted[[row, j]] = logits[[src, j]];
            }
        }
        let mut t2 = Tape::new();
        let b = t2.leaf(permuted);
        let shuffled = id_loss(&mut t2, b, &l2).unwrap();
        assert_relative_eq!(t.scalar(base), t2.scalar(shuffled), epsilon = 1e-12);

        let mut t3 = Tape::new();
        let c = t3.leaf(randn(&mut rng, &[2, 3]));
        assert!(matches!(
            id_loss(&mut t3, c, &[0, 3]),
            Err(LossError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn align_ce_uniform_match_equals_log_k() {
        let mut t = Tape::new();
        let s = t.leaf(ArrayD::zeros(IxDyn(&[3, 4])));
        let q = t.leaf(ArrayD::zeros(IxDyn(&[3, 4])));
        let l = align_ce(&mut t, s, q).unwrap();
        assert_relative_eq!(t.scalar(l), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn align_ce_saturated_match_approaches_zero() {
        let mut onehot = ArrayD::zeros(IxDyn(&[3, 4]));
        for i in 0..3 {
            onehot[[i, i]] = 60.0;
        }
        let mut t = Tape::new();
        let s = t.leaf(onehot.clone());
        let q = t.leaf(onehot);
        let l = align_ce(&mut t, s, q).unwrap();
        assert!(t.scalar(l) < 1e-12);
    }

    /// Gibbs: cross-entropy to a fixed teacher is minimized exactly when the
    /// student matches, where it equals the teacher's entropy.
    #[test]
    fn align_ce_respects_gibbs_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let teacher = randn(&mut rng, &[4, 6]);
            let student = randn(&mut rng, &[4, 6]);
            let mut t = Tape::new();
            let s = t.leaf(student);
            let q = t.leaf(teacher.clone());
            let ce = align_ce(&mut t, s, q).unwrap();
            let ent = oracle::mean_softmax_entropy(&teacher.into_dimensionality().unwrap());
            assert!(t.scalar(ce) >= ent - 1e-12);
        }
        // Equality at match.
        let teacher = randn(&mut rng, &[4, 6]);
        let mut t = Tape::new();
        let s = t.leaf(teacher.clone());
        let q = t.leaf(teacher.clone());
        let ce = align_ce(&mut t, s, q).unwrap();
        let ent = oracle::mean_softmax_entropy(&teacher.into_dimensionality().unwrap());
        assert_relative_eq!(t.scalar(ce), ent, epsilon = 1e-12);
    }

    #[test]
    fn triplet_separated_clusters_and_degenerate_batches() {
        // Two well-separated clusters: hinge inactive.
        let mut x = ArrayD::zeros(IxDyn(&[4, 3]));
        for i in 2..4 {
            for j in 0..3 {
                x[[i, j]] = 10.0;
            }
        }
        let labels = [0usize, 0, 1, 1];
        let mut t = Tape::new();
        let e = t.leaf(x);
        let l = triplet_loss(&mut t, e, &labels, 0.3).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        // All-identical embeddings: loss equals the margin exactly.
        let mut t = Tape::new();
        let e = t.leaf(ArrayD::ones(IxDyn(&[4, 3])));
        let l = triplet_loss(&mut t, e, &labels, 0.3).unwrap();
        assert_relative_eq!(t.scalar(l), 0.3, epsilon = 1e-15);

        // Precondition violations.
        let mut t = Tape::new();
        let e = t.leaf(ArrayD::ones(IxDyn(&[3, 2])));
        assert!(triplet_loss(&mut t, e, &[0, 0, 0], 0.3).is_err());
        let mut t = Tape::new();
        let e = t.leaf(ArrayD::ones(IxDyn(&[3, 2])));
        assert!(triplet_loss(&mut t, e, &[0, 0, 1], 0.3).is_err());
    }

    #[test]
    fn triplet_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let labels = [0usize, 0, 1, 1, 2, 2, 3, 3];
        for _ in 0..10 {
            let x = randn(&mut rng, &[8, 4]);
            let mut t = Tape::new();
            let e = t.leaf(x.clone());
            let l = triplet_loss(&mut t, e, &labels, 0.3).unwrap();
            let expect =
                oracle::triplet_batch_hard(&x.into_dimensionality().unwrap(), &labels, 0.3);
            assert_relative_eq!(t.scalar(l), expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn breakdown_composition_identities() {
        let mut b = LossBreakdown {
            l_id: 1.0,
            l_tri: 0.5,
            l_okl: 0.25,
            l_id_d: 0.5,
            l_odkl: 0.5,
            l_fkl: 0.1,
            l_dkl: 0.2,
            l_dcorr: 0.3,
            l_id_b: 0.4,
            l_bkl: 0.1,
            l_id_f: 0.2,
            l_fbkl: 0.05,
            l_orth: 0.01,
            l_skd: 0.7,
            ..Default::default()
        };
        b.l_dfe = b.l_id_d + b.l_odkl;
        b.l_app = b.l_fkl + b.l_dkl + b.l_dcorr;
        b.l_cmf = b.l_id_f + b.l_fbkl;
        b.l_beg = b.l_id_b + b.l_app + b.l_bkl + b.l_cmf + b.l_orth;
        b.total = b.l_id + b.l_tri + b.l_okl + b.l_dfe + b.l_beg + b.l_skd;
        assert!(b.check_composition(1e-12).is_ok());
        b.total += 1.0;
        assert!(b.check_composition(1e-6).is_err());
        b.total = f64::NAN;
        assert_eq!(b.non_finite_term(), Some("total"));
    }
}
