//! Independent verification machinery: central finite differences (closure
//! and tape-replay forms), textbook Pearson correlation, exhaustive
//! average-precision and batch-hard triplet computation, a symmetric Jacobi
//! eigensolver backing the canonical-correlation oracle, and the coupling
//! round-trip check. Everything here deliberately avoids the code paths it
//! verifies.

use ndarray::{Array1, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Gradients, NodeId, Tape};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("ranking has no relevant items")]
    NoRelevantItems,
    #[error("non-finite function value during finite differencing")]
    NonFiniteValue,
}

// ── Textbook Pearson correlation ────────────────────────────────────────

/// Scalar Pearson correlation of two vectors by the direct formula.
/// Zero-variance inputs yield 0 by definition.
pub fn pearson_row(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Row-paired Pearson correlation averaged over rows.
pub fn pearson_rowwise(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let n = a.nrows();
    (0..n)
        .map(|i| pearson_row(&a.row(i).to_owned(), &b.row(i).to_owned()))
        .sum::<f64>()
        / n as f64
}

/// Mean entropy of the row softmax of `logits`; the Gibbs lower bound for a
/// cross-entropy against that softmax.
pub fn mean_softmax_entropy(logits: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for row in logits.rows() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for e in exps {
            let p = e / z;
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / logits.nrows() as f64
}

// ── Exhaustive retrieval / metric oracles ───────────────────────────────

/// Average precision of a binary relevance ranking: the mean over relevant
/// positions of the precision at that position, each recomputed from scratch.
pub fn brute_force_ap(relevance: &[bool]) -> Result<f64, OracleError> {
    let positions: Vec<usize> = relevance
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        return Err(OracleError::NoRelevantItems);
    }
    let mut sum = 0.0;
    for &p in &positions {
        let hits = relevance[..=p].iter().filter(|&&r| r).count();
        sum += hits as f64 / (p + 1) as f64;
    }
    Ok(sum / positions.len() as f64)
}

/// Batch-hard triplet loss by exhaustive enumeration over all pairs.
pub fn triplet_batch_hard(emb: &Array2<f64>, labels: &[usize], margin: f64) -> f64 {
    let n = labels.len();
    let dist = |i: usize, j: usize| -> f64 {
        emb.row(i)
            .iter()
            .zip(emb.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut hardest_pos = f64::NEG_INFINITY;
        let mut hardest_neg = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = dist(i, j);
            if labels[j] == labels[i] {
                hardest_pos = hardest_pos.max(d);
            } else {
                hardest_neg = hardest_neg.min(d);
            }
        }
        total += (hardest_pos - hardest_neg + margin).max(0.0);
    }
    total / n as f64
}

// ── Finite differences ──────────────────────────────────────────────────

/// Central finite differences of a scalar closure with respect to every
/// coordinate of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &ArrayD<f64>, h: f64) -> Result<ArrayD<f64>, OracleError>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    assert!(h > 0.0);
    let mut grad = ArrayD::zeros(x.raw_dim());
    let flat = grad.as_slice_mut().expect("standard layout");
    for (i, slot) in flat.iter_mut().enumerate() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[i] += h;
        minus.as_slice_mut().unwrap()[i] -= h;
        let (fp, fm) = (f(&plus), f(&minus));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(OracleError::NonFiniteValue);
        }
        *slot = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Guarded relative error between an analytic and a numeric derivative.
/// Coordinates where both magnitudes sit below the 1e-4 floor are compared
/// absolutely at `floor * tolerance`, which still sits well above the
/// difference-quotient noise floor.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Result of checking one parameter block of one case.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub case: String,
    pub block: String,
    pub max_rel_err: f64,
    pub n_coords: usize,
}

/// Outcome of a gradient-check run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err <= self.tolerance)
    }

    /// One line per checked block, suitable for CLI output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let status = if b.max_rel_err <= self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "{status:4} {:<28} {:<22} max_rel_err {:>10.3e} ({} coords)\n",
                b.case, b.block, b.max_rel_err, b.n_coords
            ));
        }
        out.push_str(&format!(
            "gradcheck: {} blocks, tolerance {:.1e}, {}\n",
            self.blocks.len(),
            self.tolerance,
            if self.pass() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Compare the recorded analytic gradient of `leaf` against central finite
/// differences computed through frozen-detach replay of the same tape.
/// At most `max_coords` coordinates are probed (seeded subsample). Uses the
/// fourth-order central stencil at the given `h` so the difference quotient's
/// own truncation error stays well below the tolerance it checks, even for
/// high-curvature terms.
pub fn fd_check_leaf(
    tape: &Tape,
    loss: NodeId,
    grads: &Gradients,
    leaf: NodeId,
    h: f64,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, usize) {
    let base = tape.value(leaf).clone();
    let analytic = grads.wrt(leaf);
    let n = base.len();
    let mut coords: Vec<usize> = (0..n).collect();
    if n > max_coords {
        coords.shuffle(rng);
        coords.truncate(max_coords);
    }
    let mut worst = 0.0f64;
    for &i in &coords {
        let eval = |offset: f64| {
            let mut x = base.clone();
            x.as_slice_mut().unwrap()[i] += offset;
            tape.replay_scalar(&[(leaf, x)], loss)
        };
        let numeric =
            (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h)) / (12.0 * h);
        let a = analytic
            .map(|g| g.as_slice().unwrap()[i])
            .unwrap_or(0.0);
        worst = worst.max(rel_err(a, numeric));
    }
    (worst, coords.len())
}

// ── Coupling round-trip check ───────────────────────────────────────────

/// Result of forward-then-inverse trials through a coupling stack.
#[derive(Debug, Clone)]
pub struct RoundTripReport {
    pub n_trials: usize,
    pub max_abs_err_f64: f64,
    pub max_abs_err_f32: f32,
    /// Block with the largest single-block round-trip error.
    pub worst_block: usize,
    pub tol_f64: f64,
    pub tol_f32: f32,
}

impl RoundTripReport {
    pub fn pass(&self) -> bool {
        self.max_abs_err_f64 <= self.tol_f64 && self.max_abs_err_f32 <= self.tol_f32
    }

    pub fn render(&self) -> String {
        format!(
            "coupling round-trip: {} trials, max abs err {:.3e} (f64, tol {:.1e}) / {:.3e} (f32, tol {:.1e}), worst block {}: {}\n",
            self.n_trials,
            self.max_abs_err_f64,
            self.tol_f64,
            self.max_abs_err_f32,
            self.tol_f32,
            self.worst_block + 1,
            if self.pass() { "PASS" } else { "FAIL" }
        )
    }
}

/// Forward the whole stack through the pre-normalization coupling maps, then
/// invert block by block in reverse order, at both float widths. Also runs
/// per-block round trips to attribute the worst error to a block index.
pub fn check_inn_roundtrip(
    blocks: &[crate::dfe::InnBlock],
    params: &crate::params::Params,
    input_shape: &[usize],
    n_trials: usize,
    tol_f32: f32,
    tol_f64: f64,
    seed: u64,
) -> RoundTripReport {
    use rand::Rng;
    let plain64: Vec<_> = blocks.iter().map(|b| b.plain::<f64>(params)).collect();
    let plain32: Vec<_> = blocks.iter().map(|b| b.plain::<f32>(params)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max64 = 0.0f64;
    let mut max32 = 0.0f32;
    let mut worst_block = 0usize;
    let mut worst_block_err = 0.0f64;
    for _ in 0..n_trials {
        let x = ArrayD::from_shape_simple_fn(ndarray::IxDyn(input_shape), || {
            rng.gen_range(-2.0..2.0)
        });
        // Full-stack composition, f64.
        let mut y = x.clone();
        for b in &plain64 {
            y = b.forward_pre_ln(&y);
        }
        for b in plain64.iter().rev() {
            y = b.inverse_pre_ln(&y);
        }
        let err = (&y - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        max64 = max64.max(err);
        // Per-block attribution, f64.
        let mut cur = x.clone();
        for (k, b) in plain64.iter().enumerate() {
            let fwd = b.forward_pre_ln(&cur);
            let back = b.inverse_pre_ln(&fwd);
            let e = (&back - &cur).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if e > worst_block_err {
                worst_block_err = e;
                worst_block = k;
            }
            cur = fwd;
        }
        // Full-stack composition, f32.
        let x32 = x.mapv(|v| v as f32);
        let mut y32 = x32.clone();
        for b in &plain32 {
            y32 = b.forward_pre_ln(&y32);
        }
        for b in plain32.iter().rev() {
            y32 = b.inverse_pre_ln(&y32);
        }
        let err32 = (&y32 - &x32).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        max32 = max32.max(err32);
    }
    RoundTripReport {
        n_trials,
        max_abs_err_f64: max64,
        max_abs_err_f32: max32,
        worst_block,
        tol_f64,
        tol_f32,
    }
}

// ── Gradient-check suite ────────────────────────────────────────────────

use rand_chacha::rand_core::SeedableRng;

fn randn_arr(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    crate::params::normal(rng, shape, std)
}

/// Named finite-difference cases covering every loss term and both fusion
/// attention stages. Feature-level losses differentiate their immediate
/// input leaves; module-level cases differentiate parameters through the
/// production builders. Detached teachers are held at their recorded values
/// by the replay, which is exactly the stop-gradient objective the backward
/// pass differentiates.
pub fn run_gradcheck_suite(seed: u64, max_coords: usize) -> GradCheckReport {
    use crate::beg::{approach_losses, beg_loss, BaseFusion, ProjectionHead};
    use crate::dfe::DetailHead;
    use crate::losses::{self, SkdConfig};
    use crate::nn::Linear;
    use crate::params::Params;
    use crate::tape::Graph;

    let tolerance = 1e-4;
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fd_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut blocks: Vec<BlockCheck> = Vec::new();

    let n = 4usize; // pairs
    let c = 10usize; // comprehensive width
    let half = 4usize; // detail width
    let k = 5usize; // classes
    let labels2: Vec<usize> = vec![0, 1, 2, 3, 0, 1, 2, 3];
    let labels_n: Vec<usize> = vec![0, 1, 2, 3];
    let skd_cfg = SkdConfig::default();

    let check = |name: &str,
                     block: &str,
                     tape: &crate::tape::Tape,
                     loss: crate::tape::NodeId,
                     grads: &crate::tape::Gradients,
                     leaf: crate::tape::NodeId,
                     fd_rng: &mut ChaCha8Rng,
                     blocks: &mut Vec<BlockCheck>| {
        let (err, n_coords) = fd_check_leaf(tape, loss, grads, leaf, h, max_coords, fd_rng);
        blocks.push(BlockCheck {
            case: name.to_string(),
            block: block.to_string(),
            max_rel_err: err,
            n_coords,
        });
    };

    // l_skd with respect to base and detail feature inputs.
    {
        let params = Params::new();
        let mut g = Graph::new(&params);
        let zb_v = g.tape.leaf(randn_arr(&mut rng, &[n, c], 1.0));
        let zb_i = g.tape.leaf(randn_arr(&mut rng, &[n, c], 1.0));
        let zd_v = g.tape.leaf(randn_arr(&mut rng, &[n, half], 1.0));
        let zd_i = g.tape.leaf(randn_arr(&mut rng, &[n, half], 1.0));
        let out = losses::skd_loss(&mut g.tape, zb_v, zb_i, zd_v, zd_i, &skd_cfg).unwrap();
        let grads = g.tape.backward(out.loss);
        for (label, leaf) in [("zb_v", zb_v), ("zd_v", zd_v)] {
            check("l_skd", label, &g.tape, out.loss, &grads, leaf, &mut fd_rng, &mut blocks);
        }
    }

    // Approach losses: l_fkl, l_dkl, l_dcorr with respect to the projected
    // detail input and the adapter weights.
    {
        let mut params = Params::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let head = DetailHead::new(&mut params, &mut prng, half, c, k);
        let mut g = Graph::new(&params);
        let zd_bar = g.tape.leaf(randn_arr(&mut rng, &[2 * n, c], 1.0));
        let zd = g.tape.leaf(randn_arr(&mut rng, &[2 * n, half], 1.0));
        let app = approach_losses(&mut g, zd_bar, zd, &head, &skd_cfg).unwrap();
        let adapter_node = g.p(head.adapter.w);
        for (name, loss) in [
            ("l_fkl", app.l_fkl),
            ("l_dkl", app.l_dkl),
            ("l_dcorr", app.l_dcorr),
        ] {
            let grads = g.tape.backward(loss);
            check(name, "zd_bar", &g.tape, loss, &grads, zd_bar, &mut fd_rng, &mut blocks);
            if name != "l_fkl" {
                check(name, "adapter.w", &g.tape, loss, &grads, adapter_node, &mut fd_rng, &mut blocks);
            } else {
                check(name, "zd", &g.tape, loss, &grads, zd, &mut fd_rng, &mut blocks);
            }
        }
    }

    // l_orth with respect to the projection matrix.
    {
        let mut params = Params::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let projection = ProjectionHead::new(&mut params, &mut prng, c);
        let mut g = Graph::new(&params);
        let pen = projection.orth_penalty(&mut g);
        let grads = g.tape.backward(pen);
        let p_node = g.p(projection.p_matrix);
        check("l_orth", "p_matrix", &g.tape, pen, &grads, p_node, &mut fd_rng, &mut blocks);
    }

    // l_odkl: detail-side student, comprehensive-side detached teacher.
    {
        let mut params = Params::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let head = DetailHead::new(&mut params, &mut prng, half, c, k);
        let cls_b = Linear::new(&mut params, &mut prng, "cls_b", c, k);
        let mut g = Graph::new(&params);
        let zd = g.tape.leaf(randn_arr(&mut rng, &[2 * n, half], 1.0));
        let z = g.tape.leaf(randn_arr(&mut rng, &[2 * n, c], 1.0));
        let out = crate::dfe::dfe_loss(&mut g, zd, z, &head, &cls_b, &labels2).unwrap();
        let grads = g.tape.backward(out.l_odkl);
        let cls_d_node = g.p(head.cls_d.w);
        check("l_odkl", "zd", &g.tape, out.l_odkl, &grads, zd, &mut fd_rng, &mut blocks);
        check("l_odkl", "cls_d.w", &g.tape, out.l_odkl, &grads, cls_d_node, &mut fd_rng, &mut blocks);
        let grads_id = g.tape.backward(out.l_id_d);
        check("l_id", "zd", &g.tape, out.l_id_d, &grads_id, zd, &mut fd_rng, &mut blocks);
        check("l_id", "cls_d.w", &g.tape, out.l_id_d, &grads_id, cls_d_node, &mut fd_rng, &mut blocks);
    }

    // l_okl: symmetrized alignment over the comprehensive halves.
    {
        let mut params = Params::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let cls_b = Linear::new(&mut params, &mut prng, "cls_b", c, k);
        let mut g = Graph::new(&params);
        let z_v = g.tape.leaf(randn_arr(&mut rng, &[n, c], 1.0));
        let z_i = g.tape.leaf(randn_arr(&mut rng, &[n, c], 1.0));
        let lv = cls_b.forward(&mut g, z_v);
        let li = cls_b.forward(&mut g, z_i);
        let l_okl = losses::align_ce_symmetric(&mut g.tape, lv, li).unwrap();
        let grads = g.tape.backward(l_okl);
        let w_node = g.p(cls_b.w);
        check("l_okl", "z_v", &g.tape, l_okl, &grads, z_v, &mut fd_rng, &mut blocks);
        check("l_okl", "cls_b.w", &g.tape, l_okl, &grads, w_node, &mut fd_rng, &mut blocks);
    }

    // l_tri on embeddings.
    {
        let params = Params::new();
        let mut g = Graph::new(&params);
        let emb = g.tape.leaf(randn_arr(&mut rng, &[2 * n, c], 1.0));
        let l_tri = losses::triplet_loss(&mut g.tape, emb, &labels2, 0.3).unwrap();
        let grads = g.tape.backward(l_tri);
        check("l_tri", "embeddings", &g.tape, l_tri, &grads, emb, &mut fd_rng, &mut blocks);
    }

    // l_bkl / l_fbkl and both fusion stages, through the base branch.
    {
        let mut params = Params::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let fusion = BaseFusion::new(&mut params, &mut prng, c);
        let cls_b = Linear::new(&mut params, &mut prng, "cls_b", c, k);
        let mut g = Graph::new(&params);
        let zb = g.tape.leaf(randn_arr(&mut rng, &[2 * n, c], 1.0));
        let zb_v = g.tape.slice_axis(zb, 0, 0, n);
        let zb_i = g.tape.slice_axis(zb, 0, n, 2 * n);
        let fused = fusion.fuse(&mut g, zb_v, zb_i).unwrap();
        let out = beg_loss(&mut g, zb, fused.zbf, &cls_b, &labels2, &labels_n, None, None).unwrap();
        for (name, loss) in [("l_bkl", out.l_bkl), ("l_fbkl", out.l_fbkl)] {
            let grads = g.tape.backward(loss);
            check(name, "zb", &g.tape, loss, &grads, zb, &mut fd_rng, &mut blocks);
        }
        // Fusion stages: l_id_f reaches stage 2 directly and stage 1 through
        // the fused intermediate.
        let grads = g.tape.backward(out.l_id_f);
        let stage1 = g.p(fusion.p_q);
        let stage2 = g.p(fusion.q_q);
        check("fusion_stage1", "p_q", &g.tape, out.l_id_f, &grads, stage1, &mut fd_rng, &mut blocks);
        check("fusion_stage2", "q_q", &g.tape, out.l_id_f, &grads, stage2, &mut fd_rng, &mut blocks);
        check("fusion", "zb", &g.tape, out.l_id_f, &grads, zb, &mut fd_rng, &mut blocks);
    }

    GradCheckReport {
        tolerance,
        blocks,
    }
}

/// Full-objective sweep: finite differences of the total loss with respect to
/// every parameter block of a small end-to-end model (subsampled coordinates).
pub fn run_total_loss_gradcheck(seed: u64, max_coords: usize) -> GradCheckReport {
    use crate::config::ExperimentConfig;
    use crate::objective::TrainState;
    use crate::synthdata::{make_dataset, sample_pk_batch, ObservationShape, SynthSpec};
    use crate::tape::Graph;

    let mut cfg = ExperimentConfig::desk_default();
    cfg.synth = SynthSpec {
        n_identities: 4,
        samples_per_modality_per_id: 2,
        shared_dim: 2,
        specific_dim: 2,
        observation_shape: ObservationShape::Flat(12),
        noise_scale: 0.05,
        specific_mix_scale: 1.0,
        seed,
    };
    cfg.backbone.stages = vec![8, 10, 12, 16];
    cfg.backbone.input_shape = ObservationShape::Flat(12);
    cfg.inn_blocks = 2;
    cfg.train.p_ids = 4;
    cfg.train.k_per = 2;
    cfg.seed = seed;

    let state = TrainState::new(&cfg).expect("fixture model");
    let dataset = make_dataset(&cfg.synth).expect("fixture dataset");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
    let batch = sample_pk_batch(&dataset, 4, 2, &mut rng).expect("fixture batch");

    let mut g = Graph::new(&state.params);
    let fwd = state.model.forward(&mut g, &batch).expect("forward");
    let out = state.model.total_loss(&mut g, &fwd, &batch).expect("losses");
    let grads = g.tape.backward(out.total);

    let mut fd_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut blocks = Vec::new();
    for (pid, node) in g.tape.param_bindings().to_vec() {
        let (err, n_coords) =
            fd_check_leaf(&g.tape, out.total, &grads, node, 1e-5, max_coords, &mut fd_rng);
        blocks.push(BlockCheck {
            case: "total".to_string(),
            block: state.params.name(pid).to_string(),
            max_rel_err: err,
            n_coords,
        });
    }
    GradCheckReport {
        tolerance: 1e-4,
        blocks,
    }
}

/// Random matrix with orthonormal rows (modified Gram-Schmidt), used to build
/// exact symmetric idempotent projectors `P = U^T U` in tests.
pub fn random_orthonormal_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    use rand::Rng;
    assert!(r <= c);
    let mut u = Array2::<f64>::zeros((r, c));
    let mut k = 0;
    while k < r {
        let mut v: Array1<f64> = Array1::from_shape_simple_fn(c, || rng.gen_range(-1.0..1.0));
        for i in 0..k {
            let proj = v.dot(&u.row(i));
            v = &v - &(&u.row(i) * proj);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-8 {
            continue; // numerically degenerate draw, try again
        }
        u.row_mut(k).assign(&(&v / norm));
        k += 1;
    }
    u
}

// ── Symmetric eigensolver and canonical correlation ─────────────────────

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and the matching eigenvector columns.
pub fn symmetric_eigh(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigh needs a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vecs[[k, new]] = v[[k, old]];
        }
    }
    (vals, vecs)
}

/// Pseudo-inverse square root of a symmetric PSD matrix, dropping the
/// numerically null space.
fn pinv_sqrt(a: &Array2<f64>) -> Array2<f64> {
    let (vals, vecs) = symmetric_eigh(a);
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
    let tol = vmax * 1e-10;
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for (k, &w) in vals.iter().enumerate() {
        if w > tol {
            let scale = 1.0 / w.sqrt();
            for i in 0..n {
                for j in 0..n {
                    out[[i, j]] += vecs[[i, k]] * scale * vecs[[j, k]];
                }
            }
        }
    }
    out
}

fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let m = col.sum() / col.len() as f64;
        col.mapv_inplace(|v| v - m);
    }
    out
}

/// First canonical correlation between two observation matrices `[n, dx]`
/// and `[n, dy]`: whiten both covariances (pseudo-inverse on rank-deficient
/// directions), then take the top singular value of the cross matrix by
/// power iteration.
pub fn top_canonical_correlation(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    assert_eq!(x.nrows(), y.nrows());
    let n = x.nrows() as f64;
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cxx = xc.t().dot(&xc) / (n - 1.0);
    let cyy = yc.t().dot(&yc) / (n - 1.0);
    let cxy = xc.t().dot(&yc) / (n - 1.0);
    let wx = pinv_sqrt(&cxx);
    let wy = pinv_sqrt(&cyy);
    let m = wx.dot(&cxy).dot(&wy);
    // Power iteration on M^T M for the top singular value.
    let dy = m.ncols();
    let mut v = Array1::<f64>::ones(dy);
    v /= (dy as f64).sqrt();
    let mut sigma = 0.0;
    for _ in 0..300 {
        let mv = m.dot(&v);
        let mtv = m.t().dot(&mv);
        let norm = mtv.dot(&mtv).sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        v = &mtv / norm;
        sigma = m.dot(&v).dot(&m.dot(&v)).sqrt();
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn brute_force_ap_hand_examples() {
        assert_relative_eq!(brute_force_ap(&[true, false, false]).unwrap(), 1.0);
        assert_relative_eq!(brute_force_ap(&[false, true]).unwrap(), 0.5);
        assert_relative_eq!(
            brute_force_ap(&[true, false, true]).unwrap(),
            5.0 / 6.0,
            epsilon = 1e-15
        );
        assert!(brute_force_ap(&[false, false]).is_err());
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let f = |x: &ArrayD<f64>| x.iter().map(|v| v * v).sum::<f64>();
        let x = ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(f, &x, 1e-5).unwrap();
        assert_relative_eq!(g[[0]], 2.0, epsilon = 1e-8);
        assert_relative_eq!(g[[1]], 4.0, epsilon = 1e-8);
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 2.0]];
        let (vals, vecs) = symmetric_eigh(&a);
        // Known eigenvalues: 2 + sqrt(2), 2, 2 - sqrt(2).
        assert_relative_eq!(vals[0], 2.0 + 2f64.sqrt(), epsilon = 1e-10);
        assert_relative_eq!(vals[1], 2.0, epsilon = 1e-10);
        assert_relative_eq!(vals[2], 2.0 - 2f64.sqrt(), epsilon = 1e-10);
        // A v = lambda v for each column.
        for k in 0..3 {
            let v = vecs.column(k).to_owned();
            let av = a.dot(&v);
            for i in 0..3 {
                assert_relative_eq!(av[i], vals[k] * v[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn canonical_correlation_detects_exact_linear_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let d = 7;
        let s = Array2::from_shape_simple_fn((n, 3), || rng.gen_range(-1.0..1.0));
        let gx = Array2::from_shape_simple_fn((3, d), || rng.gen_range(-1.0..1.0));
        let gy = Array2::from_shape_simple_fn((3, d), || rng.gen_range(-1.0..1.0));
        let x = s.dot(&gx);
        let y = s.dot(&gy);
        let c = top_canonical_correlation(&x, &y);
        assert_relative_eq!(c, 1.0, epsilon = 1e-6);

        // Independent noise: correlation well below 1.
        let z = Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0));
        let c2 = top_canonical_correlation(&x, &z);
        assert!(c2 < 0.9, "independent blocks should not correlate: {c2}");
    }
}
