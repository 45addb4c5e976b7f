//! Total objective assembly and the optimization loop: learning-rate warmup
//! and stepwise decay, SGD with momentum, an EMA shadow updated every step,
//! and an append-only metrics log carrying every loss term plus the
//! cross-modality correlation diagnostics.

use ndarray::{Array2, ArrayD};
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, FeaturePack};
use crate::beg::{self, BaseFusion, BegError, ProjectionHead};
use crate::config::ExperimentConfig;
use crate::dfe::{self, DetailHead, DfeError, DfeModule};
use crate::losses::{self, LossBreakdown, LossError, SkdConfig};
use crate::nn::Linear;
use crate::params::{EmaState, Params, SgdMomentum};
use crate::synthdata::{sample_pk_batch, ModalBatch, SynthDataset, SynthError};
use crate::tape::{Graph, NodeId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Dfe(#[from] DfeError),
    #[error(transparent)]
    Beg(#[from] BegError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("feature pack incomplete: {0}")]
    IncompletePack(&'static str),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss term {term} at epoch {epoch} step {step}")]
    NonFinite {
        term: String,
        epoch: usize,
        step: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("invalid train config: {0}")]
    Config(String),
}

// ── Train configuration ─────────────────────────────────────────────────

/// Learning-rate schedule, EMA decay, and batch composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_peak: f64,
    /// Linear per-epoch warmup from `lr_init` to `lr_peak`.
    pub warmup_epochs: usize,
    /// Epochs at which the rate steps down to the matching `lr_values` entry.
    pub decay_epochs: Vec<usize>,
    pub lr_values: Vec<f64>,
    pub total_epochs: usize,
    pub ema_decay: f64,
    pub momentum: f64,
    pub triplet_margin: f64,
    pub p_ids: usize,
    pub k_per: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale profile: minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            lr_init: 1e-2,
            lr_peak: 1e-1,
            warmup_epochs: 2,
            decay_epochs: vec![10, 15],
            lr_values: vec![1e-2, 1e-3],
            total_epochs: 20,
            ema_decay: 0.98,
            momentum: 0.9,
            triplet_margin: 0.3,
            p_ids: 8,
            k_per: 4,
            seed: 7,
        }
    }

    /// Full-scale schedule for real datasets: warmup over 10 epochs to 1e-1,
    /// decays to 1e-2 / 1e-3 at epochs 20 and 95, to 1e-4 at 180, 220 total.
    pub fn paper_sysu() -> Self {
        Self {
            lr_init: 1e-2,
            lr_peak: 1e-1,
            warmup_epochs: 10,
            decay_epochs: vec![20, 95, 180],
            lr_values: vec![1e-2, 1e-3, 1e-4],
            total_epochs: 220,
            ema_decay: 0.999,
            momentum: 0.9,
            triplet_margin: 0.3,
            p_ids: 8,
            k_per: 4,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.decay_epochs.len() != self.lr_values.len() {
            return Err(TrainError::Config(
                "decay_epochs and lr_values must have equal length".into(),
            ));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrainError::Config("decay_epochs must be ascending".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(TrainError::Config("ema_decay must lie in (0, 1]".into()));
        }
        if self.total_epochs == 0 || self.p_ids == 0 || self.k_per == 0 {
            return Err(TrainError::Config(
                "total_epochs, p_ids, k_per must be positive".into(),
            ));
        }
        if self.p_ids < 2 {
            return Err(TrainError::Config(
                "p_ids must be >= 2 (the triplet loss needs negatives)".into(),
            ));
        }
        for v in [self.lr_init, self.lr_peak, self.momentum, self.triplet_margin] {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::Config("rates must be nonnegative reals".into()));
            }
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr_init
                + (self.lr_peak - self.lr_init) * epoch as f64 / self.warmup_epochs as f64;
        }
        let mut lr = self.lr_peak;
        for (e, v) in self.decay_epochs.iter().zip(self.lr_values.iter()) {
            if epoch >= *e {
                lr = *v;
            }
        }
        lr
    }
}

// ── Model ───────────────────────────────────────────────────────────────

/// The full architecture. Every component is always constructed (so a fixed
/// seed yields identical initialization across ablations); the toggles choose
/// which paths and loss terms participate in a forward pass.
pub struct Model {
    pub backbone: Backbone,
    pub dfe: DfeModule,
    pub projection: ProjectionHead,
    pub fusion: BaseFusion,
    pub head: DetailHead,
    pub cls_b: Linear,
    pub skd: SkdConfig,
    pub toggles: crate::config::AblationToggles,
    pub n_classes: usize,
    pub triplet_margin: f64,
}

/// Forward handles: the spec-shaped feature pack plus the per-modality base
/// halves the losses need.
pub struct ModelForward {
    pub pack: FeaturePack,
    pub zb_v: Option<NodeId>,
    pub zb_i: Option<NodeId>,
}

/// Scalar outcome of one loss evaluation.
pub struct StepLosses {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Raw cross-modality correlations (base, detail) when both feature
    /// families exist in this variant.
    pub corr: Option<(f64, f64)>,
}

impl Model {
    pub fn build(cfg: &ExperimentConfig, params: &mut Params) -> Result<Self, ModelError> {
        cfg.validate().map_err(|e| ModelError::Invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = Backbone::new(cfg.backbone.clone(), params, &mut rng)?;
        let c_mid = cfg.backbone.c_mid();
        let c = cfg.backbone.c_out();
        let flat = cfg.backbone.flat_mode;
        let n_classes = cfg.synth.n_identities;
        let dfe = DfeModule::new(params, &mut rng, c_mid, cfg.inn_blocks, flat)?;
        let projection = ProjectionHead::new(params, &mut rng, c);
        let fusion = BaseFusion::new(params, &mut rng, c);
        let head = DetailHead::new(params, &mut rng, c_mid / 2, c, n_classes);
        let cls_b = Linear::new(params, &mut rng, "cls_b", c, n_classes);
        Ok(Self {
            backbone,
            dfe,
            projection,
            fusion,
            head,
            cls_b,
            skd: cfg.skd,
            toggles: cfg.toggles,
            n_classes,
            triplet_margin: cfg.train.triplet_margin,
        })
    }

    fn needs_detail(&self) -> bool {
        self.toggles.dfe || self.toggles.l_app || self.toggles.l_skd
    }

    /// Run backbone, detail extraction, projection, and fusion per toggles.
    pub fn forward(&self, g: &mut Graph, batch: &ModalBatch) -> Result<ModelForward, ModelError> {
        let n = batch.n_pairs();
        let (zm_v, zm_i) = self.backbone.encode_fore(g, batch)?;
        let (z_v, z_i, z) = self.backbone.encode_rear(g, zm_v, zm_i);
        let mut pack = FeaturePack::new(n, zm_v, zm_i, z_v, z_i, z);
        let mut zb_halves = (None, None);

        if self.needs_detail() {
            let (zd_v, zd_i, zd) = if self.toggles.dfe {
                let out = self.dfe.forward(g, zm_v, zm_i)?;
                (out.zd_v, out.zd_i, out.zd)
            } else {
                // Ablated extractor: pooled first-half channels stand in.
                DfeModule::pooled_proxy(g, zm_v, zm_i, self.dfe.half, self.backbone.cfg.flat_mode)
            };
            pack.zd_v = Some(zd_v);
            pack.zd_i = Some(zd_i);
            pack.zd = Some(zd);
        }

        if self.toggles.beg {
            let (zd_bar, zb) = self.projection.project(g, z);
            let zb_v = g.tape.slice_axis(zb, 0, 0, n);
            let zb_i = g.tape.slice_axis(zb, 0, n, 2 * n);
            let fused = self.fusion.fuse(g, zb_v, zb_i)?;
            pack.zd_bar = Some(zd_bar);
            pack.zb = Some(zb);
            pack.zbf = Some(fused.zbf);
            zb_halves = (Some(zb_v), Some(zb_i));
        }

        pack.check_finite(&g.tape)
            .map_err(ModelError::Invalid)?;
        Ok(ModelForward {
            pack,
            zb_v: zb_halves.0,
            zb_i: zb_halves.1,
        })
    }

    /// Assemble the unweighted total and the named breakdown for one batch.
    pub fn total_loss(
        &self,
        g: &mut Graph,
        fwd: &ModelForward,
        batch: &ModalBatch,
    ) -> Result<StepLosses, ModelError> {
        let n = batch.n_pairs();
        let labels2 = batch.stacked_labels();
        let pack = &fwd.pack;
        let mut b = LossBreakdown::default();

        let logits_z = self.cls_b.forward(g, pack.z);
        let l_id = losses::id_loss(&mut g.tape, logits_z, &labels2)?;
        let l_tri = losses::triplet_loss(&mut g.tape, pack.z, &labels2, self.triplet_margin)?;
        let logits_z_v = g.tape.slice_axis(logits_z, 0, 0, n);
        let logits_z_i = g.tape.slice_axis(logits_z, 0, n, 2 * n);
        let l_okl = losses::align_ce_symmetric(&mut g.tape, logits_z_v, logits_z_i)?;
        b.l_id = g.tape.scalar(l_id);
        b.l_tri = g.tape.scalar(l_tri);
        b.l_okl = g.tape.scalar(l_okl);
        let mut total = g.tape.add(l_id, l_tri);
        total = g.tape.add(total, l_okl);

        if self.toggles.dfe {
            let zd = pack.zd.ok_or(ModelError::IncompletePack("zd"))?;
            let out = dfe::dfe_loss(g, zd, pack.z, &self.head, &self.cls_b, &labels2)?;
            b.l_id_d = g.tape.scalar(out.l_id_d);
            b.l_odkl = g.tape.scalar(out.l_odkl);
            b.l_dfe = g.tape.scalar(out.l_dfe);
            total = g.tape.add(total, out.l_dfe);
        }

        if self.toggles.beg {
            let zb = pack.zb.ok_or(ModelError::IncompletePack("zb"))?;
            let zbf = pack.zbf.ok_or(ModelError::IncompletePack("zbf"))?;
            let app = if self.toggles.l_app {
                let zd_bar = pack.zd_bar.ok_or(ModelError::IncompletePack("zd_bar"))?;
                let zd = pack.zd.ok_or(ModelError::IncompletePack("zd"))?;
                let app = beg::approach_losses(g, zd_bar, zd, &self.head, &self.skd)?;
                b.l_fkl = g.tape.scalar(app.l_fkl);
                b.l_dkl = g.tape.scalar(app.l_dkl);
                b.l_dcorr = g.tape.scalar(app.l_dcorr);
                b.l_app = g.tape.scalar(app.l_app);
                Some(app.l_app)
            } else {
                None
            };
            let orth = if self.toggles.l_orth {
                let o = self.projection.orth_penalty(g);
                b.l_orth = g.tape.scalar(o);
                Some(o)
            } else {
                None
            };
            let out = beg::beg_loss(g, zb, zbf, &self.cls_b, &labels2, &batch.labels, app, orth)?;
            b.l_id_b = g.tape.scalar(out.l_id_b);
            b.l_bkl = g.tape.scalar(out.l_bkl);
            b.l_id_f = g.tape.scalar(out.l_id_f);
            b.l_fbkl = g.tape.scalar(out.l_fbkl);
            b.l_cmf = g.tape.scalar(out.l_cmf);
            b.l_beg = g.tape.scalar(out.l_beg);
            total = g.tape.add(total, out.l_beg);
        }

        let mut corr = None;
        if let (Some(zb_v), Some(zb_i), Some(zd_v), Some(zd_i)) =
            (fwd.zb_v, fwd.zb_i, pack.zd_v, pack.zd_i)
        {
            if self.toggles.l_skd {
                let nodes = losses::skd_loss(&mut g.tape, zb_v, zb_i, zd_v, zd_i, &self.skd)?;
                b.l_skd = g.tape.scalar(nodes.loss);
                total = g.tape.add(total, nodes.loss);
                corr = Some((g.tape.scalar(nodes.corr_base), g.tape.scalar(nodes.corr_detail)));
            } else {
                let cb = losses::pearson_corr(&mut g.tape, zb_v, zb_i)?;
                let cd = losses::pearson_corr(&mut g.tape, zd_v, zd_i)?;
                corr = Some((g.tape.scalar(cb), g.tape.scalar(cd)));
            }
        }

        b.total = g.tape.scalar(total);
        Ok(StepLosses {
            total,
            breakdown: b,
            corr,
        })
    }
}

// ── Metrics log ─────────────────────────────────────────────────────────

/// One appended log row; correlations are NaN for variants that lack the
/// base or detail features.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub c_base: f64,
    pub c_detail: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_header() -> String {
        let mut cols = vec!["epoch".to_string(), "step".to_string()];
        cols.extend(LossBreakdown::FIELDS.iter().map(|s| s.to_string()));
        cols.push("c_base".into());
        cols.push("c_detail".into());
        cols.push("lr".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec![self.epoch.to_string(), self.step.to_string()];
        cols.extend(self.breakdown.values().iter().map(|v| format!("{v}")));
        cols.push(format!("{}", self.c_base));
        cols.push(format!("{}", self.c_detail));
        cols.push(format!("{}", self.lr));
        cols.join(",")
    }

    pub fn parse_csv(line: &str) -> Result<Self, String> {
        let parts: Vec<&str> = line.split(',').collect();
        let expected = 2 + LossBreakdown::FIELDS.len() + 3;
        if parts.len() != expected {
            return Err(format!("expected {expected} columns, got {}", parts.len()));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|e| format!("bad float {s}: {e}"));
        let mut vals = [0.0f64; 19];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = f(parts[2 + i])?;
        }
        let b = LossBreakdown {
            l_id: vals[0],
            l_tri: vals[1],
            l_okl: vals[2],
            l_id_d: vals[3],
            l_odkl: vals[4],
            l_dfe: vals[5],
            l_fkl: vals[6],
            l_dkl: vals[7],
            l_dcorr: vals[8],
            l_app: vals[9],
            l_id_b: vals[10],
            l_bkl: vals[11],
            l_id_f: vals[12],
            l_fbkl: vals[13],
            l_cmf: vals[14],
            l_orth: vals[15],
            l_beg: vals[16],
            l_skd: vals[17],
            total: vals[18],
        };
        Ok(MetricsRow {
            epoch: parts[0].parse().map_err(|e| format!("epoch: {e}"))?,
            step: parts[1].parse().map_err(|e| format!("step: {e}"))?,
            breakdown: b,
            c_base: f(parts[2 + 19])?,
            c_detail: f(parts[2 + 19 + 1])?,
            lr: f(parts[2 + 19 + 2])?,
        })
    }
}

pub fn write_metrics_csv(path: &std::path::Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", MetricsRow::csv_header())?;
    for r in rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn read_metrics_csv(path: &std::path::Path) -> Result<Vec<MetricsRow>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != MetricsRow::csv_header() {
                return Err("unexpected metrics header".into());
            }
            continue;
        }
        rows.push(MetricsRow::parse_csv(line)?);
    }
    Ok(rows)
}

/// Mean logged correlations per epoch: `(epoch, mean c_base, mean c_detail)`.
pub fn epoch_correlation_means(rows: &[MetricsRow]) -> Vec<(usize, f64, f64)> {
    let mut out: Vec<(usize, f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(last) if last.0 == r.epoch => {
                last.1 += r.c_base;
                last.2 += r.c_detail;
                last.3 += 1;
            }
            _ => out.push((r.epoch, r.c_base, r.c_detail, 1)),
        }
    }
    out.into_iter()
        .map(|(e, cb, cd, k)| (e, cb / k as f64, cd / k as f64))
        .collect()
}

// ── Training ────────────────────────────────────────────────────────────

/// Everything the optimizer mutates.
pub struct TrainState {
    pub model: Model,
    pub params: Params,
    pub ema: EmaState,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, ModelError> {
        let mut params = Params::new();
        let model = Model::build(cfg, &mut params)?;
        let ema = EmaState::new(&params, cfg.train.ema_decay);
        Ok(Self { model, params, ema })
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub final_breakdown: LossBreakdown,
    /// Final position of the batch sampler stream, for provenance.
    pub rng_word_pos: u128,
}

/// Epoch loop with warmup/decay schedule, SGD-momentum updates, and an EMA
/// shadow refreshed every step. Deterministic for a fixed config and seed.
/// A non-finite loss aborts with the offending term named.
pub fn train(
    state: &mut TrainState,
    dataset: &SynthDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let TrainState { model, params, ema } = state;
    let batch_rows = cfg.p_ids * cfg.k_per;
    let steps_per_epoch = (dataset.n_samples_per_modality() / batch_rows).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdMomentum::new(params, cfg.momentum);
    let mut metrics = Vec::with_capacity(cfg.total_epochs * steps_per_epoch);
    let mut last = LossBreakdown::default();

    for epoch in 0..cfg.total_epochs {
        let lr = cfg.lr_at(epoch);
        for step in 0..steps_per_epoch {
            let batch = sample_pk_batch(dataset, cfg.p_ids, cfg.k_per, &mut rng)?;
            let (bindings, grads, breakdown, corr) = {
                let mut g = Graph::new(params);
                let fwd = model.forward(&mut g, &batch)?;
                let out = model.total_loss(&mut g, &fwd, &batch)?;
                let grads = g.tape.backward(out.total);
                (
                    g.tape.param_bindings().to_vec(),
                    grads,
                    out.breakdown,
                    out.corr,
                )
            };
            if let Some(term) = breakdown.non_finite_term() {
                return Err(TrainError::NonFinite {
                    term: term.to_string(),
                    epoch,
                    step,
                });
            }
            opt.step(params, &bindings, &grads, lr);
            ema.update(params);
            let (c_base, c_detail) = corr.unwrap_or((f64::NAN, f64::NAN));
            metrics.push(MetricsRow {
                epoch,
                step,
                breakdown,
                c_base,
                c_detail,
                lr,
            });
            last = breakdown;
        }
    }

    Ok(TrainOutcome {
        metrics,
        final_breakdown: last,
        rng_word_pos: rng.get_word_pos(),
    })
}

/// Pooled comprehensive features for retrieval; no detail or base heads are
/// involved at inference.
pub fn extract_features(
    model: &Model,
    params: &Params,
    samples: &ArrayD<f64>,
) -> Result<Array2<f64>, ModelError> {
    let mut g = Graph::new(params);
    let z = model.backbone.encode_all(&mut g, samples)?;
    Ok(g.tape
        .value(z)
        .clone()
        .into_dimensionality()
        .expect("pooled features are 2-D"))
}
