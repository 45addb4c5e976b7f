//! Cross-modality retrieval evaluation: CMC and mAP with camera-aware
//! filtering. Gallery entries sharing both identity and camera with the query
//! are removed before ranking; ties break by stable gallery index order.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::{Modality, SynthDataset};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("identity {0} missing from the target modality")]
    MissingIdentity(u32),
}

/// Ranking geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

/// Retrieval quality for one query/gallery split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Rank-k accuracies for k = 1..=cmc.len().
    pub cmc: Vec<f64>,
    pub map: f64,
    pub n_queries: usize,
    /// Queries dropped because camera filtering removed every correct match.
    pub n_excluded: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    /// CMC curves are non-decreasing with all values in [0, 1].
    pub fn validate(&self) -> Result<(), String> {
        let mut prev = 0.0;
        for (k, &v) in self.cmc.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("cmc[{k}] = {v} outside [0, 1]"));
            }
            if v + 1e-12 < prev {
                return Err(format!("cmc not monotone at k = {}", k + 1));
            }
            prev = v;
        }
        if !(0.0..=1.0).contains(&self.map) {
            return Err(format!("map = {} outside [0, 1]", self.map));
        }
        Ok(())
    }

    pub fn render(&self, mode: &str) -> String {
        let mut out = format!(
            "mode {mode}: {} queries ({} excluded), mAP {:.4}\n",
            self.n_queries, self.n_excluded, self.map
        );
        for (k, v) in self.cmc.iter().enumerate().take(10) {
            out.push_str(&format!("  rank-{:<2} {:.4}\n", k + 1, v));
        }
        out
    }
}

/// Rank the gallery per query, remove same-id/same-camera entries, and score
/// CMC plus mean average precision. `k_max` caps the CMC curve length (it is
/// further capped by the smallest filtered gallery).
#[allow(clippy::too_many_arguments)]
pub fn cmc_map(
    query_feats: &Array2<f64>,
    query_ids: &[u32],
    query_cams: &[u32],
    gal_feats: &Array2<f64>,
    gal_ids: &[u32],
    gal_cams: &[u32],
    metric: Metric,
    k_max: usize,
) -> Result<EvalReport, EvalError> {
    let nq = query_feats.nrows();
    let ng = gal_feats.nrows();
    if nq == 0 {
        return Err(EvalError::Empty("query"));
    }
    if ng == 0 {
        return Err(EvalError::Empty("gallery"));
    }
    if query_ids.len() != nq || query_cams.len() != nq {
        return Err(EvalError::Shape("query id/cam arrays".into()));
    }
    if gal_ids.len() != ng || gal_cams.len() != ng {
        return Err(EvalError::Shape("gallery id/cam arrays".into()));
    }
    if query_feats.ncols() != gal_feats.ncols() {
        return Err(EvalError::Shape(format!(
            "feature widths {} vs {}",
            query_feats.ncols(),
            gal_feats.ncols()
        )));
    }

    let mut cmc_hits = vec![0.0f64; k_max.min(ng).max(1)];
    let mut ap_sum = 0.0;
    let mut n_scored = 0usize;
    let mut n_excluded = 0usize;
    let mut min_valid = ng;

    for qi in 0..nq {
        let q = query_feats.row(qi);
        // Distance per gallery row; cosine ranks by descending similarity.
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(ng);
        for gi in 0..ng {
            if gal_ids[gi] == query_ids[qi] && gal_cams[gi] == query_cams[qi] {
                continue; // same identity seen by the same camera
            }
            let g = gal_feats.row(gi);
            let score = match metric {
                Metric::Euclidean => q
                    .iter()
                    .zip(g.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
                Metric::Cosine => {
                    let dot: f64 = q.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                    let nq_: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ng_: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    -(dot / (nq_ * ng_ + 1e-12))
                }
            };
            order.push((score, gi));
        }
        if !order.iter().any(|&(_, gi)| gal_ids[gi] == query_ids[qi]) {
            n_excluded += 1;
            continue;
        }
        min_valid = min_valid.min(order.len());
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut first_hit = None;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &(_, gi)) in order.iter().enumerate() {
            if gal_ids[gi] == query_ids[qi] {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(pos);
                }
            }
        }
        let first = first_hit.expect("checked above");
        for k in first..cmc_hits.len() {
            cmc_hits[k] += 1.0;
        }
        ap_sum += precision_sum / hits as f64;
        n_scored += 1;
    }

    if n_scored == 0 {
        return Err(EvalError::Empty("scored query"));
    }
    let mut cmc: Vec<f64> = cmc_hits.iter().map(|h| h / n_scored as f64).collect();
    cmc.truncate(min_valid.max(1));
    Ok(EvalReport {
        cmc,
        map: ap_sum / n_scored as f64,
        n_queries: n_scored,
        n_excluded,
    })
}

// ── Protocol splits ─────────────────────────────────────────────────────

/// Direction of the retrieval protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    VisToIr,
    IrToVis,
}

impl ProtocolMode {
    pub fn query_modality(self) -> Modality {
        match self {
            ProtocolMode::VisToIr => Modality::Vis,
            ProtocolMode::IrToVis => Modality::Ir,
        }
    }

    pub fn gallery_modality(self) -> Modality {
        match self {
            ProtocolMode::VisToIr => Modality::Ir,
            ProtocolMode::IrToVis => Modality::Vis,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolMode::VisToIr => "vis_to_ir",
            ProtocolMode::IrToVis => "ir_to_vis",
        }
    }
}

/// One side of a protocol split: row indices into a modality's sample arrays
/// plus their identities and cameras.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub modality: Modality,
    pub rows: Vec<usize>,
    pub ids: Vec<u32>,
    pub cams: Vec<u32>,
}

/// Queries drawn from the source modality, gallery from the target, gallery
/// order shuffled by the seeded rng (rank ties then resolve in shuffled
/// stable order, as in repeated-trial protocols).
pub fn make_protocol_split(
    dataset: &SynthDataset,
    mode: ProtocolMode,
    rng: &mut ChaCha8Rng,
) -> Result<(SampleSet, SampleSet), EvalError> {
    let n = dataset.n_samples_per_modality();
    if n == 0 {
        return Err(EvalError::Empty("dataset"));
    }
    let build = |modality: Modality, rows: Vec<usize>| SampleSet {
        ids: rows.iter().map(|&r| dataset.labels[r]).collect(),
        cams: rows.iter().map(|&r| dataset.cams(modality)[r]).collect(),
        rows,
        modality,
    };
    let query_rows: Vec<usize> = (0..n).collect();
    let mut gallery_rows: Vec<usize> = (0..n).collect();
    gallery_rows.shuffle(rng);
    let query = build(mode.query_modality(), query_rows);
    let gallery = build(mode.gallery_modality(), gallery_rows);
    for &id in &query.ids {
        if !gallery.ids.contains(&id) {
            return Err(EvalError::MissingIdentity(id));
        }
    }
    Ok((query, gallery))
}
