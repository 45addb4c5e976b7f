//! Synthetic two-modality identity data with controllable shared (base) and
//! modality-specific (detail) latent factors.
//!
//! Each identity draws one shared latent; each sample adds a modality-specific
//! latent. Observations are fixed random mixtures (linear for vector data, a
//! linear seed plus a small convolution for image data) with per-modality
//! mixing, so the ground-truth shared/specific split is known and the
//! cross-modality claims become checkable on a desk.
//!
//! Arrays are stored as `f32`; the binary export writes those bytes verbatim
//! (little-endian), so export/import round-trips are bit-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cameras per modality; samples are assigned round-robin so the evaluator's
/// same-camera exclusion rule is exercised.
pub const CAMERAS_PER_MODALITY: u32 = 2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("identity {identity} has only {available} samples, batch needs {needed}")]
    InsufficientSamples {
        identity: usize,
        needed: usize,
        available: usize,
    },
    #[error("dataset has {available} identities, batch needs {needed}")]
    InsufficientIdentities { needed: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Which modality a sample set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Vis,
    Ir,
}

/// Flat vectors or small images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObservationShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl ObservationShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ObservationShape::Flat(d) => vec![d],
            ObservationShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }
}

/// Generation parameters for a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub samples_per_modality_per_id: usize,
    pub shared_dim: usize,
    pub specific_dim: usize,
    pub observation_shape: ObservationShape,
    pub noise_scale: f64,
    /// Scale on the modality-specific mixing rows; 0 realizes the
    /// "specific weights zeroed" degenerate dataset where both modalities are
    /// deterministic functions of the same shared latent.
    #[serde(default = "default_specific_mix_scale")]
    pub specific_mix_scale: f64,
    pub seed: u64,
}

fn default_specific_mix_scale() -> f64 {
    1.0
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 32,
            samples_per_modality_per_id: 8,
            shared_dim: 8,
            specific_dim: 8,
            observation_shape: ObservationShape::Flat(64),
            noise_scale: 0.05,
            specific_mix_scale: 1.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_identities < 2 {
            return Err(SynthError::InvalidSpec("n_identities must be >= 2".into()));
        }
        if self.samples_per_modality_per_id < 1 {
            return Err(SynthError::InvalidSpec(
                "samples_per_modality_per_id must be >= 1".into(),
            ));
        }
        if self.shared_dim < 1 || self.specific_dim < 1 {
            return Err(SynthError::InvalidSpec(
                "shared_dim and specific_dim must be >= 1".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(SynthError::InvalidSpec("noise_scale must be >= 0".into()));
        }
        if !(self.specific_mix_scale >= 0.0) {
            return Err(SynthError::InvalidSpec(
                "specific_mix_scale must be >= 0".into(),
            ));
        }
        let latent = self.shared_dim + self.specific_dim;
        if latent > self.observation_shape.numel() {
            return Err(SynthError::InvalidSpec(format!(
                "latent dim {latent} exceeds observation dim {}",
                self.observation_shape.numel()
            )));
        }
        Ok(())
    }

    pub fn n_samples_per_modality(&self) -> usize {
        self.n_identities * self.samples_per_modality_per_id
    }
}

/// Per-modality fixed random mixture from latent space to observations.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixing {
    /// `[latent_dim, obs_dim]`, applied as `x = z . G`.
    Flat(Array2<f32>),
    /// Linear seed into `[SEED_CHANNELS, h, w]` followed by a 3x3 convolution.
    Image {
        pre: Array2<f32>,
        kernels: Array4<f32>,
    },
}

const SEED_CHANNELS: usize = 4;

/// Ground-truth latents and mixtures, kept for oracle checks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub shared: Array2<f32>,
    pub vis_specific: Array2<f32>,
    pub ir_specific: Array2<f32>,
    pub mix_vis: Mixing,
    pub mix_ir: Mixing,
}

/// A generated dataset. Rows are identity-major: identity `b` occupies rows
/// `b * spp .. (b + 1) * spp` in both modalities, and row `i` of both
/// modalities carries the same identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub vis: ArrayD<f32>,
    pub ir: ArrayD<f32>,
    pub labels: Vec<u32>,
    pub vis_cams: Vec<u32>,
    pub ir_cams: Vec<u32>,
    pub ground_truth: GroundTruth,
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || sample_normal(rng) * scale)
}

fn draw_mixing(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Mixing {
    let latent = spec.shared_dim + spec.specific_dim;
    let scale = 1.0 / (latent as f32).sqrt();
    match spec.observation_shape {
        ObservationShape::Flat(d) => Mixing::Flat(normal_mat(rng, latent, d, scale)),
        ObservationShape::Image { channels, height, width } => {
            let pre = normal_mat(rng, latent, SEED_CHANNELS * height * width, scale);
            let kscale = 1.0 / ((SEED_CHANNELS * 9) as f32).sqrt();
            let kernels = Array4::from_shape_simple_fn(
                (channels, SEED_CHANNELS, 3, 3),
                || sample_normal(rng) * kscale,
            );
            Mixing::Image { pre, kernels }
        }
    }
}

/// 3x3 same-padding convolution used by the image-mode mixture.
fn conv3x3_same(input: &ndarray::Array3<f32>, kernels: &Array4<f32>) -> ndarray::Array3<f32> {
    let (cin, h, w) = input.dim();
    let cout = kernels.dim().0;
    let mut out = ndarray::Array3::<f32>::zeros((cout, h, w));
    for co in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = x as isize + kx as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += input[[ci, iy as usize, ix as usize]]
                                    * kernels[[co, ci, ky, kx]];
                            }
                        }
                    }
                }
                out[[co, y, x]] = acc;
            }
        }
    }
    out
}

fn mix_observation(mixing: &Mixing, latent: &[f32], shape: &ObservationShape) -> Vec<f32> {
    match mixing {
        Mixing::Flat(g) => {
            let d = g.ncols();
            let mut out = vec![0.0f32; d];
            for (k, &z) in latent.iter().enumerate() {
                if z != 0.0 {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += z * g[[k, j]];
                    }
                }
            }
            out
        }
        Mixing::Image { pre, kernels } => {
            let (channels, height, width) = match shape {
                ObservationShape::Image { channels, height, width } => (*channels, *height, *width),
                _ => unreachable!("image mixing with flat shape"),
            };
            let mut seed = vec![0.0f32; SEED_CHANNELS * height * width];
            for (k, &z) in latent.iter().enumerate() {
                if z != 0.0 {
                    for (j, s) in seed.iter_mut().enumerate() {
                        *s += z * pre[[k, j]];
                    }
                }
            }
            let seed = ndarray::Array3::from_shape_vec((SEED_CHANNELS, height, width), seed)
                .expect("seed shape");
            let out = conv3x3_same(&seed, kernels);
            debug_assert_eq!(out.dim(), (channels, height, width));
            out.into_raw_vec_and_offset().0
        }
    }
}

/// Generate a dataset. Deterministic given the spec (including its seed):
/// draw order is mixing matrices, shared latents, then per-identity samples.
pub fn make_dataset(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mix_vis = draw_mixing(&mut rng, spec);
    let mix_ir = draw_mixing(&mut rng, spec);
    let n = spec.n_samples_per_modality();
    let spp = spec.samples_per_modality_per_id;
    let obs_dims = spec.observation_shape.dims();
    let mut full_shape = vec![n];
    full_shape.extend(&obs_dims);

    let shared = normal_mat(&mut rng, spec.n_identities, spec.shared_dim, 1.0);
    let mut vis_specific = Array2::<f32>::zeros((n, spec.specific_dim));
    let mut ir_specific = Array2::<f32>::zeros((n, spec.specific_dim));
    let mut vis = ArrayD::<f32>::zeros(IxDyn(&full_shape));
    let mut ir = ArrayD::<f32>::zeros(IxDyn(&full_shape));
    let mut labels = Vec::with_capacity(n);
    let mut cams = Vec::with_capacity(n);

    let obs_len = spec.observation_shape.numel();
    let mix_scale = spec.specific_mix_scale as f32;
    let noise = spec.noise_scale as f32;
    for b in 0..spec.n_identities {
        for p in 0..spp {
            let row = b * spp + p;
            labels.push(b as u32);
            cams.push((p as u32) % CAMERAS_PER_MODALITY);
            for (modality_specific, obs, mixing) in [
                (&mut vis_specific, &mut vis, &mix_vis),
                (&mut ir_specific, &mut ir, &mix_ir),
            ] {
                let mut latent = Vec::with_capacity(spec.shared_dim + spec.specific_dim);
                latent.extend(shared.row(b).iter().copied());
                for k in 0..spec.specific_dim {
                    let u = sample_normal(&mut rng);
                    modality_specific[[row, k]] = u;
                    latent.push(u * mix_scale);
                }
                let mut x = mix_observation(mixing, &latent, &spec.observation_shape);
                if noise > 0.0 {
                    for v in x.iter_mut() {
                        *v += sample_normal(&mut rng) * noise;
                    }
                }
                let flat = obs.as_slice_mut().expect("standard layout");
                flat[row * obs_len..(row + 1) * obs_len].copy_from_slice(&x);
            }
        }
    }

    Ok(SynthDataset {
        spec: *spec,
        vis,
        ir,
        labels,
        vis_cams: cams.clone(),
        ir_cams: cams,
        ground_truth: GroundTruth {
            shared,
            vis_specific,
            ir_specific,
            mix_vis,
            mix_ir,
        },
    })
}

impl SynthDataset {
    pub fn n_samples_per_modality(&self) -> usize {
        self.labels.len()
    }

    pub fn observations(&self, m: Modality) -> &ArrayD<f32> {
        match m {
            Modality::Vis => &self.vis,
            Modality::Ir => &self.ir,
        }
    }

    pub fn cams(&self, m: Modality) -> &[u32] {
        match m {
            Modality::Vis => &self.vis_cams,
            Modality::Ir => &self.ir_cams,
        }
    }

    /// Row indices belonging to one identity (identity-major layout).
    pub fn rows_of_identity(&self, id: usize) -> std::ops::Range<usize> {
        let spp = self.spec.samples_per_modality_per_id;
        id * spp..(id + 1) * spp
    }

    /// Observation rows for the given indices, upcast to `f64` for the model.
    pub fn gather_f64(&self, m: Modality, rows: &[usize]) -> ArrayD<f64> {
        let src = self.observations(m);
        let obs_len = self.spec.observation_shape.numel();
        let mut shape = vec![rows.len()];
        shape.extend(self.spec.observation_shape.dims());
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        let flat_src = src.as_slice().expect("standard layout");
        let flat_dst = out.as_slice_mut().expect("standard layout");
        for (dst_row, &src_row) in rows.iter().enumerate() {
            for j in 0..obs_len {
                flat_dst[dst_row * obs_len + j] = flat_src[src_row * obs_len + j] as f64;
            }
        }
        out
    }
}

// ── PK batch sampling ───────────────────────────────────────────────────

/// Paired visible/infrared mini-batch: row `i` of both modality blocks
/// carries the same identity, which is the ordering contract every
/// cross-modality loss relies on.
#[derive(Debug, Clone)]
pub struct ModalBatch {
    pub vis: ArrayD<f64>,
    pub ir: ArrayD<f64>,
    pub labels: Vec<usize>,
    pub vis_cams: Vec<u32>,
    pub ir_cams: Vec<u32>,
}

impl ModalBatch {
    pub fn n_pairs(&self) -> usize {
        self.labels.len()
    }

    /// Labels for the stacked `[vis; ir]` feature ordering.
    pub fn stacked_labels(&self) -> Vec<usize> {
        let mut out = self.labels.clone();
        out.extend_from_slice(&self.labels);
        out
    }
}

/// Sample `p_ids` identities and `k_per` samples per identity per modality,
/// identities without replacement, rows grouped by identity.
pub fn sample_pk_batch(
    dataset: &SynthDataset,
    p_ids: usize,
    k_per: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ModalBatch, SynthError> {
    let n_ids = dataset.spec.n_identities;
    if p_ids < 1 || p_ids > n_ids {
        return Err(SynthError::InsufficientIdentities {
            needed: p_ids,
            available: n_ids,
        });
    }
    let spp = dataset.spec.samples_per_modality_per_id;
    if k_per > spp {
        return Err(SynthError::InsufficientSamples {
            identity: 0,
            needed: k_per,
            available: spp,
        });
    }
    let mut ids: Vec<usize> = (0..n_ids).collect();
    ids.shuffle(rng);
    ids.truncate(p_ids);

    let mut vis_rows = Vec::with_capacity(p_ids * k_per);
    let mut ir_rows = Vec::with_capacity(p_ids * k_per);
    let mut labels = Vec::with_capacity(p_ids * k_per);
    for &id in &ids {
        let all: Vec<usize> = dataset.rows_of_identity(id).collect();
        let pick = |rng: &mut ChaCha8Rng| {
            let mut rows = all.clone();
            rows.shuffle(rng);
            rows.truncate(k_per);
            rows
        };
        vis_rows.extend(pick(rng));
        ir_rows.extend(pick(rng));
        labels.extend(std::iter::repeat(id).take(k_per));
    }

    Ok(ModalBatch {
        vis: dataset.gather_f64(Modality::Vis, &vis_rows),
        ir: dataset.gather_f64(Modality::Ir, &ir_rows),
        labels,
        vis_cams: vis_rows.iter().map(|&r| dataset.vis_cams[r]).collect(),
        ir_cams: ir_rows.iter().map(|&r| dataset.ir_cams[r]).collect(),
    })
}

// ── Binary export / import ──────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct BinArrayEntry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    byte_order: String,
    dtype: String,
    spec: SynthSpec,
    /// Row index -> identity, shared by both modalities.
    label_table: Vec<u32>,
    vis_cams: Vec<u32>,
    ir_cams: Vec<u32>,
    arrays: std::collections::BTreeMap<String, BinArrayEntry>,
}

fn write_f32_le(path: &Path, data: &[f32]) -> Result<(), SynthError> {
    let mut file = fs::File::create(path)?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Read a little-endian `f32` array of the given shape.
pub fn read_f32_le(path: &Path, shape: &[usize]) -> Result<ArrayD<f32>, SynthError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let n: usize = shape.iter().product();
    if buf.len() != n * 4 {
        return Err(SynthError::Manifest(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            buf.len(),
            n * 4
        )));
    }
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| SynthError::Manifest(format!("shape mismatch: {e}")))
}

/// Write a `f32` array in the dataset binary format (little-endian).
pub fn write_f32_array(path: &Path, arr: &ArrayD<f32>) -> Result<(), SynthError> {
    write_f32_le(path, arr.as_standard_layout().as_slice().unwrap())
}

impl SynthDataset {
    /// Export as a directory of little-endian `f32` arrays plus a JSON
    /// manifest carrying dims, seed, and the label table.
    pub fn export_dir(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        let mut arrays = std::collections::BTreeMap::new();
        let mut dump = |name: &str, shape: Vec<usize>, data: &[f32]| -> Result<(), SynthError> {
            let file = format!("{name}.bin");
            write_f32_le(&dir.join(&file), data)?;
            arrays.insert(name.to_string(), BinArrayEntry { path: file, shape });
            Ok(())
        };
        dump("vis", self.vis.shape().to_vec(), self.vis.as_slice().unwrap())?;
        dump("ir", self.ir.shape().to_vec(), self.ir.as_slice().unwrap())?;
        let gt = &self.ground_truth;
        dump(
            "shared_latents",
            vec![gt.shared.nrows(), gt.shared.ncols()],
            gt.shared.as_slice().unwrap(),
        )?;
        dump(
            "vis_specific",
            vec![gt.vis_specific.nrows(), gt.vis_specific.ncols()],
            gt.vis_specific.as_slice().unwrap(),
        )?;
        dump(
            "ir_specific",
            vec![gt.ir_specific.nrows(), gt.ir_specific.ncols()],
            gt.ir_specific.as_slice().unwrap(),
        )?;
        for (name, mixing) in [("mix_vis", &gt.mix_vis), ("mix_ir", &gt.mix_ir)] {
            match mixing {
                Mixing::Flat(g) => {
                    dump(name, vec![g.nrows(), g.ncols()], g.as_slice().unwrap())?;
                }
                Mixing::Image { pre, kernels } => {
                    dump(
                        &format!("{name}_pre"),
                        vec![pre.nrows(), pre.ncols()],
                        pre.as_slice().unwrap(),
                    )?;
                    dump(
                        &format!("{name}_kernels"),
                        kernels.shape().to_vec(),
                        kernels.as_slice().unwrap(),
                    )?;
                }
            }
        }
        let manifest = Manifest {
            format_version: 1,
            byte_order: "little-endian".into(),
            dtype: "f32".into(),
            spec: self.spec,
            label_table: self.labels.clone(),
            vis_cams: self.vis_cams.clone(),
            ir_cams: self.ir_cams.clone(),
            arrays,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| SynthError::Manifest(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Import a directory written by [`SynthDataset::export_dir`].
    pub fn import_dir(dir: &Path) -> Result<SynthDataset, SynthError> {
        let json = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&json).map_err(|e| SynthError::Manifest(e.to_string()))?;
        if manifest.dtype != "f32" || manifest.byte_order != "little-endian" {
            return Err(SynthError::Manifest(format!(
                "unsupported encoding {} / {}",
                manifest.dtype, manifest.byte_order
            )));
        }
        let load = |name: &str| -> Result<ArrayD<f32>, SynthError> {
            let entry = manifest
                .arrays
                .get(name)
                .ok_or_else(|| SynthError::Manifest(format!("missing array {name}")))?;
            read_f32_le(&dir.join(&entry.path), &entry.shape)
        };
        let to2 = |a: ArrayD<f32>| -> Array2<f32> { a.into_dimensionality().expect("2-D array") };
        let load_mixing = |name: &str| -> Result<Mixing, SynthError> {
            if manifest.arrays.contains_key(name) {
                Ok(Mixing::Flat(to2(load(name)?)))
            } else {
                Ok(Mixing::Image {
                    pre: to2(load(&format!("{name}_pre"))?),
                    kernels: load(&format!("{name}_kernels"))?
                        .into_dimensionality()
                        .expect("4-D kernels"),
                })
            }
        };
        Ok(SynthDataset {
            spec: manifest.spec,
            vis: load("vis")?,
            ir: load("ir")?,
            labels: manifest.label_table,
            vis_cams: manifest.vis_cams,
            ir_cams: manifest.ir_cams,
            ground_truth: GroundTruth {
                shared: to2(load("shared_latents")?),
                vis_specific: to2(load("vis_specific")?),
                ir_specific: to2(load("ir_specific")?),
                mix_vis: load_mixing("mix_vis")?,
                mix_ir: load_mixing("mix_ir")?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use approx::assert_relative_eq;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_identities: 6,
            samples_per_modality_per_id: 4,
            shared_dim: 3,
            specific_dim: 2,
            observation_shape: ObservationShape::Flat(12),
            noise_scale: 0.05,
            specific_mix_scale: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_dataset(&small_spec()).unwrap();
        let b = make_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_counts_match_spec() {
        let spec = SynthSpec {
            n_identities: 32,
            samples_per_modality_per_id: 8,
            shared_dim: 8,
            specific_dim: 8,
            observation_shape: ObservationShape::Flat(64),
            ..SynthSpec::default()
        };
        let d = make_dataset(&spec).unwrap();
        assert_eq!(d.n_samples_per_modality(), 32 * 8);
        assert_eq!(d.vis.shape(), &[256, 64]);
        assert_eq!(d.ir.shape(), &[256, 64]);
        // Round-robin cameras cover both values for every identity.
        for id in 0..32 {
            let cams: std::collections::BTreeSet<u32> = d
                .rows_of_identity(id)
                .map(|r| d.vis_cams[r])
                .collect();
            assert_eq!(cams.len(), CAMERAS_PER_MODALITY as usize);
        }
    }

    #[test]
    fn spec_validation_rejects_bad_dims() {
        let mut s = small_spec();
        s.shared_dim = 10;
        s.specific_dim = 10;
        assert!(matches!(make_dataset(&s), Err(SynthError::InvalidSpec(_))));
        let mut s = small_spec();
        s.n_identities = 1;
        assert!(make_dataset(&s).is_err());
        let mut s = small_spec();
        s.noise_scale = -1.0;
        assert!(make_dataset(&s).is_err());
    }

    /// With zero noise and zeroed specific mixing, both modalities are exact
    /// linear functions of the same shared latent, so the first canonical
    /// correlation between the observation blocks is 1.
    #[test]
    fn degenerate_dataset_has_unit_canonical_correlation() {
        let spec = SynthSpec {
            noise_scale: 0.0,
            specific_mix_scale: 0.0,
            ..small_spec()
        };
        let d = make_dataset(&spec).unwrap();
        let to64 = |a: &ArrayD<f32>| -> Array2<f64> {
            a.mapv(|v| v as f64).into_dimensionality().unwrap()
        };
        let c = oracle::top_canonical_correlation(&to64(&d.vis), &to64(&d.ir));
        assert_relative_eq!(c, 1.0, epsilon = 1e-6);

        // Exact rank-1 retrieval by brute-force nearest neighbor on the
        // ir-side regression of each vis row's identity mean.
        // Same-identity observations share the latent, so the nearest
        // ir row of a vis row maps to the same identity after a linear fit;
        // here we simply check the latent determinism: two samples of one
        // identity in different modalities yield identical latents.
        for id in 0..spec.n_identities {
            let rows: Vec<usize> = d.rows_of_identity(id).collect();
            // With specific mixing zeroed every sample of an identity is the
            // same point per modality.
            for &r in &rows[1..] {
                for j in 0..spec.observation_shape.numel() {
                    assert_eq!(d.vis[[r, j]], d.vis[[rows[0], j]]);
                    assert_eq!(d.ir[[r, j]], d.ir[[rows[0], j]]);
                }
            }
        }
    }

    #[test]
    fn pk_batch_shapes_pairing_and_label_distribution() {
        let spec = SynthSpec {
            n_identities: 16,
            samples_per_modality_per_id: 4,
            shared_dim: 4,
            specific_dim: 4,
            observation_shape: ObservationShape::Flat(24),
            ..SynthSpec::default()
        };
        let d = make_dataset(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_pk_batch(&d, 8, 4, &mut rng).unwrap();
        assert_eq!(b.n_pairs(), 32);
        assert_eq!(b.vis.shape(), &[32, 24]);
        assert_eq!(b.ir.shape(), &[32, 24]);
        // Exactly 8 distinct labels, each appearing 4 times.
        let mut counts = std::collections::BTreeMap::new();
        for &l in &b.labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 8);
        assert!(counts.values().all(|&c| c == 4));
    }

    #[test]
    fn pk_batch_minimal_and_deterministic() {
        let d = make_dataset(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_pk_batch(&d, 1, 1, &mut rng).unwrap();
        assert_eq!(b.n_pairs(), 1);
        assert_eq!(b.labels.len(), 1);

        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let b1 = sample_pk_batch(&d, 4, 2, &mut r1).unwrap();
        let b2 = sample_pk_batch(&d, 4, 2, &mut r2).unwrap();
        assert_eq!(b1.labels, b2.labels);
        assert_eq!(b1.vis, b2.vis);
        assert_eq!(b1.ir, b2.ir);
    }

    #[test]
    fn pk_batch_rejects_oversized_requests() {
        let d = make_dataset(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_pk_batch(&d, 7, 2, &mut rng).is_err());
        assert!(sample_pk_batch(&d, 2, 5, &mut rng).is_err());
    }

    #[test]
    fn export_import_round_trip_is_bit_identical() {
        let d = make_dataset(&small_spec()).unwrap();
        let dir = std::env::temp_dir().join(format!("bdlf_synth_{}", std::process::id()));
        d.export_dir(&dir).unwrap();
        let back = SynthDataset::import_dir(&dir).unwrap();
        assert_eq!(d, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn image_mode_generates_and_round_trips() {
        let spec = SynthSpec {
            n_identities: 3,
            samples_per_modality_per_id: 2,
            shared_dim: 3,
            specific_dim: 2,
            observation_shape: ObservationShape::Image {
                channels: 2,
                height: 8,
                width: 8,
            },
            noise_scale: 0.01,
            specific_mix_scale: 1.0,
            seed: 11,
        };
        let d = make_dataset(&spec).unwrap();
        assert_eq!(d.vis.shape(), &[6, 2, 8, 8]);
        let dir = std::env::temp_dir().join(format!("bdlf_synth_img_{}", std::process::id()));
        d.export_dir(&dir).unwrap();
        let back = SynthDataset::import_dir(&dir).unwrap();
        assert_eq!(d, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
