//! Single-stream encoder split into a fore part (intermediate spatial
//! features of width `c_mid`) and a rear part (pooled comprehensive features
//! of width `c_out`). Both modalities pass through the same parameters; the
//! stacked comprehensive feature keeps visible rows before infrared rows,
//! which is the ordering contract every cross-modality loss relies on.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{gap, Conv2d, Linear};
use crate::params::Params;
use crate::synthdata::{ModalBatch, ObservationShape};
use crate::tape::{Graph, NodeId, Tape};

const STAGE_LEAK: f64 = 0.01;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match configured {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
}

/// Stage widths, split point, and input mode of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels (conv mode) or feature widths (flat mode) per stage.
    pub stages: Vec<usize>,
    /// The fore part covers stages `1..=split_after_stage`.
    pub split_after_stage: usize,
    pub input_shape: ObservationShape,
    /// Replaces convolutions with per-stage affine blocks for vector data.
    pub flat_mode: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: vec![32, 64, 128, 256],
            split_after_stage: 3,
            input_shape: ObservationShape::Flat(64),
            flat_mode: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.stages.is_empty() || self.stages.iter().any(|&w| w == 0) {
            return Err(BackboneError::InvalidConfig(
                "stage widths must be strictly positive".into(),
            ));
        }
        if self.split_after_stage < 1 || self.split_after_stage >= self.stages.len() {
            return Err(BackboneError::InvalidConfig(format!(
                "split_after_stage {} must lie in 1..{}",
                self.split_after_stage,
                self.stages.len()
            )));
        }
        if self.c_mid() % 2 != 0 {
            return Err(BackboneError::InvalidConfig(format!(
                "width at the split ({}) must be even for the half-channel coupling split",
                self.c_mid()
            )));
        }
        let is_flat = matches!(self.input_shape, ObservationShape::Flat(_));
        if is_flat != self.flat_mode {
            return Err(BackboneError::InvalidConfig(
                "flat_mode must match the input shape kind".into(),
            ));
        }
        Ok(())
    }

    /// Width of the intermediate feature at the split.
    pub fn c_mid(&self) -> usize {
        self.stages[self.split_after_stage - 1]
    }

    /// Width of the comprehensive feature.
    pub fn c_out(&self) -> usize {
        *self.stages.last().unwrap()
    }

    /// Spatial size of the intermediate feature (conv mode halves per stage).
    pub fn mid_spatial(&self) -> Option<(usize, usize)> {
        match self.input_shape {
            ObservationShape::Flat(_) => None,
            ObservationShape::Image { height, width, .. } => {
                let mut h = height;
                let mut w = width;
                for _ in 0..self.split_after_stage {
                    h = (h + 2 - 3) / 2 + 1;
                    w = (w + 2 - 3) / 2 + 1;
                }
                Some((h, w))
            }
        }
    }
}

enum Stage {
    Flat(Linear),
    Conv(Conv2d),
}

/// The encoder; all stages are shared across modalities.
pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(
        cfg: BackboneConfig,
        params: &mut Params,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        match cfg.input_shape {
            ObservationShape::Flat(d) => {
                let mut prev = d;
                for (i, &w) in cfg.stages.iter().enumerate() {
                    stages.push(Stage::Flat(Linear::new(
                        params,
                        rng,
                        &format!("backbone.stage{}", i + 1),
                        prev,
                        w,
                    )));
                    prev = w;
                }
            }
            ObservationShape::Image { channels, .. } => {
                let mut prev = channels;
                for (i, &w) in cfg.stages.iter().enumerate() {
                    stages.push(Stage::Conv(Conv2d::new(
                        params,
                        rng,
                        &format!("backbone.stage{}", i + 1),
                        prev,
                        w,
                        2,
                    )));
                    prev = w;
                }
            }
        }
        Ok(Self { cfg, stages })
    }

    fn run_stages(&self, g: &mut Graph, mut x: NodeId, range: std::ops::Range<usize>) -> NodeId {
        for stage in &self.stages[range] {
            x = match stage {
                Stage::Flat(lin) => lin.forward(g, x),
                Stage::Conv(conv) => conv.forward(g, x),
            };
            x = g.tape.leaky_relu(x, STAGE_LEAK);
        }
        x
    }

    fn check_input(&self, got: &[usize]) -> Result<(), BackboneError> {
        let expected = self.cfg.input_shape.dims();
        if got[1..] != expected[..] {
            return Err(BackboneError::ShapeMismatch {
                expected,
                got: got[1..].to_vec(),
            });
        }
        Ok(())
    }

    /// Fore part: per-modality intermediate features of width `c_mid`.
    pub fn encode_fore(
        &self,
        g: &mut Graph,
        batch: &ModalBatch,
    ) -> Result<(NodeId, NodeId), BackboneError> {
        self.check_input(batch.vis.shape())?;
        self.check_input(batch.ir.shape())?;
        let vis = g.tape.constant(batch.vis.clone());
        let ir = g.tape.constant(batch.ir.clone());
        let zm_v = self.run_stages(g, vis, 0..self.cfg.split_after_stage);
        let zm_i = self.run_stages(g, ir, 0..self.cfg.split_after_stage);
        Ok((zm_v, zm_i))
    }

    /// Full encoder for one modality tensor: all stages plus pooling.
    /// Used at inference, where retrieval relies on the comprehensive
    /// feature alone.
    pub fn encode_all(&self, g: &mut Graph, samples: &ndarray::ArrayD<f64>) -> Result<NodeId, BackboneError> {
        self.check_input(samples.shape())?;
        let x = g.tape.constant(samples.clone());
        let mut z = self.run_stages(g, x, 0..self.stages.len());
        if !self.cfg.flat_mode {
            z = gap(g, z);
        }
        Ok(z)
    }

    /// Rear part: remaining stages, pooling, and the batch-axis stack
    /// `z = [z_v; z_i]`.
    pub fn encode_rear(
        &self,
        g: &mut Graph,
        zm_v: NodeId,
        zm_i: NodeId,
    ) -> (NodeId, NodeId, NodeId) {
        let range = self.cfg.split_after_stage..self.stages.len();
        let mut z_v = self.run_stages(g, zm_v, range.clone());
        let mut z_i = self.run_stages(g, zm_i, range);
        if !self.cfg.flat_mode {
            z_v = gap(g, z_v);
            z_i = gap(g, z_i);
        }
        let z = g.tape.concat(0, z_v, z_i);
        (z_v, z_i, z)
    }
}

// ── Feature pack ────────────────────────────────────────────────────────

/// Node handles for every named embedding of one forward pass. Slots filled
/// by the detail / base modules are optional because ablations can drop them.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePack {
    pub n_pairs: usize,
    pub zm_v: NodeId,
    pub zm_i: NodeId,
    pub z_v: NodeId,
    pub z_i: NodeId,
    /// `[2n, c]`, visible rows `0..n`, infrared rows `n..2n`.
    pub z: NodeId,
    pub zd_v: Option<NodeId>,
    pub zd_i: Option<NodeId>,
    pub zd: Option<NodeId>,
    pub zd_bar: Option<NodeId>,
    pub zb: Option<NodeId>,
    pub zbf: Option<NodeId>,
}

impl FeaturePack {
    pub fn new(n_pairs: usize, zm_v: NodeId, zm_i: NodeId, z_v: NodeId, z_i: NodeId, z: NodeId) -> Self {
        Self {
            n_pairs,
            zm_v,
            zm_i,
            z_v,
            z_i,
            z,
            zd_v: None,
            zd_i: None,
            zd: None,
            zd_bar: None,
            zb: None,
            zbf: None,
        }
    }

    fn slots(&self) -> Vec<(&'static str, NodeId)> {
        let mut v = vec![
            ("zm_v", self.zm_v),
            ("zm_i", self.zm_i),
            ("z_v", self.z_v),
            ("z_i", self.z_i),
            ("z", self.z),
        ];
        for (name, slot) in [
            ("zd_v", self.zd_v),
            ("zd_i", self.zd_i),
            ("zd", self.zd),
            ("zd_bar", self.zd_bar),
            ("zb", self.zb),
            ("zbf", self.zbf),
        ] {
            if let Some(id) = slot {
                v.push((name, id));
            }
        }
        v
    }

    /// All features finite after a forward pass; names the offending slot.
    pub fn check_finite(&self, tape: &Tape) -> Result<(), String> {
        for (name, id) in self.slots() {
            if !tape.value(id).iter().all(|v| v.is_finite()) {
                return Err(format!("non-finite values in feature {name}"));
            }
        }
        Ok(())
    }
}
