//! Experiment configuration: one TOML file with nested sections for the
//! synthetic data, the backbone, the detail stack depth, the distillation
//! constants, the training schedule, the evaluation protocol, and the
//! component toggles. Configs round-trip losslessly and are written into
//! every run directory for provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::evalproto::Metric;
use crate::losses::SkdConfig;
use crate::objective::TrainConfig;
use crate::synthdata::SynthSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("config parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Component toggles matching the ablation table columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub dfe: bool,
    pub beg: bool,
    pub l_app: bool,
    pub l_orth: bool,
    pub l_skd: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        Self {
            dfe: true,
            beg: true,
            l_app: true,
            l_orth: true,
            l_skd: true,
        }
    }
}

impl AblationToggles {
    pub fn all_on() -> Self {
        Self::default()
    }

    /// The backbone-plus-BEG baseline row of the ablation table.
    pub fn beg_only() -> Self {
        Self {
            dfe: false,
            beg: true,
            l_app: false,
            l_orth: false,
            l_skd: false,
        }
    }

    /// The approach / orthogonality / distillation terms all require the
    /// base branch they act on.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.beg && (self.l_app || self.l_orth || self.l_skd) {
            return Err(ConfigError::Invalid {
                field: "toggles",
                reason: "l_app, l_orth, l_skd require beg".into(),
            });
        }
        Ok(())
    }

    /// Compact row label, e.g. `dfe+beg+app+skd` or `baseline`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.dfe {
            parts.push("dfe");
        }
        if self.beg {
            parts.push("beg");
        }
        if self.l_app {
            parts.push("app");
        }
        if self.l_orth {
            parts.push("orth");
        }
        if self.l_skd {
            parts.push("skd");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    /// The component-study rows, from bare backbone to the full model.
    pub fn table_rows() -> Vec<AblationToggles> {
        let t = |dfe, beg, l_app, l_orth, l_skd| AblationToggles {
            dfe,
            beg,
            l_app,
            l_orth,
            l_skd,
        };
        vec![
            t(false, false, false, false, false),
            t(true, false, false, false, false),
            t(false, true, false, false, false),
            t(true, true, false, false, false),
            t(true, true, true, false, false),
            t(true, true, false, false, true),
            t(false, true, true, true, true),
            t(true, true, true, false, true),
            t(true, true, true, true, true),
        ]
    }
}

/// Retrieval evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metric: Metric,
    pub k_max: usize,
    /// Evaluate the EMA shadow rather than the live parameters.
    pub use_ema: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            k_max: 20,
            use_ema: true,
        }
    }
}

/// Everything one experiment needs, serializable to a single TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Coupling-stack depth.
    pub inn_blocks: usize,
    pub synth: SynthSpec,
    pub backbone: BackboneConfig,
    pub skd: SkdConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub toggles: AblationToggles,
    /// Run artifacts land here (falls back to the output-root env variable).
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    /// CPU-sized default: 32 identities, flat 64-dim observations, 20 epochs.
    pub fn desk_default() -> Self {
        Self {
            seed: 7,
            inn_blocks: crate::dfe::DEFAULT_INN_BLOCKS,
            synth: SynthSpec::default(),
            backbone: BackboneConfig::default(),
            skd: SkdConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            toggles: AblationToggles::default(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |field: &'static str, reason: String| ConfigError::Invalid { field, reason };
        self.synth
            .validate()
            .map_err(|e| field("synth", e.to_string()))?;
        self.backbone
            .validate()
            .map_err(|e| field("backbone", e.to_string()))?;
        self.skd
            .validate()
            .map_err(|e| field("skd", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| field("train", e.to_string()))?;
        self.toggles.validate()?;
        if self.inn_blocks < 1 {
            return Err(field("inn_blocks", "must be >= 1".into()));
        }
        if self.backbone.input_shape != self.synth.observation_shape {
            return Err(field(
                "backbone.input_shape",
                format!(
                    "{:?} does not match synth.observation_shape {:?}",
                    self.backbone.input_shape, self.synth.observation_shape
                ),
            ));
        }
        if self.train.p_ids > self.synth.n_identities {
            return Err(field(
                "train.p_ids",
                format!("{} exceeds n_identities", self.train.p_ids),
            ));
        }
        if self.train.k_per > self.synth.samples_per_modality_per_id {
            return Err(field(
                "train.k_per",
                format!("{} exceeds samples per identity", self.train.k_per),
            ));
        }
        if self.eval.k_max == 0 {
            return Err(field("eval.k_max", "must be >= 1".into()));
        }
        Ok(())
    }

    /// Re-seed every stochastic stage from one master seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::desk_default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Round-trip is a fixed point of serialization too.
        assert_eq!(text, back.to_toml_string().unwrap());
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.inn_blocks = 0;
        match cfg.validate() {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "inn_blocks"),
            other => panic!("expected named field error, got {other:?}"),
        }
        let mut cfg = ExperimentConfig::desk_default();
        cfg.train.p_ids = 999;
        match cfg.validate() {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "train.p_ids"),
            other => panic!("expected named field error, got {other:?}"),
        }
    }

    #[test]
    fn toggle_dependencies_are_enforced() {
        let t = AblationToggles {
            dfe: true,
            beg: false,
            l_app: false,
            l_orth: false,
            l_skd: true,
        };
        assert!(t.validate().is_err());
        for row in AblationToggles::table_rows() {
            row.validate().unwrap();
        }
        assert_eq!(AblationToggles::table_rows().len(), 9);
        assert_eq!(AblationToggles::beg_only().label(), "beg");
        assert_eq!(AblationToggles::default().label(), "dfe+beg+app+orth+skd");
    }

    #[test]
    fn master_seed_override_reaches_every_stage() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.override_seed(123);
        assert_eq!(cfg.seed, 123);
        assert_eq!(cfg.synth.seed, 123);
        assert_eq!(cfg.train.seed, 123);
    }
}
