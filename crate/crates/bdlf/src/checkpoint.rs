//! Single-file checkpoint container: a magic tag, a JSON header (config,
//! epoch, rng state, parameter table), then the raw little-endian `f64`
//! blocks of the live parameters followed by the EMA shadow in the same
//! layout.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::params::{EmaState, Params};

const MAGIC: &[u8; 8] = b"BDLFCKP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Sampler position so a run can be reproduced or resumed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ExperimentConfig,
    epoch: usize,
    rng: RngState,
    params: Vec<ParamEntry>,
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub live: Params,
    pub ema: EmaState,
}

fn write_block(out: &mut impl Write, params: &Params) -> std::io::Result<()> {
    for (_, _, value) in params.iter() {
        let mut buf = Vec::with_capacity(value.len() * 8);
        for v in value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Write model, EMA shadow, config, and rng state into one container file.
pub fn save_checkpoint(
    path: &Path,
    config: &ExperimentConfig,
    live: &Params,
    ema: &EmaState,
    epoch: usize,
    rng: RngState,
) -> Result<(), CheckpointError> {
    let header = Header {
        version: 1,
        config: config.clone(),
        epoch,
        rng,
        params: live
            .iter()
            .map(|(_, name, value)| ParamEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    write_block(&mut f, live)?;
    write_block(&mut f, ema.shadow())?;
    Ok(())
}

fn read_block(
    data: &mut impl Read,
    entries: &[ParamEntry],
) -> Result<Params, CheckpointError> {
    let mut params = Params::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        data.read_exact(&mut buf)
            .map_err(|_| CheckpointError::Corrupt(format!("truncated block {}", e.name)))?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
            .map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
        params.register(e.name.clone(), arr);
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let live = read_block(&mut f, &header.params)?;
    let shadow = read_block(&mut f, &header.params)?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            rest.len()
        )));
    }
    let ema = EmaState::from_parts(shadow, header.config.train.ema_decay);
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        rng: header.rng,
        live,
        ema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::TrainState;
    use crate::synthdata::{ObservationShape, SynthSpec};

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.synth = SynthSpec {
            n_identities: 4,
            samples_per_modality_per_id: 2,
            shared_dim: 2,
            specific_dim: 2,
            observation_shape: ObservationShape::Flat(10),
            noise_scale: 0.05,
            specific_mix_scale: 1.0,
            seed: 3,
        };
        cfg.backbone.stages = vec![8, 10, 12, 14];
        cfg.backbone.input_shape = ObservationShape::Flat(10);
        cfg.inn_blocks = 2;
        cfg.train.p_ids = 2;
        cfg.train.k_per = 2;
        cfg
    }

    #[test]
    fn round_trip_preserves_everything_bit_exactly() {
        let cfg = tiny_config();
        let state = TrainState::new(&cfg).unwrap();
        let rng = RngState {
            seed: 7,
            word_pos: 12345,
        };
        let path = std::env::temp_dir().join(format!("bdlf_ckpt_{}.bdlf", std::process::id()));
        save_checkpoint(&path, &cfg, &state.params, &state.ema, 20, rng).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.epoch, 20);
        assert_eq!(back.rng, rng);
        assert_eq!(back.live.len(), state.params.len());
        for id in state.params.ids() {
            assert_eq!(back.live.name(id), state.params.name(id));
            assert_eq!(back.live.value(id), state.params.value(id));
            assert_eq!(back.ema.shadow().value(id), state.ema.shadow().value(id));
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = std::env::temp_dir().join(format!("bdlf_bad_{}.bdlf", std::process::id()));
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
        std::fs::remove_file(&path).ok();
    }
}
