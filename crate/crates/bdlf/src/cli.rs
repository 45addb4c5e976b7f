//! Command implementations behind the binary: train, evaluate, gradient
//! check, ablation table, and plot emission. Everything is a library call so
//! the commands are testable in-process; the binary is a thin argument
//! parser over these.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, RngState};
use crate::config::{AblationToggles, ConfigError, ExperimentConfig};
use crate::evalproto::{cmc_map, make_protocol_split, EvalError, EvalReport, ProtocolMode};
use crate::losses::LossBreakdown;
use crate::objective::{
    self, extract_features, train, ModelError, TrainError, TrainState,
};
use crate::oracle;
use crate::plot::{self, PlotError};
use crate::synthdata::{make_dataset, read_f32_le, write_f32_array, Modality, SynthError};

/// Environment variable naming the root directory for run artifacts.
pub const OUTPUT_ROOT_ENV: &str = "BDLF_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

/// Root for run directories: the env override, then the config's output_dir,
/// then `./runs`.
pub fn resolve_output_root(cfg_output_dir: Option<&str>) -> PathBuf {
    if let Ok(v) = std::env::var(OUTPUT_ROOT_ENV) {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    cfg_output_dir
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn default_run_dir(cfg: &ExperimentConfig, kind: &str) -> PathBuf {
    let root = resolve_output_root(cfg.output_dir.as_deref());
    let base = format!("{kind}-seed{}-{}", cfg.seed, cfg.toggles.label());
    let mut dir = root.join(&base);
    let mut counter = 1;
    while dir.exists() {
        counter += 1;
        dir = root.join(format!("{base}-{counter}"));
    }
    dir
}

// ── train ───────────────────────────────────────────────────────────────

/// Artifacts of one training run.
#[derive(Debug)]
pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub final_breakdown: LossBreakdown,
    pub final_corr: (f64, f64),
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Generate (or regenerate) the dataset, build the model per toggles, run the
/// optimization, and write config, metrics CSV, and checkpoint into the run
/// directory.
pub fn cmd_train(cfg: &ExperimentConfig, run_dir: Option<&Path>) -> Result<TrainArtifacts, CliError> {
    cfg.validate()?;
    let run_dir = run_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_run_dir(cfg, "train"));
    std::fs::create_dir_all(&run_dir)?;
    cfg.save(&run_dir.join("config.toml"))?;

    let dataset = make_dataset(&cfg.synth)?;
    let mut state = TrainState::new(cfg)?;
    let outcome = train(&mut state, &dataset, &cfg.train)?;

    let metrics_path = run_dir.join("metrics.csv");
    objective::write_metrics_csv(&metrics_path, &outcome.metrics)?;

    let checkpoint_path = run_dir.join("checkpoint.bdlf");
    checkpoint::save_checkpoint(
        &checkpoint_path,
        cfg,
        &state.params,
        &state.ema,
        cfg.train.total_epochs,
        RngState {
            seed: cfg.train.seed,
            word_pos: outcome.rng_word_pos,
        },
    )?;

    let final_corr = outcome
        .metrics
        .last()
        .map(|r| (r.c_base, r.c_detail))
        .unwrap_or((f64::NAN, f64::NAN));
    Ok(TrainArtifacts {
        run_dir,
        final_breakdown: outcome.final_breakdown,
        final_corr,
        metrics_path,
        checkpoint_path,
    })
}

/// One-line rendering of a final breakdown for the CLI.
pub fn render_breakdown(b: &LossBreakdown, corr: (f64, f64)) -> String {
    let mut out = String::from("final losses:\n");
    for (name, value) in LossBreakdown::FIELDS.iter().zip(b.values()) {
        out.push_str(&format!("  {name:<8} {value:.6}\n"));
    }
    out.push_str(&format!(
        "correlations: c_base {:.4}, c_detail {:.4}\n",
        corr.0, corr.1
    ));
    out
}

// ── eval ────────────────────────────────────────────────────────────────

/// Rebuild the model from a checkpoint, verifying the parameter table
/// matches a fresh construction from the stored config.
pub fn restore_state(ckpt: checkpoint::Checkpoint) -> Result<(ExperimentConfig, TrainState), CliError> {
    let cfg = ckpt.config.clone();
    let fresh = TrainState::new(&cfg)?;
    if fresh.params.len() != ckpt.live.len() {
        return Err(CliError::Other(format!(
            "checkpoint has {} parameter blocks, model expects {}",
            ckpt.live.len(),
            fresh.params.len()
        )));
    }
    for (a, b) in fresh.params.iter().zip(ckpt.live.iter()) {
        if a.1 != b.1 || a.2.shape() != b.2.shape() {
            return Err(CliError::Other(format!(
                "checkpoint parameter {} does not match model parameter {}",
                b.1, a.1
            )));
        }
    }
    Ok((
        cfg,
        TrainState {
            model: fresh.model,
            params: ckpt.live,
            ema: ckpt.ema,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureManifest {
    dtype: String,
    byte_order: String,
    shape: Vec<usize>,
    ids: Vec<u32>,
    cams: Vec<u32>,
}

/// Write extracted features in the dataset binary format (little-endian
/// `f32` array plus a JSON manifest with ids and cameras).
pub fn export_features(
    dir: &Path,
    name: &str,
    feats: &Array2<f64>,
    ids: &[u32],
    cams: &[u32],
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let f32arr = feats.mapv(|v| v as f32).into_dyn();
    write_f32_array(&dir.join(format!("{name}.bin")), &f32arr)?;
    let manifest = FeatureManifest {
        dtype: "f32".into(),
        byte_order: "little-endian".into(),
        shape: feats.shape().to_vec(),
        ids: ids.to_vec(),
        cams: cams.to_vec(),
    };
    std::fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?,
    )?;
    Ok(())
}

/// Read features written by [`export_features`].
pub fn import_features(dir: &Path, name: &str) -> Result<(Array2<f64>, Vec<u32>, Vec<u32>), CliError> {
    let manifest: FeatureManifest = serde_json::from_str(&std::fs::read_to_string(
        dir.join(format!("{name}.json")),
    )?)
    .map_err(|e| CliError::Other(e.to_string()))?;
    let arr = read_f32_le(&dir.join(format!("{name}.bin")), &manifest.shape)?;
    let feats = arr
        .mapv(|v| v as f64)
        .into_dimensionality()
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok((feats, manifest.ids, manifest.cams))
}

/// Artifacts of one evaluation.
#[derive(Debug)]
pub struct EvalArtifacts {
    pub report: EvalReport,
    pub report_txt: PathBuf,
    pub report_csv: PathBuf,
}

/// Extract comprehensive features (EMA by default), build the protocol
/// split, rank, and write the CMC/mAP report plus the feature files.
pub fn cmd_eval(
    run_dir: &Path,
    mode: ProtocolMode,
    use_ema_override: Option<bool>,
    features_dir: Option<&Path>,
) -> Result<EvalArtifacts, CliError> {
    let ckpt_path = run_dir.join("checkpoint.bdlf");
    if !ckpt_path.exists() {
        return Err(CliError::Other(format!(
            "no checkpoint at {}",
            ckpt_path.display()
        )));
    }
    let (cfg, state) = restore_state(checkpoint::load_checkpoint(&ckpt_path)?)?;
    let use_ema = use_ema_override.unwrap_or(cfg.eval.use_ema);
    let params = if use_ema {
        state.ema.shadow()
    } else {
        &state.params
    };

    let (qf, q_ids, q_cams, gf, g_ids, g_cams) = if let Some(dir) = features_dir {
        // Pre-extracted features in the binary format.
        let (qf, qi, qc) = import_features(dir, "query")?;
        let (gf, gi, gc) = import_features(dir, "gallery")?;
        (qf, qi, qc, gf, gi, gc)
    } else {
        let dataset = make_dataset(&cfg.synth)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (query, gallery) = make_protocol_split(&dataset, mode, &mut rng)?;
        let feats_of = |set: &crate::evalproto::SampleSet| -> Result<Array2<f64>, CliError> {
            let obs = dataset.gather_f64(set.modality, &set.rows);
            Ok(extract_features(&state.model, params, &obs)?)
        };
        let qf = feats_of(&query)?;
        let gf = feats_of(&gallery)?;
        let dir = run_dir.join(format!("features-{}", mode.as_str()));
        export_features(&dir, "query", &qf, &query.ids, &query.cams)?;
        export_features(&dir, "gallery", &gf, &gallery.ids, &gallery.cams)?;
        (qf, query.ids, query.cams, gf, gallery.ids, gallery.cams)
    };

    let report = cmc_map(
        &qf,
        &q_ids,
        &q_cams,
        &gf,
        &g_ids,
        &g_cams,
        cfg.eval.metric,
        cfg.eval.k_max,
    )?;
    report.validate().map_err(CliError::Other)?;

    let report_txt = run_dir.join(format!("report-{}.txt", mode.as_str()));
    std::fs::write(&report_txt, report.render(mode.as_str()))?;
    let report_csv = run_dir.join(format!("report-{}.csv", mode.as_str()));
    let mut csv = String::from("k,cmc\n");
    for (k, v) in report.cmc.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", k + 1, v));
    }
    csv.push_str(&format!("map,{}\n", report.map));
    csv.push_str(&format!("n_queries,{}\n", report.n_queries));
    csv.push_str(&format!("n_excluded,{}\n", report.n_excluded));
    std::fs::write(&report_csv, csv)?;
    Ok(EvalArtifacts {
        report,
        report_txt,
        report_csv,
    })
}

// ── gradcheck ───────────────────────────────────────────────────────────

/// Run the named gradient suite, the whole-objective sweep, and the coupling
/// round-trip check; returns the rendered report and overall pass flag.
pub fn cmd_gradcheck(seed: u64, full_coords: bool) -> (String, bool) {
    let max_coords = if full_coords { usize::MAX } else { 64 };
    let named = oracle::run_gradcheck_suite(seed, max_coords);
    let sweep = oracle::run_total_loss_gradcheck(seed, if full_coords { usize::MAX } else { 48 });

    let mut params = crate::params::Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = crate::dfe::random_stack(
        &mut params,
        &mut rng,
        crate::config::ExperimentConfig::desk_default().backbone.c_mid(),
        crate::dfe::DEFAULT_INN_BLOCKS,
        true,
    )
    .expect("even width");
    let c_mid = blocks[0].half * 2;
    let roundtrip =
        oracle::check_inn_roundtrip(&blocks, &params, &[8, c_mid], 100, 1e-5, 1e-10, seed ^ 0xabc);

    let mut out = String::new();
    out.push_str(&named.render());
    out.push_str(&sweep.render());
    out.push_str(&roundtrip.render());
    let pass = named.pass() && sweep.pass() && roundtrip.pass();
    (out, pass)
}

// ── ablate ──────────────────────────────────────────────────────────────

/// One ablation-table row.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub toggles: AblationToggles,
    pub map: f64,
    pub rank1: f64,
    pub c_base: f64,
    pub c_detail: f64,
}

/// Train every component combination with a shared seed and evaluate each on
/// the visible-to-infrared protocol; optionally sweep the coupling depth.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    run_dir: Option<&Path>,
    sweep_k: bool,
) -> Result<(PathBuf, Vec<AblationRow>), CliError> {
    cfg.validate()?;
    let run_dir = run_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_run_dir(cfg, "ablate"));
    std::fs::create_dir_all(&run_dir)?;

    let mut rows = Vec::new();
    for toggles in AblationToggles::table_rows() {
        let mut variant = cfg.clone();
        variant.toggles = toggles;
        let sub = run_dir.join(format!("variant-{}", toggles.label()));
        let art = cmd_train(&variant, Some(&sub))?;
        let eval = cmd_eval(&sub, ProtocolMode::VisToIr, None, None)?;
        rows.push(AblationRow {
            toggles,
            map: eval.report.map,
            rank1: eval.report.rank1(),
            c_base: art.final_corr.0,
            c_detail: art.final_corr.1,
        });
    }

    let mut csv = String::from("dfe,beg,l_app,l_orth,l_skd,label,map,rank1,c_base,c_detail\n");
    for r in &rows {
        let t = r.toggles;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            t.dfe as u8,
            t.beg as u8,
            t.l_app as u8,
            t.l_orth as u8,
            t.l_skd as u8,
            t.label(),
            r.map,
            r.rank1,
            r.c_base,
            r.c_detail
        ));
    }
    let table_path = run_dir.join("ablation.csv");
    std::fs::write(&table_path, csv)?;

    if sweep_k {
        let mut csv = String::from("inn_blocks,map,rank1\n");
        for k in [2usize, 4, 6, 8] {
            let mut variant = cfg.clone();
            variant.inn_blocks = k;
            let sub = run_dir.join(format!("sweep-k{k}"));
            cmd_train(&variant, Some(&sub))?;
            let eval = cmd_eval(&sub, ProtocolMode::VisToIr, None, None)?;
            csv.push_str(&format!("{k},{},{}\n", eval.report.map, eval.report.rank1()));
        }
        std::fs::write(run_dir.join("sweep_k.csv"), csv)?;
    }

    Ok((table_path, rows))
}

// ── plot ────────────────────────────────────────────────────────────────

/// Emit loss curves, correlation trajectory, and the embedding scatter for a
/// finished run directory.
pub fn cmd_plot(run_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let metrics = objective::read_metrics_csv(&run_dir.join("metrics.csv"))
        .map_err(CliError::Other)?;
    if metrics.is_empty() {
        return Err(CliError::Other("metrics log is empty".into()));
    }
    plot::emit_run_plots(run_dir, &metrics)?;
    let mut written = vec![
        run_dir.join("loss_curves.svg"),
        run_dir.join("correlations.svg"),
    ];

    let ckpt_path = run_dir.join("checkpoint.bdlf");
    if ckpt_path.exists() {
        let (cfg, state) = restore_state(checkpoint::load_checkpoint(&ckpt_path)?)?;
        let params = if cfg.eval.use_ema {
            state.ema.shadow()
        } else {
            &state.params
        };
        let dataset = make_dataset(&cfg.synth)?;
        let rows: Vec<usize> = (0..dataset.n_samples_per_modality()).collect();
        let vis = extract_features(&state.model, params, &dataset.gather_f64(Modality::Vis, &rows))?;
        let ir = extract_features(&state.model, params, &dataset.gather_f64(Modality::Ir, &rows))?;
        let (svg, csv, legend) =
            plot::render_embedding_scatter(&vis, &ir, &dataset.labels, &dataset.labels)?;
        std::fs::write(run_dir.join("embedding_scatter.svg"), svg)?;
        std::fs::write(run_dir.join("scatter_points.csv"), csv)?;
        std::fs::write(
            run_dir.join("scatter_legend.json"),
            serde_json::to_string_pretty(&legend).map_err(|e| CliError::Other(e.to_string()))?,
        )?;
        written.push(run_dir.join("embedding_scatter.svg"));
        written.push(run_dir.join("scatter_points.csv"));
        written.push(run_dir.join("scatter_legend.json"));
    }
    Ok(written)
}
