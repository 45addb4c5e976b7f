//! Figure emission: loss curves, the correlation trajectory, and a 2-D
//! embedding scatter, all as deterministic self-contained SVG plus CSV/JSON
//! sidecars (legend metadata travels with the scatter so the marker/color
//! contract is machine-checkable).

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::objective::MetricsRow;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 48.0;

const PALETTE: [&str; 10] = [
    "#4269d0", "#efb118", "#ff725c", "#6cc5b0", "#3ca951", "#ff8ab7", "#a463f2", "#97bbf5",
    "#9c6b4e", "#9498a0",
];

fn color_for(idx: usize) -> &'static str {
    PALETTE[idx % PALETTE.len()]
}

struct Frame {
    svg: String,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn new(title: &str, x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(
            svg,
            r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/><text x="{}" y="20" font-family="monospace" font-size="14">{title}</text>"#,
            MARGIN
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#ccc"/>"##,
            WIDTH - 2.0 * MARGIN,
            HEIGHT - 2.0 * MARGIN
        );
        Self {
            svg,
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    fn sx(&self, x: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-12);
        MARGIN + (x - self.x_min) / span * (WIDTH - 2.0 * MARGIN)
    }

    fn sy(&self, y: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-12);
        HEIGHT - MARGIN - (y - self.y_min) / span * (HEIGHT - 2.0 * MARGIN)
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str) {
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.sx(x), self.sy(y)))
            .collect();
        let _ = writeln!(
            self.svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
    }

    fn label(&mut self, idx: usize, text: &str, color: &str) {
        let y = MARGIN + 14.0 * (idx + 1) as f64;
        let x = WIDTH - MARGIN - 150.0;
        let _ = writeln!(
            self.svg,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-family="monospace" font-size="11">{text}</text>"#,
            y - 9.0,
            x + 14.0,
            y
        );
    }

    fn axis_labels(&mut self, x_name: &str, y_name: &str) {
        let _ = writeln!(
            self.svg,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="11">{x_name}</text><text x="8" y="{}" font-family="monospace" font-size="11" transform="rotate(-90 8 {})">{y_name}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 10.0,
            HEIGHT / 2.0,
            HEIGHT / 2.0
        );
        for (frac, along_x) in [(0.0, true), (1.0, true), (0.0, false), (1.0, false)] {
            let (x, y, v) = if along_x {
                let v = self.x_min + frac * (self.x_max - self.x_min);
                (self.sx(v), HEIGHT - MARGIN + 14.0, v)
            } else {
                let v = self.y_min + frac * (self.y_max - self.y_min);
                (6.0, self.sy(v), v)
            };
            let _ = writeln!(
                self.svg,
                r#"<text x="{x:.1}" y="{y:.1}" font-family="monospace" font-size="10">{v:.3}</text>"#
            );
        }
    }

    fn circle(&mut self, x: f64, y: f64, color: &str) {
        let _ = writeln!(
            self.svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}" fill-opacity="0.85"/>"#,
            self.sx(x),
            self.sy(y)
        );
    }

    fn square(&mut self, x: f64, y: f64, color: &str) {
        let _ = writeln!(
            self.svg,
            r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="{color}" fill-opacity="0.85"/>"#,
            self.sx(x) - 3.0,
            self.sy(y) - 3.0
        );
    }

    fn finish(mut self) -> String {
        let _ = writeln!(self.svg, "</svg>");
        self.svg
    }
}

/// Loss curves (total plus the major composite terms) against step index.
pub fn render_loss_curves(rows: &[MetricsRow]) -> Result<String, PlotError> {
    if rows.is_empty() {
        return Err(PlotError::Empty("metrics log"));
    }
    let series: [(&str, fn(&MetricsRow) -> f64); 5] = [
        ("total", |r| r.breakdown.total),
        ("l_dfe", |r| r.breakdown.l_dfe),
        ("l_beg", |r| r.breakdown.l_beg),
        ("l_skd", |r| r.breakdown.l_skd),
        ("l_id", |r| r.breakdown.l_id),
    ];
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for r in rows {
        for (_, f) in &series {
            let v = f(r);
            if v.is_finite() {
                y_min = y_min.min(v);
                y_max = y_max.max(v);
            }
        }
    }
    let mut frame = Frame::new("loss curves", 0.0, (rows.len() - 1) as f64, y_min, y_max);
    for (i, (name, f)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .enumerate()
            .map(|(t, r)| (t as f64, f(r)))
            .filter(|(_, v)| v.is_finite())
            .collect();
        frame.polyline(&pts, color_for(i));
        frame.label(i, name, color_for(i));
    }
    frame.axis_labels("step", "loss");
    Ok(frame.finish())
}

/// Cross-modality correlation trajectory: the base and detail series for
/// every logged step.
pub fn render_correlations(rows: &[MetricsRow]) -> Result<String, PlotError> {
    if rows.is_empty() {
        return Err(PlotError::Empty("metrics log"));
    }
    let mut frame = Frame::new(
        "cross-modality correlations",
        0.0,
        (rows.len() - 1) as f64,
        -1.0,
        1.0,
    );
    let cb: Vec<(f64, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.c_base.is_finite())
        .map(|(t, r)| (t as f64, r.c_base))
        .collect();
    let cd: Vec<(f64, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.c_detail.is_finite())
        .map(|(t, r)| (t as f64, r.c_detail))
        .collect();
    frame.polyline(&cb, color_for(0));
    frame.label(0, "c_base", color_for(0));
    frame.polyline(&cd, color_for(2));
    frame.label(1, "c_detail", color_for(2));
    frame.axis_labels("step", "pearson correlation");
    Ok(frame.finish())
}

// ── Embedding scatter ───────────────────────────────────────────────────

/// Legend sidecar: which color belongs to which identity and which marker to
/// which modality.
#[derive(Debug, Serialize)]
pub struct ScatterLegend {
    pub identity_colors: Vec<(u32, String)>,
    pub modality_markers: Vec<(String, String)>,
}

/// Principal 2-D projection of stacked features via power iteration with
/// deflation (deterministic: fixed start vector).
pub fn pca_2d(features: &Array2<f64>) -> Array2<f64> {
    let n = features.nrows();
    let d = features.ncols();
    let mut centered = features.clone();
    for j in 0..d {
        let mean = centered.column(j).sum() / n as f64;
        centered.column_mut(j).mapv_inplace(|v| v - mean);
    }
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0).max(1.0);
    let mut components = Array2::<f64>::zeros((d, 2));
    let mut cov_k = cov;
    for k in 0..2 {
        let mut v = ndarray::Array1::<f64>::from_elem(d, 1.0 / (d as f64).sqrt());
        for _ in 0..200 {
            let w = cov_k.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w / norm;
        }
        components.column_mut(k).assign(&v);
        let lambda = v.dot(&cov_k.dot(&v));
        // Deflate.
        for i in 0..d {
            for j in 0..d {
                cov_k[[i, j]] -= lambda * v[i] * v[j];
            }
        }
    }
    centered.dot(&components)
}

/// Scatter of 2-D projected embeddings: color encodes identity, marker shape
/// encodes modality (circle = visible, square = infrared). Returns the SVG,
/// a CSV of the projected points, and the legend metadata.
pub fn render_embedding_scatter(
    vis_feats: &Array2<f64>,
    ir_feats: &Array2<f64>,
    vis_ids: &[u32],
    ir_ids: &[u32],
) -> Result<(String, String, ScatterLegend), PlotError> {
    if vis_feats.nrows() == 0 || ir_feats.nrows() == 0 {
        return Err(PlotError::Empty("features"));
    }
    let stacked = ndarray::concatenate(
        ndarray::Axis(0),
        &[vis_feats.view(), ir_feats.view()],
    )
    .expect("widths match");
    let proj = pca_2d(&stacked);
    let nv = vis_feats.nrows();

    let (mut x_min, mut x_max, mut y_min, mut y_max) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in proj.rows() {
        x_min = x_min.min(r[0]);
        x_max = x_max.max(r[0]);
        y_min = y_min.min(r[1]);
        y_max = y_max.max(r[1]);
    }
    let mut frame = Frame::new("embedding scatter (pca)", x_min, x_max, y_min, y_max);
    let mut csv = String::from("modality,identity,x,y\n");
    for (i, row) in proj.rows().into_iter().enumerate() {
        let (modality, id) = if i < nv {
            ("vis", vis_ids[i])
        } else {
            ("ir", ir_ids[i - nv])
        };
        let color = color_for(id as usize);
        if modality == "vis" {
            frame.circle(row[0], row[1], color);
        } else {
            frame.square(row[0], row[1], color);
        }
        let _ = writeln!(csv, "{modality},{id},{},{}", row[0], row[1]);
    }
    frame.axis_labels("pc1", "pc2");
    let mut seen: Vec<u32> = vis_ids.iter().chain(ir_ids.iter()).copied().collect();
    seen.sort_unstable();
    seen.dedup();
    let legend = ScatterLegend {
        identity_colors: seen
            .into_iter()
            .map(|id| (id, color_for(id as usize).to_string()))
            .collect(),
        modality_markers: vec![
            ("vis".into(), "circle".into()),
            ("ir".into(), "square".into()),
        ],
    };
    Ok((frame.finish(), csv, legend))
}

/// Write all plot artifacts for a run directory's metrics log.
pub fn emit_run_plots(dir: &Path, rows: &[MetricsRow]) -> Result<(), PlotError> {
    std::fs::write(dir.join("loss_curves.svg"), render_loss_curves(rows)?)?;
    std::fs::write(dir.join("correlations.svg"), render_correlations(rows)?)?;
    Ok(())
}
