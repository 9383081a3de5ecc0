//! Evaluation reports (CSV) and SVG plots: decision regions for 2D tasks
//! and chain histograms against grid densities.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AtentError, Result};
use crate::models::{self, ModelParams};
use crate::oracle::GridDensity;
use crate::tensor::Tensor;
use crate::data::Dataset;

pub const CSV_HEADER: &str = "defense,attack,norm,epsilon,natural_acc,robust_acc,seed,wall_ms";
pub const REGION_GRID: usize = 200;

/// Writes through a sibling temp file and a rename, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| AtentError::Config(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = dir.join(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| AtentError::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| AtentError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| AtentError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: String,
    pub attack: String,
    pub norm: String,
    pub epsilon: f64,
    pub natural_acc: f64,
    pub robust_acc: f64,
    pub seed: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.defense, r.attack, r.norm, r.epsilon, r.natural_acc, r.robust_acc, r.seed, r.wall_ms
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<EvalReport> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(AtentError::Data("report CSV header mismatch".into()));
        }
        let bad = |l: &str| AtentError::Data(format!("malformed report row {l:?}"));
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 8 {
                    return Err(bad(l));
                }
                Ok(ReportRow {
                    defense: f[0].into(),
                    attack: f[1].into(),
                    norm: f[2].into(),
                    epsilon: f[3].parse().map_err(|_| bad(l))?,
                    natural_acc: f[4].parse().map_err(|_| bad(l))?,
                    robust_acc: f[5].parse().map_err(|_| bad(l))?,
                    seed: f[6].parse().map_err(|_| bad(l))?,
                    wall_ms: f[7].parse().map_err(|_| bad(l))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport { rows })
    }
}

/// Writes `report.csv` into `dir` and returns its path.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| AtentError::io(dir, e))?;
    let path = dir.join("report.csv");
    write_atomic(&path, report.to_csv().as_bytes())?;
    Ok(path)
}

/// Predicted class at the centre of every cell of an `n × n` grid over the
/// unit square; row-major with row 0 at the bottom (`x₁` smallest).
pub fn decision_grid(params: &ModelParams, n: usize) -> Result<Vec<usize>> {
    let mut pts = Vec::with_capacity(2 * n * n);
    for row in 0..n {
        for col in 0..n {
            pts.push((col as f64 + 0.5) / n as f64);
            pts.push((row as f64 + 0.5) / n as f64);
        }
    }
    models::predict(params, &Tensor::new(vec![n * n, 2], pts)?)
}

const PALETTE: [&str; 4] = ["#c6dbef", "#fdd0a2", "#c7e9c0", "#dadaeb"];
const POINTS: [&str; 4] = ["#08519c", "#a63603", "#006d2c", "#54278f"];

/// Decision regions on a 200×200 grid with the data points on top.
pub fn decision_region_svg(params: &ModelParams, ds: &Dataset) -> Result<String> {
    if ds.sample_shape() != [2] {
        return Err(AtentError::Data("decision regions need 2D inputs".into()));
    }
    let n = REGION_GRID;
    let size = 400.0;
    let cell = size / n as f64;
    let grid = decision_grid(params, n)?;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    // one rect per horizontal run of equal predictions
    for row in 0..n {
        let y = size - (row + 1) as f64 * cell;
        let mut col = 0;
        while col < n {
            let c = grid[row * n + col];
            let start = col;
            while col < n && grid[row * n + col] == c {
                col += 1;
            }
            let _ = writeln!(
                svg,
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>",
                start as f64 * cell,
                y,
                (col - start) as f64 * cell,
                cell,
                PALETTE[c % PALETTE.len()]
            );
        }
    }
    for (i, c) in ds.class_indices().into_iter().enumerate() {
        let p = ds.inputs.row(i);
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"2\" fill=\"{}\"/>",
            p[0] * size,
            size - p[1] * size,
            POINTS[c % POINTS.len()]
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Histogram of 1D chain samples (bars) against a grid density (line).
pub fn sampler_histogram_svg(samples: &[f64], grid: &GridDensity, bins: usize) -> Result<String> {
    if grid.dim() != 1 || bins == 0 || samples.is_empty() {
        return Err(AtentError::Data("histogram needs 1D grid, samples and bins".into()));
    }
    let (lo, hi) = grid.bounds[0];
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in samples {
        if s >= lo && s < hi {
            counts[((s - lo) / width) as usize] += 1;
        }
    }
    let hist: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / (samples.len() as f64 * width))
        .collect();
    let dens = grid.density();
    let top = hist.iter().chain(&dens).cloned().fold(0.0, f64::max).max(1e-12);
    let (w, h) = (600.0, 300.0);
    let sx = |x: f64| (x - lo) / (hi - lo) * w;
    let sy = |y: f64| h - y / top * (h - 10.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    for (b, &v) in hist.iter().enumerate() {
        let x0 = lo + b as f64 * width;
        let _ = writeln!(
            svg,
            "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"#9ecae1\"/>",
            sx(x0),
            sy(v),
            sx(x0 + width) - sx(x0),
            h - sy(v)
        );
    }
    let pts: Vec<String> = grid
        .points
        .iter()
        .zip(&dens)
        .map(|(p, d)| format!("{:.3},{:.3}", sx(p[0]), sy(*d)))
        .collect();
    let _ = writeln!(
        svg,
        "<polyline fill=\"none\" stroke=\"#de2d26\" stroke-width=\"2\" points=\"{}\"/>",
        pts.join(" ")
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}
