//! Output plumbing: atomic run directories, CSV and JSON writers, curve plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anomseg::evalmetrics::CurveResult;
use anyhow::{bail, Context, Result};
use serde::Serialize;

/// A run directory that only appears at its final path once everything has
/// been written. Dropping an unfinished run removes the staging directory.
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    done: bool,
}

impl RunDir {
    pub fn create(target: &Path) -> Result<Self> {
        let name = target.file_name().with_context(|| format!("output path {} has no final component", target.display()))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self { staging, target: target.to_path_buf(), done: false })
    }

    /// Path inside the staging directory.
    pub fn path(&self, relative: impl AsRef<Path>) -> PathBuf {
        self.staging.join(relative)
    }

    pub fn subdir(&self, relative: &str) -> Result<PathBuf> {
        let dir = self.path(relative);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, relative: &str, value: &T) -> Result<()> {
        write_json(&self.path(relative), value)
    }

    pub fn write_csv<R: Serialize>(&self, relative: &str, rows: &[R]) -> Result<()> {
        write_csv(&self.path(relative), rows)
    }

    pub fn write_text(&self, relative: &str, text: &str) -> Result<()> {
        let path = self.path(relative);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Replace whatever is at the target with the staged directory.
    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.target.is_dir() {
                bail!("output path {} exists and is not a directory", self.target.display());
            }
            fs::remove_dir_all(&self.target).with_context(|| format!("removing old {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target).with_context(|| format!("moving results to {}", self.target.display()))?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RocPoint {
    fpr: f64,
    tpr: f64,
    thr: f64,
}

#[derive(Serialize)]
struct PrPoint {
    recall: f64,
    precision: f64,
    thr: f64,
}

/// Threshold of curve point `k`; point 0 (nothing predicted positive) gets +∞.
fn threshold(curve: &CurveResult, k: usize) -> f64 {
    if k == 0 {
        f64::INFINITY
    } else {
        curve.thresholds[k - 1]
    }
}

/// ROC points as `fpr,tpr,thr` rows.
pub fn write_roc_csv(path: &Path, curve: &CurveResult) -> Result<()> {
    let rows: Vec<RocPoint> =
        (0..curve.fpr.len()).map(|k| RocPoint { fpr: curve.fpr[k], tpr: curve.tpr[k], thr: threshold(curve, k) }).collect();
    write_csv(path, &rows)
}

/// Precision-recall points as `recall,precision,thr` rows.
pub fn write_pr_csv(path: &Path, curve: &CurveResult) -> Result<()> {
    let rows: Vec<PrPoint> = (0..curve.recall.len())
        .map(|k| PrPoint { recall: curve.recall[k], precision: curve.precision[k], thr: threshold(curve, k) })
        .collect();
    write_csv(path, &rows)
}

const PANEL: f64 = 300.0;
const MARGIN: f64 = 40.0;
const MAX_POINTS: usize = 2000;

fn polyline(xs: &[f64], ys: &[f64], x0: f64) -> String {
    let stride = xs.len().div_ceil(MAX_POINTS).max(1);
    let mut pts = String::new();
    let mut emit = |k: usize| {
        let _ = write!(pts, "{:.2},{:.2} ", x0 + xs[k] * PANEL, MARGIN + (1.0 - ys[k]) * PANEL);
    };
    (0..xs.len()).step_by(stride).for_each(&mut emit);
    if (xs.len() - 1) % stride != 0 {
        emit(xs.len() - 1);
    }
    format!("<polyline fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts.trim_end())
}

fn panel(out: &mut String, x0: f64, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(out, "<rect x=\"{x0}\" y=\"{MARGIN}\" width=\"{PANEL}\" height=\"{PANEL}\" fill=\"none\" stroke=\"black\"/>");
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{title}</text>", x0 + PANEL / 2.0, MARGIN - 12.0);
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>", x0 + PANEL / 2.0, MARGIN + PANEL + 28.0);
    let (lx, ly) = (x0 - 26.0, MARGIN + PANEL / 2.0);
    let _ = writeln!(out, "<text x=\"{lx}\" y=\"{ly}\" text-anchor=\"middle\" transform=\"rotate(-90 {lx} {ly})\">{ylabel}</text>");
}

/// ROC and precision-recall panels side by side, each with the dashed
/// random-guessing reference (`prevalence` = anomaly fraction).
pub fn curves_svg(curve: &CurveResult, prevalence: f64) -> String {
    let width = 3.0 * MARGIN + 2.0 * PANEL;
    let height = 2.0 * MARGIN + PANEL;
    let (left, right) = (MARGIN, 2.0 * MARGIN + PANEL);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    panel(&mut out, left, &format!("ROC (AuROC {:.4})", curve.auroc), "false positive rate", "true positive rate");
    panel(&mut out, right, &format!("PR (AuPRC {:.4})", curve.auprc), "recall", "precision");
    let dashed = "stroke=\"red\" stroke-dasharray=\"5,4\"";
    let _ = writeln!(out, "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{MARGIN}\" {dashed}/>", MARGIN + PANEL, left + PANEL);
    let y = MARGIN + (1.0 - prevalence) * PANEL;
    let _ = writeln!(out, "<line x1=\"{right}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" {dashed}/>", right + PANEL);
    out += &polyline(&curve.fpr, &curve.tpr, left);
    out += &polyline(&curve.recall, &curve.precision, right);
    out += "</svg>\n";
    out
}
