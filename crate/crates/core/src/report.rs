//! Attack reports and table/plot emission (CSV, markdown, plot-data JSON).

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Outcome of evaluating one (model, patch) pair over an eval split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    /// Adaptive policy under attack.
    pub method: String,
    /// Attack label ("no_attack", "random", "compute_only", "tap", ...).
    pub attack: String,
    pub flops_attacked_mean: f64,
    pub flops_unattacked_mean: f64,
    /// Static compute of the architecture with nothing masked.
    pub flops_max: f64,
    pub top1_attacked: f64,
    pub top1_unattacked: f64,
    /// `None` when the efficient model saved nothing (degenerate denominator).
    pub attack_success: Option<f64>,
    /// Per-image total FLOPs under attack, in eval order.
    pub per_image_flops: Vec<u64>,
    /// Observed compute ceiling (e.g. from a full-image patch probe), when measured.
    pub empirical_max_flops: Option<f64>,
    /// Attack success against the empirical ceiling, when available.
    pub attack_success_empirical: Option<f64>,
}

impl AttackReport {
    /// Attack success recomputed from the emitted FLOPs fields; must match
    /// the stored value (asserted by tests).
    pub fn recompute_success(&self) -> Option<f64> {
        crate::flops::attack_success(
            self.flops_attacked_mean,
            self.flops_unattacked_mean,
            self.flops_max,
        )
        .ok()
    }
}

/// Signed integer-percent rendering; "-" when undefined.
pub fn format_success(value: Option<f64>) -> String {
    match value {
        None => "-".to_string(),
        Some(v) => format!("{:+.0}%", v * 100.0),
    }
}

fn gflops(v: f64) -> f64 {
    v / 1e9
}

/// One flat CSV row per report; column order is fixed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub attack: String,
    pub model_gflops: f64,
    pub top1: f64,
    pub attack_success: Option<f64>,
}

impl From<&AttackReport> for ReportRow {
    fn from(r: &AttackReport) -> Self {
        ReportRow {
            method: r.method.clone(),
            attack: r.attack.clone(),
            model_gflops: gflops(r.flops_attacked_mean),
            top1: r.top1_attacked,
            attack_success: r.attack_success,
        }
    }
}

pub fn write_csv(reports: &[AttackReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(ReportRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn write_markdown(reports: &[AttackReport], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "| Method | Attack | Model GFLOPs | Top-1 Acc | Attack Success |")?;
    writeln!(f, "|---|---|---|---|---|")?;
    for r in reports {
        writeln!(
            f,
            "| {} | {} | {:.6} | {:.1}% | {} |",
            r.method,
            r.attack,
            gflops(r.flops_attacked_mean),
            r.top1_attacked * 100.0,
            format_success(r.attack_success),
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PlotData<'a> {
    reports: &'a [AttackReport],
    histograms: Vec<Histogram>,
}

#[derive(Serialize)]
struct Histogram {
    attack: String,
    bin_edges: Vec<f64>,
    counts: Vec<usize>,
}

/// JSON bundle with full reports plus binned per-image FLOPs histograms.
pub fn write_plot_data(reports: &[AttackReport], path: &Path) -> Result<()> {
    let histograms = reports
        .iter()
        .map(|r| {
            let (edges, counts) = histogram(&r.per_image_flops, 20);
            Histogram {
                attack: r.attack.clone(),
                bin_edges: edges,
                counts,
            }
        })
        .collect();
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(
        f,
        &PlotData {
            reports,
            histograms,
        },
    )?;
    Ok(())
}

fn histogram(values: &[u64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    if values.is_empty() {
        return (vec![], vec![]);
    }
    let lo = *values.iter().min().unwrap() as f64;
    let hi = *values.iter().max().unwrap() as f64;
    let width = ((hi - lo) / bins as f64).max(1.0);
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((*v as f64 - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    (edges, counts)
}
