//! Comparison bundle over several evaluated methods: a per-group CSV, an ES
//! summary, and one static SVG of per-method Dice histograms per group.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, Overlap, WorstGroup};

pub const SVG_WIDTH: f64 = 640.0;
pub const SVG_HEIGHT: f64 = 240.0;
pub const HISTOGRAM_BINS: usize = 20;
/// Largest tolerated gap between stored ES values and their recomputation.
pub const ES_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub population: Overlap,
    pub es: Overlap,
    pub worst_group: WorstGroup,
    pub cis: Option<BTreeMap<String, (f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub attribute_name: String,
    pub group_labels: Vec<String>,
    pub methods: Vec<MethodSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub comparison_csv: PathBuf,
    pub summary_json: PathBuf,
    pub plots: Vec<PathBuf>,
}

impl ReportBundle {
    pub fn files(&self) -> Vec<PathBuf> {
        let mut v = vec![self.comparison_csv.clone(), self.summary_json.clone()];
        v.extend(self.plots.iter().cloned());
        v
    }
}

fn check_inputs(reports: &[(String, MetricsReport)]) -> Result<()> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::InvalidArgument("report needs at least one evaluation".into()));
    };
    for (name, r) in reports {
        if r.group_labels != first.group_labels || r.attribute_name != first.attribute_name {
            return Err(Error::InconsistentReport(format!(
                "{name}: groups {}={:?} differ from {}={:?}",
                r.attribute_name, r.group_labels, first.attribute_name, first.group_labels
            )));
        }
        let gap = r.es_inconsistency();
        if gap.is_nan() || gap > ES_TOLERANCE {
            return Err(Error::InconsistentReport(format!(
                "{name}: stored ES differs from recomputation by {gap:e}"
            )));
        }
    }
    let mut names: Vec<&String> = reports.iter().map(|(n, _)| n).collect();
    names.sort();
    names.dedup();
    if names.len() != reports.len() {
        return Err(Error::InconsistentReport("duplicate method names".into()));
    }
    Ok(())
}

pub fn comparison_csv(reports: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("method,group,label,dice,iou,n,worst_group\n");
    for (name, r) in reports {
        for g in &r.per_group {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                name,
                g.group.0,
                g.label,
                g.dice,
                g.iou,
                g.n,
                g.group == r.worst_group.group
            );
        }
    }
    out
}

pub fn summary(reports: &[(String, MetricsReport)]) -> ReportSummary {
    let first = &reports[0].1;
    ReportSummary {
        attribute_name: first.attribute_name.clone(),
        group_labels: first.group_labels.clone(),
        methods: reports
            .iter()
            .map(|(name, r)| MethodSummary {
                method: name.clone(),
                population: r.population,
                es: r.es,
                worst_group: r.worst_group.clone(),
                cis: r.cis.clone(),
            })
            .collect(),
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One horizontal band per method: Dice histogram over [0, 1], a white
/// diamond at the mean and ticks at the quartiles.
pub fn group_svg(reports: &[(String, MetricsReport)], group: usize, label: &str) -> String {
    let (left, right, top, bottom) = (110.0, 20.0, 28.0, 24.0);
    let plot_w = SVG_WIDTH - left - right;
    let band = (SVG_HEIGHT - top - bottom) / reports.len() as f64;
    let x_of = |v: f64| left + v.clamp(0.0, 1.0) * plot_w;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" font-family="sans-serif" font-size="13" text-anchor="middle">Dice, group {}</text>"#,
        SVG_WIDTH / 2.0,
        escape(label)
    );
    for (row, (name, r)) in reports.iter().enumerate() {
        let y0 = top + row as f64 * band;
        let mut values: Vec<f64> = r
            .per_sample
            .iter()
            .filter(|m| m.group.0 == group)
            .map(|m| m.dice)
            .collect();
        values.sort_by(f64::total_cmp);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            left - 8.0,
            y0 + band / 2.0 + 4.0,
            escape(name)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999999" stroke-width="0.5"/>"##,
            y0 + band,
            left + plot_w,
            y0 + band
        );
        if values.is_empty() {
            continue;
        }
        let mut counts = [0usize; HISTOGRAM_BINS];
        for &v in &values {
            let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        let peak = *counts.iter().max().unwrap_or(&1) as f64;
        let bar_w = plot_w / HISTOGRAM_BINS as f64;
        for (b, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = (band - 6.0) * c as f64 / peak;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4c78a8"/>"##,
                left + b as f64 * bar_w,
                y0 + band - h,
                bar_w - 1.0,
                h
            );
        }
        for q in [0.25, 0.5, 0.75] {
            let x = x_of(quantile(&values, q));
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#222222" stroke-width="1.5"/>"##,
                y0 + band - 8.0,
                y0 + band
            );
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let (mx, my, d) = (x_of(mean), y0 + band / 2.0, 6.0);
        let _ = writeln!(
            s,
            r##"<polygon points="{mx:.2},{:.2} {:.2},{my:.2} {mx:.2},{:.2} {:.2},{my:.2}" fill="#ffffff" stroke="#000000"/>"##,
            my - d,
            mx + d,
            my + d,
            mx - d
        );
    }
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{v}</text>"#,
            x_of(v),
            SVG_HEIGHT - 8.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn plot_name(group: usize, label: &str) -> String {
    let clean: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("dice_group{group}_{clean}.svg")
}

/// Write the bundle into `out`, creating it if needed.
pub fn emit_report(reports: &[(String, MetricsReport)], out: &Path) -> Result<ReportBundle> {
    check_inputs(reports)?;
    std::fs::create_dir_all(out)?;
    let comparison = out.join("comparison.csv");
    std::fs::write(&comparison, comparison_csv(reports))?;
    let summary_path = out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary(reports))?)?;
    let mut plots = Vec::new();
    for (g, label) in reports[0].1.group_labels.iter().enumerate() {
        let path = out.join(plot_name(g, label));
        std::fs::write(&path, group_svg(reports, g, label))?;
        plots.push(path);
    }
    Ok(ReportBundle {
        comparison_csv: comparison,
        summary_json: summary_path,
        plots,
    })
}
