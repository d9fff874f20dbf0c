//! Rendering of experiment reports: comparison tables, SVG charts and the
//! files a run leaves behind.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{ExperimentReport, LayerDistribution, ModelKind, REPORT_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::pruning::PartitionFile;

pub const MISSING: &str = "—";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRow {
    pub task: String,
    pub method: String,
    pub model_kind: ModelKind,
    pub accuracy: f64,
    pub delta: Option<f64>,
    pub center_of_gravity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonTable {
    pub schema_version: u32,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// One row per report, sorted by task, method and model kind.
    pub fn merge(reports: &[ExperimentReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Empty("report list"));
        }
        let mut rows = Vec::with_capacity(reports.len());
        for r in reports {
            r.validate()?;
            rows.push(ComparisonRow {
                task: r.task.clone(),
                method: r.method.clone(),
                model_kind: r.model_kind,
                accuracy: r.accuracy,
                delta: r.delta,
                center_of_gravity: r.center_of_gravity,
            });
        }
        rows.sort_by(|a, b| {
            (&a.task, &a.method, a.model_kind).cmp(&(&b.task, &b.method, b.model_kind))
        });
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            rows,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: REPORT_SCHEMA_VERSION,
                found: t.schema_version,
            });
        }
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn render(&self) -> String {
        let header = ["task", "method", "model", "accuracy", "Δ", "CoG"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.task.clone(),
                    r.method.clone(),
                    kind_name(r.model_kind).into(),
                    format!("{:.2}", r.accuracy),
                    opt2(r.delta),
                    opt2(r.center_of_gravity),
                ]
            })
            .collect();
        render_grid(&header, &cells)
    }
}

/// Reads a report file, rejecting other schema versions.
pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("schema_version").and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(REPORT_SCHEMA_VERSION)) {
        return Err(Error::SchemaVersion {
            expected: REPORT_SCHEMA_VERSION,
            found: found.unwrap_or(0) as u32,
        });
    }
    let report: ExperimentReport = serde_json::from_value(value)?;
    report.validate()?;
    Ok(report)
}

fn kind_name(k: ModelKind) -> &'static str {
    match k {
        ModelKind::Pretrained => "pretrained",
        ModelKind::Random => "random",
    }
}

fn opt2(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x:.2}"))
}

fn render_grid<const N: usize>(header: &[&str; N], rows: &[[String; N]]) -> String {
    let mut widths = header.map(|h| h.chars().count());
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

/// Detailed table of one report: baselines, accuracies and LM losses.
pub fn render_report(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} / {} / {} (seeds {})",
        report.task,
        report.method,
        kind_name(report.model_kind),
        report.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    );
    let pct = |v: Option<f64>| opt2(v);
    let rows = vec![
        ["majority".to_string(), format!("{:.2}", report.majority)],
        ["chance".to_string(), format!("{:.2}", report.chance)],
        ["accuracy".to_string(), format!("{:.2}", report.accuracy)],
        ["control accuracy".to_string(), pct(report.control_accuracy)],
        ["Δ".to_string(), pct(report.delta)],
        ["center of gravity".to_string(), pct(report.center_of_gravity)],
        ["essential-only accuracy".to_string(), pct(report.essential_accuracy)],
        ["non-essential accuracy".to_string(), pct(report.non_essential_accuracy)],
    ];
    out.push_str(&render_grid(&["measure", "value"], &rows));
    if !report.lm_loss.is_empty() {
        out.push('\n');
        let rows: Vec<[String; 3]> = report
            .lm_loss
            .iter()
            .map(|e| [e.mode.name().to_string(), format!("{:.4}", e.loss), format!("{:.4}", e.delta)])
            .collect();
        out.push_str(&render_grid(&["mode", "LM loss", "Δloss"], &rows));
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const W: f64 = 480.0;
const H: f64 = 260.0;
const PAD: f64 = 40.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

/// Bar chart of a layer distribution, layers left to right.
pub fn layer_distribution_svg(title: &str, dist: &LayerDistribution) -> String {
    let mut s = svg_open(title);
    let n = dist.weights.len().max(1) as f64;
    let top = dist.weights.iter().copied().fold(0.0, f64::max).max(1e-12);
    let plot_w = W - 2.0 * PAD;
    let plot_h = H - 2.0 * PAD;
    let slot = plot_w / n;
    for (i, &w) in dist.weights.iter().enumerate() {
        let bh = plot_h * w / top;
        let x = PAD + slot * i as f64 + slot * 0.1;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"#4c72b0\"><title>layer {}: {w:.4}</title></rect>",
            H - PAD - bh,
            slot * 0.8,
            i + 1
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            x + slot * 0.4,
            H - PAD + 14.0,
            i + 1
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">layer</text>",
        W / 2.0,
        H - 8.0
    );
    s.push_str("</svg>\n");
    s
}

/// Centers of gravity of several runs on a shared layer axis.
pub fn center_of_gravity_svg(title: &str, n_layers: usize, points: &[(String, f64)]) -> String {
    let mut s = svg_open(title);
    let plot_w = W - 2.0 * PAD - 80.0;
    let left = PAD + 80.0;
    let span = (n_layers.max(2) - 1) as f64;
    let xpos = |layer: f64| left + plot_w * (layer - 1.0) / span;
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        H - PAD,
        left + plot_w
    );
    for l in 1..=n_layers.max(1) {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{l}</text>",
            xpos(l as f64),
            H - PAD + 14.0
        );
    }
    let step = (H - 2.0 * PAD - 20.0) / points.len().max(1) as f64;
    for (i, (label, cog)) in points.iter().enumerate() {
        let y = PAD + 10.0 + step * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{y:.2}\" text-anchor=\"end\" dominant-baseline=\"middle\">{}</text>",
            left - 8.0,
            escape(label)
        );
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"#dd8452\"><title>{cog:.2}</title></circle>",
            xpos(*cog)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">center of gravity (layer)</text>",
        left + plot_w / 2.0,
        H - 8.0
    );
    s.push_str("</svg>\n");
    s
}

/// Everything a run writes, except the timestamped metadata block.
pub fn write_run(dir: &Path, report: &ExperimentReport, partitions: &[PartitionFile], resolved_config: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("report.txt"), render_report(report))?;
    fs::write(dir.join("config.toml"), resolved_config)?;
    let title = format!("{} / {} ({})", report.task, report.method, kind_name(report.model_kind));
    if let Some(d) = &report.layer_distribution {
        fs::write(dir.join("layers.svg"), layer_distribution_svg(&title, d))?;
        if let Some(cog) = report.center_of_gravity {
            let label = format!("{} {}", report.task, report.method);
            fs::write(
                dir.join("center_of_gravity.svg"),
                center_of_gravity_svg(&title, d.weights.len(), &[(label, cog)]),
            )?;
        }
    }
    if !partitions.is_empty() {
        let pdir = dir.join("partitions");
        fs::create_dir_all(&pdir)?;
        for p in partitions {
            let seed = p.seeds.first().copied().unwrap_or(0);
            fs::write(pdir.join(format!("seed-{seed}.json")), serde_json::to_string_pretty(p)? + "\n")?;
        }
    }
    Ok(())
}
