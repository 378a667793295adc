//! Self-contained SVG line charts of training metrics. The plotted values are
//! embedded in the file as a CSV table inside `<metadata>`.

use std::fmt::Write as _;

use rlvr_core::trainer::MetricsRow;

pub struct Series {
    pub label: String,
    pub rows: Vec<MetricsRow>,
}

type Column = (&'static str, fn(&MetricsRow) -> f64);

pub const PANELS: [Column; 3] = [
    ("mean_total_reward", |r| r.mean_total_reward),
    ("mean_completion_length", |r| r.mean_completion_length),
    ("mean_kl", |r| r.mean_kl),
];

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 220.0;
const LEFT: f64 = 78.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 28.0;
const BOTTOM: f64 = 32.0;
const LEGEND_H: f64 = 28.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// `label,step,<panel columns>` with one row per series point.
pub fn data_table(series: &[Series]) -> String {
    let mut out = String::from("label,step");
    for (name, _) in PANELS {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for s in series {
        for r in &s.rows {
            let _ = write!(out, "{},{}", s.label.replace(',', ";"), r.step);
            for (_, get) in PANELS {
                let _ = write!(out, ",{}", get(r));
            }
            out.push('\n');
        }
    }
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.05 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

pub fn render(series: &[Series]) -> String {
    let height = LEGEND_H + PANEL_H * PANELS.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<metadata><![CDATA[\n{}]]></metadata>", data_table(series));
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{height}" fill="white"/>"#);
    for (i, s) in series.iter().enumerate() {
        let x = LEFT + 150.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="14" x2="{}" y2="14" stroke="{color}" stroke-width="2"/><text x="{}" y="18">{}</text>"#,
            x + 18.0,
            x + 22.0,
            escape(&s.label)
        );
    }
    let (x_lo, x_hi) = bounds(series.iter().flat_map(|s| s.rows.iter().map(|r| r.step as f64))).unwrap_or((0.0, 1.0));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = PANEL_H - TOP - BOTTOM;
    for (p, (name, get)) in PANELS.iter().enumerate() {
        let y0 = LEGEND_H + PANEL_H * p as f64 + TOP;
        let _ = writeln!(
            out,
            r##"<g><text x="{LEFT}" y="{:.1}" font-weight="bold">{name}</text><rect x="{LEFT}" y="{y0:.1}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##,
            y0 - 8.0
        );
        let Some((lo, hi)) = bounds(series.iter().flat_map(|s| s.rows.iter().map(get))) else {
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">no data</text></g>"#, LEFT + plot_w / 2.0, y0 + plot_h / 2.0);
            continue;
        };
        let sx = |v: f64| LEFT + (v - x_lo) / (x_hi - x_lo) * plot_w;
        let sy = |v: f64| y0 + plot_h - (v - lo) / (hi - lo) * plot_h;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{hi:.4}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{lo:.4}</text>"#,
            LEFT - 4.0,
            y0 + 10.0,
            LEFT - 4.0,
            y0 + plot_h
        );
        let _ = writeln!(
            out,
            r#"<text x="{LEFT}" y="{:.1}">step {x_lo}</text><text x="{:.1}" y="{:.1}" text-anchor="end">step {x_hi}</text>"#,
            y0 + plot_h + 14.0,
            LEFT + plot_w,
            y0 + plot_h + 14.0
        );
        for (i, s) in series.iter().enumerate() {
            let pts: Vec<String> = s
                .rows
                .iter()
                .filter(|r| get(r).is_finite())
                .map(|r| format!("{:.2},{:.2}", sx(r.step as f64), sy(get(r))))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                PALETTE[i % PALETTE.len()],
                pts.join(" ")
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Step-wise mean over runs; steps missing from any run are dropped.
pub fn average(runs: &[Vec<MetricsRow>]) -> Vec<MetricsRow> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let n = runs.len() as f64;
    first
        .iter()
        .filter_map(|r0| {
            let same: Vec<&MetricsRow> = runs.iter().filter_map(|run| run.iter().find(|r| r.step == r0.step)).collect();
            (same.len() == runs.len()).then(|| {
                let mean = |f: fn(&MetricsRow) -> f64| same.iter().map(|r| f(r)).sum::<f64>() / n;
                MetricsRow {
                    step: r0.step,
                    mean_total_reward: mean(|r| r.mean_total_reward),
                    mean_format_reward: mean(|r| r.mean_format_reward),
                    mean_accuracy_reward: mean(|r| r.mean_accuracy_reward),
                    mean_completion_length: mean(|r| r.mean_completion_length),
                    mean_kl: mean(|r| r.mean_kl),
                    pg_loss: mean(|r| r.pg_loss),
                    wall_ms: (same.iter().map(|r| r.wall_ms as f64).sum::<f64>() / n) as u64,
                }
            })
        })
        .collect()
}
