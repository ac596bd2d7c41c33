//! Report emission: a machine-readable metrics file with stable keys, a
//! human-readable text report, and a loss-curve SVG.

use std::path::Path;

use crate::metrics::MetricReport;

use super::eval::EvalLatency;
use super::train::TrainRecord;
use super::HarnessError;

/// Writes `metrics.json` (deterministic), `latency.json` (wall-clock, not
/// part of the determinism contract) and `report.txt`.
pub fn write_eval_outputs(
    dir: &Path,
    report: &MetricReport,
    latency: Option<&EvalLatency>,
    config_hash: u64,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let payload = serde_json::json!({
        "config_hash": format!("{config_hash:016x}"),
        "metrics": report,
    });
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&payload).unwrap(),
    )?;
    if let Some(lat) = latency {
        std::fs::write(
            dir.join("latency.json"),
            serde_json::to_string_pretty(lat).unwrap(),
        )?;
    }
    std::fs::write(dir.join("report.txt"), render_text(report, latency))?;
    Ok(())
}

/// Human-readable rendering; IoU values are printed x100.
pub fn render_text(report: &MetricReport, latency: Option<&EvalLatency>) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "episodes evaluated: {}\n\noccupancy forecasting (IoU x100)\n",
        report.episodes
    ));
    out.push_str("  group   IoU_c   IoU_f   IoU_f_tw\n");
    for (name, t) in &report.groups {
        out.push_str(&format!(
            "  {:<6} {:>6.2}  {:>6.2}  {:>8.2}\n",
            name,
            100.0 * t.current,
            100.0 * t.future,
            100.0 * t.future_weighted
        ));
    }
    out.push_str("\nper-class future IoU (x100)\n");
    for (name, v) in &report.per_class_future {
        out.push_str(&format!("  {:<16} {:>6.2}\n", name, 100.0 * v));
    }
    out.push_str("\nplanning\n");
    for (label, v) in &report.l2.per_horizon {
        out.push_str(&format!("  L2 @ {:<5} {:>7.3} m\n", label, v));
    }
    out.push_str(&format!("  L2 avg    {:>7.3} m\n", report.l2.avg));
    out.push_str(&format!(
        "  collision rate {:>6.2} %\n",
        report.collision_rate_pct
    ));
    if let Some(lat) = latency {
        out.push_str("\nplanning latency (wall clock)\n");
        out.push_str(&format!(
            "  total  median {:>8.2} ms  p90 {:>8.2} ms  ({} samples)\n",
            lat.plan_total.median_ms, lat.plan_total.p90_ms, lat.plan_total.samples
        ));
        for (name, s) in &lat.phases {
            out.push_str(&format!(
                "  {:<6} median {:>8.2} ms  p90 {:>8.2} ms\n",
                name, s.median_ms, s.p90_ms
            ));
        }
    }
    out
}

/// Plots the total-loss curve from training records as a standalone SVG.
pub fn loss_curve_svg(records: &[TrainRecord]) -> String {
    let (w, h, pad) = (640.0f64, 360.0f64, 40.0f64);
    if records.is_empty() {
        return format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\"/>");
    }
    let max_y = records.iter().map(|r| r.total).fold(f64::MIN, f64::max);
    let min_y = records.iter().map(|r| r.total).fold(f64::MAX, f64::min);
    let span = (max_y - min_y).max(1e-9);
    let n = records.len().max(2) as f64;
    let points: Vec<String> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let x = pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
            let y = h - pad - (h - 2.0 * pad) * (r.total - min_y) / span;
            format!("{x:.1},{y:.1}")
        })
        .collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\
         <polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\
         <text x=\"{pad}\" y=\"20\" font-family=\"monospace\" font-size=\"12\">total loss: first {:.4} last {:.4}</text>\
         </svg>",
        points.join(" "),
        records.first().map(|r| r.total).unwrap_or(0.0),
        records.last().map(|r| r.total).unwrap_or(0.0),
    )
}

/// Side-by-side comparison table for several named reports.
pub fn comparison_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "run", "GMO_c", "GMO_f", "GSO_f", "L2avg", "coll%", "episodes"
    ));
    for (name, r) in rows {
        let gmo = r.groups.get("gmo").cloned().unwrap_or_default();
        let gso = r.groups.get("gso").cloned().unwrap_or_default();
        out.push_str(&format!(
            "{:<28} {:>8.2} {:>8.2} {:>8.2} {:>8.3} {:>8.2} {:>9}\n",
            name,
            100.0 * gmo.current,
            100.0 * gmo.future,
            100.0 * gso.future,
            r.l2.avg,
            r.collision_rate_pct,
            r.episodes
        ));
    }
    out
}
