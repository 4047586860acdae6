//! Post-hoc SVG rendering: the 2-D latent embedding scatter and the
//! loss / gate-rate training curves. Everything draws from persisted files
//! (feature dumps, JSONL run logs), never from live state.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::trainer::RunRecord;

use super::features::RowLabel;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

/// Marker shapes cycle per series (one series per run/dump).
const MARKERS: usize = 4;

fn marker(out: &mut String, shape: usize, x: f64, y: f64, color: &str) {
    match shape % MARKERS {
        0 => {
            let _ = write!(
                out,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#
            );
        }
        1 => {
            let _ = write!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="{color}"/>"#,
                x - 3.5,
                y - 3.5
            );
        }
        2 => {
            let _ = write!(
                out,
                r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}"/>"#,
                x,
                y - 4.5,
                x - 4.0,
                y + 3.5,
                x + 4.0,
                y + 3.5
            );
        }
        _ => {
            let _ = write!(
                out,
                r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}"/>"#,
                x,
                y - 4.5,
                x + 4.5,
                y,
                x,
                y + 4.5,
                x - 4.5,
                y
            );
        }
    }
    out.push('\n');
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = if self.xmax > self.xmin {
            (x - self.xmin) / (self.xmax - self.xmin)
        } else {
            0.5
        };
        let sy = if self.ymax > self.ymin {
            (y - self.ymin) / (self.ymax - self.ymin)
        } else {
            0.5
        };
        // SVG y grows downward.
        (self.x0 + sx * self.w, self.y0 + (1.0 - sy) * self.h)
    }

    fn border(&self, out: &mut String, title: &str) {
        let _ = write!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
            self.x0, self.y0, self.w, self.h
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" font-family="sans-serif">{}</text>"#,
            self.x0,
            self.y0 - 8.0,
            title
        );
    }
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Scatter of 2-D embedded features: color encodes the domain, marker shape
/// the series (typically one series per training arm).
pub fn embedding_svg(
    coords: &ArrayView2<f64>,
    labels: &[RowLabel],
    series_of_row: &[usize],
    series_names: &[String],
) -> Result<String> {
    if coords.nrows() != labels.len() || coords.nrows() != series_of_row.len() {
        return Err(Error::shape(format!(
            "{} points, {} labels, {} series tags",
            coords.nrows(),
            labels.len(),
            series_of_row.len()
        )));
    }
    if coords.ncols() != 2 {
        return Err(Error::shape("embedding must be 2-D"));
    }
    let (xmin, xmax) = span(coords.column(0).iter().copied());
    let (ymin, ymax) = span(coords.column(1).iter().copied());
    let frame = Frame {
        x0: 50.0,
        y0: 40.0,
        w: 460.0,
        h: 400.0,
        xmin,
        xmax,
        ymin,
        ymax,
    };

    let mut out = String::from(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="720" height="480" viewBox="0 0 720 480">
<rect width="720" height="480" fill="white"/>
"#,
    );
    frame.border(&mut out, "latent embedding (principal components)");
    for r in 0..coords.nrows() {
        let (x, y) = frame.map(coords[[r, 0]], coords[[r, 1]]);
        let color = PALETTE[labels[r].domain_id % PALETTE.len()];
        marker(&mut out, series_of_row[r], x, y, color);
    }

    // Legend: domains (colors) then series (shapes).
    let mut domains: Vec<usize> = labels.iter().map(|l| l.domain_id).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut ly = 50.0;
    for d in domains {
        let color = PALETTE[d % PALETTE.len()];
        marker(&mut out, 0, 540.0, ly, color);
        let _ = writeln!(
            out,
            r#"<text x="552" y="{:.1}" font-size="12" font-family="sans-serif">domain {d}</text>"#,
            ly + 4.0
        );
        ly += 20.0;
    }
    ly += 10.0;
    for (s, name) in series_names.iter().enumerate() {
        marker(&mut out, s, 540.0, ly, "#444444");
        let _ = writeln!(
            out,
            r#"<text x="552" y="{:.1}" font-size="12" font-family="sans-serif">{name}</text>"#,
            ly + 4.0
        );
        ly += 20.0;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str) {
    if pts.is_empty() {
        return;
    }
    let mut path = String::new();
    for &(x, y) in pts {
        let _ = write!(path, "{x:.2},{y:.2} ");
    }
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        path.trim_end()
    );
}

/// Gate open rate over a trailing window, one value per logged step.
fn gate_rate(records: &[RunRecord], window: usize) -> Vec<(f64, f64)> {
    let flags: Vec<(u64, f64)> = records
        .iter()
        .filter_map(|r| r.gate.map(|g| (r.step, if g.updated { 1.0 } else { 0.0 })))
        .collect();
    flags
        .iter()
        .enumerate()
        .map(|(i, &(step, _))| {
            let lo = i.saturating_sub(window - 1);
            let slice = &flags[lo..=i];
            let mean = slice.iter().map(|&(_, v)| v).sum::<f64>() / slice.len() as f64;
            (step as f64, mean)
        })
        .collect()
}

/// Two stacked panels: total loss per run, and gate open rate per run
/// (absent for arms that never consult the gate).
pub fn curves_svg(runs: &[(String, Vec<RunRecord>)]) -> Result<String> {
    if runs.is_empty() || runs.iter().all(|(_, r)| r.is_empty()) {
        return Err(Error::config("curves need at least one nonempty run log"));
    }
    let (lo, hi) = span(
        runs.iter()
            .flat_map(|(_, r)| r.iter().map(|rec| rec.total)),
    );
    let steps_hi = runs
        .iter()
        .flat_map(|(_, r)| r.iter().map(|rec| rec.step))
        .max()
        .unwrap_or(0) as f64;
    let loss_frame = Frame {
        x0: 60.0,
        y0: 40.0,
        w: 520.0,
        h: 180.0,
        xmin: 0.0,
        xmax: steps_hi.max(1.0),
        ymin: lo,
        ymax: hi,
    };
    let rate_frame = Frame {
        x0: 60.0,
        y0: 280.0,
        w: 520.0,
        h: 150.0,
        xmin: 0.0,
        xmax: steps_hi.max(1.0),
        ymin: 0.0,
        ymax: 1.0,
    };

    let mut out = String::from(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="720" height="470" viewBox="0 0 720 470">
<rect width="720" height="470" fill="white"/>
"#,
    );
    loss_frame.border(&mut out, "total loss");
    rate_frame.border(&mut out, "gate open rate (window 20)");
    let _ = writeln!(
        out,
        r#"<text x="58" y="{:.1}" font-size="10" text-anchor="end" font-family="sans-serif">{hi:.3}</text>"#,
        loss_frame.y0 + 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="58" y="{:.1}" font-size="10" text-anchor="end" font-family="sans-serif">{lo:.3}</text>"#,
        loss_frame.y0 + loss_frame.h
    );

    for (i, (name, records)) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = records
            .iter()
            .map(|r| loss_frame.map(r.step as f64, r.total))
            .collect();
        polyline(&mut out, &pts, color);
        let rate: Vec<(f64, f64)> = gate_rate(records, 20)
            .into_iter()
            .map(|(s, v)| rate_frame.map(s, v))
            .collect();
        polyline(&mut out, &rate, color);
        let _ = writeln!(
            out,
            r#"<text x="600" y="{:.1}" font-size="12" fill="{color}" font-family="sans-serif">{name}</text>"#,
            52.0 + 18.0 * i as f64
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Parse a JSONL run log back into records, skipping diagnostic lines.
pub fn read_run_log(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(r) => records.push(r),
            // Abort diagnostics share the file; they are not records.
            Err(_) => continue,
        }
    }
    if records.is_empty() {
        return Err(Error::config(format!(
            "no run records found in {}",
            path.display()
        )));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsema::GateDecision;
    use crate::model::NetworkKind;
    use crate::volume::Variant;
    use ndarray::Array2;

    fn rec(step: u64, total: f64, gate_open: Option<bool>) -> RunRecord {
        RunRecord {
            step,
            epoch: 0,
            l_stu_src: total,
            l_stu_trg: 0.0,
            l_tea_src: 0.0,
            l_tea_trg: 0.0,
            l_c_z: None,
            l_c_b: None,
            total,
            gate: gate_open.map(|updated| GateDecision {
                inner_product: if updated { 1.0 } else { -1.0 },
                cos_angle: 0.0,
                updated,
            }),
            lr: 0.001,
        }
    }

    #[test]
    fn embedding_renders_one_marker_per_row() {
        let coords = Array2::from_shape_vec(
            (4, 2),
            vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5, 0.3, -0.2],
        )
        .unwrap();
        let labels: Vec<RowLabel> = (0..4)
            .map(|i| RowLabel {
                domain_id: i % 2,
                variant: Variant::Source,
                network: NetworkKind::Teacher,
            })
            .collect();
        let series = vec![0, 0, 1, 1];
        let names = vec!["EMA".to_string(), "GS_EMA".to_string()];
        let svg = embedding_svg(&coords.view(), &labels, &series, &names).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // 2 data circles (series 0) + 2 legend-domain circles = 4 circles;
        // 2 data squares (series 1) + 1 legend square.
        assert_eq!(svg.matches("<circle").count(), 5);
        assert_eq!(svg.matches("<rect").count(), 2 + 3); // bg + frame + 3 squares
        assert!(svg.contains("domain 0") && svg.contains("GS_EMA"));

        // Deterministic output.
        let again = embedding_svg(&coords.view(), &labels, &series, &names).unwrap();
        assert_eq!(svg, again);
    }

    #[test]
    fn embedding_rejects_mismatched_inputs() {
        let coords = Array2::zeros((3, 2));
        let labels = vec![
            RowLabel {
                domain_id: 0,
                variant: Variant::Source,
                network: NetworkKind::Teacher,
            };
            2
        ];
        assert!(embedding_svg(&coords.view(), &labels, &[0, 0], &[]).is_err());
    }

    #[test]
    fn curves_render_loss_and_gate_rate() {
        let a: Vec<RunRecord> = (0..30)
            .map(|s| rec(s, 1.0 - s as f64 * 0.01, Some(s % 3 != 0)))
            .collect();
        let b: Vec<RunRecord> = (0..30).map(|s| rec(s, 0.9, None)).collect();
        let svg = curves_svg(&[("GS_EMA".into(), a), ("NO_EMA".into(), b)]).unwrap();
        // Loss polyline for both runs, gate-rate polyline only for the first.
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("total loss") && svg.contains("gate open rate"));
        assert!(curves_svg(&[]).is_err());
    }

    #[test]
    fn gate_rate_windows_correctly() {
        let records: Vec<RunRecord> = (0..10)
            .map(|s| rec(s, 1.0, Some(s < 5)))
            .collect();
        let rate = gate_rate(&records, 5);
        assert_eq!(rate.len(), 10);
        assert!((rate[4].1 - 1.0).abs() < 1e-12);
        // Steps 5..9: windows straddle the switch.
        assert!((rate[7].1 - 0.4).abs() < 1e-12);
        assert!((rate[9].1 - 0.0).abs() < 1e-12);
    }

    #[test]
    fn run_log_reader_skips_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let good = serde_json::to_string(&rec(0, 1.0, Some(true))).unwrap();
        std::fs::write(
            &path,
            format!("{good}\n{{\"step\":1,\"aborted\":\"NaN\"}}\n"),
        )
        .unwrap();
        let records = read_run_log(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].step, 0);
    }
}
