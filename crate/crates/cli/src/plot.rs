//! Weight-trajectory emission: CSV (canonical) and a hand-rolled SVG.

use std::io::Write;
use std::path::Path;

use crate::runlog::ParsedLog;

pub const CSV_HEADER: &str = "iter,omega_p1,omega_p2,omega_p3,omega_s1,omega_s2,omega_s3";

pub fn emit_csv(log: &ParsedLog, out: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(f, "{}", CSV_HEADER)?;
    for r in &log.records {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.iter,
            r.omega_p[0],
            r.omega_p[1],
            r.omega_p[2],
            r.omega_s[0],
            r.omega_s[1],
            r.omega_s[2]
        )?;
    }
    f.flush()
}

/// Parse a trajectory CSV back into (iter, six weights) rows.
pub fn parse_csv(text: &str) -> Result<Vec<(u64, [f64; 6])>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(format!("bad CSV header: {:?}", other)),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(format!("line {}: expected 7 fields", i + 2));
        }
        let iter: u64 = fields[0]
            .parse()
            .map_err(|e| format!("line {}: {}", i + 2, e))?;
        let mut w = [0.0; 6];
        for (j, f) in fields[1..].iter().enumerate() {
            w[j] = f.parse().map_err(|e| format!("line {}: {}", i + 2, e))?;
        }
        rows.push((iter, w));
    }
    Ok(rows)
}

const SVG_W: f64 = 860.0;
const SVG_H: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

const SERIES: [(&str, &str); 6] = [
    ("omega_p1", "#1f77b4"),
    ("omega_p2", "#2ca02c"),
    ("omega_p3", "#17becf"),
    ("omega_s1", "#d62728"),
    ("omega_s2", "#ff7f0e"),
    ("omega_s3", "#9467bd"),
];

/// Six polylines of the weight trajectories, each normalized by its
/// family ceiling so both families share the [0, 1] axis.
pub fn emit_svg(log: &ParsedLog, out: &Path) -> std::io::Result<()> {
    let lp = log.header.config.aux.lambda_p;
    let ls = log.header.config.aux.lambda_s;
    let n = log.records.len().max(1);
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let x_of = |i: usize| MARGIN_L + plot_w * i as f64 / (n.max(2) - 1) as f64;
    let y_of = |frac: f64| MARGIN_T + plot_h * (1.0 - frac.clamp(0.0, 1.0));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        SVG_W, SVG_H, SVG_W, SVG_H
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_L,
        t = MARGIN_T,
        b = SVG_H - MARGIN_B,
        r = SVG_W - MARGIN_R
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{:.2}</text>\n",
            MARGIN_L - 6.0,
            y_of(tick) + 4.0,
            tick
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">iteration</text>\n",
        MARGIN_L + plot_w / 2.0,
        SVG_H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">weight / ceiling</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));
    if let Some(last) = log.records.last() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            x_of(n - 1),
            SVG_H - MARGIN_B + 16.0,
            last.iter
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">0</text>\n",
        MARGIN_L,
        SVG_H - MARGIN_B + 16.0
    ));

    for (s, (name, color)) in SERIES.iter().enumerate() {
        let mut points = String::new();
        for (i, r) in log.records.iter().enumerate() {
            let frac = if s < 3 {
                r.omega_p[s] / lp
            } else {
                r.omega_s[s - 3] / ls
            };
            points.push_str(&format!("{:.2},{:.2} ", x_of(i), y_of(frac)));
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            color,
            points.trim_end()
        ));
        let ly = MARGIN_T + 16.0 * s as f64 + 10.0;
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"{c}\" stroke-width=\"2\"/>\n<text x=\"{tx}\" y=\"{ty}\" font-size=\"11\">{n} (/{lam})</text>\n",
            x = SVG_W - MARGIN_R + 10.0,
            x2 = SVG_W - MARGIN_R + 30.0,
            y = ly,
            c = color,
            tx = SVG_W - MARGIN_R + 36.0,
            ty = ly + 4.0,
            n = name,
            lam = if s < 3 { lp } else { ls },
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::runlog::{CycleRecord, RunHeader};

    fn fake_log(n: usize) -> ParsedLog {
        let records = (0..n)
            .map(|i| CycleRecord {
                iter: i as u64,
                l1: 0.1,
                tv: 0.01,
                perc_terms: [0.1; 3],
                styl_terms: [0.01; 3],
                omega_p: [1.0 + 0.001 * i as f64, 1.0, 1.0 - 0.0005 * i as f64],
                omega_s: [375.0, 375.0 + 0.05 * i as f64, 375.0],
                phi_p: Some([0.0; 3]),
                phi_s: Some([0.0; 3]),
                guidance: 0.05,
                psnr: 20.0,
                ssim: 0.8,
                mae: 0.05,
                pdist: 0.05,
                wallclock_ms: None,
            })
            .collect();
        ParsedLog {
            header: RunHeader {
                config: RunConfig::default(),
                param_count: 5163,
                extractor_checksum: "0".into(),
                version: "test".into(),
            },
            records,
            summary: None,
            abort: None,
        }
    }

    #[test]
    fn csv_roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let log = fake_log(25);
        let path = dir.path().join("t.csv");
        emit_csv(&log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 26); // header + records
        let rows = parse_csv(&text).unwrap();
        assert_eq!(rows.len(), 25);
        for (row, rec) in rows.iter().zip(&log.records) {
            assert_eq!(row.0, rec.iter);
            for i in 0..3 {
                assert_eq!(row.1[i].to_bits(), rec.omega_p[i].to_bits());
                assert_eq!(row.1[3 + i].to_bits(), rec.omega_s[i].to_bits());
            }
        }
    }

    #[test]
    fn svg_has_six_polylines_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let log = fake_log(10);
        let path = dir.path().join("t.svg");
        emit_svg(&log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("<polyline").count(), 6);
        assert!(text.contains("iteration"));
        assert!(text.contains("weight / ceiling"));
    }

    #[test]
    fn constant_run_gives_flat_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = fake_log(5);
        for r in &mut log.records {
            r.omega_p = [1.0; 3];
            r.omega_s = [375.0; 3];
        }
        let path = dir.path().join("flat.csv");
        emit_csv(&log, &path).unwrap();
        let rows = parse_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(rows.iter().all(|(_, w)| *w == rows[0].1));
    }
}
