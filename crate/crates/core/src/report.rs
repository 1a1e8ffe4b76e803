//! CSV and SVG report emission.
//!
//! Every report starts with a provenance block: the command line, the seed
//! and a hash of the resolved configuration. CSV files carry it as `#`
//! comment lines, SVG files as an XML comment. Files are written to a
//! temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    fn lines(&self) -> [String; 3] {
        [
            format!("command: {}", self.command),
            format!("seed: {}", self.seed),
            format!("config_hash: {}", self.config_hash),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportKind {
    Csv,
    Svg,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub kind: ReportKind,
    pub bytes: Vec<u8>,
}

/// CSV with a `#` provenance header, readable by any parser that skips
/// comment lines.
pub fn csv_report<S: AsRef<str>>(prov: &Provenance, columns: &[&str], rows: &[Vec<S>]) -> Result<Report> {
    let mut bytes = Vec::new();
    for line in prov.lines() {
        writeln!(bytes, "# {}", line.replace('\n', " "))?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        w.write_record(columns).map_err(csv_err)?;
        for (i, r) in rows.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(Error::Contract(format!("row {i} has {} cells for {} columns", r.len(), columns.len())));
            }
            w.write_record(r.iter().map(|c| c.as_ref())).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(Report { kind: ReportKind::Csv, bytes })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Parses a report written by [`csv_report`] back into header and rows.
pub fn read_csv(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    Ok((header, rows))
}

/// Writes to a temporary file in the destination directory, then renames.
pub fn emit_report(report: &Report, path: &Path) -> Result<()> {
    write_atomic(path, &report.bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(out: &mut String, prov: &Provenance, w: f64, h: f64, title: &str) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(out, "<!--");
    for line in prov.lines() {
        // "--" may not appear inside an XML comment.
        let _ = writeln!(out, "  {}", line.replace("--", "- -"));
    }
    let _ = writeln!(out, "-->");
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="10" y="18" font-size="14">{}</text>"#, escape(title));
}

/// Sequential white-to-dark-blue ramp for `v ∈ [0, 1]`.
fn ramp(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// One `h × w` panel of a heatmap figure.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatPanel {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Panels of per-cell rectangles sharing one colour scale, with a
/// colour-bar legend.
pub fn heatmap_svg(prov: &Provenance, title: &str, panels: &[HeatPanel]) -> Result<Report> {
    if let Some(p) = panels.iter().find(|p| p.values.len() != p.rows * p.cols) {
        return Err(Error::Contract(format!("panel '{}' has {} values for {}x{}", p.label, p.values.len(), p.rows, p.cols)));
    }
    let (lo, hi) = panels
        .iter()
        .flat_map(|p| &p.values)
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = 14.0;
    let per_row = 4usize.min(panels.len().max(1));
    let pw = panels.iter().map(|p| p.cols).max().unwrap_or(1) as f64 * cell + 20.0;
    let ph = panels.iter().map(|p| p.rows).max().unwrap_or(1) as f64 * cell + 30.0;
    let grid_rows = panels.len().div_ceil(per_row).max(1);
    let width = (per_row as f64 * pw + 20.0).max(260.0);
    let height = 40.0 + grid_rows as f64 * ph + 50.0;
    let mut out = String::new();
    svg_open(&mut out, prov, width, height, title);
    for (i, p) in panels.iter().enumerate() {
        let x0 = 10.0 + (i % per_row) as f64 * pw;
        let y0 = 40.0 + (i / per_row) as f64 * ph;
        let _ = writeln!(out, r#"<text x="{x0}" y="{}">{}</text>"#, y0 + 10.0, escape(&p.label));
        for r in 0..p.rows {
            for c in 0..p.cols {
                let v = p.values[r * p.cols + c];
                let _ = writeln!(
                    out,
                    r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{}"><title>{v:.6e}</title></rect>"#,
                    x0 + c as f64 * cell,
                    y0 + 16.0 + r as f64 * cell,
                    ramp((v - lo) / span)
                );
            }
        }
    }
    let ly = height - 36.0;
    let _ = writeln!(out, r#"<g id="legend">"#);
    for k in 0..20 {
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{ly}" width="10" height="12" fill="{}"/>"#,
            10.0 + k as f64 * 10.0,
            ramp(k as f64 / 19.0)
        );
    }
    let _ = writeln!(out, r#"<text x="10" y="{}">{lo:.3e}</text>"#, ly + 26.0);
    let _ = writeln!(out, r#"<text x="210" y="{}" text-anchor="end">{hi:.3e}</text>"#, ly + 26.0);
    let _ = writeln!(out, "</g>\n</svg>");
    Ok(Report {
        kind: ReportKind::Svg,
        bytes: out.into_bytes(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart with axes, tick labels and a legend.
pub fn line_chart_svg(prov: &Provenance, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<Report> {
    let pts = || series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    if pts().next().is_none() {
        return Err(Error::Contract("line chart needs at least one finite point".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY), |a, &(x, y)| {
        (a.0.min(x), a.1.max(x), a.2.min(y), a.3.max(y))
    });
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (w, h) = (560.0, 360.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut out = String::new();
    svg_open(&mut out, prov, w, h, title);
    let _ = writeln!(
        out,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), top + ph + 16.0, tick(fx));
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, sy(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    let _ = writeln!(out, r#"<g id="legend">"#);
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .enumerate()
            .map(|(k, &(x, y))| format!("{}{:.2} {:.2}", if k == 0 { "M" } else { "L" }, sx(x), sy(y)))
            .collect();
        if !d.is_empty() {
            let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, d.join(" "));
        }
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="12" height="3" fill="{colour}"/>"#, left + pw + 12.0, ly + 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, left + pw + 28.0, ly + 9.0, escape(&s.name));
    }
    let _ = writeln!(out, "</g>\n</svg>");
    Ok(Report {
        kind: ReportKind::Svg,
        bytes: out.into_bytes(),
    })
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance {
            command: "flatdino flops --seed 42".into(),
            seed: 42,
            config_hash: "abc123".into(),
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let rows = vec![vec!["1".to_string(), "a,b".to_string()], vec!["2".into(), "say \"hi\"".into()]];
        let r = csv_report(&prov(), &["n", "text"], &rows).unwrap();
        let text = String::from_utf8(r.bytes.clone()).unwrap();
        assert!(text.starts_with("# command: flatdino flops --seed 42\n# seed: 42\n"));
        let (h, back) = read_csv(&r.bytes).unwrap();
        assert_eq!(h, ["n", "text"]);
        assert_eq!(back, rows);
        assert!(csv_report(&prov(), &["n"], &rows).is_err());
    }

    #[test]
    fn svg_text_is_escaped() {
        let panel = HeatPanel {
            label: "a<b & c".into(),
            rows: 2,
            cols: 2,
            values: vec![0.0, 1.0, 2.0, 3.0],
        };
        let r = heatmap_svg(&prov(), "t", &[panel]).unwrap();
        let s = String::from_utf8(r.bytes).unwrap();
        assert!(s.contains("a&lt;b &amp; c"));
        assert!(s.contains("seed: 42"));
        assert_eq!(s.matches("<rect").count(), 1 + 4 + 20);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn line_chart_needs_points() {
        assert!(line_chart_svg(&prov(), "t", "x", "y", &[]).is_err());
        let s = Series {
            name: "flat".into(),
            points: vec![(0.0, 1.0), (1.0, 1.0)],
        };
        assert!(line_chart_svg(&prov(), "t", "x", "y", &[s]).is_ok());
    }
}
