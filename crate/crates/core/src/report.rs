//! CSV report files and the SVG charts derived from them.
//!
//! Every CSV starts with a `# config_digest=<hex>` comment line. SVGs are a
//! pure function of the CSV text, so re-rendering never changes a byte.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

const DIGEST_PREFIX: &str = "# config_digest=";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        offset: e.position().map_or(0, |p| p.byte()),
        message: format!("{}: {e}", path.display()),
    }
}

/// Writes serializable rows under a header derived from the field names.
pub fn write_csv<T: Serialize>(path: &Path, digest: &str, rows: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{DIGEST_PREFIX}{digest}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes string records under an explicit header.
pub fn write_csv_records(path: &Path, digest: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{DIGEST_PREFIX}{digest}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub digest: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn parse(text: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or_default();
        let digest = first
            .strip_prefix(DIGEST_PREFIX)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: "missing config digest line".into(),
            })?
            .to_string();
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let p = Path::new("<csv>");
        let headers = r
            .headers()
            .map_err(|e| csv_err(p, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(p, e))?;
        Ok(Self { digest, headers, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("no column `{name}`"),
            })
    }

    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .map(|r| {
                r[c].parse::<f64>().map_err(|e| Error::Format {
                    offset: 0,
                    message: format!("column `{name}`: {e}"),
                })
            })
            .collect()
    }

    pub fn str_column(&self, name: &str) -> Result<Vec<String>> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[c].clone()).collect())
    }
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, digest: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, "<desc>config_digest={digest}</desc>");
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN / 1.5);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    s
}

fn range(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn tick_labels(s: &mut String, lo: f64, hi: f64, vertical: bool) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN / 1.5);
    for (frac, v) in [(0.0, lo), (1.0, hi)] {
        if vertical {
            let y = y0 + frac * (y1 - y0);
            let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0);
        } else {
            let x = x0 + frac * (x1 - x0);
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v:.3}</text>"#, y0 + 14.0);
        }
    }
}

/// Scatter plot of two numeric columns.
pub fn scatter_svg(table: &CsvTable, x_col: &str, y_col: &str, title: &str) -> Result<String> {
    let xs = table.f64_column(x_col)?;
    let ys = table.f64_column(y_col)?;
    let (xl, xh) = range(&xs);
    let (yl, yh) = range(&ys);
    let mut s = frame(title, &table.digest, x_col, y_col);
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN / 1.5);
    for (x, y) in xs.iter().zip(&ys) {
        let px = x0 + (x - xl) / (xh - xl) * (x1 - x0);
        let py = y0 + (y - yl) / (yh - yl) * (y1 - y0);
        let _ = writeln!(s, r##"<circle cx="{px:.2}" cy="{py:.2}" r="2" fill="#1f77b4" fill-opacity="0.6"/>"##);
    }
    tick_labels(&mut s, xl, xh, false);
    tick_labels(&mut s, yl, yh, true);
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bar chart of one numeric column, labeled by the joined `label_cols`.
pub fn bar_svg(table: &CsvTable, label_cols: &[&str], value_col: &str, title: &str) -> Result<String> {
    let vals = table.f64_column(value_col)?;
    let idx: Vec<usize> = label_cols
        .iter()
        .map(|c| table.column(c))
        .collect::<Result<_>>()?;
    let labels: Vec<String> = table
        .rows
        .iter()
        .map(|r| idx.iter().map(|&i| r[i].as_str()).collect::<Vec<_>>().join(" "))
        .collect();
    let hi = vals.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let hi = if hi > 0.0 { hi } else { 1.0 };
    let mut s = frame(title, &table.digest, &label_cols.join(" "), value_col);
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN / 1.5);
    let n = vals.len().max(1) as f64;
    let slot = (x1 - x0) / n;
    for (i, (v, label)) in vals.iter().zip(&labels).enumerate() {
        let v = if v.is_finite() { *v } else { 0.0 };
        let h = v / hi * (y0 - y1);
        let x = x0 + i as f64 * slot + 0.1 * slot;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#ff7f0e"/>"##,
            y0 - h,
            0.8 * slot
        );
        if vals.len() <= 24 {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{}</text>"#,
                x + 0.4 * slot,
                y0 + 26.0,
                escape(label)
            );
        }
    }
    tick_labels(&mut s, 0.0, hi, true);
    s.push_str("</svg>\n");
    Ok(s)
}
