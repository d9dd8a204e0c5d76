//! Experiment tables and dependency-free SVG figures.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::median;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    /// Test NME against the number of style translations per image.
    StyleCount,
    /// Test NME for each training-loss variant of the disentangler.
    LossVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRow {
    pub label: String,
    /// Test NME (fraction) for each seed, in seed order.
    pub nme: Vec<f64>,
    pub median: f64,
}

impl TableRow {
    pub fn new(label: impl Into<String>, nme: Vec<f64>) -> Self {
        let median = median(&nme);
        Self {
            label: label.into(),
            nme,
            median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableHeader {
    table: TableKind,
    seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentTable {
    pub kind: TableKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
}

impl ExperimentTable {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Header line followed by one JSON record per row.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&TableHeader {
            table: self.kind,
            seeds: self.seeds.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::parse(1, "empty table"))?;
        let header: TableHeader =
            serde_json::from_str(first).map_err(|e| Error::parse(1, format!("bad table header: {e}")))?;
        let rows = lines
            .map(|(i, l)| serde_json::from_str::<TableRow>(l).map_err(|e| Error::parse(i + 1, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        for (i, r) in rows.iter().enumerate() {
            if r.nme.len() != header.seeds.len() {
                return Err(Error::parse(i + 2, "row has a different number of seeds than the header"));
            }
        }
        Ok(Self {
            kind: header.table,
            seeds: header.seeds,
            rows,
        })
    }

    /// Two-line text table: row labels across, median NME (%) below.
    pub fn to_text(&self) -> String {
        let first = match self.kind {
            TableKind::StyleCount => "Number",
            TableKind::LossVariant => "Model",
        };
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8) + 2;
        let mut out = format!("{first:<10}");
        for r in &self.rows {
            let _ = write!(out, "|{:^width$}", r.label);
        }
        out.push_str("\nNME (%)   ");
        for r in &self.rows {
            let _ = write!(out, "|{:^width$}", format!("{:.2}", r.median * 100.0));
        }
        out.push('\n');
        out
    }
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>", W / 2.0, escape(title));
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - MARGIN,
        W - 20.0,
        H - MARGIN
    );
    let _ = writeln!(s, "<line x1=\"{MARGIN}\" y1=\"30\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>", H - MARGIN);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// CED curves, one polyline per `(label, curve)`.
pub fn ced_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let x_max = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.0))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let plot_w = W - 20.0 - MARGIN;
    let plot_h = H - MARGIN - 30.0;
    let px = |x: f64| MARGIN + x / x_max * plot_w;
    let py = |y: f64| H - MARGIN - y * plot_h;
    let mut s = frame("Cumulative error distribution", "NME", "fraction of test images");
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{f:.1}</text>", MARGIN - 4.0, py(f) + 4.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>", px(f * x_max), H - MARGIN + 14.0, f * x_max);
    }
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let ly = 40.0 + 14.0 * i as f64;
        let _ = writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"3\" fill=\"{color}\"/>", W - 150.0, ly - 4.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\">{}</text>", W - 135.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart of median NME (%) per table row, with per-seed values as dots.
pub fn table_svg(table: &ExperimentTable) -> String {
    let (title, x_label) = match table.kind {
        TableKind::StyleCount => ("Test NME against styles per image", "styles per image (k)"),
        TableKind::LossVariant => ("Test NME per disentangler loss variant", "variant"),
    };
    let y_max = table
        .rows
        .iter()
        .flat_map(|r| r.nme.iter().copied().chain([r.median]))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 100.0
        * 1.1;
    let plot_w = W - 20.0 - MARGIN;
    let plot_h = H - MARGIN - 30.0;
    let py = |v: f64| H - MARGIN - v / y_max * plot_h;
    let slot = plot_w / table.rows.len().max(1) as f64;
    let mut s = frame(title, x_label, "NME (%)");
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.1}</text>", MARGIN - 4.0, py(v) + 4.0);
    }
    for (i, r) in table.rows.iter().enumerate() {
        let x0 = MARGIN + slot * i as f64 + slot * 0.2;
        let bw = slot * 0.6;
        let top = py(r.median * 100.0);
        let _ = writeln!(
            s,
            "<rect x=\"{x0:.2}\" y=\"{top:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
            H - MARGIN - top,
            COLORS[0]
        );
        for v in &r.nme {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"black\"/>", x0 + bw / 2.0, py(v * 100.0));
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x0 + bw / 2.0,
            H - MARGIN + 14.0,
            escape(&r.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
