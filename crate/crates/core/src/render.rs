//! Grayscale SVG heatmaps (darker = larger).

use std::fmt::Write as _;

use crate::model::AttentionRecord;
use crate::oracle::OverlapMap;

pub const CELL: usize = 16;
const LABEL: usize = 24;
const GAP: usize = 24;

/// One heatmap panel, `values` row-major `[rows, cols]`.
#[derive(Clone, Debug)]
pub struct Panel {
    pub title: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

/// Maps `[0, max]` linearly to gray levels 255..0.
pub fn gray(value: f64, max: f64) -> u8 {
    if !(max > 0.0) || !value.is_finite() {
        return 255;
    }
    let t = (value / max).clamp(0.0, 1.0);
    (255.0 * (1.0 - t)).round() as u8
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Panels side by side, each scaled to its own maximum.
pub fn heatmap_svg(panels: &[Panel]) -> String {
    let height = panels.iter().map(|p| p.rows).max().unwrap_or(0) * CELL + 2 * LABEL;
    let width: usize = panels.iter().map(|p| p.cols * CELL + LABEL + GAP).sum::<usize>() + GAP;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"10\">\n"
    );
    let mut x0 = GAP;
    for p in panels {
        let max = p.values.iter().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max);
        let (gx, gy) = (x0 + LABEL, 2 * LABEL);
        let _ = writeln!(s, "<g class=\"panel\">");
        let _ = writeln!(s, "<text x=\"{gx}\" y=\"{}\">{}</text>", LABEL / 2 + 4, escape(&p.title));
        for (c, label) in p.col_labels.iter().enumerate().take(p.cols) {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", gx + c * CELL + 4, gy - 4, escape(label));
        }
        for (r, label) in p.row_labels.iter().enumerate().take(p.rows) {
            let _ = writeln!(s, "<text x=\"{x0}\" y=\"{}\">{}</text>", gy + r * CELL + 12, escape(label));
        }
        for r in 0..p.rows {
            for c in 0..p.cols {
                let v = gray(p.values[r * p.cols + c], max);
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({v},{v},{v})\"/>",
                    gx + c * CELL,
                    gy + r * CELL
                );
            }
        }
        s.push_str("</g>\n");
        x0 += p.cols * CELL + LABEL + GAP;
    }
    s.push_str("</svg>\n");
    s
}

/// One panel per (layer, head) record, labelled with the input tokens.
pub fn attention_svg(records: &[AttentionRecord], tokens: &str) -> String {
    let labels: Vec<String> = tokens.chars().map(String::from).collect();
    let panels: Vec<Panel> = records
        .iter()
        .map(|r| Panel {
            title: format!("layer {} head {}", r.layer, r.head),
            rows: r.len,
            cols: r.len,
            values: r.weights.clone(),
            row_labels: labels.clone(),
            col_labels: labels.clone(),
        })
        .collect();
    heatmap_svg(&panels)
}

/// Single-row map, most significant digit leftmost.
pub fn overlap_svg(map: &OverlapMap, mask: &str) -> String {
    let k = map.counts.len();
    heatmap_svg(&[Panel {
        title: format!("overlap {mask}"),
        rows: 1,
        cols: k,
        values: map.counts.iter().rev().map(|&c| c as f64).collect(),
        row_labels: vec![String::new()],
        col_labels: (0..k).rev().map(|d| format!("A{d}")).collect(),
    }])
}

/// Fill levels of every `<rect>` in document order, for tests and tooling.
pub fn rect_fills(svg: &str) -> Vec<u8> {
    svg.match_indices("fill=\"rgb(")
        .filter_map(|(i, m)| {
            let rest = &svg[i + m.len()..];
            rest.split(',').next()?.parse().ok()
        })
        .collect()
}
