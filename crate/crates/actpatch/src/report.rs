// SPDX-License-Identifier: MIT OR Apache-2.0

//! Effect CSV, detection JSON and SVG heatmaps.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use actpatch_core::metrics::{detect, mean_sd, Detection, EffectMatrix, MetricKind, PatchTarget};
use serde::Serialize;

const DESCRIPTOR: [&str; 5] = ["target", "layer", "head", "position", "window"];

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

/// One row per target, then `mean` and `sd` rows over the targets.
pub fn effects_csv(matrix: &EffectMatrix) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = DESCRIPTOR
        .iter()
        .map(|s| s.to_string())
        .chain(matrix.metrics.iter().map(|m| m.as_str().to_string()));
    w.write_record(header).expect("in-memory write");
    for (t, row) in matrix.targets.iter().zip(&matrix.effects) {
        let mut rec = vec![
            t.to_string(),
            t.layer.to_string(),
            opt(t.head),
            opt(t.position),
            t.window.to_string(),
        ];
        rec.extend(row.iter().map(|&v| num(v)));
        w.write_record(&rec).expect("in-memory write");
    }
    let columns: Vec<Vec<f64>> = (0..matrix.metrics.len())
        .map(|m| matrix.effects.iter().map(|r| r[m]).collect())
        .collect();
    let stats: Vec<(f64, f64)> = columns.iter().map(|c| mean_sd(c)).collect();
    for (label, pick) in [("mean", 0usize), ("sd", 1)] {
        let mut rec = vec![
            label.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ];
        rec.extend(stats.iter().map(|s| num(if pick == 0 { s.0 } else { s.1 })));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
}

/// Reads back an [`effects_csv`] table; the summary rows are dropped.
pub fn parse_effects_csv(text: &str) -> Result<EffectMatrix, String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| e.to_string())?.clone();
    if header.len() < DESCRIPTOR.len() + 1 || header.iter().take(DESCRIPTOR.len()).ne(DESCRIPTOR) {
        return Err(format!(
            "expected columns {} then one per metric",
            DESCRIPTOR.join(",")
        ));
    }
    let metrics = header
        .iter()
        .skip(DESCRIPTOR.len())
        .map(|m| m.parse::<MetricKind>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut targets = Vec::new();
    let mut effects = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        if matches!(&rec[0], "mean" | "sd") {
            continue;
        }
        let target: PatchTarget = rec[0].parse().map_err(|e| format!("row {}: {e}", i + 2))?;
        let row = rec
            .iter()
            .skip(DESCRIPTOR.len())
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| format!("row {}: bad number {v:?}", i + 2))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != metrics.len() {
            return Err(format!(
                "row {}: {} values for {} metrics",
                i + 2,
                row.len(),
                metrics.len()
            ));
        }
        targets.push(target);
        effects.push(row);
    }
    let excluded = vec![0; metrics.len()];
    Ok(EffectMatrix {
        targets,
        metrics,
        effects,
        n_prompts: 0,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub metric: MetricKind,
    pub mean: f64,
    pub sd: f64,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

impl From<&Detection> for DetectionReport {
    fn from(d: &Detection) -> Self {
        Self {
            metric: d.metric,
            mean: d.mean,
            sd: d.sd,
            positive: d.positive_labels(),
            negative: d.negative_labels(),
        }
    }
}

/// Detections per metric. A sweep with a single row detects nothing.
pub fn detections(matrix: &EffectMatrix) -> Vec<Detection> {
    matrix
        .metrics
        .iter()
        .map(|&metric| {
            detect(matrix, metric).unwrap_or_else(|_| {
                let (mean, sd) = matrix.stats(metric).unwrap_or((f64::NAN, f64::NAN));
                Detection {
                    metric,
                    mean,
                    sd,
                    positive: Vec::new(),
                    negative: Vec::new(),
                }
            })
        })
        .collect()
}

pub fn detections_json(found: &[Detection]) -> String {
    let reports: Vec<DetectionReport> = found.iter().map(DetectionReport::from).collect();
    serde_json::to_string_pretty(&reports).expect("detections serialize")
}

/// Heatmap layout: rows are layers (or layer.head for head×position sweeps),
/// columns are heads, positions, or a single column for MLP windows.
struct Grid {
    rows: Vec<String>,
    cols: Vec<String>,
    cells: Vec<Vec<Option<f64>>>,
}

fn grid(matrix: &EffectMatrix, m: usize) -> Grid {
    let has_pos = matrix.targets.iter().any(|t| t.position.is_some());
    let has_head = matrix.targets.iter().any(|t| t.head.is_some());
    let row_key = |t: &PatchTarget| {
        if has_head && has_pos {
            (t.layer, t.head.unwrap_or(0))
        } else {
            (t.layer, 0)
        }
    };
    let col_key = |t: &PatchTarget| {
        if has_pos {
            t.position.unwrap_or(0)
        } else if has_head {
            t.head.unwrap_or(0)
        } else {
            0
        }
    };
    let row_keys: Vec<(usize, usize)> = matrix
        .targets
        .iter()
        .map(row_key)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col_keys: Vec<usize> = matrix
        .targets
        .iter()
        .map(col_key)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut cells = vec![vec![None; col_keys.len()]; row_keys.len()];
    for (t, row) in matrix.targets.iter().zip(&matrix.effects) {
        let r = row_keys.binary_search(&row_key(t)).expect("key present");
        let c = col_keys.binary_search(&col_key(t)).expect("key present");
        cells[r][c] = Some(row[m]);
    }
    let rows = row_keys
        .iter()
        .map(|&(l, h)| {
            if has_head && has_pos {
                format!("{l}.{h}")
            } else {
                l.to_string()
            }
        })
        .collect();
    let col_label = |c: &usize| {
        if has_pos {
            format!("p{c}")
        } else if has_head {
            format!("h{c}")
        } else {
            "mlp".into()
        }
    };
    Grid {
        rows,
        cols: col_keys.iter().map(col_label).collect(),
        cells,
    }
}

/// Blue for negative, white at zero, red for positive, scaled by `limit`.
fn diverging(v: f64, limit: f64) -> String {
    if !v.is_finite() {
        return "#bbbbbb".into();
    }
    let t = if limit > 0.0 {
        (v / limit).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    let (r, g, b) = if t >= 0.0 {
        (255, fade(t), fade(t))
    } else {
        (fade(t), fade(t), 255)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn heatmap_svg(
    matrix: &EffectMatrix,
    metric: MetricKind,
    title: &str,
) -> Result<String, String> {
    let m = matrix.metric_index(metric).map_err(|e| e.to_string())?;
    let g = grid(matrix, m);
    let limit = matrix
        .effects
        .iter()
        .map(|r| r[m])
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let cell = if g.rows.len() > 60 { 8 } else { 24 };
    let (left, top, legend) = (56, 40, 70);
    let width = left + cell * g.cols.len() + legend;
    let height = top + cell * g.rows.len() + 40;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="16" font-size="12">{}</text>"#,
        escape(title)
    );
    let label_every = if cell < 12 { 4 } else { 1 };
    for (c, name) in g.cols.iter().enumerate() {
        if c % label_every == 0 {
            let x = left + c * cell + cell / 2;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
                top - 6,
                escape(name)
            );
        }
    }
    for (r, name) in g.rows.iter().enumerate() {
        let y = top + r * cell;
        if r % label_every == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 4,
                y + cell / 2 + 3,
                escape(name)
            );
        }
        for (c, v) in g.cells[r].iter().enumerate() {
            let x = left + c * cell;
            let (fill, tip) = match v {
                Some(v) => (
                    diverging(*v, limit),
                    format!("{}/{}: {}", name, g.cols[c], num(*v)),
                ),
                None => ("#ffffff".into(), String::new()),
            };
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#eeeeee"><title>{}</title></rect>"##,
                escape(&tip)
            );
        }
    }
    let lx = left + cell * g.cols.len() + 16;
    for i in 0..=10 {
        let v = limit * (1.0 - i as f64 / 5.0);
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="12" height="10" fill="{}"/>"#,
            top + i * 10,
            diverging(v, limit)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">{:+.3}</text>"#,
        lx + 16,
        top + 8,
        limit
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">{:+.3}</text>"#,
        lx + 16,
        top + 108,
        -limit
    );
    s.push_str("</svg>\n");
    Ok(s)
}
