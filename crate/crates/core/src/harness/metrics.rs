//! Round metrics, confusion matrices, and the files a run leaves behind.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{Oracle, Sample};
use crate::subspace::ProjectionSpec;

pub const CSV_HEADER: &str = "round,test_accuracy,test_loss,broadcast_sigma,corrected_sigma,next_sigma,mean_local_loss,local_losses,uplink_floats,downlink_floats";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 0 is the initial distribution; row `t` follows the `t`-th aggregation.
    pub round: usize,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    /// Step broadcast at the start of the round.
    pub broadcast_sigma: f64,
    pub corrected_sigma: Option<f64>,
    pub next_sigma: f64,
    /// Ordered by client id.
    pub local_losses: Vec<f64>,
    pub uplink_floats: u64,
    pub downlink_floats: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        let mean_local = if self.local_losses.is_empty() {
            None
        } else {
            Some(self.local_losses.iter().sum::<f64>() / self.local_losses.len() as f64)
        };
        let losses: Vec<String> = self.local_losses.iter().map(f64::to_string).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            opt(self.test_accuracy),
            opt(self.test_loss),
            self.broadcast_sigma,
            opt(self.corrected_sigma),
            self.next_sigma,
            opt(mean_local),
            losses.join(";"),
            self.uplink_floats,
            self.downlink_floats
        )
    }
}

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// `(round, accuracy)` pairs from a metrics file; rows without an evaluation
/// are skipped.
pub fn accuracy_series(csv: &str) -> Result<Vec<(usize, f64)>> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Format { line: 1, message: "unexpected metrics header".into() }),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |m: &str| Error::Format { line: idx + 1, message: m.into() };
        let mut fields = line.split(',');
        let round = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| fail("bad round"))?;
        match fields.next() {
            Some("") => {}
            Some(acc) => out.push((round, acc.parse().map_err(|_| fail("bad accuracy"))?)),
            None => return Err(fail("missing accuracy")),
        }
    }
    Ok(out)
}

/// `matrix[i][j]` counts samples with true label `i` predicted as `j`.
pub fn confusion_matrix(oracle: &dyn Oracle, prompt: &[f64], test: &[Sample]) -> Result<Vec<Vec<usize>>> {
    if test.is_empty() {
        return Err(Error::invalid("confusion matrix needs a non-empty test set"));
    }
    let preds = oracle.predict(prompt, test)?;
    Ok(confusion_from_predictions(test, &preds, oracle.num_classes()))
}

pub fn confusion_from_predictions(test: &[Sample], preds: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let size = test.iter().map(|s| s.label + 1).chain(preds.iter().map(|p| p + 1)).fold(num_classes, usize::max);
    let mut m = vec![vec![0; size]; size];
    for (s, p) in test.iter().zip(preds) {
        m[s.label][*p] += 1;
    }
    m
}

/// Largest share of predictions landing in a single class.
pub fn dominant_class_fraction(matrix: &[Vec<usize>]) -> f64 {
    let total: usize = matrix.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let cols = matrix.first().map_or(0, Vec::len);
    let best = (0..cols).map(|j| matrix.iter().map(|row| row[j]).sum::<usize>()).max().unwrap_or(0);
    best as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionFile {
    pub round: usize,
    pub matrix: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalZ {
    pub d: usize,
    pub z: Vec<f64>,
    pub projection: ProjectionSpec,
}

impl FinalZ {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let f: FinalZ = serde_json::from_str(&text)?;
        if f.z.len() != f.d || f.projection.sub_dim != f.d {
            return Err(Error::invalid(format!(
                "final_z has d={} but {} entries and projection d={}",
                f.d,
                f.z.len(),
                f.projection.sub_dim
            )));
        }
        Ok(f)
    }
}

/// Static line chart of accuracy against round.
pub fn accuracy_svg(points: &[(usize, f64)], title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let max_round = points.iter().map(|p| p.0).max().unwrap_or(0).max(1) as f64;
    let x = |r: usize| pad + (w - 2.0 * pad) * r as f64 / max_round;
    let y = |a: f64| h - pad - (h - 2.0 * pad) * a.clamp(0.0, 1.0);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="25" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    for tick in 0..=4 {
        let a = tick as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{a:.2}</text>"#,
            pad - 6.0,
            y(a) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">round</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{pad}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">0</text>"#,
        h - pad + 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{max_round}</text>"#,
        w - pad,
        h - pad + 16.0
    );
    if !points.is_empty() {
        let path: Vec<String> = points.iter().map(|&(r, a)| format!("{:.2},{:.2}", x(r), y(a))).collect();
        let _ =
            writeln!(svg, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, path.join(" "));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
