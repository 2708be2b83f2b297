//! Side-by-side metric table for two evaluated models.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// Rendered cells.
    pub a_text: String,
    pub b_text: String,
    pub winner: Option<Side>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub caption: String,
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<ReportRow>,
}

fn winner(a: f64, b: f64, lower_is_better: bool) -> Option<Side> {
    let (better, worse) = if lower_is_better { (a < b, a > b) } else { (a > b, a < b) };
    if better {
        Some(Side::A)
    } else if worse {
        Some(Side::B)
    } else {
        None
    }
}

/// Perplexity first, then one accuracy row per k. The better value of each
/// row is marked; equal values get no mark.
pub fn render_report(a: &EvalReport, b: &EvalReport, labels: (&str, &str), caption: Option<&str>) -> Result<ReportTable> {
    if a.config_digest != b.config_digest {
        return Err(Error::config(format!(
            "reports were produced under different evaluation configs ({} vs {}) and are not comparable",
            a.config_digest, b.config_digest
        )));
    }
    let ks_a: Vec<usize> = a.top_k.iter().map(|t| t.k).collect();
    let ks_b: Vec<usize> = b.top_k.iter().map(|t| t.k).collect();
    if ks_a != ks_b {
        return Err(Error::config("reports list different k values"));
    }
    let mut rows = vec![ReportRow {
        metric: "Perplexity".into(),
        a: a.perplexity,
        b: b.perplexity,
        a_text: format!("{:.2}", a.perplexity),
        b_text: format!("{:.2}", b.perplexity),
        winner: winner(a.perplexity, b.perplexity, true),
    }];
    for (ta, tb) in a.top_k.iter().zip(&b.top_k) {
        rows.push(ReportRow {
            metric: format!("Top-{} Accuracy", ta.k),
            a: ta.accuracy,
            b: tb.accuracy,
            a_text: format!("{:.2}%", ta.accuracy * 100.0),
            b_text: format!("{:.2}%", tb.accuracy * 100.0),
            winner: winner(ta.accuracy, tb.accuracy, false),
        });
    }
    let caption = caption
        .map(str::to_string)
        .unwrap_or_else(|| format!("Comparison of {} and {}", labels.0, labels.1));
    Ok(ReportTable { caption, label_a: labels.0.into(), label_b: labels.1.into(), rows })
}

impl ReportTable {
    pub fn row(&self, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

impl fmt::Display for ReportTable {
    /// Markdown; winners are bold.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.caption)?;
        writeln!(f)?;
        writeln!(f, "| Metric | {} | {} |", self.label_a, self.label_b)?;
        writeln!(f, "|---|---:|---:|")?;
        for r in &self.rows {
            let mark = |text: &str, side| {
                if r.winner == Some(side) {
                    format!("**{text}**")
                } else {
                    text.to_string()
                }
            };
            writeln!(f, "| {} | {} | {} |", r.metric, mark(&r.a_text, Side::A), mark(&r.b_text, Side::B))?;
        }
        Ok(())
    }
}
