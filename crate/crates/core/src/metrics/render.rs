use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::audit::SkewReport;
use crate::error::{Error, Result};
use crate::store::{Attribute, Sentiment};

impl SkewReport {
    /// Aligned text table, one line per (attribute, sentiment).
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<9} {:>8} {:>9} {:>9} {:>10} {:>10}  {:<18} {:<18}",
            "attr", "sentiment", "captions", "MaxSkew", "MinSkew", "MaxSkew@K", "MinSkew@K", "favored", "disfavored"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:<9} {:>8} {:>9.4} {:>9.4} {:>10.4} {:>10.4}  {:<18} {:<18}",
                r.attribute.name(),
                r.sentiment.name(),
                r.captions,
                r.max_skew,
                r.min_skew,
                r.max_skew_at_k,
                r.min_skew_at_k,
                r.favored_label,
                r.disfavored_label
            );
        }
        let _ = writeln!(out, "epsilon = {}, k = {}, images = {}", self.config.epsilon, self.config.k, self.images);
        out
    }

    /// Per-caption breakdown as CSV. `label_skews` and `label_skews_at_k`
    /// hold `label=value` pairs separated by `;`.
    pub fn write_csv<W: Write>(&self, w: W, vocab_of: impl Fn(Attribute) -> Vec<String>) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "caption_id",
            "attribute",
            "sentiment",
            "labeled",
            "matched",
            "skipped",
            "max_skew",
            "min_skew",
            "favored",
            "disfavored",
            "k",
            "max_skew_at_k",
            "min_skew_at_k",
            "label_skews",
            "label_skews_at_k",
        ])
        .map_err(csv_error)?;
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.12}"));
        for r in &self.rows {
            let labels = vocab_of(r.attribute);
            let pairs = |s: &[Option<f64>]| {
                s.iter().zip(&labels).filter_map(|(v, l)| v.map(|v| format!("{l}={v:.12}"))).collect::<Vec<_>>().join(";")
            };
            for c in &r.breakdown {
                out.write_record([
                    c.caption_id.clone(),
                    r.attribute.to_string(),
                    r.sentiment.name().to_string(),
                    c.labeled.to_string(),
                    c.matched.to_string(),
                    c.skipped.to_string(),
                    fmt(c.max_skew),
                    fmt(c.min_skew),
                    c.favored_label.clone().unwrap_or_default(),
                    c.disfavored_label.clone().unwrap_or_default(),
                    c.k.to_string(),
                    format!("{:.12}", c.max_skew_at_k),
                    format!("{:.12}", c.min_skew_at_k),
                    pairs(&c.skews),
                    pairs(&c.skews_at_k),
                ])
                .map_err(csv_error)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewDeltaRow {
    pub attribute: Attribute,
    pub sentiment: Sentiment,
    pub max_skew_before: f64,
    pub max_skew_after: f64,
    pub min_skew_before: f64,
    pub min_skew_after: f64,
    pub max_skew_at_k_before: f64,
    pub max_skew_at_k_after: f64,
    pub min_skew_at_k_before: f64,
    pub min_skew_at_k_after: f64,
    /// `1 - |after| / |before|` for MaxSkew; 0 when `before` is 0.
    pub max_skew_reduction: f64,
}

/// Row-by-row comparison of two audits of the same captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewDelta {
    pub rows: Vec<SkewDeltaRow>,
}

impl SkewDelta {
    pub fn between(before: &SkewReport, after: &SkewReport) -> Result<Self> {
        let mut rows = Vec::new();
        for b in &before.rows {
            let a = after
                .row(b.attribute, b.sentiment)
                .ok_or_else(|| Error::RecordMismatch(format!("no {}/{} row after", b.attribute, b.sentiment)))?;
            let reduction = if b.max_skew.abs() > 0.0 { 1.0 - a.max_skew.abs() / b.max_skew.abs() } else { 0.0 };
            rows.push(SkewDeltaRow {
                attribute: b.attribute,
                sentiment: b.sentiment,
                max_skew_before: b.max_skew,
                max_skew_after: a.max_skew,
                min_skew_before: b.min_skew,
                min_skew_after: a.min_skew,
                max_skew_at_k_before: b.max_skew_at_k,
                max_skew_at_k_after: a.max_skew_at_k,
                min_skew_at_k_before: b.min_skew_at_k,
                min_skew_at_k_after: a.min_skew_at_k,
                max_skew_reduction: reduction,
            });
        }
        Ok(Self { rows })
    }

    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<9} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "attr", "sentiment", "Max before", "Max after", "Min before", "Min after", "reduction"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:<9} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9.1}%",
                r.attribute.name(),
                r.sentiment.name(),
                r.max_skew_before,
                r.max_skew_after,
                r.min_skew_before,
                r.min_skew_after,
                100.0 * r.max_skew_reduction
            );
        }
        out
    }
}
