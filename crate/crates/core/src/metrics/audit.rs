use serde::{Deserialize, Serialize};

use super::skew::{caption_skews, SkewConfig};
use crate::error::{Error, Result};
use crate::store::{Attribute, CaptionRecord, EmbeddingSet, Sentiment};

/// Skew breakdown of one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSkew {
    pub caption_id: String,
    pub labeled: usize,
    pub matched: usize,
    /// Set when the caption's match set was empty and it was left out of the
    /// thresholded means.
    pub skipped: bool,
    /// Per-label skew, `None` for labels absent from the pool.
    pub skews: Vec<Option<f64>>,
    pub max_skew: Option<f64>,
    pub min_skew: Option<f64>,
    pub favored_label: Option<String>,
    pub disfavored_label: Option<String>,
    pub k: usize,
    pub skews_at_k: Vec<Option<f64>>,
    pub max_skew_at_k: f64,
    pub min_skew_at_k: f64,
}

/// One (attribute, sentiment) row of the audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewRow {
    pub attribute: Attribute,
    pub sentiment: Sentiment,
    pub captions: usize,
    pub captions_skipped: usize,
    /// Mean over captions of the largest per-label skew.
    pub max_skew: f64,
    /// Mean over captions of the smallest per-label skew, signed.
    pub min_skew: f64,
    pub max_skew_at_k: f64,
    pub min_skew_at_k: f64,
    pub favored_label: String,
    pub disfavored_label: String,
    pub favored_label_at_k: String,
    pub disfavored_label_at_k: String,
    pub breakdown: Vec<CaptionSkew>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub config: SkewConfig,
    pub images: usize,
    pub rows: Vec<SkewRow>,
}

impl SkewReport {
    pub fn row(&self, attribute: Attribute, sentiment: Sentiment) -> Option<&SkewRow> {
        self.rows.iter().find(|r| r.attribute == attribute && r.sentiment == sentiment)
    }
}

/// Extreme over the defined entries; ties keep the lowest index.
fn extreme(values: &[Option<f64>], want_max: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        let Some(v) = *v else { continue };
        let better = match best {
            None => true,
            Some((_, b)) => {
                if want_max {
                    v > b
                } else {
                    v < b
                }
            }
        };
        if better {
            best = Some((i, v));
        }
    }
    best
}

fn caption_entry(
    images: &EmbeddingSet,
    caption: &CaptionRecord,
    cfg: &SkewConfig,
    attribute: Attribute,
) -> Result<CaptionSkew> {
    let vocab = images.vocabulary(attribute).ok_or(Error::UnknownAttribute(attribute))?;
    let cs = caption_skews(images, caption, cfg, attribute)?;
    let name = |i: usize| vocab.label(i).to_string();
    let (max_at_k, min_at_k) = (
        extreme(&cs.skews_at_k, true).expect("pool is non-empty"),
        extreme(&cs.skews_at_k, false).expect("pool is non-empty"),
    );
    let (skews, max, min) = match &cs.skews {
        Some(s) => (s.clone(), extreme(s, true), extreme(s, false)),
        None => {
            log::warn!("caption `{}` matched no images at epsilon {}; skipped", caption.id, cfg.epsilon);
            (vec![None; vocab.cardinality()], None, None)
        }
    };
    Ok(CaptionSkew {
        caption_id: caption.id.clone(),
        labeled: cs.labeled,
        matched: cs.matched,
        skipped: cs.skews.is_none(),
        skews,
        max_skew: max.map(|m| m.1),
        min_skew: min.map(|m| m.1),
        favored_label: max.map(|m| name(m.0)),
        disfavored_label: min.map(|m| name(m.0)),
        k: cs.k_used,
        skews_at_k: cs.skews_at_k.clone(),
        max_skew_at_k: max_at_k.1,
        min_skew_at_k: min_at_k.1,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

/// Label of the caption attaining the extreme per-caption value, and that
/// caption's argmax (or argmin) label.
fn extreme_label<'a>(
    entries: impl Iterator<Item = (f64, &'a [Option<f64>])>,
    want_max: bool,
    vocab: &crate::store::LabelVocabulary,
) -> String {
    let mut best: Option<(f64, &[Option<f64>])> = None;
    for (v, skews) in entries {
        let better = match best {
            None => true,
            Some((b, _)) => {
                if want_max {
                    v > b
                } else {
                    v < b
                }
            }
        };
        if better {
            best = Some((v, skews));
        }
    }
    let (_, skews) = best.expect("at least one caption");
    let (i, _) = extreme(skews, want_max).expect("caption has a defined skew");
    vocab.label(i).to_string()
}

fn build_row(
    images: &EmbeddingSet,
    captions: &[&CaptionRecord],
    cfg: &SkewConfig,
    attribute: Attribute,
    sentiment: Sentiment,
) -> Result<SkewRow> {
    let vocab = images.vocabulary(attribute).ok_or(Error::UnknownAttribute(attribute))?;
    let breakdown =
        captions.iter().map(|c| caption_entry(images, c, cfg, attribute)).collect::<Result<Vec<_>>>()?;
    let used: Vec<&CaptionSkew> = breakdown.iter().filter(|c| !c.skipped).collect();
    if used.is_empty() {
        return Err(Error::AllCaptionsSkipped(format!("{attribute}/{sentiment}")));
    }
    Ok(SkewRow {
        attribute,
        sentiment,
        captions: breakdown.len(),
        captions_skipped: breakdown.len() - used.len(),
        max_skew: mean(used.iter().map(|c| c.max_skew.expect("not skipped"))),
        min_skew: mean(used.iter().map(|c| c.min_skew.expect("not skipped"))),
        max_skew_at_k: mean(breakdown.iter().map(|c| c.max_skew_at_k)),
        min_skew_at_k: mean(breakdown.iter().map(|c| c.min_skew_at_k)),
        favored_label: extreme_label(
            used.iter().map(|c| (c.max_skew.expect("not skipped"), c.skews.as_slice())),
            true,
            vocab,
        ),
        disfavored_label: extreme_label(
            used.iter().map(|c| (c.min_skew.expect("not skipped"), c.skews.as_slice())),
            false,
            vocab,
        ),
        favored_label_at_k: extreme_label(
            breakdown.iter().map(|c| (c.max_skew_at_k, c.skews_at_k.as_slice())),
            true,
            vocab,
        ),
        disfavored_label_at_k: extreme_label(
            breakdown.iter().map(|c| (c.min_skew_at_k, c.skews_at_k.as_slice())),
            false,
            vocab,
        ),
        breakdown,
    })
}

/// Mean over captions of the per-caption max and min skew (the min is
/// reported signed, so it is normally negative).
pub fn mean_max_min_skew(
    images: &EmbeddingSet,
    captions: &[&CaptionRecord],
    cfg: &SkewConfig,
    attribute: Attribute,
) -> Result<(f64, f64)> {
    let sentiment = captions.first().map_or(Sentiment::Positive, |c| c.sentiment);
    let row = build_row(images, captions, cfg, attribute, sentiment)?;
    Ok((row.max_skew, row.min_skew))
}

/// Audits every (attribute, sentiment) pair that has captions. Rows follow
/// the order of `attributes`, positive before negative; captions keep their
/// input order.
pub fn audit(
    images: &EmbeddingSet,
    captions: &[CaptionRecord],
    cfg: &SkewConfig,
    attributes: &[Attribute],
) -> Result<SkewReport> {
    cfg.validate()?;
    if images.is_empty() || captions.is_empty() {
        return Err(Error::Config("audit needs images and captions".into()));
    }
    let mut rows = Vec::new();
    for &attribute in attributes {
        for sentiment in Sentiment::ALL {
            let selected: Vec<&CaptionRecord> =
                captions.iter().filter(|c| c.attribute == attribute && c.sentiment == sentiment).collect();
            if selected.is_empty() {
                log::info!("no {sentiment} captions for {attribute}; row omitted");
                continue;
            }
            rows.push(build_row(images, &selected, cfg, attribute, sentiment)?);
        }
    }
    Ok(SkewReport { config: *cfg, images: images.len(), rows })
}
