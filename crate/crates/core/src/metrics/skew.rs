use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, NORM_EPSILON};
use crate::store::{Attribute, CaptionRecord, EmbeddingRecord, EmbeddingSet};

/// Floor for a zero matched frequency, which would make the log ratio
/// undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Half a record: `1 / (2 |matched|)`. A caption with an empty match set
    /// is skipped.
    HalfCount,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkewConfig {
    /// Cosine threshold of the matching function.
    pub epsilon: f64,
    /// Ranking depth of the @K metrics.
    pub k: usize,
    pub smoothing: Smoothing,
}

impl Default for SkewConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, k: 1000, smoothing: Smoothing::HalfCount }
    }
}

impl SkewConfig {
    pub fn validate(&self) -> Result<()> {
        // Thresholds just outside [-1, 1] are allowed: they mean "match all"
        // or "match nothing".
        if !self.epsilon.is_finite() {
            return Err(Error::Config("skew epsilon must be finite".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("skew k must be at least 1".into()));
        }
        if let Smoothing::Fixed(d) = self.smoothing {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config("fixed smoothing must be positive".into()));
            }
        }
        Ok(())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("cosine of {}- and {}-vectors", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na <= NORM_EPSILON || nb <= NORM_EPSILON {
        return Err(Error::DegenerateVector("cosine similarity operand".into()));
    }
    Ok(cosine_from(dot(a, b), a, b, na, nb))
}

/// `dot / (|a| |b|)`. The denominator is taken as one square root of the
/// product of squared norms, so exact cosines such as 1/2 between small
/// integer vectors come out exact; the product of norms is the fallback
/// when the squares overflow.
fn cosine_from(dot_ab: f64, a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    let joint = (dot(a, a) * dot(b, b)).sqrt();
    let denom = if joint.is_finite() && joint > 0.0 { joint } else { na * nb };
    (dot_ab / denom).clamp(-1.0, 1.0)
}

/// `ln(f_m / f)`, substituting the smoothing floor when `f_m == 0`. Returns
/// `None` when the floor is undefined (half-count smoothing with an empty
/// match set).
pub fn skew(f_m: f64, f: f64, matched: usize, cfg: &SkewConfig) -> Result<Option<f64>> {
    if !(f > 0.0) {
        return Err(Error::Config(format!("base frequency {f} must be positive")));
    }
    let f_m = if f_m > 0.0 {
        f_m
    } else {
        match cfg.smoothing {
            Smoothing::HalfCount if matched == 0 => return Ok(None),
            Smoothing::HalfCount => 1.0 / (2.0 * matched as f64),
            Smoothing::Fixed(delta) => delta,
        }
    };
    Ok(Some((f_m / f).ln()))
}

const TIE_GRID: f64 = (1u64 << 40) as f64;

/// Matched images and label frequencies for one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub caption_id: String,
    pub attribute: Attribute,
    pub matched_ids: Vec<String>,
    pub base_counts: Vec<usize>,
    pub matched_counts: Vec<usize>,
    /// `f_i` over the labeled pool.
    pub base_freq: Vec<f64>,
    /// `f^m_i` over the matched records; all zero for an empty match.
    pub matched_freq: Vec<f64>,
}

/// Labeled images visible to a caption: restricted to the caption's scene
/// when it has one, and to records labeled for `attribute`.
pub(crate) struct Pool<'a> {
    pub entries: Vec<(&'a EmbeddingRecord, usize, f64)>,
    pub cardinality: usize,
}

pub(crate) fn pool<'a>(images: &'a EmbeddingSet, caption: &CaptionRecord, attribute: Attribute) -> Result<Pool<'a>> {
    let vocab = images.vocabulary(attribute).ok_or(Error::UnknownAttribute(attribute))?;
    let text = caption.vector.as_deref().ok_or_else(|| Error::MissingCaptionVector(caption.id.clone()))?;
    if text.len() != images.d() {
        return Err(Error::DimensionMismatch { id: caption.id.clone(), expected: images.d(), got: text.len() });
    }
    let text_norm = l2_norm(text);
    if text_norm <= NORM_EPSILON {
        return Err(Error::DegenerateVector(format!("caption `{}`", caption.id)));
    }
    let mut entries = Vec::new();
    for r in images.records() {
        if let (Some(scene), Some(rs)) = (&caption.scene, &r.scene) {
            if scene != rs {
                continue;
            }
        } else if caption.scene.is_some() {
            continue;
        }
        let Some(label) = r.label(attribute) else { continue };
        let n = l2_norm(&r.vector);
        if n <= NORM_EPSILON {
            return Err(Error::DegenerateVector(format!("image `{}`", r.id)));
        }
        let sim = cosine_from(dot(&r.vector, text), &r.vector, text, n, text_norm);
        entries.push((r, label, sim));
    }
    if entries.is_empty() {
        return Err(Error::NoLabeledRecords(format!("{attribute} for caption `{}`", caption.id)));
    }
    Ok(Pool { entries, cardinality: vocab.cardinality() })
}

fn frequencies(counts: &[usize], total: usize) -> Vec<f64> {
    counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
}

impl Pool<'_> {
    fn base_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.cardinality];
        for &(_, l, _) in &self.entries {
            c[l] += 1;
        }
        c
    }

    /// Per-label skews of a chosen subset against the base pool; labels with
    /// no base record get `None`.
    fn skews_of(&self, chosen: &[usize], cfg: &SkewConfig) -> Result<Option<Vec<Option<f64>>>> {
        let base = self.base_counts();
        let base_f = frequencies(&base, self.entries.len());
        let mut counts = vec![0; self.cardinality];
        for &i in chosen {
            counts[self.entries[i].1] += 1;
        }
        let matched_f = frequencies(&counts, chosen.len());
        let mut out = Vec::with_capacity(self.cardinality);
        for l in 0..self.cardinality {
            if base[l] == 0 {
                out.push(None);
                continue;
            }
            match skew(matched_f[l], base_f[l], chosen.len(), cfg)? {
                Some(s) => out.push(Some(s)),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }

    pub fn matched(&self, cfg: &SkewConfig) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].2 >= cfg.epsilon).collect()
    }

    /// Indices of the `k` most similar records: descending cosine, ties by
    /// ascending record id. Cosines are compared on a 2^-40 grid so that
    /// equal similarities computed through different roundings (an image
    /// and a scaled copy of it) tie.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let grid = |s: f64| (s * TIE_GRID).round() as i64;
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, _, sa) = self.entries[a];
            let (rb, _, sb) = self.entries[b];
            grid(sb).cmp(&grid(sa)).then_with(|| ra.id.cmp(&rb.id))
        });
        order.truncate(k);
        order
    }
}

pub fn match_set(
    images: &EmbeddingSet,
    caption: &CaptionRecord,
    cfg: &SkewConfig,
    attribute: Attribute,
) -> Result<MatchSet> {
    let pool = pool(images, caption, attribute)?;
    let matched = pool.matched(cfg);
    let base_counts = pool.base_counts();
    let mut matched_counts = vec![0; pool.cardinality];
    for &i in &matched {
        matched_counts[pool.entries[i].1] += 1;
    }
    Ok(MatchSet {
        caption_id: caption.id.clone(),
        attribute,
        matched_ids: matched.iter().map(|&i| pool.entries[i].0.id.clone()).collect(),
        base_freq: frequencies(&base_counts, pool.entries.len()),
        matched_freq: frequencies(&matched_counts, matched.len()),
        base_counts,
        matched_counts,
    })
}

/// Per-label skews of one caption under the matching function.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSkews {
    pub labeled: usize,
    pub matched: usize,
    /// `None` when skew is undefined for the whole caption (empty match under
    /// half-count smoothing).
    pub skews: Option<Vec<Option<f64>>>,
    pub k_used: usize,
    pub skews_at_k: Vec<Option<f64>>,
}

pub fn caption_skews(
    images: &EmbeddingSet,
    caption: &CaptionRecord,
    cfg: &SkewConfig,
    attribute: Attribute,
) -> Result<CaptionSkews> {
    let pool = pool(images, caption, attribute)?;
    let matched = pool.matched(cfg);
    let skews = pool.skews_of(&matched, cfg)?;
    let k_used = clamp_k(cfg.k, pool.entries.len(), &caption.id);
    let top = pool.top_k(k_used);
    let skews_at_k = pool.skews_of(&top, cfg)?.expect("top-k is never empty");
    Ok(CaptionSkews { labeled: pool.entries.len(), matched: matched.len(), skews, k_used, skews_at_k })
}

fn clamp_k(k: usize, n: usize, caption: &str) -> usize {
    if k > n {
        log::warn!("caption `{caption}`: k = {k} exceeds the {n} labeled images; using k = {n}");
        n
    } else {
        k
    }
}

/// Per-label skew over the `k` most similar labeled images (the threshold is
/// not applied).
pub fn skew_at_k(
    images: &EmbeddingSet,
    caption: &CaptionRecord,
    cfg: &SkewConfig,
    attribute: Attribute,
) -> Result<Vec<Option<f64>>> {
    let pool = pool(images, caption, attribute)?;
    let k = clamp_k(cfg.k, pool.entries.len(), &caption.id);
    Ok(pool.skews_of(&pool.top_k(k), cfg)?.expect("top-k is never empty"))
}
