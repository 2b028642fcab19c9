//! Image-caption similarity, the matching function, per-label skew and the
//! MaxSkew/MinSkew (and @K) audit.

mod audit;
mod render;
mod skew;

pub use audit::{audit, mean_max_min_skew, CaptionSkew, SkewReport, SkewRow};
pub use render::{SkewDelta, SkewDeltaRow};
pub use skew::{
    caption_skews, cosine_similarity, match_set, skew, skew_at_k, CaptionSkews, MatchSet, SkewConfig, Smoothing,
};
