use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::types::{EmbeddingSet, Split};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidFractions(format!("{self:?} has a negative or non-finite part")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFractions(format!("{self:?} sums to {sum}")));
        }
        Ok(())
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

/// Assigns train/val/test to every record without a split, stratified by the
/// joint label tuple. Within each stratum records are ordered by id and then
/// shuffled, so the result depends only on ids, labels, `seed` and
/// `fractions`. Each stratum's split sizes are within one record of the exact
/// proportion. Records that already carry a split keep it.
pub fn split_set(set: &EmbeddingSet, seed: u64, fractions: SplitFractions) -> Result<EmbeddingSet> {
    fractions.validate()?;
    let attrs = set.attributes();
    let mut strata: BTreeMap<Vec<Option<usize>>, Vec<usize>> = BTreeMap::new();
    for (i, r) in set.records().iter().enumerate() {
        if r.split.is_none() {
            let key = attrs.iter().map(|&a| r.label(a)).collect();
            strata.entry(key).or_default().push(i);
        }
    }

    let mut records = set.records().to_vec();
    let mut rng = Rng::new(seed);
    for members in strata.values_mut() {
        members.sort_by(|&a, &b| records[a].id.cmp(&records[b].id));
        rng.shuffle(members);
        let n = members.len() as f64;
        // Cumulative rounding keeps every part within one record of exact.
        let b1 = (fractions.train * n).round() as usize;
        let b2 = (((fractions.train + fractions.val) * n).round() as usize).max(b1);
        for (pos, &i) in members.iter().enumerate() {
            let split = if pos < b1 {
                Split::Train
            } else if pos < b2 {
                Split::Val
            } else {
                Split::Test
            };
            records[i].split = Some(split);
        }
    }
    set.with_records(records)
}
