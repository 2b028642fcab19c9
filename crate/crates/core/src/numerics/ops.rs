use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate.
pub const NORM_EPSILON: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    /// Set when the input norm was at or below [`NORM_EPSILON`]; the vector is
    /// then returned unchanged.
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let norm = l2_norm(v);
    if norm <= NORM_EPSILON {
        return Normalized { vector: v.to_vec(), degenerate: true };
    }
    Normalized { vector: v.iter().map(|x| x / norm).collect(), degenerate: false }
}

/// `ln sum exp(x_i) - max_i x_i`, computed with `ln_1p` so that a dominant
/// logit keeps full relative precision in the remainder.
fn log_sum_exp_excess(logits: &[f64]) -> (f64, f64) {
    let top = argmax(logits);
    let max = logits[top];
    if max == f64::NEG_INFINITY {
        return (max, 0.0);
    }
    let rest: f64 = logits.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, x)| (x - max).exp()).sum();
    (max, rest.ln_1p())
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    if logits.is_empty() {
        return f64::NEG_INFINITY;
    }
    let (max, excess) = log_sum_exp_excess(logits);
    max + excess
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::ClassOutOfRange { index: label, classes: logits.len() });
    }
    let (max, excess) = log_sum_exp_excess(logits);
    Ok(((max - logits[label]) + excess).max(0.0))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&[3.0, 4.0]);
        assert!(!n.degenerate);
        assert!((n.vector[0] - 0.6).abs() < 1e-15 && (n.vector[1] - 0.8).abs() < 1e-15);

        let unit = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&unit).vector, unit.to_vec());

        let zero = l2_normalize(&[0.0, 0.0]);
        assert!(zero.degenerate);
        assert_eq!(zero.vector, vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        for c in [-3.0, 0.0, 17.5, 1e4] {
            assert!(softmax(&[c; 4]).iter().all(|p| (p - 0.25).abs() < 1e-15));
        }
        // e^x / sum e^x evaluated directly.
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        let expected = [1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z];
        let got = softmax(&[1.0, 2.0, 3.0]);
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-15);
        }
        assert!((got[0] - 0.09003).abs() < 5e-6);
        assert!((got[1] - 0.24473).abs() < 5e-6);
        assert!((got[2] - 0.66524).abs() < 5e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0; 7], 3).unwrap() - 7f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[0.0; 2], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        // -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        let got = cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert!((got - expected).abs() < 1e-20);
        assert!((got - 2.06e-9).abs() < 1e-11);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..12), k in 0i32..64) {
            let c = f64::from(k) * 0.5 - 16.0;
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            for (a, b) in softmax(&xs).iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_is_a_distribution(xs in prop::collection::vec(-300.0f64..300.0, 1..16)) {
            let p = softmax(&xs);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cross_entropy_is_nonnegative(xs in prop::collection::vec(-30.0f64..30.0, 1..10), l in 0usize..10) {
            let l = l % xs.len();
            prop_assert!(cross_entropy(&xs, l).unwrap() >= 0.0);
        }
    }
}
