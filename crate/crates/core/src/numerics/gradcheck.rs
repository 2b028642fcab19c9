/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against `(f(x+h) - f(x-h)) / 2h` at every coordinate.
/// The relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradient<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..params.len()).collect();
    check_gradient_at(f, params, analytic, h, &all)
}

/// As [`check_gradient`], restricted to the listed coordinates.
pub fn check_gradient_at<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64, indices: &[usize]) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient length");
    let mut x = params.to_vec();
    let mut out = GradCheck { max_rel_error: 0.0, worst_index: 0, checked: 0 };
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        out.checked += 1;
        if rel > out.max_rel_error || rel.is_nan() {
            out.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            out.worst_index = i;
        }
    }
    out
}
