use serde::{Deserialize, Serialize};

use crate::arl::Debias;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize};

/// Classes, prompt templates and one encoded prompt per (class, template).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTask {
    pub name: String,
    pub classes: Vec<String>,
    pub templates: Vec<String>,
    /// `prompt_vectors[c][t]`: template `t` filled with class `c`.
    pub prompt_vectors: Vec<Vec<Vec<f64>>>,
}

impl ZeroShotTask {
    pub fn validate(&self) -> Result<usize> {
        if self.classes.is_empty() || self.templates.is_empty() {
            return Err(Error::Config(format!("task `{}` needs classes and templates", self.name)));
        }
        if self.prompt_vectors.len() != self.classes.len()
            || self.prompt_vectors.iter().any(|c| c.len() != self.templates.len())
        {
            return Err(Error::ShapeMismatch(format!("task `{}`: one prompt vector per class and template", self.name)));
        }
        let d = self.prompt_vectors[0][0].len();
        if d == 0 || self.prompt_vectors.iter().flatten().any(|v| v.len() != d) {
            return Err(Error::ShapeMismatch(format!("task `{}`: prompt vectors of differing width", self.name)));
        }
        Ok(d)
    }

    /// Per class, the mean of the normalized prompt vectors. Its dot product
    /// with a unit image vector is the mean cosine over templates.
    pub fn prototypes(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.validate()?;
        self.prompt_vectors
            .iter()
            .map(|prompts| {
                let mut mean = vec![0.0; d];
                for p in prompts {
                    let n = l2_normalize(p);
                    if n.degenerate {
                        return Err(Error::DegenerateVector(format!("prompt vector in task `{}`", self.name)));
                    }
                    for (m, v) in mean.iter_mut().zip(n.vector) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= prompts.len() as f64);
                Ok(mean)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRecord {
    pub id: String,
    pub vector: Vec<f64>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub predictions: Vec<usize>,
    pub top1: f64,
    pub k: usize,
    pub topk: f64,
}

/// Predicts the class with the highest mean cosine over templates (lowest
/// index on ties) and reports top-1 and top-`k` accuracy.
pub fn zeroshot_classify(task: &ZeroShotTask, records: &[ZeroShotRecord], k: usize) -> Result<ZeroShotResult> {
    let prototypes = task.prototypes()?;
    if records.is_empty() {
        return Err(Error::EmptySplit(format!("task `{}` has no evaluation records", task.name)));
    }
    let k = k.clamp(1, task.classes.len());
    let (mut hits1, mut hitsk) = (0usize, 0usize);
    let mut predictions = Vec::with_capacity(records.len());
    for r in records {
        if r.class >= task.classes.len() {
            return Err(Error::ClassOutOfRange { index: r.class, classes: task.classes.len() });
        }
        if r.vector.len() != prototypes[0].len() {
            return Err(Error::DimensionMismatch { id: r.id.clone(), expected: prototypes[0].len(), got: r.vector.len() });
        }
        let unit = l2_normalize(&r.vector);
        if unit.degenerate {
            return Err(Error::DegenerateVector(r.id.clone()));
        }
        let scores: Vec<f64> = prototypes.iter().map(|p| dot(&unit.vector, p)).collect();
        let mut ranked: Vec<usize> = (0..scores.len()).collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        predictions.push(ranked[0]);
        hits1 += usize::from(ranked[0] == r.class);
        hitsk += usize::from(ranked[..k].contains(&r.class));
    }
    let n = records.len() as f64;
    Ok(ZeroShotResult { predictions, top1: hits1 as f64 / n, k, topk: hitsk as f64 / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassErrorRow {
    pub class: String,
    pub count: usize,
    pub error_before: f64,
    pub error_after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassErrorReport {
    pub task: String,
    /// Sorted by `delta`, largest first; ties by class order.
    pub rows: Vec<ClassErrorRow>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

/// Per-class error rates of `base` and `debiased`, which must hold the same
/// records in the same order.
pub fn compare_class_errors(
    task: &ZeroShotTask,
    base: &[ZeroShotRecord],
    debiased: &[ZeroShotRecord],
) -> Result<ClassErrorReport> {
    if base.len() != debiased.len() {
        return Err(Error::RecordMismatch(format!("{} base records, {} debiased", base.len(), debiased.len())));
    }
    if let Some((a, b)) = base.iter().zip(debiased).find(|(a, b)| a.id != b.id || a.class != b.class) {
        return Err(Error::RecordMismatch(format!("`{}` paired with `{}`", a.id, b.id)));
    }
    let before = zeroshot_classify(task, base, 1)?;
    let after = zeroshot_classify(task, debiased, 1)?;
    let c = task.classes.len();
    let (mut count, mut wrong_before, mut wrong_after) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for (i, r) in base.iter().enumerate() {
        count[r.class] += 1;
        wrong_before[r.class] += usize::from(before.predictions[i] != r.class);
        wrong_after[r.class] += usize::from(after.predictions[i] != r.class);
    }
    let rate = |w: usize, n: usize| if n == 0 { 0.0 } else { w as f64 / n as f64 };
    let mut order: Vec<usize> = (0..c).collect();
    let deltas: Vec<f64> =
        (0..c).map(|k| rate(wrong_after[k], count[k]) - rate(wrong_before[k], count[k])).collect();
    order.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]).then(a.cmp(&b)));
    Ok(ClassErrorReport {
        task: task.name.clone(),
        rows: order
            .into_iter()
            .map(|k| ClassErrorRow {
                class: task.classes[k].clone(),
                count: count[k],
                error_before: rate(wrong_before[k], count[k]),
                error_after: rate(wrong_after[k], count[k]),
                delta: deltas[k],
            })
            .collect(),
        accuracy_before: before.top1,
        accuracy_after: after.top1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDrop {
    pub task: String,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// `before - after`, in percentage points.
    pub drop_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyDropReport {
    pub tasks: Vec<TaskDrop>,
    pub mean_drop_points: f64,
}

/// Zero-shot top-1 accuracy of each task's images before and after `model`.
/// Prompt vectors are text-side and are left untouched.
pub fn accuracy_drop_report(tasks: &[(ZeroShotTask, Vec<ZeroShotRecord>)], model: &dyn Debias) -> Result<AccuracyDropReport> {
    let mut out = Vec::with_capacity(tasks.len());
    for (task, records) in tasks {
        let debiased = records
            .iter()
            .map(|r| Ok(ZeroShotRecord { vector: model.transform(&r.vector)?, ..r.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let before = zeroshot_classify(task, records, 1)?.top1;
        let after = zeroshot_classify(task, &debiased, 1)?.top1;
        out.push(TaskDrop {
            task: task.name.clone(),
            accuracy_before: before,
            accuracy_after: after,
            drop_points: 100.0 * (before - after),
        });
    }
    let mean = if out.is_empty() { 0.0 } else { out.iter().map(|t| t.drop_points).sum::<f64>() / out.len() as f64 };
    Ok(AccuracyDropReport { tasks: out, mean_drop_points: mean })
}
