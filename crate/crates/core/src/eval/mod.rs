//! Checks around the debiasing core: a linear probe between image and text
//! difference vectors, and prompt-ensemble zero-shot classification.

mod probe;
mod zeroshot;

pub use probe::{
    fit_probe, repeat_probe, LabelPairSource, LinearPairSource, NoisePairSource, PairSource, ProbeConfig,
    ProbeModel, ProbePair, ProbeSummary,
};
pub use zeroshot::{
    accuracy_drop_report, compare_class_errors, zeroshot_classify, AccuracyDropReport, ClassErrorReport,
    ClassErrorRow, TaskDrop, ZeroShotRecord, ZeroShotResult, ZeroShotTask,
};
