//! Fixtures shared by the benchmarks.

use fairembed_core::arl::{ArlBatch, ArlModel};
use fairembed_core::pac::{FrozenPac, PacArch, PacBatch, PacModel};
use fairembed_core::synth::{generate, SplitCounts, SynthOutput, SynthSpec};
use fairembed_core::{EmbeddingRecord, Matrix, Rng};

/// Default synthetic set with `n` images split 80/10/10.
pub fn synth(n: usize) -> SynthOutput {
    let counts = SplitCounts { train: n * 8 / 10, val: n / 10, test: n - n * 8 / 10 - n / 10 };
    generate(&SynthSpec { counts, ..SynthSpec::default() }).expect("synthetic set")
}

/// Randomly initialized classifier for `data` with the default architecture.
pub fn classifier(data: &SynthOutput, seed: u64) -> PacModel {
    let set = &data.images;
    PacModel::init(set.d(), set.vocabularies(), PacArch::default(), &mut Rng::new(seed))
}

pub fn first_records(data: &SynthOutput, n: usize) -> Vec<&EmbeddingRecord> {
    data.images.records().iter().take(n).collect()
}

pub fn pac_batch(pac: &PacModel, data: &SynthOutput, n: usize) -> PacBatch {
    PacBatch::from_records(pac, &first_records(data, n)).expect("batch")
}

pub fn arl_batch(pac: &FrozenPac, data: &SynthOutput, n: usize) -> ArlBatch {
    ArlBatch::from_records(pac, &first_records(data, n)).expect("batch")
}

/// Learner with small random weights so the residual path is exercised.
pub fn learner(d: usize, seed: u64) -> ArlModel {
    let mut model = ArlModel::zeros(d, Default::default());
    let mut rng = Rng::new(seed);
    let params: Vec<f64> = (0..d * d + d).map(|_| 0.01 * rng.normal()).collect();
    model.set_flat_params(&params).expect("parameter count");
    model
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape")
}
