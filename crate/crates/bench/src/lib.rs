//! Shared fixtures for the benchmarks in `benches/`.

use natmotion::data::{batch_of, generate_synthetic, windows_of, SyntheticSpec, WindowSpec};
use natmotion::model::{Model, ModelConfig};
use natmotion::Tensor;

/// Default-size model on the default synthetic skeleton.
pub fn default_model() -> Model {
    let seqs = generate_synthetic(&SyntheticSpec {
        seqs_per_class: 1,
        ..Default::default()
    })
    .expect("synthetic data");
    Model::new(ModelConfig::new(&seqs[0].tree, 3)).expect("model")
}

/// `batch` windows of `n` observed and `m` predicted frames with labels.
pub fn batch(batch: usize, n: usize, m: usize) -> (Tensor, Tensor, Vec<usize>) {
    let seqs = generate_synthetic(&SyntheticSpec {
        seqs_per_class: batch.div_ceil(3).max(1),
        ..Default::default()
    })
    .expect("synthetic data");
    let windows = windows_of(&seqs, &WindowSpec { n, m, stride: 60 }).expect("windows");
    let picked: Vec<_> = windows
        .iter()
        .step_by((windows.len() / batch).max(1))
        .take(batch)
        .collect();
    let (x, y, labels) = batch_of(picked).expect("batch");
    (x, y, labels.into_iter().map(|l| l.expect("labeled")).collect())
}
