//! Shared fixtures for the benchmarks.

use rand::Rng;
use stgcl_core::contrast::{FilterSpec, NegativeSets};
use stgcl_core::rng::{stream, Purpose};
use stgcl_core::{SensorGraph, Tensor};

/// Tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, Purpose::Test, 0, 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Ring of `n` sensors, each linked to its two neighbors.
pub fn ring_graph(n: usize) -> SensorGraph {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + (i + 1) % n] = 1.0;
        w[((i + 1) % n) * n + i] = 1.0;
    }
    SensorGraph::from_weights(n, w).expect("ring")
}

/// Negative sets for a batch of consecutive windows starting at slot 0.
pub fn negatives(
    batch: usize,
    graph: &SensorGraph,
    steps_per_day: usize,
    r_f: f64,
) -> NegativeSets {
    let slots: Vec<usize> = (0..batch).map(|i| i % steps_per_day).collect();
    let spec = FilterSpec {
        r_f,
        spatial: true,
        steps_per_day,
        interval_minutes: 24 * 60 / steps_per_day,
    };
    NegativeSets::build(&slots, graph, &spec).expect("filter")
}
