//! Second-view generation: edge masking, input masking, temporal shifting
//! and frequency-domain input smoothing.
//!
//! All methods act on the normalized target channel of a window; the
//! time-of-day channel is never touched. Each is the identity at its null
//! setting (`ratio = 0` for the masks, `α = 1`, smoothing `ratio = 1`).

mod dct;

pub use dct::{dct, idct, Dct};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InstanceBatch, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, SensorGraph};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Value written into masked input entries (normalized scale).
pub const MASK_VALUE: f64 = -1.0;

/// One augmentation method with its magnitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentSpec {
    /// Drop each adjacency entry with probability `ratio`; one mask per batch.
    EdgeMask { ratio: f64 },
    /// Replace each input entry by −1 with probability `ratio`.
    InputMask { ratio: f64 },
    /// Interpolate towards the next window with `α ~ U(min_alpha, 1)`.
    TemporalShift { min_alpha: f64 },
    /// Keep `fixed` low DCT coefficients; scale the rest by smoothed
    /// `U(ratio, 1)` factors.
    InputSmooth { ratio: f64, fixed: usize },
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let r = match *self {
            AugmentSpec::EdgeMask { ratio }
            | AugmentSpec::InputMask { ratio }
            | AugmentSpec::InputSmooth { ratio, .. } => ratio,
            AugmentSpec::TemporalShift { min_alpha } => min_alpha,
        };
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!(
                "augmentation ratio {r} outside [0, 1]"
            )));
        }
        Ok(())
    }

    /// The recommended single setting: 1% input masking.
    pub fn default_pipeline() -> Vec<AugmentSpec> {
        vec![AugmentSpec::InputMask { ratio: 0.01 }]
    }
}

/// `A′_ij = A_ij` if `M_ij ≥ ratio` else 0, with `M ~ U(0, 1)`.
pub fn edge_mask(a: &Tensor, ratio: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = a
        .data()
        .iter()
        .map(|&w| if rng.gen::<f64>() >= ratio { w } else { 0.0 })
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub fn input_mask(window: &[f64], ratio: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    window
        .iter()
        .map(|&v| {
            if rng.gen::<f64>() >= ratio {
                v
            } else {
                MASK_VALUE
            }
        })
        .collect()
}

/// `α·window + (1 − α)·next`; identity when the next window is unavailable.
pub fn temporal_shift(window: &[f64], next: Option<&[f64]>, alpha: f64) -> Vec<f64> {
    match next {
        Some(next) => window
            .iter()
            .zip(next)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect(),
        None => window.to_vec(),
    }
}

pub fn draw_alpha(min_alpha: f64, rng: &mut ChaCha8Rng) -> f64 {
    if min_alpha >= 1.0 {
        1.0
    } else {
        rng.gen_range(min_alpha..=1.0)
    }
}

/// Frequency-domain smoothing of a `len × nodes` row-major sequence.
///
/// Per node: DCT over time, keep the first `fixed` coefficients, multiply
/// the remaining `len − fixed` by factors drawn from `U(ratio, 1)` and mixed
/// over nodes by two propagation steps of `adj` (row-stochastic, so each
/// factor stays a convex combination), then invert. Returns the whole
/// reconstructed sequence.
pub fn input_smooth_full(
    seq: &[f64],
    len: usize,
    nodes: usize,
    fixed: usize,
    ratio: f64,
    adj: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if fixed > len {
        return Err(Error::invalid(format!(
            "{fixed} fixed coefficients exceed sequence length {len}"
        )));
    }
    if seq.len() != len * nodes {
        return Err(Error::shape("input_smooth", &[len, nodes], &[seq.len()]));
    }
    let high = len - fixed;
    let mut factors: Vec<f64> = (0..high * nodes)
        .map(|_| {
            if ratio >= 1.0 {
                1.0
            } else {
                rng.gen_range(ratio..=1.0)
            }
        })
        .collect();
    if let Some(adj) = adj {
        if adj.shape() != [nodes, nodes] {
            return Err(Error::shape("input_smooth", adj.shape(), &[nodes, nodes]));
        }
        for _ in 0..2 {
            factors = propagate_rows(&factors, high, nodes, adj.data());
        }
    }
    let dct = Dct::new(len);
    let mut out = vec![0.0; len * nodes];
    let mut column = vec![0.0; len];
    for node in 0..nodes {
        for t in 0..len {
            column[t] = seq[t * nodes + node];
        }
        let mut coeffs = dct.forward(&column);
        for f in 0..high {
            coeffs[fixed + f] *= factors[f * nodes + node];
        }
        for (t, v) in dct.inverse(&coeffs).into_iter().enumerate() {
            out[t * nodes + node] = v;
        }
    }
    Ok(out)
}

/// [`input_smooth_full`] truncated to the first `keep` steps.
#[allow(clippy::too_many_arguments)]
pub fn input_smooth(
    seq: &[f64],
    len: usize,
    nodes: usize,
    keep: usize,
    fixed: usize,
    ratio: f64,
    adj: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut full = input_smooth_full(seq, len, nodes, fixed, ratio, adj, rng)?;
    full.truncate(keep * nodes);
    Ok(full)
}

// out[f, i] = Σ_j adj[i, j] · m[f, j]
fn propagate_rows(m: &[f64], rows: usize, n: usize, adj: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for f in 0..rows {
        for i in 0..n {
            out[f * n + i] = (0..n).map(|j| adj[i * n + j] * m[f * n + j]).sum();
        }
    }
    out
}

/// RNG coordinates of one augmented view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    /// Distinguishes the two views when both are augmented.
    pub view: u64,
}

#[derive(Clone, Debug)]
pub struct AugmentedView {
    /// `[M, S, N, 2]`, same layout as [`InstanceBatch::inputs`].
    pub inputs: Tensor,
    /// Normalized adjacency after edge masking, if any was applied.
    pub adjacency: Option<Tensor>,
}

/// Applies `pipeline` left to right. Per-instance randomness is keyed by the
/// window's start index, so the result does not depend on batch order; the
/// edge mask is drawn once per batch.
pub fn augment_batch(
    batch: &InstanceBatch,
    pipeline: &[AugmentSpec],
    graph: &SensorGraph,
    key: AugmentKey,
) -> Result<AugmentedView> {
    let [m, s, n, f] = [
        batch.inputs.shape()[0],
        batch.inputs.shape()[1],
        batch.inputs.shape()[2],
        batch.inputs.shape()[3],
    ];
    debug_assert_eq!(f, NUM_FEATURES);
    let t = batch.future.shape()[1];
    let mut inputs = batch.inputs.clone();
    let mut masked_adj: Option<Tensor> = None;
    let stream_a = key.epoch << 8 | key.view;
    for (spec_idx, spec) in pipeline.iter().enumerate() {
        spec.validate()?;
        if let AugmentSpec::EdgeMask { ratio } = *spec {
            let mut r = rng::stream(
                key.seed,
                Purpose::EdgeMask,
                stream_a,
                key.batch << 8 | spec_idx as u64,
            );
            let base = masked_adj.as_ref().unwrap_or(graph.adjacency());
            masked_adj = Some(edge_mask(base, ratio, &mut r));
            continue;
        }
        for i in 0..m {
            let mut r = rng::stream(
                key.seed,
                Purpose::Augment,
                stream_a,
                (batch.starts[i] as u64) << 8 | spec_idx as u64,
            );
            let block = &mut inputs.data_mut()[i * s * n * f..(i + 1) * s * n * f];
            let window: Vec<f64> = block.iter().step_by(f).copied().collect();
            let out = match *spec {
                AugmentSpec::InputMask { ratio } => input_mask(&window, ratio, &mut r),
                AugmentSpec::TemporalShift { min_alpha } => {
                    let alpha = draw_alpha(min_alpha, &mut r);
                    let next = &batch.shifted.data()[i * s * n..(i + 1) * s * n];
                    temporal_shift(&window, batch.has_next[i].then_some(next), alpha)
                }
                AugmentSpec::InputSmooth { ratio, fixed } => {
                    let mut seq = window;
                    seq.extend_from_slice(&batch.future.data()[i * t * n..(i + 1) * t * n]);
                    input_smooth(
                        &seq,
                        s + t,
                        n,
                        s,
                        fixed,
                        ratio,
                        Some(graph.normalized()),
                        &mut r,
                    )?
                }
                AugmentSpec::EdgeMask { .. } => unreachable!(),
            };
            for (slot, v) in block.iter_mut().step_by(f).zip(out) {
                *slot = v;
            }
        }
    }
    Ok(AugmentedView {
        inputs,
        adjacency: masked_adj.map(|a| normalize_adjacency(&a)),
    })
}
