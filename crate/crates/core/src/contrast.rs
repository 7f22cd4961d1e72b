//! Cosine similarities, negative filtering and the two InfoNCE variants.
//!
//! Both losses use cross-view similarities `sim(z′_a, z″_b)` with the
//! positive excluded from the denominator, so a loss can be negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::tensor::{AnchorTerm, Tape, Tensor, Var};

/// Negative filtering settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    /// Temporal threshold `r_f` in minutes.
    pub r_f: f64,
    /// Exclude first-order neighbors from node-level spatial negatives.
    pub spatial: bool,
    pub steps_per_day: usize,
    pub interval_minutes: usize,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        let half_day = (self.steps_per_day * self.interval_minutes) as f64 / 2.0;
        if self.r_f.is_nan() || self.r_f < 0.0 {
            return Err(Error::invalid(format!(
                "r_f = {} must be non-negative",
                self.r_f
            )));
        }
        if self.r_f >= half_day {
            return Err(Error::invalid(format!(
                "r_f = {} min is at least half a day; circular distance never exceeds it",
                self.r_f
            )));
        }
        if self.steps_per_day == 0 || self.interval_minutes == 0 {
            return Err(Error::invalid(
                "steps_per_day and interval must be positive",
            ));
        }
        Ok(())
    }
}

/// Allowed negatives per anchor for one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSets {
    /// `χ_m`: batch indices usable as negatives for instance `m`.
    pub temporal: Vec<Vec<usize>>,
    /// Nodes removed from node `i`'s spatial negatives.
    pub spatial_excluded: Vec<Vec<usize>>,
}

impl NegativeSets {
    pub fn build(slots: &[usize], graph: &SensorGraph, spec: &FilterSpec) -> Result<Self> {
        Ok(NegativeSets {
            temporal: temporal_filter(slots, spec)?,
            spatial_excluded: if spec.spatial {
                spatial_filter(graph)
            } else {
                vec![Vec::new(); graph.n()]
            },
        })
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_sim", &[u.len()], &[v.len()]));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `out[i, j] = sim(a_i, b_j)` for `a: [M, D]`, `b: [K, D]`.
pub fn pairwise_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("pairwise_cosine", a.shape(), b.shape()));
    }
    let mut tape = Tape::new(crate::tensor::Mode::Eval, 0);
    let (m, k, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
    let va = tape.constant(a.clone().reshape([1, m, d])?)?;
    let vb = tape.constant(b.clone().reshape([1, k, d])?)?;
    let s = cross_sims(&mut tape, va, vb)?;
    tape.value(s).clone().reshape([m, k])
}

fn cross_sims(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na = tape.l2_normalize(a)?;
    let nb = tape.l2_normalize(b)?;
    tape.batch_matmul_nt(na, nb)
}

/// `min(|a − b|, steps_per_day − |a − b|)` in steps.
pub fn circular_distance(a: usize, b: usize, steps_per_day: usize) -> usize {
    let d = a.abs_diff(b) % steps_per_day;
    d.min(steps_per_day - d)
}

/// `χ_i = {j ≠ i : circular distance(t_j, t_i) · interval > r_f}`, except
/// that `r_f = 0` keeps every `j ≠ i`, including windows that share a slot.
pub fn temporal_filter(slots: &[usize], spec: &FilterSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if let Some(s) = slots.iter().find(|&&s| s >= spec.steps_per_day) {
        return Err(Error::invalid(format!("slot {s} outside the day")));
    }
    Ok(slots
        .iter()
        .enumerate()
        .map(|(i, &ti)| {
            slots
                .iter()
                .enumerate()
                .filter(|&(j, &tj)| {
                    j != i
                        && (spec.r_f == 0.0
                            || (circular_distance(ti, tj, spec.steps_per_day)
                                * spec.interval_minutes) as f64
                                > spec.r_f)
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect())
}

/// Per-node excluded sets: the first-order neighbors.
pub fn spatial_filter(graph: &SensorGraph) -> Vec<Vec<usize>> {
    (0..graph.n())
        .map(|i| graph.first_order_neighbors(i).expect("in range").to_vec())
        .collect()
}

/// Graph-level InfoNCE over `z′, z″: [M, D]` with per-anchor negatives `χ`.
pub fn graph_infonce(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    chi: &[Vec<usize>],
    tau: f64,
    r_f: f64,
) -> Result<Var> {
    let shape = tape.shape(z1).to_vec();
    if shape.len() != 2 || tape.shape(z2) != shape.as_slice() {
        return Err(Error::shape("graph_infonce", &shape, tape.shape(z2)));
    }
    let (m, d) = (shape[0], shape[1]);
    if m < 2 {
        return Err(Error::invalid(
            "graph-level contrast needs at least two instances",
        ));
    }
    if chi.len() != m {
        return Err(Error::shape("graph_infonce", &[chi.len()], &[m]));
    }
    let a = tape.reshape(z1, &[1, m, d])?;
    let b = tape.reshape(z2, &[1, m, d])?;
    let sims = cross_sims(tape, a, b)?;
    let mut terms = Vec::with_capacity(m);
    for (i, set) in chi.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::EmptyNegatives { anchor: i, r_f });
        }
        terms.push(AnchorTerm {
            positive: i * m + i,
            negatives: set.iter().map(|&j| i * m + j).collect(),
        });
    }
    tape.info_nce(sims, &terms, tau)
}

/// Node-level InfoNCE over `Z′, Z″: [M, N, D]`, factorized into spatial
/// and temporal negatives.
///
/// Anchor `(m, i)` has positive `Z″[m, i]` and negatives `Z″[m, j]` for
/// `j ≠ i` outside `excluded[i]`, plus `Z″[m′, i]` for `m′ ∈ χ_m`. Only the
/// `M` spatial `N × N` and `N` temporal `M × M` similarity blocks are formed.
pub fn node_infonce_factorized(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    excluded: &[Vec<usize>],
    chi: &[Vec<usize>],
    tau: f64,
    r_f: f64,
) -> Result<Var> {
    let shape = tape.shape(z1).to_vec();
    if shape.len() != 3 || tape.shape(z2) != shape.as_slice() {
        return Err(Error::shape("node_infonce", &shape, tape.shape(z2)));
    }
    let (m, n) = (shape[0], shape[1]);
    if chi.len() != m || excluded.len() != n {
        return Err(Error::shape(
            "node_infonce",
            &[chi.len(), excluded.len()],
            &[m, n],
        ));
    }
    let spatial = cross_sims(tape, z1, z2)?; // [M, N, N]
    let t1 = tape.permute(z1, &[1, 0, 2])?;
    let t2 = tape.permute(z2, &[1, 0, 2])?;
    let temporal = cross_sims(tape, t1, t2)?; // [N, M, M]
    let flat_s = tape.reshape(spatial, &[m * n * n])?;
    let flat_t = tape.reshape(temporal, &[n * m * m])?;
    let sims = tape.concat(&[flat_s, flat_t], 0)?;
    let offset = m * n * n;
    let mut terms = Vec::with_capacity(m * n);
    for (mi, chi_m) in chi.iter().enumerate() {
        for (i, excl) in excluded.iter().enumerate() {
            let row = (mi * n + i) * n;
            let mut negatives: Vec<usize> = (0..n)
                .filter(|&j| j != i && !excl.contains(&j))
                .map(|j| row + j)
                .collect();
            negatives.extend(chi_m.iter().map(|&mj| offset + (i * m + mi) * m + mj));
            if negatives.is_empty() {
                return Err(Error::EmptyNegatives {
                    anchor: mi * n + i,
                    r_f,
                });
            }
            terms.push(AnchorTerm {
                positive: row + i,
                negatives,
            });
        }
    }
    tape.info_nce(sims, &terms, tau)
}
