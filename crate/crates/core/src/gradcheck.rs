//! Finite-difference gradient checks for every tape op and both
//! contrastive losses.
//!
//! A case builds a graph from random leaf tensors. Non-scalar outputs are
//! reduced to a scalar with fixed random weights. The error of one instance
//! is `max|g − g_fd| / max(max|g|, max|g_fd|, 1e-12)` over all leaf entries,
//! with central differences of step `h`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contrast::{graph_infonce, node_infonce_factorized};
use crate::error::Result;
use crate::graph::normalize_adjacency;
use crate::rng::{self, Purpose};
use crate::tensor::{AnchorTerm, Mode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 20,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[Var], &Extra) -> Result<Var>>;

/// Per-instance non-differentiable context.
pub struct Extra {
    pub adj: Tensor,
    pub terms: Vec<AnchorTerm>,
    pub chi: Vec<Vec<usize>>,
    pub excluded: Vec<Vec<usize>>,
}

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    // samples leaf values; the default is U(−1, 1) kept away from 0
    positive: bool,
    build: Build,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var], &Extra) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive: false,
        build: Box::new(build),
    }
}

fn cases() -> Vec<Case> {
    let mut v = vec![
        case("add", &[&[3, 4], &[3, 4]], |t, x, _| t.add(x[0], x[1])),
        case("sub", &[&[3, 4], &[3, 4]], |t, x, _| t.sub(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, x, _| t.mul(x[0], x[1])),
        case("scale", &[&[5]], |t, x, _| t.scale(x[0], -2.5)),
        case("add_scalar", &[&[5]], |t, x, _| t.add_scalar(x[0], 0.7)),
        case("add_bias", &[&[2, 3, 4], &[4]], |t, x, _| {
            t.add_bias(x[0], x[1])
        }),
        case("matmul", &[&[3, 4], &[4, 2]], |t, x, _| {
            t.matmul(x[0], x[1])
        }),
        case("batch_matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], |t, x, _| {
            t.batch_matmul_nt(x[0], x[1])
        }),
        case(
            "dilated_causal_conv1d",
            &[&[2, 3, 2, 6], &[2, 3, 2], &[2]],
            |t, x, _| t.dilated_causal_conv1d(x[0], x[1], Some(x[2]), 2),
        ),
        case("gated_activation", &[&[2, 3], &[2, 3]], |t, x, _| {
            t.gated_activation(x[0], x[1])
        }),
        case("tanh", &[&[6]], |t, x, _| t.tanh(x[0])),
        case("sigmoid", &[&[6]], |t, x, _| t.sigmoid(x[0])),
        case("relu", &[&[6]], |t, x, _| t.relu(x[0])),
        case("abs", &[&[6]], |t, x, _| t.abs(x[0])),
        case("exp", &[&[6]], |t, x, _| t.exp(x[0])),
        case("dropout", &[&[4, 5]], |t, x, _| t.dropout(x[0], 0.3)),
        case("batch_norm", &[&[4, 3, 2, 2], &[3], &[3]], |t, x, _| {
            let (mut m, mut v) = (vec![0.0; 3], vec![1.0; 3]);
            t.batch_norm(x[0], x[1], x[2], &mut m, &mut v, 0.1, 1e-5)
        }),
        case("sum_axis", &[&[2, 3, 4]], |t, x, _| t.sum_axis(x[0], 1)),
        case("sum", &[&[2, 3]], |t, x, _| t.sum(x[0])),
        case("mean", &[&[2, 3]], |t, x, _| t.mean(x[0])),
        case("l2_normalize", &[&[3, 4]], |t, x, _| t.l2_normalize(x[0])),
        case("concat", &[&[2, 1, 3], &[2, 2, 3]], |t, x, _| {
            t.concat(&[x[0], x[1]], 1)
        }),
        case("slice", &[&[2, 5, 3]], |t, x, _| t.slice(x[0], 1, 1, 4)),
        case("reshape", &[&[2, 6]], |t, x, _| t.reshape(x[0], &[3, 4])),
        case("permute", &[&[2, 3, 4]], |t, x, _| {
            t.permute(x[0], &[2, 0, 1])
        }),
        case("graph_propagate", &[&[2, 2, 4, 3]], |t, x, e| {
            t.graph_propagate(x[0], &e.adj)
        }),
        case("info_nce", &[&[12]], |t, x, e| {
            t.info_nce(x[0], &e.terms, 0.5)
        }),
        case("graph_infonce", &[&[6, 4], &[6, 4]], |t, x, e| {
            graph_infonce(t, x[0], x[1], &e.chi, 0.1, 0.0)
        }),
        case(
            "node_infonce_factorized",
            &[&[4, 5, 3], &[4, 5, 3]],
            |t, x, e| {
                let chi: Vec<Vec<usize>> = e
                    .chi
                    .iter()
                    .take(4)
                    .enumerate()
                    .map(|(i, s)| {
                        let mut s: Vec<usize> = s.iter().copied().filter(|&j| j < 4).collect();
                        if s.is_empty() {
                            s.push((i + 1) % 4);
                        }
                        s
                    })
                    .collect();
                node_infonce_factorized(t, x[0], x[1], &e.excluded, &chi, 0.1, 0.0)
            },
        ),
    ];
    let mut log = case("log", &[&[6]], |t, x, _| t.log(x[0]));
    log.positive = true;
    v.push(log);
    v
}

/// Names of every case in the suite.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

fn sample(shape: &[usize], positive: bool, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if positive || rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

fn extra(rng: &mut ChaCha8Rng) -> Extra {
    let adj = Tensor::new([4, 4], (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("4x4");
    let terms = (0..3)
        .map(|a| AnchorTerm {
            positive: a * 4,
            negatives: (0..12)
                .filter(|&j| j != a * 4 && rng.gen_bool(0.6))
                .chain([a * 4 + 1])
                .collect(),
        })
        .collect();
    let chi = (0..6)
        .map(|i| {
            let mut s: Vec<usize> = (0..6).filter(|&j| j != i && rng.gen_bool(0.6)).collect();
            if s.is_empty() {
                s.push((i + 1) % 6);
            }
            s
        })
        .collect();
    let excluded = (0..5)
        .map(|i| (0..5).filter(|&j| j != i && rng.gen_bool(0.3)).collect())
        .collect();
    Extra {
        adj: normalize_adjacency(&adj),
        terms,
        chi,
        excluded,
    }
}

fn scalar_output(
    case: &Case,
    leaves: &[Tensor],
    extra: &Extra,
    weights: &mut Option<Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new(Mode::Train, 17);
    let vars = leaves
        .iter()
        .map(|t| tape.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut tape, &vars, extra)?;
    let shape = tape.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 && shape.len() <= 1 {
        return Ok((tape, vars, out));
    }
    let w = weights
        .get_or_insert_with(|| sample(&shape, false, rng))
        .clone();
    let w = tape.constant(w)?;
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Relative error of one random instance of `case`.
fn check_instance(case: &Case, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let leaves: Vec<Tensor> = case
        .shapes
        .iter()
        .map(|s| sample(s, case.positive, rng))
        .collect();
    let extra = extra(rng);
    let mut weights = None;
    let (mut tape, vars, loss) = scalar_output(case, &leaves, &extra, &mut weights, rng)?;
    let grads = tape.backward(loss)?;
    let mut eval = |leaves: &[Tensor]| -> Result<f64> {
        let (tape, _, loss) = scalar_output(case, leaves, &extra, &mut weights, rng)?;
        tape.value(loss).item()
    };
    let (mut max_diff, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaves[li].shape()));
        for k in 0..leaves[li].numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[k] += cfg.step;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[k] -= cfg.step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * cfg.step);
            let a = analytic.data()[k];
            max_diff = max_diff.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
    }
    Ok(max_diff / max_a.max(max_n).max(1e-12))
}

/// Runs every case on `cfg.instances` random instances.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<CaseReport>> {
    cases()
        .iter()
        .enumerate()
        .map(|(ci, case)| {
            let mut worst = 0.0f64;
            for inst in 0..cfg.instances {
                let mut rng = rng::stream(cfg.seed, Purpose::Test, ci as u64, inst as u64);
                worst = worst.max(check_instance(case, cfg, &mut rng)?);
            }
            Ok(CaseReport {
                name: case.name.to_string(),
                instances: cfg.instances,
                max_rel_error: worst,
                passed: worst <= cfg.tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_ops_and_losses() {
        let names = case_names();
        for op in [
            "dilated_causal_conv1d",
            "batch_norm",
            "info_nce",
            "graph_infonce",
            "node_infonce_factorized",
            "log",
        ] {
            assert!(names.contains(&op), "{op}");
        }
    }

    #[test]
    fn quick_suite_passes() {
        let cfg = GradCheckConfig {
            instances: 2,
            ..Default::default()
        };
        for r in run_suite(&cfg).unwrap() {
            assert!(r.passed, "{}: {}", r.name, r.max_rel_error);
        }
    }
}
