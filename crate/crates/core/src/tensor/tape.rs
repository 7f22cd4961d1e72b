use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{axis_split, permute_data, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One InfoNCE anchor: flat indices into a similarity tensor for the
/// positive and for every admissible negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorTerm {
    pub positive: usize,
    pub negatives: Vec<usize>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMulNT(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    Gated(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    GraphPropagate {
        x: Var,
        adj: Vec<f64>,
    },
    InfoNce {
        sims: Var,
        dsims: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// In [`Mode::Eval`] values are computed but no operation is recorded, so
/// `backward` is unavailable. Dropout and batch norm read the mode.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    mode: Mode,
    rng: ChaCha8Rng,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a variable or parameter; intermediate results are not kept.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Gradients for every parameter registered on the tape, in
    /// registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(move |(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

// [B, C, N, L] -> [B, N, L, C]
fn to_channels_last(x: &[f64], bs: usize, c: usize, nn: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..bs {
        for ch in 0..c {
            let src = &x[(b * c + ch) * nn * len..(b * c + ch + 1) * nn * len];
            for (p, &v) in src.iter().enumerate() {
                out[(b * nn * len + p) * c + ch] = v;
            }
        }
    }
    out
}

// [B, N, L, C] -> [B, C, N, L]
fn from_channels_last(x: &[f64], bs: usize, c: usize, nn: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..bs {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * nn * len..(b * c + ch + 1) * nn * len];
            for (p, v) in dst.iter_mut().enumerate() {
                *v = x[(b * nn * len + p) * c + ch];
            }
        }
    }
    out
}

// w[o, c, k] -> wt[k, c, o]
fn conv_weight_t(w: &[f64], cout: usize, cin: usize, ks: usize) -> Vec<f64> {
    let mut wt = vec![0.0; w.len()];
    for o in 0..cout {
        for c in 0..cin {
            for k in 0..ks {
                wt[(k * cin + c) * cout + o] = w[(o * cin + c) * ks + k];
            }
        }
    }
    wt
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            consumed: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad =
            self.mode == Mode::Train && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.mode == Mode::Train,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Free leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Copies a parameter onto the tape and registers it for `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let var = self.leaf(store.get(id).clone(), store.is_trainable(id))?;
        self.params.push((id, var));
        Ok(var)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|x| x * c).collect())?;
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|x| x + c).collect())?;
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// `x[..., c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = *vx.shape().last().unwrap_or(&1);
        if vb.shape() != [c] {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let bias = vb.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % c])
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = Tensor::new([m, n], matmul_nn(va.data(), vb.data(), m, k, n))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched `a · bᵀ`: `[B, m, k] x [B, n, k] -> [B, m, n]`.
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 3
            || vb.ndim() != 3
            || va.shape()[0] != vb.shape()[0]
            || va.shape()[2] != vb.shape()[2]
        {
            return Err(Error::shape("batch_matmul_nt", va.shape(), vb.shape()));
        }
        let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[1]);
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![0.0; bs * m * n];
        for bi in 0..bs {
            for i in 0..m {
                let arow = &ad[(bi * m + i) * k..(bi * m + i + 1) * k];
                for j in 0..n {
                    let brow = &bd[(bi * n + j) * k..(bi * n + j + 1) * k];
                    out[(bi * m + i) * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        let out = Tensor::new([bs, m, n], out)?;
        self.push("batch_matmul_nt", out, Op::BatchMatMulNT(a, b), &[a, b])
    }

    /// Valid dilated causal convolution along the last axis.
    ///
    /// `x: [B, C_in, N, L]`, `w: [C_out, C_in, K]`, `b: [C_out]`. Output
    /// step `t` reads input steps `t + k·dilation` for `k = 0..K`, so the
    /// result has length `L − (K−1)·dilation` and never looks ahead.
    pub fn dilated_causal_conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.ndim() != 4 || vw.ndim() != 3 || vx.shape()[1] != vw.shape()[1] || dilation == 0 {
            return Err(Error::shape(
                "dilated_causal_conv1d",
                vx.shape(),
                vw.shape(),
            ));
        }
        let [bs, cin, nn, len] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let (cout, ks) = (vw.shape()[0], vw.shape()[2]);
        let span = (ks - 1) * dilation;
        if len <= span {
            return Err(Error::shape(
                "dilated_causal_conv1d",
                vx.shape(),
                &[span + 1],
            ));
        }
        let lo = len - span;
        let bias = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [cout] {
                    return Err(Error::shape("dilated_causal_conv1d", vb.shape(), &[cout]));
                }
                vb.data().to_vec()
            }
            None => vec![0.0; cout],
        };
        // channels-last internally so the innermost loops run over channels
        let xt = to_channels_last(vx.data(), bs, cin, nn, len);
        let wt = conv_weight_t(vw.data(), cout, cin, ks);
        let mut ot = vec![0.0; bs * nn * lo * cout];
        for bn in 0..bs * nn {
            for t in 0..lo {
                let orow = &mut ot[(bn * lo + t) * cout..(bn * lo + t + 1) * cout];
                orow.copy_from_slice(&bias);
                for k in 0..ks {
                    let ir = (bn * len + t + k * dilation) * cin;
                    for (c, &xv) in xt[ir..ir + cin].iter().enumerate() {
                        let wr = (k * cin + c) * cout;
                        axpy(orow, &wt[wr..wr + cout], xv);
                    }
                }
            }
        }
        let out = from_channels_last(&ot, bs, cout, nn, lo);
        let out = Tensor::new([bs, cout, nn, lo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "dilated_causal_conv1d",
            out,
            Op::Conv { x, w, b, dilation },
            &inputs,
        )
    }

    /// `tanh(filter) ⊙ sigmoid(gate)`.
    pub fn gated_activation(&mut self, filter: Var, gate: Var) -> Result<Var> {
        let (vf, vg) = (self.value(filter), self.value(gate));
        same_shape("gated_activation", vf, vg)?;
        let data = vf
            .data()
            .iter()
            .zip(vg.data())
            .map(|(f, g)| f.tanh() * sigmoid(*g))
            .collect();
        let out = Tensor::new(vf.shape(), data)?;
        self.push(
            "gated_activation",
            out,
            Op::Gated(filter, gate),
            &[filter, gate],
        )
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|v| f(*v)).collect())?;
        self.push(name, out, op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    /// Natural log; non-positive inputs are a numeric error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// Inverted dropout: scales kept entries by `1/(1−p)` in train mode and
    /// is the identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(vx.shape(), data)?;
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Batch normalization over every axis except axis 1 (the feature axis).
    ///
    /// Train mode normalizes with the biased batch variance and updates the
    /// running statistics with the unbiased one; eval mode uses the running
    /// statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() < 2 {
            return Err(Error::shape("batch_norm", vx.shape(), &[0, 0]));
        }
        let (outer, c, inner) = axis_split(vx.shape(), 1);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [c]
            || vb.shape() != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(Error::shape("batch_norm", vx.shape(), vg.shape()));
        }
        let count = outer * inner;
        let xd = vx.data();
        let (gd, bd) = (vg.data(), vb.data());
        let mut out = vec![0.0; xd.len()];
        if self.mode == Mode::Eval {
            for o in 0..outer {
                for ch in 0..c {
                    let inv = 1.0 / (running_var[ch] + eps).sqrt();
                    for i in 0..inner {
                        let idx = (o * c + ch) * inner + i;
                        out[idx] = gd[ch] * (xd[idx] - running_mean[ch]) * inv + bd[ch];
                    }
                }
            }
            let out = Tensor::new(vx.shape(), out)?;
            return self.push("batch_norm", out, Op::Leaf, &[]);
        }
        if count < 2 {
            return Err(Error::invalid(
                "batch_norm in train mode needs at least two values per feature",
            ));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                for i in 0..inner {
                    mean[ch] += xd[(o * c + ch) * inner + i];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for o in 0..outer {
            for ch in 0..c {
                for i in 0..inner {
                    let d = xd[(o * c + ch) * inner + i] - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                for i in 0..inner {
                    let idx = (o * c + ch) * inner + i;
                    xhat[idx] = (xd[idx] - mean[ch]) * inv_std[ch];
                    out[idx] = gd[ch] * xhat[idx] + bd[ch];
                }
            }
        }
        let unbias = count as f64 / (count as f64 - 1.0);
        for ch in 0..c {
            running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
            running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var[ch] * unbias;
        }
        let out = Tensor::new(vx.shape(), out)?;
        self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() {
            return Err(Error::shape("sum_axis", vx.shape(), &[axis]));
        }
        let (outer, d, inner) = axis_split(vx.shape(), axis);
        let xd = vx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..d {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * d + k) * inner + i];
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        self.push("sum_axis", out, Op::SumAxis { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let m = vx.sum() / vx.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Scales each vector along the last axis to unit L2 norm. A zero vector
    /// is an error rather than a NaN.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("l2_normalize of scalar"))?;
        let mut norms = Vec::with_capacity(vx.numel() / d.max(1));
        let mut out = vec![0.0; vx.numel()];
        for (row, orow) in vx.data().chunks(d).zip(out.chunks_mut(d)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid("l2_normalize of a zero vector"));
            }
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let out = Tensor::new(vx.shape(), out)?;
        self.push("l2_normalize", out, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of no tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let vt = self.value(*v);
                let d = vt.shape()[axis];
                out.extend_from_slice(&vt.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `x[..., start..end, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() || start >= end || end > vx.shape()[axis] {
            return Err(Error::shape("slice", vx.shape(), &[axis, start, end]));
        }
        let (outer, d, inner) = axis_split(vx.shape(), axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&vx.data()[(o * d + start) * inner..(o * d + end) * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = w;
        let out = Tensor::new(shape, out)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut seen = vec![false; vx.ndim()];
        if perm.len() != vx.ndim()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", vx.shape(), perm));
        }
        let (data, shape) = permute_data(vx.data(), vx.shape(), perm);
        let out = Tensor::new(shape, data)?;
        self.push(
            "permute",
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// One propagation step over the node axis: `out[.., i, :] = Σ_j adj[i, j] x[.., j, :]`
    /// for `x: [B, C, N, L]` and a constant `adj: [N, N]`.
    pub fn graph_propagate(&mut self, x: Var, adj: &Tensor) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 || adj.shape() != [vx.shape()[2], vx.shape()[2]] {
            return Err(Error::shape("graph_propagate", vx.shape(), adj.shape()));
        }
        let (n, l) = (vx.shape()[2], vx.shape()[3]);
        let a = adj.data();
        let mut out = vec![0.0; vx.numel()];
        for (blk, oblk) in vx.data().chunks(n * l).zip(out.chunks_mut(n * l)) {
            for i in 0..n {
                let orow = &mut oblk[i * l..(i + 1) * l];
                for j in 0..n {
                    let w = a[i * n + j];
                    if w == 0.0 {
                        continue;
                    }
                    for (o, v) in orow.iter_mut().zip(&blk[j * l..(j + 1) * l]) {
                        *o += w * v;
                    }
                }
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        self.push(
            "graph_propagate",
            out,
            Op::GraphPropagate {
                x,
                adj: adj.data().to_vec(),
            },
            &[x],
        )
    }

    /// Mean InfoNCE over anchors, reading similarities from the flattened
    /// `sims` tensor:
    /// `(1/A) Σ_a [ −s_pos/τ + log Σ_{j ∈ neg(a)} exp(s_j/τ) ]`.
    ///
    /// The positive is not part of the denominator. Log-sum-exp is
    /// stabilized by max subtraction.
    pub fn info_nce(&mut self, sims: Var, terms: &[AnchorTerm], tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(Error::invalid(format!(
                "temperature {tau} must be positive"
            )));
        }
        if terms.is_empty() {
            return Err(Error::invalid("info_nce needs at least one anchor"));
        }
        let vs = self.value(sims);
        let s = vs.data();
        let count = terms.len() as f64;
        let mut dsims = vec![0.0; s.len()];
        let mut total = 0.0;
        let mut weights = Vec::new();
        for (a, term) in terms.iter().enumerate() {
            if term.negatives.is_empty() {
                return Err(Error::invalid(format!("anchor {a} has no negatives")));
            }
            if term.positive >= s.len() || term.negatives.iter().any(|&j| j >= s.len()) {
                return Err(Error::shape("info_nce", vs.shape(), &[term.positive]));
            }
            let max = term
                .negatives
                .iter()
                .map(|&j| s[j] / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            weights.clear();
            weights.extend(term.negatives.iter().map(|&j| (s[j] / tau - max).exp()));
            let z: f64 = weights.iter().sum();
            total += -s[term.positive] / tau + max + z.ln();
            dsims[term.positive] -= 1.0 / (tau * count);
            for (&j, w) in term.negatives.iter().zip(&weights) {
                dsims[j] += w / (z * tau * count);
            }
        }
        let out = Tensor::scalar(total / count);
        self.push("info_nce", out, Op::InfoNce { sims, dsims }, &[sims])
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.mode != Mode::Train {
            return Err(Error::Autodiff("backward on an eval-mode tape".into()));
        }
        if self.consumed {
            return Err(Error::Autodiff(
                "backward called twice without a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Autodiff(
                "loss is detached from every variable".into(),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if node.requires_grad && matches!(node.op, Op::Leaf) {
                    g.map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::AddScalar(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| {
                    let c = d.len();
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let (ad, bd) = (va.data(), vb.data());
                self.acc(grads, *a, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                d[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::BatchMatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[1]);
                let (ad, bd) = (va.data(), vb.data());
                self.acc(grads, *a, |d| {
                    for bi in 0..bs {
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g[(bi * m + i) * n + j];
                                let brow = &bd[(bi * n + j) * k..(bi * n + j + 1) * k];
                                let drow = &mut d[(bi * m + i) * k..(bi * m + i + 1) * k];
                                axpy(drow, brow, gv);
                            }
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for bi in 0..bs {
                        for i in 0..m {
                            let arow = &ad[(bi * m + i) * k..(bi * m + i + 1) * k];
                            for j in 0..n {
                                let gv = g[(bi * m + i) * n + j];
                                let drow = &mut d[(bi * n + j) * k..(bi * n + j + 1) * k];
                                axpy(drow, arow, gv);
                            }
                        }
                    }
                });
            }
            Op::Conv { x, w, b, dilation } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let [bs, cin, nn, len] =
                    [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
                let (cout, ks) = (vw.shape()[0], vw.shape()[2]);
                let lo = len - (ks - 1) * dilation;
                let gt = to_channels_last(g, bs, cout, nn, lo);
                let xt = to_channels_last(vx.data(), bs, cin, nn, len);
                let wt = conv_weight_t(vw.data(), cout, cin, ks);
                self.acc(grads, *x, |d| {
                    let mut dxt = vec![0.0; bs * nn * len * cin];
                    for bn in 0..bs * nn {
                        for t in 0..lo {
                            let grow = &gt[(bn * lo + t) * cout..(bn * lo + t + 1) * cout];
                            for k in 0..ks {
                                let ir = (bn * len + t + k * dilation) * cin;
                                for (c, dv) in dxt[ir..ir + cin].iter_mut().enumerate() {
                                    let wr = (k * cin + c) * cout;
                                    *dv += dot(grow, &wt[wr..wr + cout]);
                                }
                            }
                        }
                    }
                    axpy(d, &from_channels_last(&dxt, bs, cin, nn, len), 1.0);
                });
                self.acc(grads, *w, |d| {
                    let mut dwt = vec![0.0; ks * cin * cout];
                    for bn in 0..bs * nn {
                        for t in 0..lo {
                            let grow = &gt[(bn * lo + t) * cout..(bn * lo + t + 1) * cout];
                            for k in 0..ks {
                                let ir = (bn * len + t + k * dilation) * cin;
                                for (c, &xv) in xt[ir..ir + cin].iter().enumerate() {
                                    let wr = (k * cin + c) * cout;
                                    axpy(&mut dwt[wr..wr + cout], grow, xv);
                                }
                            }
                        }
                    }
                    for o in 0..cout {
                        for c in 0..cin {
                            for k in 0..ks {
                                d[(o * cin + c) * ks + k] += dwt[(k * cin + c) * cout + o];
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in gt.chunks(cout) {
                            axpy(d, row, 1.0);
                        }
                    });
                }
            }
            Op::Gated(f, gt) => {
                let (vf, vg) = (self.value(*f).data(), self.value(*gt).data());
                let (mut df, mut dg) = (Vec::with_capacity(g.len()), Vec::with_capacity(g.len()));
                for i in 0..g.len() {
                    let (t, s) = (vf[i].tanh(), sigmoid(vg[i]));
                    df.push(g[i] * (1.0 - t * t) * s);
                    dg.push(g[i] * t * s * (1.0 - s));
                }
                self.acc(grads, *f, |d| {
                    d.iter_mut().zip(&df).for_each(|(d, v)| *d += v)
                });
                self.acc(grads, *gt, |d| {
                    d.iter_mut().zip(&dg).for_each(|(d, v)| *d += v)
                });
            }
            Op::Tanh(x) => self.acc(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if vx[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sign_or_zero(vx[i]);
                    }
                })
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / vx[i];
                    }
                })
            }
            Op::Exp(x) => self.acc(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i];
                }
            }),
            Op::Dropout { x, mask } => self.acc(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * mask[i];
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.value(*x).shape();
                let (outer, c, inner) = axis_split(shape, 1);
                let count = (outer * inner) as f64;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        for i in 0..inner {
                            let idx = (o * c + ch) * inner + i;
                            sum_g[ch] += g[idx];
                            sum_gx[ch] += g[idx] * xhat[idx];
                        }
                    }
                }
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let k = gd[ch] * inv_std[ch] / count;
                            for i in 0..inner {
                                let idx = (o * c + ch) * inner + i;
                                d[idx] += k * (count * g[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch]);
                            }
                        }
                    }
                });
                self.acc(grads, *gamma, |d| axpy(d, &sum_gx, 1.0));
                self.acc(grads, *beta, |d| axpy(d, &sum_g, 1.0));
            }
            Op::SumAxis { x, axis } => {
                let (outer, dim, inner) = axis_split(self.value(*x).shape(), *axis);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for k in 0..dim {
                            let s = (o * dim + k) * inner;
                            axpy(&mut d[s..s + inner], &g[o * inner..(o + 1) * inner], 1.0);
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => self.acc(grads, *x, |d| {
                let k = g[0] / d.len() as f64;
                d.iter_mut().for_each(|v| *v += k);
            }),
            Op::L2Normalize { x, norms } => self.acc(grads, *x, |d| {
                let dim = d.len() / norms.len();
                for (r, norm) in norms.iter().enumerate() {
                    let y = &out[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    let yg = dot(y, gr);
                    for k in 0..dim {
                        d[r * dim + k] += (gr[k] - y[k] * yg) / norm;
                    }
                }
            }),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let dim = self.value(*v).shape()[*axis];
                    self.acc(grads, *v, |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            axpy(
                                &mut d[o * dim * inner..(o + 1) * dim * inner],
                                &g[src..src + dim * inner],
                                1.0,
                            );
                        }
                    });
                    offset += dim;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = axis_split(self.value(*x).shape(), *axis);
                let w = node.value.shape()[*axis];
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        axpy(
                            &mut d[dst..dst + w * inner],
                            &g[o * w * inner..(o + 1) * w * inner],
                            1.0,
                        );
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                self.acc(grads, *x, |d| axpy(d, &back, 1.0));
            }
            Op::GraphPropagate { x, adj } => {
                let shape = self.value(*x).shape();
                let (n, l) = (shape[2], shape[3]);
                self.acc(grads, *x, |d| {
                    for (gblk, dblk) in g.chunks(n * l).zip(d.chunks_mut(n * l)) {
                        for i in 0..n {
                            let grow = &gblk[i * l..(i + 1) * l];
                            for j in 0..n {
                                let w = adj[i * n + j];
                                if w != 0.0 {
                                    axpy(&mut dblk[j * l..(j + 1) * l], grow, w);
                                }
                            }
                        }
                    }
                });
            }
            Op::InfoNce { sims, dsims } => self.acc(grads, *sims, |d| axpy(d, dsims, g[0])),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(var) {
            return;
        }
        let n = self.nodes[var.0].value.numel();
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(orow, &b[p * n..(p + 1) * n], a[i * k + p]);
        }
    }
    out
}
