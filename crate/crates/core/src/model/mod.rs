//! Forecasting model: a gated dilated-convolution encoder with diffusion
//! graph convolution, a two-layer decoder, a summation readout, and
//! projection heads for the contrastive branch.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ZScore, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// One entry per layer.
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    /// Hidden width `D`, shared by residual, skip and output channels.
    pub hidden: usize,
    /// Diffusion steps `K`.
    pub diffusion_steps: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Four layers, `D = 16`; receptive field 12.
    pub fn desk() -> Self {
        EncoderConfig {
            dilations: vec![1, 2, 4, 4],
            kernel_size: 2,
            hidden: 16,
            diffusion_steps: 2,
            dropout: 0.3,
        }
    }

    /// Eight layers with alternating dilations 1, 2 and `D = 32`.
    pub fn full() -> Self {
        EncoderConfig {
            dilations: vec![1, 2, 1, 2, 1, 2, 1, 2],
            kernel_size: 2,
            hidden: 32,
            diffusion_steps: 2,
            dropout: 0.3,
        }
    }

    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations
            .iter()
            .map(|d| (self.kernel_size - 1) * d)
            .sum::<usize>()
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_hidden: usize,
    /// Input window length `S`.
    pub history: usize,
    /// Forecast horizon `T`.
    pub horizon: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            decoder_hidden: 32,
            history: 12,
            horizon: 12,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            encoder: EncoderConfig::full(),
            decoder_hidden: 256,
            history: 12,
            horizon: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let mut bad = Vec::new();
        if e.dilations.is_empty() || e.dilations.contains(&0) {
            bad.push("encoder.dilations".to_string());
        }
        if e.kernel_size < 1 {
            bad.push("encoder.kernel_size".into());
        }
        if e.hidden < 1 {
            bad.push("encoder.hidden".into());
        }
        if !(0.0..1.0).contains(&e.dropout) {
            bad.push("encoder.dropout".into());
        }
        if self.decoder_hidden < 1 {
            bad.push("decoder_hidden".into());
        }
        if self.history < 1 {
            bad.push("history".into());
        }
        if self.horizon < 1 {
            bad.push("horizon".into());
        }
        if bad.is_empty() && e.receptive_field() < self.history {
            bad.push(format!(
                "encoder.dilations (receptive field {} < history {})",
                e.receptive_field(),
                self.history
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Number of trainable scalars; independent of the node count.
    pub fn num_parameters(&self) -> usize {
        let e = &self.encoder;
        let (d, f, k) = (e.hidden, NUM_FEATURES, e.kernel_size);
        let layers = e.dilations.len();
        let start = d * f + d;
        let temporal = 2 * (d * d * k + d);
        let skip = d * d + d;
        let graph = d * d * (e.diffusion_steps + 1) + d;
        let bn = 2 * d;
        let encoder = start + layers * (temporal + skip) + (layers - 1) * (graph + bn);
        let decoder = d * self.decoder_hidden
            + self.decoder_hidden
            + self.decoder_hidden * self.horizon
            + self.horizon;
        let head = 2 * (d * d + d) + bn;
        encoder + decoder + 2 * head
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Which projection head to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Node,
    Graph,
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    dilation: usize,
    filter: Conv,
    gate: Conv,
    skip: Conv,
    // The last layer's residual output is never read, so it has neither.
    graph: Option<(Conv, BatchNorm)>,
}

#[derive(Clone, Debug)]
struct Head {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

/// Model parameters plus the scaler used to map forecasts back to the
/// original scale.
#[derive(Clone, Debug)]
pub struct StgModel {
    config: ModelConfig,
    scaler: ZScore,
    params: ParamStore,
    start: Conv,
    layers: Vec<Layer>,
    dec1: Linear,
    dec2: Linear,
    node_head: Head,
    graph_head: Head,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("sized")
    }

    fn conv(&mut self, p: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize) -> Conv {
        let fan = cin * k;
        Conv {
            w: p.add(format!("{name}.w"), self.uniform(&[cout, cin, k], fan)),
            b: p.add(format!("{name}.b"), self.uniform(&[cout], fan)),
        }
    }

    fn linear(&mut self, p: &mut ParamStore, name: &str, fin: usize, fout: usize) -> Linear {
        Linear {
            w: p.add(format!("{name}.w"), self.uniform(&[fin, fout], fin)),
            b: p.add(format!("{name}.b"), self.uniform(&[fout], fin)),
        }
    }
}

fn batch_norm_params(p: &mut ParamStore, name: &str, c: usize) -> BatchNorm {
    BatchNorm {
        gamma: p.add(format!("{name}.gamma"), Tensor::full([c], 1.0)),
        beta: p.add(format!("{name}.beta"), Tensor::zeros([c])),
        mean: p.add_buffer(format!("{name}.running_mean"), Tensor::zeros([c])),
        var: p.add_buffer(format!("{name}.running_var"), Tensor::full([c], 1.0)),
    }
}

fn head_params(init: &mut Init, p: &mut ParamStore, name: &str, d: usize) -> Head {
    Head {
        fc1: init.linear(p, &format!("{name}.fc1"), d, d),
        bn: batch_norm_params(p, &format!("{name}.bn"), d),
        fc2: init.linear(p, &format!("{name}.fc2"), d, d),
    }
}

impl StgModel {
    /// Fresh parameters drawn from the `Init` stream of `seed`.
    pub fn new(config: ModelConfig, scaler: ZScore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: rng::stream(seed, Purpose::Init, 0, 0),
        };
        let mut p = ParamStore::new();
        let e = &config.encoder;
        let d = e.hidden;
        let start = init.conv(&mut p, "encoder.start", d, NUM_FEATURES, 1);
        let n_layers = e.dilations.len();
        let layers = e
            .dilations
            .iter()
            .enumerate()
            .map(|(l, &dilation)| {
                let name = format!("encoder.layer{l}");
                let filter = init.conv(&mut p, &format!("{name}.filter"), d, d, e.kernel_size);
                let gate = init.conv(&mut p, &format!("{name}.gate"), d, d, e.kernel_size);
                let skip = init.conv(&mut p, &format!("{name}.skip"), d, d, 1);
                let graph = (l + 1 < n_layers).then(|| {
                    let conv = init.conv(
                        &mut p,
                        &format!("{name}.graph"),
                        d,
                        d * (e.diffusion_steps + 1),
                        1,
                    );
                    (conv, batch_norm_params(&mut p, &format!("{name}.bn"), d))
                });
                Layer {
                    dilation,
                    filter,
                    gate,
                    skip,
                    graph,
                }
            })
            .collect();
        let dec1 = init.linear(&mut p, "decoder.fc1", d, config.decoder_hidden);
        let dec2 = init.linear(&mut p, "decoder.fc2", config.decoder_hidden, config.horizon);
        let node_head = head_params(&mut init, &mut p, "proj_node", d);
        let graph_head = head_params(&mut init, &mut p, "proj_graph", d);
        Ok(StgModel {
            config,
            scaler,
            params: p,
            start,
            layers,
            dec1,
            dec2,
            node_head,
            graph_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scaler(&self) -> ZScore {
        self.scaler
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Trainable parameter ids of the encoder.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.params.trainable_with_prefix("encoder.")
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.params.trainable_with_prefix("decoder.")
    }

    pub fn head_params(&self, level: Level) -> Vec<ParamId> {
        self.params.trainable_with_prefix(match level {
            Level::Node => "proj_node.",
            Level::Graph => "proj_graph.",
        })
    }

    /// Replaces the decoder with freshly initialized weights.
    pub fn reset_decoder(&mut self, seed: u64) {
        let mut init = Init {
            rng: rng::stream(seed, Purpose::Init, 1, 0),
        };
        let (d, hd, t) = (
            self.config.encoder.hidden,
            self.config.decoder_hidden,
            self.config.horizon,
        );
        *self.params.get_mut(self.dec1.w) = init.uniform(&[d, hd], d);
        *self.params.get_mut(self.dec1.b) = init.uniform(&[hd], d);
        *self.params.get_mut(self.dec2.w) = init.uniform(&[hd, t], hd);
        *self.params.get_mut(self.dec2.b) = init.uniform(&[t], hd);
    }

    fn conv(&self, tape: &mut Tape, x: Var, c: &Conv, dilation: usize) -> Result<Var> {
        let w = tape.param(&self.params, c.w)?;
        let b = tape.param(&self.params, c.b)?;
        tape.dilated_causal_conv1d(x, w, Some(b), dilation)
    }

    fn linear(&self, tape: &mut Tape, x: Var, l: &Linear) -> Result<Var> {
        let w = tape.param(&self.params, l.w)?;
        let b = tape.param(&self.params, l.b)?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn batch_norm(&mut self, tape: &mut Tape, x: Var, bn: &BatchNorm) -> Result<Var> {
        let gamma = tape.param(&self.params, bn.gamma)?;
        let beta = tape.param(&self.params, bn.beta)?;
        let mut mean = self.params.get(bn.mean).data().to_vec();
        let mut var = self.params.get(bn.var).data().to_vec();
        let y = tape.batch_norm(x, gamma, beta, &mut mean, &mut var, BN_MOMENTUM, BN_EPS)?;
        self.params
            .get_mut(bn.mean)
            .data_mut()
            .copy_from_slice(&mean);
        self.params.get_mut(bn.var).data_mut().copy_from_slice(&var);
        Ok(y)
    }

    /// `inputs: [M, S, N, 2]` to representations `H: [M, N, D]`.
    ///
    /// `adj` is the row-normalized adjacency used for diffusion. Windows
    /// shorter than the receptive field are left-padded with zeros so the
    /// time axis is consumed exactly. Train-mode tapes apply dropout and
    /// update batch-norm running statistics.
    pub fn encode(&mut self, tape: &mut Tape, inputs: Var, adj: &Tensor) -> Result<Var> {
        let shape = tape.shape(inputs).to_vec();
        if shape.len() != 4 || shape[1] != self.config.history || shape[3] != NUM_FEATURES {
            return Err(Error::shape(
                "encode",
                &shape,
                &[0, self.config.history, 0, NUM_FEATURES],
            ));
        }
        let (m, s, n) = (shape[0], shape[1], shape[2]);
        if adj.shape() != [n, n] {
            return Err(Error::shape("encode", adj.shape(), &[n, n]));
        }
        let enc = self.config.encoder.clone();
        let mut x = tape.permute(inputs, &[0, 3, 2, 1])?;
        let rf = enc.receptive_field();
        if rf > s {
            let pad = tape.constant(Tensor::zeros([m, NUM_FEATURES, n, rf - s]))?;
            x = tape.concat(&[pad, x], 3)?;
        }
        let start = self.start.clone();
        x = self.conv(tape, x, &start, 1)?;
        let mut skip_sum: Option<Var> = None;
        for layer in self.layers.clone() {
            let f = self.conv(tape, x, &layer.filter, layer.dilation)?;
            let g = self.conv(tape, x, &layer.gate, layer.dilation)?;
            let h = tape.gated_activation(f, g)?;
            let len = tape.shape(h)[3];
            let last = tape.slice(h, 3, len - 1, len)?;
            let s = self.conv(tape, last, &layer.skip, 1)?;
            skip_sum = Some(match skip_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            if let Some((gconv, bn)) = &layer.graph {
                let mut terms = vec![h];
                for _ in 0..enc.diffusion_steps {
                    let prev = *terms.last().expect("non-empty");
                    terms.push(tape.graph_propagate(prev, adj)?);
                }
                let cat = tape.concat(&terms, 1)?;
                let mut y = self.conv(tape, cat, gconv, 1)?;
                y = tape.dropout(y, enc.dropout)?;
                let xlen = tape.shape(x)[3];
                let res = tape.slice(x, 3, xlen - len, xlen)?;
                y = tape.add(y, res)?;
                x = self.batch_norm(tape, y, bn)?;
            }
        }
        let h = tape.relu(skip_sum.expect("at least one layer"))?;
        let h = tape.reshape(h, &[m, enc.hidden, n])?;
        tape.permute(h, &[0, 2, 1])
    }

    /// `H: [M, N, D]` to forecasts `[M, T, N]` in the original scale.
    pub fn decode(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        let d = self.config.encoder.hidden;
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::shape("decode", &shape, &[0, 0, d]));
        }
        let (m, n) = (shape[0], shape[1]);
        let flat = tape.reshape(h, &[m * n, d])?;
        let y = self.linear(tape, flat, &self.dec1)?;
        let y = tape.relu(y)?;
        let y = self.linear(tape, y, &self.dec2)?;
        let y = tape.reshape(y, &[m, n, self.config.horizon])?;
        let y = tape.permute(y, &[0, 2, 1])?;
        let y = tape.scale(y, self.scaler.std)?;
        tape.add_scalar(y, self.scaler.mean)
    }

    /// Graph summary `s_m = Σ_n H[m, n, :]`.
    pub fn readout(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        if tape.shape(h).len() != 3 {
            return Err(Error::shape("readout", tape.shape(h), &[0, 0, 0]));
        }
        tape.sum_axis(h, 1)
    }

    /// Projection head: linear, batch norm, relu, linear. Accepts `[B, D]`
    /// (graph level) or `[M, N, D]` (node level, flattened over nodes for
    /// the batch statistics).
    pub fn project(&mut self, tape: &mut Tape, x: Var, level: Level) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d = self.config.encoder.hidden;
        if shape.last() != Some(&d) || !(2..=3).contains(&shape.len()) {
            return Err(Error::shape("project", &shape, &[0, d]));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let head = match level {
            Level::Node => self.node_head.clone(),
            Level::Graph => self.graph_head.clone(),
        };
        let flat = tape.reshape(x, &[rows, d])?;
        let y = self.linear(tape, flat, &head.fc1)?;
        let y = self.batch_norm(tape, y, &head.bn)?;
        let y = tape.relu(y)?;
        let y = self.linear(tape, y, &head.fc2)?;
        tape.reshape(y, &shape)
    }

    /// Eval-mode forecast for a batch of inputs.
    pub fn predict(&mut self, inputs: &Tensor, adj: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(crate::tensor::Mode::Eval, 0);
        let x = tape.constant(inputs.clone())?;
        let h = self.encode(&mut tape, x, adj)?;
        let y = self.decode(&mut tape, h)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_adjacency;
    use crate::rng::stream;
    use crate::tensor::Mode;

    fn scaler() -> ZScore {
        ZScore {
            mean: 50.0,
            std: 10.0,
        }
    }

    fn random_inputs(m: usize, s: usize, n: usize, seed: u64) -> Tensor {
        let mut r = stream(seed, Purpose::Test, 0, 0);
        let data = (0..m * s * n * NUM_FEATURES)
            .map(|_| r.gen_range(-1.0..1.0))
            .collect();
        Tensor::new([m, s, n, NUM_FEATURES], data).unwrap()
    }

    fn random_adj(n: usize, seed: u64) -> Tensor {
        let mut r = stream(seed, Purpose::Test, 1, 0);
        let a = (0..n * n)
            .map(|_| if r.gen::<f64>() < 0.4 { r.gen() } else { 0.0 })
            .collect();
        normalize_adjacency(&Tensor::new([n, n], a).unwrap())
    }

    fn encode_eval(model: &mut StgModel, x: &Tensor, adj: &Tensor) -> Tensor {
        let mut tape = Tape::new(Mode::Eval, 0);
        let v = tape.constant(x.clone()).unwrap();
        let h = model.encode(&mut tape, v, adj).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(EncoderConfig::desk().receptive_field(), 12);
        assert_eq!(EncoderConfig::full().receptive_field(), 13);
        let mut c = ModelConfig::desk();
        c.encoder.dilations = vec![1, 2];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_regression() {
        for cfg in [ModelConfig::desk(), ModelConfig::full()] {
            let m = StgModel::new(cfg.clone(), scaler(), 0).unwrap();
            assert_eq!(m.params().num_trainable(), cfg.num_parameters());
        }
        assert_eq!(ModelConfig::desk().num_parameters(), 9_900);
        assert_eq!(ModelConfig::full().num_parameters(), 79_884);
    }

    #[test]
    fn output_shapes() {
        for (cfg, n) in [(ModelConfig::desk(), 5), (ModelConfig::full(), 3)] {
            let mut model = StgModel::new(cfg, scaler(), 1).unwrap();
            let x = random_inputs(3, 12, n, 2);
            let h = encode_eval(&mut model, &x, &random_adj(n, 3));
            assert_eq!(h.shape(), &[3, n, model.config().encoder.hidden]);
            let y = model.predict(&x, &random_adj(n, 3)).unwrap();
            assert_eq!(y.shape(), &[3, 12, n]);
        }
    }

    #[test]
    fn no_diffusion_means_no_mixing() {
        let mut cfg = ModelConfig::desk();
        cfg.encoder.diffusion_steps = 0;
        let mut model = StgModel::new(cfg, scaler(), 4).unwrap();
        let adj = random_adj(4, 5);
        let x = random_inputs(2, 12, 4, 6);
        let mut y = x.clone();
        // perturb node 3 only
        for v in y.data_mut().chunks_mut(NUM_FEATURES * 4) {
            v[3 * NUM_FEATURES] += 1.0;
        }
        let (hx, hy) = (
            encode_eval(&mut model, &x, &adj),
            encode_eval(&mut model, &y, &adj),
        );
        let d = model.config().encoder.hidden;
        for (k, (a, b)) in hx.data().iter().zip(hy.data()).enumerate() {
            if (k / d) % 4 != 3 {
                assert_eq!(a, b);
            }
        }
        // with diffusion the perturbation spreads
        let mut model = StgModel::new(ModelConfig::desk(), scaler(), 4).unwrap();
        let full = normalize_adjacency(&Tensor::full([4, 4], 1.0));
        let (hx, hy) = (
            encode_eval(&mut model, &x, &full),
            encode_eval(&mut model, &y, &full),
        );
        assert!(hx.data()[..d]
            .iter()
            .zip(&hy.data()[..d])
            .any(|(a, b)| a != b));
    }

    #[test]
    fn zero_decoder_predicts_mean() {
        let mut model = StgModel::new(ModelConfig::desk(), scaler(), 7).unwrap();
        for id in model.decoder_params() {
            let t = model.params_mut().get_mut(id);
            t.data_mut().fill(0.0);
        }
        let y = model
            .predict(&random_inputs(2, 12, 3, 8), &random_adj(3, 9))
            .unwrap();
        assert!(y.data().iter().all(|v| *v == 50.0));
    }

    #[test]
    fn readout_sums_nodes() {
        let model = StgModel::new(ModelConfig::desk(), scaler(), 0).unwrap();
        let mut tape = Tape::new(Mode::Eval, 0);
        let h = tape.constant(Tensor::full([1, 5, 3], 1.0)).unwrap();
        let s = model.readout(&mut tape, h).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 5.0, 5.0]);
        let one = tape
            .constant(Tensor::new([1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap())
            .unwrap();
        let s = model.readout(&mut tape, one).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn readout_is_permutation_invariant() {
        let n = 6;
        let mut model = StgModel::new(ModelConfig::desk(), scaler(), 10).unwrap();
        let x = random_inputs(2, 12, n, 11);
        let adj = random_adj(n, 12);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut px = x.clone();
        for (blk, pblk) in x
            .data()
            .chunks(n * NUM_FEATURES)
            .zip(px.data_mut().chunks_mut(n * NUM_FEATURES))
        {
            for (new, &old) in perm.iter().enumerate() {
                pblk[new * NUM_FEATURES..(new + 1) * NUM_FEATURES]
                    .copy_from_slice(&blk[old * NUM_FEATURES..(old + 1) * NUM_FEATURES]);
            }
        }
        let mut padj = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in 0..n {
                padj.data_mut()[i * n + j] = adj.data()[perm[i] * n + perm[j]];
            }
        }
        let summary = |model: &mut StgModel, x: &Tensor, a: &Tensor| {
            let mut tape = Tape::new(Mode::Eval, 0);
            let v = tape.constant(x.clone()).unwrap();
            let h = model.encode(&mut tape, v, a).unwrap();
            let s = model.readout(&mut tape, h).unwrap();
            tape.value(s).clone()
        };
        let (a, b) = (
            summary(&mut model, &x, &adj),
            summary(&mut model, &px, &padj),
        );
        assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn projection_of_constant_batch_is_second_bias() {
        let mut model = StgModel::new(ModelConfig::desk(), scaler(), 13).unwrap();
        let mut tape = Tape::new(Mode::Train, 0);
        let row: Vec<f64> = (0..16).map(|k| k as f64 * 0.1 - 0.5).collect();
        let x = tape
            .constant(Tensor::new([4, 16], row.repeat(4)).unwrap())
            .unwrap();
        let z = model.project(&mut tape, x, Level::Graph).unwrap();
        let b2 = model
            .params()
            .get(model.params().id("proj_graph.fc2.b").unwrap())
            .clone();
        for r in tape.value(z).data().chunks(16) {
            for (a, b) in r.iter().zip(b2.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_eval_is_affine_by_hand() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                hidden: 2,
                ..EncoderConfig::desk()
            },
            ..ModelConfig::desk()
        };
        let mut model = StgModel::new(cfg, scaler(), 14).unwrap();
        let set = |m: &mut StgModel, name: &str, v: &[f64]| {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).data_mut().copy_from_slice(v);
        };
        set(&mut model, "proj_node.fc1.w", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut model, "proj_node.fc1.b", &[0.0, 0.0]);
        set(&mut model, "proj_node.fc2.w", &[2.0, 0.0, 0.0, 3.0]);
        set(&mut model, "proj_node.fc2.b", &[1.0, -1.0]);
        let mut tape = Tape::new(Mode::Eval, 0);
        let x = tape
            .constant(Tensor::new([1, 1, 2], vec![0.5, -0.5]).unwrap())
            .unwrap();
        let z = model.project(&mut tape, x, Level::Node).unwrap();
        // eval BN with unit stats: x / sqrt(1 + eps); relu drops the negative entry
        let bn = 0.5 / (1.0 + BN_EPS).sqrt();
        let out = tape.value(z).data().to_vec();
        assert!((out[0] - (2.0 * bn + 1.0)).abs() < 1e-12);
        assert!((out[1] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_encode_is_deterministic_and_train_dropout_varies() {
        let mut model = StgModel::new(ModelConfig::desk(), scaler(), 15).unwrap();
        let x = random_inputs(4, 12, 3, 16);
        let adj = random_adj(3, 17);
        assert_eq!(
            encode_eval(&mut model, &x, &adj),
            encode_eval(&mut model, &x, &adj)
        );
        let run = |model: &mut StgModel, seed| {
            let mut tape = Tape::new(Mode::Train, seed);
            let v = tape.constant(x.clone()).unwrap();
            let h = model.encode(&mut tape, v, &adj).unwrap();
            tape.value(h).clone()
        };
        assert_ne!(run(&mut model.clone(), 1), run(&mut model.clone(), 2));
        assert_eq!(run(&mut model.clone(), 1), run(&mut model.clone(), 1));
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let model = StgModel::new(ModelConfig::desk(), scaler(), 18).unwrap();
        let x = random_inputs(2, 12, 3, 19);
        let adj = random_adj(3, 20);
        let mut r = stream(21, Purpose::Test, 0, 0);
        let target = Tensor::new(
            [2, 12, 3],
            (0..72).map(|_| r.gen_range(30.0..70.0)).collect(),
        )
        .unwrap();
        let loss = |model: &mut StgModel| -> (f64, Option<crate::tensor::Gradients>) {
            let mut tape = Tape::new(Mode::Train, 0);
            let v = tape.constant(x.clone()).unwrap();
            let h = model.encode(&mut tape, v, &adj).unwrap();
            let y = model.decode(&mut tape, h).unwrap();
            let t = tape.constant(target.clone()).unwrap();
            let e = tape.sub(y, t).unwrap();
            let e = tape.abs(e).unwrap();
            let l = tape.mean(e).unwrap();
            let val = tape.value(l).item().unwrap();
            (val, tape.backward(l).ok())
        };
        // dropout reseeded identically each call; BN stats drift, so work on clones
        let (_, grads) = loss(&mut model.clone());
        let grads = grads.unwrap();
        let h = 1e-5;
        for id in model.decoder_params() {
            let g = grads.param(id).unwrap().clone();
            for k in (0..g.numel()).step_by(7) {
                let mut plus = model.clone();
                plus.params_mut().get_mut(id).data_mut()[k] += h;
                let mut minus = model.clone();
                minus.params_mut().get_mut(id).data_mut()[k] -= h;
                let fd = (loss(&mut plus).0 - loss(&mut minus).0) / (2.0 * h);
                let a = g.data()[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
                assert!(
                    rel <= 1e-4 || (a - fd).abs() < 1e-9,
                    "{} [{k}]: {a} vs {fd}",
                    model.params().name(id)
                );
            }
        }
    }
}
