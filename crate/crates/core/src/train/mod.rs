//! Training schemes, evaluation and run artifacts.
//!
//! Joint learning optimizes `L_pred + λ·L_cl` where the first view is the
//! original input and the second is augmented. Pretrain-finetune first fits
//! the encoder and projection head on `L_cl` alone with two augmented views,
//! then trains a fresh decoder on `L_pred`.

mod metrics;
mod stats;

pub use metrics::{metrics, prediction_loss, HorizonMetrics, Metrics, MetricsReport, MAPE_EPS};
pub use stats::{welch_t_test, Summary, WelchTest};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentKey, AugmentSpec};
use crate::contrast::{graph_infonce, node_infonce_factorized, FilterSpec, NegativeSets};
use crate::data::{batch_iter, InstanceBatch, PreparedData, Split};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::model::{save_checkpoint, Level, ModelConfig, StgModel};
use crate::rng::{self, Purpose};
use crate::tensor::{Adam, AdamConfig, Gradients, Mode, ParamGroup, ParamId, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Joint,
    PretrainFinetune,
    BaseOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub level: Level,
    pub lambda: f64,
    pub tau: f64,
    /// Temporal filtering threshold in minutes.
    pub r_f: f64,
    pub spatial_filter: bool,
    pub augment: Vec<AugmentSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Stop when validation MAE has not improved for this many epochs.
    pub patience: Option<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_patience: usize,
    pub finetune_encoder_lr: f64,
    pub finetune_decoder_lr: f64,
    /// Keep the pretrained encoder fixed during fine-tuning.
    pub freeze_encoder: bool,
    /// 1-based forecast steps reported individually.
    pub horizons: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Joint,
            level: Level::Graph,
            lambda: 0.1,
            tau: 0.1,
            r_f: 60.0,
            spatial_filter: true,
            augment: AugmentSpec::default_pipeline(),
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            clip_norm: Some(5.0),
            seed: 0,
            patience: None,
            pretrain_epochs: 100,
            pretrain_patience: 10,
            finetune_encoder_lr: 1e-4,
            finetune_decoder_lr: 1e-3,
            freeze_encoder: false,
            horizons: vec![3, 6, 12],
        }
    }
}

impl TrainConfig {
    /// Every offending key, prefixed with `prefix`.
    pub fn invalid_keys(&self, prefix: &str) -> Vec<String> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, key: &str| {
            if !ok {
                bad.push(format!("{prefix}{key}"));
            }
        };
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda");
        check(self.tau > 0.0 && self.tau.is_finite(), "tau");
        check(self.r_f >= 0.0 && self.r_f.is_finite(), "r_f");
        check(self.augment.iter().all(|a| a.validate().is_ok()), "augment");
        check(self.epochs >= 1, "epochs");
        check(self.batch_size >= 2, "batch_size");
        check(self.lr > 0.0 && self.lr.is_finite(), "lr");
        check(self.clip_norm.is_none_or(|c| c > 0.0), "clip_norm");
        check(self.patience != Some(0), "patience");
        check(self.pretrain_epochs >= 1, "pretrain_epochs");
        check(self.pretrain_patience >= 1, "pretrain_patience");
        check(self.finetune_encoder_lr > 0.0, "finetune_encoder_lr");
        check(self.finetune_decoder_lr > 0.0, "finetune_decoder_lr");
        check(!self.horizons.is_empty(), "horizons");
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.invalid_keys("");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    fn contrast_enabled(&self) -> bool {
        match self.scheme {
            Scheme::Joint => self.lambda > 0.0,
            Scheme::PretrainFinetune => true,
            Scheme::BaseOnly => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Pretrain,
    Finetune,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean training MAE over batches; absent while pretraining.
    pub l_pred: Option<f64>,
    /// Mean contrastive loss over batches; absent when not computed. May be
    /// negative.
    pub l_cl: Option<f64>,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the selected forecasting checkpoint.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub test: MetricsReport,
    pub wall_clock_secs: f64,
}

/// Tracks the best value seen and signals a stop after `patience`
/// consecutive epochs without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: Option<usize>,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: Option<usize>) -> Self {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.patience.is_some_and(|p| self.stale >= p))
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

struct Artifacts<'a> {
    dir: Option<&'a Path>,
    metrics: Option<std::io::BufWriter<std::fs::File>>,
}

impl<'a> Artifacts<'a> {
    fn new(dir: Option<&'a Path>) -> Result<Self> {
        let metrics = match dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Some(std::io::BufWriter::new(std::fs::File::create(
                    d.join("metrics.jsonl"),
                )?))
            }
            None => None,
        };
        Ok(Artifacts { dir, metrics })
    }

    fn record(&mut self, rec: &EpochRecord) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }

    fn checkpoint(&self, model: &StgModel) -> Result<()> {
        match self.dir {
            Some(d) => save_checkpoint(model, &d.join("ckpt_best.stgc")),
            None => Ok(()),
        }
    }

    fn report(&self, report: &RunReport) -> Result<()> {
        if let Some(d) = self.dir {
            std::fs::write(d.join("report.json"), serde_json::to_vec_pretty(report)?)?;
        }
        Ok(())
    }
}

fn filter_spec(cfg: &TrainConfig, data: &PreparedData) -> FilterSpec {
    FilterSpec {
        r_f: cfg.r_f,
        spatial: cfg.spatial_filter,
        steps_per_day: data.dataset().steps_per_day(),
        interval_minutes: data.dataset().interval_minutes(),
    }
}

/// Contrastive loss between the representations of two views.
#[allow(clippy::too_many_arguments)]
fn contrastive_loss(
    model: &mut StgModel,
    tape: &mut Tape,
    h1: Var,
    h2: Var,
    batch: &InstanceBatch,
    graph: &SensorGraph,
    cfg: &TrainConfig,
    filter: &FilterSpec,
) -> Result<Var> {
    let negs = NegativeSets::build(&batch.slots, graph, filter)?;
    match cfg.level {
        Level::Graph => {
            let s1 = model.readout(tape, h1)?;
            let s2 = model.readout(tape, h2)?;
            let z1 = model.project(tape, s1, Level::Graph)?;
            let z2 = model.project(tape, s2, Level::Graph)?;
            graph_infonce(tape, z1, z2, &negs.temporal, cfg.tau, cfg.r_f)
        }
        Level::Node => {
            let z1 = model.project(tape, h1, Level::Node)?;
            let z2 = model.project(tape, h2, Level::Node)?;
            node_infonce_factorized(
                tape,
                z1,
                z2,
                &negs.spatial_excluded,
                &negs.temporal,
                cfg.tau,
                cfg.r_f,
            )
        }
    }
}

fn encode_view(
    model: &mut StgModel,
    tape: &mut Tape,
    inputs: Tensor,
    adj: Option<&Tensor>,
    graph: &SensorGraph,
) -> Result<Var> {
    let x = tape.constant(inputs)?;
    model.encode(tape, x, adj.unwrap_or(graph.normalized()))
}

struct StepOut {
    l_pred: Option<f64>,
    l_cl: Option<f64>,
    grads: Gradients,
}

/// Forward and backward pass of one forecasting batch.
fn forecast_step(
    model: &mut StgModel,
    batch: &InstanceBatch,
    graph: &SensorGraph,
    cfg: &TrainConfig,
    filter: &FilterSpec,
    key: AugmentKey,
    with_contrast: bool,
) -> Result<StepOut> {
    let mut tape = Tape::new(
        Mode::Train,
        rng::stream_key(key.seed, Purpose::Dropout, key.epoch, key.batch),
    );
    let h1 = encode_view(model, &mut tape, batch.inputs.clone(), None, graph)?;
    let pred = model.decode(&mut tape, h1)?;
    let target = tape.constant(batch.targets.clone())?;
    let l_pred = prediction_loss(&mut tape, pred, target)?;
    let mut total = l_pred;
    let mut l_cl = None;
    if with_contrast {
        let view = augment_batch(batch, &cfg.augment, graph, key)?;
        let h2 = encode_view(
            model,
            &mut tape,
            view.inputs,
            view.adjacency.as_ref(),
            graph,
        )?;
        let cl = contrastive_loss(model, &mut tape, h1, h2, batch, graph, cfg, filter)?;
        l_cl = Some(tape.value(cl).item()?);
        let weighted = tape.scale(cl, cfg.lambda)?;
        total = tape.add(total, weighted)?;
    }
    let l_pred = Some(tape.value(l_pred).item()?);
    let grads = tape.backward(total)?;
    Ok(StepOut {
        l_pred,
        l_cl,
        grads,
    })
}

/// Contrastive-only pass with both views augmented.
fn pretrain_step(
    model: &mut StgModel,
    batch: &InstanceBatch,
    graph: &SensorGraph,
    cfg: &TrainConfig,
    filter: &FilterSpec,
    key: AugmentKey,
) -> Result<StepOut> {
    let mut tape = Tape::new(
        Mode::Train,
        rng::stream_key(key.seed, Purpose::Dropout, key.epoch, key.batch),
    );
    let v1 = augment_batch(batch, &cfg.augment, graph, key)?;
    let v2 = augment_batch(batch, &cfg.augment, graph, AugmentKey { view: 1, ..key })?;
    let h1 = encode_view(model, &mut tape, v1.inputs, v1.adjacency.as_ref(), graph)?;
    let h2 = encode_view(model, &mut tape, v2.inputs, v2.adjacency.as_ref(), graph)?;
    let cl = contrastive_loss(model, &mut tape, h1, h2, batch, graph, cfg, filter)?;
    let l_cl = Some(tape.value(cl).item()?);
    let grads = tape.backward(cl)?;
    Ok(StepOut {
        l_pred: None,
        l_cl,
        grads,
    })
}

/// Eval-mode forecasts and targets over a whole split, batched in order.
pub fn predict_split(
    model: &mut StgModel,
    data: &PreparedData,
    graph: &SensorGraph,
    split: Split,
    batch_size: usize,
) -> Result<(Tensor, Tensor)> {
    let count = data.instances(split).len();
    let (t, n) = (data.horizon(), data.nodes());
    let mut pred = Vec::with_capacity(count * t * n);
    let mut target = Vec::with_capacity(count * t * n);
    let indices: Vec<usize> = (0..count).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(split, chunk)?;
        pred.extend_from_slice(model.predict(&batch.inputs, graph.normalized())?.data());
        target.extend_from_slice(batch.targets.data());
    }
    Ok((
        Tensor::new([count, t, n], pred)?,
        Tensor::new([count, t, n], target)?,
    ))
}

/// Metrics of `model` on `split`.
pub fn evaluate(
    model: &mut StgModel,
    data: &PreparedData,
    graph: &SensorGraph,
    split: Split,
    horizons: &[usize],
    batch_size: usize,
) -> Result<MetricsReport> {
    let (pred, target) = predict_split(model, data, graph, split, batch_size)?;
    metrics(&pred, &target, horizons)
}

fn validation_mae(
    model: &mut StgModel,
    data: &PreparedData,
    graph: &SensorGraph,
    batch_size: usize,
) -> Result<f64> {
    let (pred, target) = predict_split(model, data, graph, Split::Val, batch_size)?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / n)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct Loop<'a> {
    data: &'a PreparedData,
    graph: &'a SensorGraph,
    cfg: &'a TrainConfig,
    filter: FilterSpec,
}

impl Loop<'_> {
    /// Runs one epoch over shuffled training batches. Batches of a single
    /// instance are skipped: batch norm and contrast both need two.
    fn epoch(
        &self,
        model: &mut StgModel,
        opt: &mut Adam,
        epoch: usize,
        step: impl Fn(&mut StgModel, &InstanceBatch, AugmentKey) -> Result<StepOut>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let num = self.data.instances(Split::Train).len();
        let batches = batch_iter(num, self.cfg.batch_size, Some(self.cfg.seed), epoch as u64)?;
        let (mut preds, mut cls) = (Vec::new(), Vec::new());
        for (b, indices) in batches.iter().enumerate() {
            if indices.len() < 2 {
                continue;
            }
            let ctx = || format!("epoch {epoch} batch {b}");
            let batch = self
                .data
                .batch(Split::Train, indices)
                .map_err(|e| e.context(ctx()))?;
            let key = AugmentKey {
                seed: self.cfg.seed,
                epoch: epoch as u64,
                batch: b as u64,
                view: 0,
            };
            let out = step(model, &batch, key).map_err(|e| e.context(ctx()))?;
            opt.step(model.params_mut(), &out.grads)
                .map_err(|e| e.context(ctx()))?;
            preds.extend(out.l_pred);
            cls.extend(out.l_cl);
        }
        Ok((preds, cls))
    }

    /// Forecasting epochs with best-validation checkpoint selection.
    fn forecast(
        &self,
        model: &mut StgModel,
        opt: &mut Adam,
        stage: Stage,
        with_contrast: bool,
        art: &mut Artifacts,
        records: &mut Vec<EpochRecord>,
    ) -> Result<(StgModel, EarlyStop)> {
        let mut stop = EarlyStop::new(self.cfg.patience);
        let mut best = model.clone();
        for epoch in 1..=self.cfg.epochs {
            let (preds, cls) = self.epoch(model, opt, epoch, |m, batch, key| {
                forecast_step(
                    m,
                    batch,
                    self.graph,
                    self.cfg,
                    &self.filter,
                    key,
                    with_contrast,
                )
            })?;
            let val_mae = validation_mae(model, self.data, self.graph, self.cfg.batch_size)?;
            let rec = EpochRecord {
                stage,
                epoch,
                l_pred: mean(&preds),
                l_cl: mean(&cls),
                val_mae: Some(val_mae),
            };
            art.record(&rec)?;
            records.push(rec);
            let (improved, halt) = stop.update(epoch, val_mae);
            if improved {
                best = model.clone();
                art.checkpoint(&best)?;
            }
            if halt {
                break;
            }
        }
        Ok((best, stop))
    }
}

fn adam(cfg: &TrainConfig, groups: Vec<ParamGroup>) -> Result<Adam> {
    Adam::new(
        AdamConfig {
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
        groups,
    )
}

fn concat_ids(parts: &[Vec<ParamId>]) -> Vec<ParamId> {
    parts.iter().flatten().copied().collect()
}

/// Trains one run according to `cfg.scheme` and returns its report. With
/// `out_dir`, writes `metrics.jsonl`, `ckpt_best.stgc` and `report.json`.
pub fn train_run(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &PreparedData,
    graph: &SensorGraph,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    cfg.validate()?;
    if graph.n() != data.nodes() {
        return Err(Error::Data(format!(
            "graph has {} nodes, data has {}",
            graph.n(),
            data.nodes()
        )));
    }
    if model_cfg.history != data.history() || model_cfg.horizon != data.horizon() {
        return Err(Error::Config(vec![
            "model.history".into(),
            "model.horizon".into(),
        ]));
    }
    let started = Instant::now();
    let filter = filter_spec(cfg, data);
    if cfg.contrast_enabled() {
        filter.validate()?;
    }
    let mut model = StgModel::new(model_cfg.clone(), data.scaler(), cfg.seed)?;
    let mut art = Artifacts::new(out_dir)?;
    let lp = Loop {
        data,
        graph,
        cfg,
        filter,
    };
    let mut records = Vec::new();
    let (mut best, stop) = match cfg.scheme {
        Scheme::BaseOnly | Scheme::Joint => {
            let contrast = cfg.contrast_enabled();
            let mut params = vec![model.encoder_params(), model.decoder_params()];
            if contrast {
                params.push(model.head_params(cfg.level));
            }
            let mut opt = adam(
                cfg,
                vec![ParamGroup {
                    params: concat_ids(&params),
                    lr: cfg.lr,
                }],
            )?;
            lp.forecast(
                &mut model,
                &mut opt,
                Stage::Train,
                contrast,
                &mut art,
                &mut records,
            )?
        }
        Scheme::PretrainFinetune => {
            pretrain(&lp, &mut model, &mut art, &mut records)?;
            finetune(&lp, &mut model, &mut art, &mut records)?
        }
    };
    let test = evaluate(
        &mut best,
        data,
        graph,
        Split::Test,
        &cfg.horizons,
        cfg.batch_size,
    )?;
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        model: model_cfg.clone(),
        train: cfg.clone(),
        epochs: records,
        best_epoch: stop.best_epoch(),
        best_val_mae: stop.best(),
        test,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    art.report(&report)?;
    Ok(report)
}

/// Contrastive pretraining of encoder and projection head; leaves the
/// lowest-training-loss state in `model`.
fn pretrain(
    lp: &Loop,
    model: &mut StgModel,
    art: &mut Artifacts,
    records: &mut Vec<EpochRecord>,
) -> Result<()> {
    let cfg = lp.cfg;
    let mut opt = adam(
        cfg,
        vec![ParamGroup {
            params: concat_ids(&[model.encoder_params(), model.head_params(cfg.level)]),
            lr: cfg.lr,
        }],
    )?;
    let mut stop = EarlyStop::new(Some(cfg.pretrain_patience));
    let mut best = model.clone();
    for epoch in 1..=cfg.pretrain_epochs {
        let (_, cls) = lp.epoch(model, &mut opt, epoch, |m, batch, key| {
            pretrain_step(m, batch, lp.graph, cfg, &lp.filter, key)
        })?;
        let l_cl = mean(&cls)
            .ok_or_else(|| Error::Data("no training batch of two or more instances".into()))?;
        let rec = EpochRecord {
            stage: Stage::Pretrain,
            epoch,
            l_pred: None,
            l_cl: Some(l_cl),
            val_mae: None,
        };
        art.record(&rec)?;
        records.push(rec);
        let (improved, halt) = stop.update(epoch, l_cl);
        if improved {
            best = model.clone();
        }
        if halt {
            break;
        }
    }
    *model = best;
    Ok(())
}

/// Fresh decoder on the pretrained encoder, trained on `L_pred` only. The
/// projection heads are not optimized.
fn finetune(
    lp: &Loop,
    model: &mut StgModel,
    art: &mut Artifacts,
    records: &mut Vec<EpochRecord>,
) -> Result<(StgModel, EarlyStop)> {
    let cfg = lp.cfg;
    model.reset_decoder(cfg.seed);
    let mut groups = vec![ParamGroup {
        params: model.decoder_params(),
        lr: cfg.finetune_decoder_lr,
    }];
    if !cfg.freeze_encoder {
        groups.push(ParamGroup {
            params: model.encoder_params(),
            lr: cfg.finetune_encoder_lr,
        });
    }
    let mut opt = adam(cfg, groups)?;
    lp.forecast(model, &mut opt, Stage::Finetune, false, art, records)
}

/// Optimizer used for fine-tuning, exposed for inspection.
pub fn finetune_optimizer(model: &StgModel, cfg: &TrainConfig) -> Result<Adam> {
    let mut groups = vec![ParamGroup {
        params: model.decoder_params(),
        lr: cfg.finetune_decoder_lr,
    }];
    if !cfg.freeze_encoder {
        groups.push(ParamGroup {
            params: model.encoder_params(),
            lr: cfg.finetune_encoder_lr,
        });
    }
    adam(cfg, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate as generate, SynthConfig};

    fn small() -> (PreparedData, SensorGraph) {
        let out = generate(&SynthConfig {
            nodes: 4,
            days: 6,
            steps_per_day: 24,
            ..SynthConfig::default()
        })
        .unwrap();
        let data = PreparedData::new(out.dataset, [0.6, 0.2, 0.2], 12, 12).unwrap();
        (data, out.graph)
    }

    fn quick(scheme: Scheme) -> TrainConfig {
        TrainConfig {
            scheme,
            epochs: 2,
            batch_size: 16,
            pretrain_epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn early_stop_after_exact_patience() {
        let mut s = EarlyStop::new(Some(10));
        assert_eq!(s.update(1, 1.0), (true, false));
        for e in 2..=10 {
            assert_eq!(s.update(e, 1.0), (false, false), "epoch {e}");
        }
        assert_eq!(s.update(11, 2.0), (false, true));
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn config_lists_every_bad_key() {
        let cfg = TrainConfig {
            lambda: -1.0,
            tau: 0.0,
            batch_size: 1,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(keys)) => assert_eq!(keys, vec!["lambda", "tau", "batch_size"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lambda_zero_matches_base_only() {
        let (data, graph) = small();
        let m = ModelConfig::desk();
        let base = train_run(&m, &quick(Scheme::BaseOnly), &data, &graph, None).unwrap();
        let joint = train_run(
            &m,
            &TrainConfig {
                lambda: 0.0,
                ..quick(Scheme::Joint)
            },
            &data,
            &graph,
            None,
        )
        .unwrap();
        assert_eq!(base.epochs, joint.epochs);
        assert_eq!(base.test, joint.test);
    }

    #[test]
    fn selected_checkpoint_has_lowest_val_mae() {
        let (data, graph) = small();
        let r = train_run(
            &ModelConfig::desk(),
            &TrainConfig {
                epochs: 4,
                ..quick(Scheme::Joint)
            },
            &data,
            &graph,
            None,
        )
        .unwrap();
        assert!(r
            .epochs
            .iter()
            .all(|e| e.val_mae.unwrap() >= r.best_val_mae));
        assert!(r.epochs.iter().all(|e| e.l_cl.is_some()));
    }

    #[test]
    fn finetune_excludes_projection_heads() {
        let (data, _) = small();
        let model = StgModel::new(ModelConfig::desk(), data.scaler(), 0).unwrap();
        let opt = finetune_optimizer(&model, &quick(Scheme::PretrainFinetune)).unwrap();
        for level in [Level::Node, Level::Graph] {
            assert!(model.head_params(level).iter().all(|id| !opt.tracks(*id)));
        }
        assert!(model.decoder_params().iter().all(|id| opt.tracks(*id)));
        let frozen = TrainConfig {
            freeze_encoder: true,
            ..quick(Scheme::PretrainFinetune)
        };
        let opt = finetune_optimizer(&model, &frozen).unwrap();
        assert!(model.encoder_params().iter().all(|id| !opt.tracks(*id)));
    }

    #[test]
    fn node_level_and_pretrain_run() {
        let (data, graph) = small();
        let node = TrainConfig {
            level: Level::Node,
            ..quick(Scheme::Joint)
        };
        train_run(&ModelConfig::desk(), &node, &data, &graph, None).unwrap();
        let r = train_run(
            &ModelConfig::desk(),
            &quick(Scheme::PretrainFinetune),
            &data,
            &graph,
            None,
        )
        .unwrap();
        let stages: Vec<Stage> = r.epochs.iter().map(|e| e.stage).collect();
        assert_eq!(
            stages,
            vec![
                Stage::Pretrain,
                Stage::Pretrain,
                Stage::Finetune,
                Stage::Finetune
            ]
        );
    }

    #[test]
    fn artifacts_written() {
        let (data, graph) = small();
        let dir = tempfile::tempdir().unwrap();
        train_run(
            &ModelConfig::desk(),
            &quick(Scheme::Joint),
            &data,
            &graph,
            Some(dir.path()),
        )
        .unwrap();
        let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 2);
        assert!(dir.path().join("ckpt_best.stgc").exists());
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["train"]["lambda"], 0.1);
    }
}
