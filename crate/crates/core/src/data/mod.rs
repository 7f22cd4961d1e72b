//! Sensor time series: normalization, partitioning, windowing, batching.

mod io;
mod synth;

pub use io::{read_csv, read_series, write_series};
pub use synth::{synth_generate, SynthConfig, SynthOutput};

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

const MINUTES_PER_DAY: usize = 1440;

/// Number of input features per node: normalized target and time of day.
pub const NUM_FEATURES: usize = 2;

/// Raw target series, row-major `steps × nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    series: Vec<f64>,
    steps: usize,
    nodes: usize,
    steps_per_day: usize,
}

impl TimeSeriesDataset {
    pub fn new(series: Vec<f64>, steps: usize, nodes: usize, steps_per_day: usize) -> Result<Self> {
        if nodes == 0 || steps == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        if series.len() != steps * nodes {
            return Err(Error::Data(format!(
                "series has {} values, expected {steps} × {nodes}",
                series.len()
            )));
        }
        if steps_per_day == 0 || !MINUTES_PER_DAY.is_multiple_of(steps_per_day) {
            return Err(Error::Data(format!(
                "{steps_per_day} steps per day does not divide a day into whole minutes"
            )));
        }
        if series.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("series contains non-finite values".into()));
        }
        Ok(TimeSeriesDataset {
            series,
            steps,
            nodes,
            steps_per_day,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_day
    }

    pub fn interval_minutes(&self) -> usize {
        MINUTES_PER_DAY / self.steps_per_day
    }

    pub fn series(&self) -> &[f64] {
        &self.series
    }

    pub fn value(&self, step: usize, node: usize) -> f64 {
        self.series[step * self.nodes + node]
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.series[step * self.nodes..(step + 1) * self.nodes]
    }

    /// Slot within the day of an absolute step.
    pub fn slot(&self, step: usize) -> usize {
        step % self.steps_per_day
    }

    pub fn time_of_day(&self, step: usize) -> f64 {
        self.slot(step) as f64 / self.steps_per_day as f64
    }
}

/// Z-score statistics fit on the training partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    /// Population mean and standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit z-score on no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std == 0.0 {
            return Err(Error::Data("training values have zero variance".into()));
        }
        Ok(ZScore { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Step counts of the train / validation / test partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.total(),
        }
    }

    /// Sliding windows per partition for history `s` and horizon `t`.
    pub fn window_counts(&self, s: usize, t: usize) -> [usize; 3] {
        [self.train, self.val, self.test].map(|p| (p + 1).saturating_sub(s + t))
    }
}

/// `floor(r_train·T)`, `floor(r_val·T)` and the remainder.
pub fn split(total: usize, ratios: [f64; 3], s: usize, t: usize) -> Result<SplitCounts> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Data(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    // the tolerance keeps exact products such as 0.7·10 from flooring to 6
    let part = |r: f64| (r * total as f64 + 1e-9).floor() as usize;
    let train = part(ratios[0]);
    let val = part(ratios[1]);
    let test = total
        .checked_sub(train + val)
        .ok_or_else(|| Error::Data("split exceeds series length".into()))?;
    let counts = SplitCounts { train, val, test };
    for (name, len) in [("train", train), ("val", val), ("test", test)] {
        if len < s + t {
            return Err(Error::Data(format!(
                "{name} partition has {len} steps, fewer than history + horizon = {}",
                s + t
            )));
        }
    }
    Ok(counts)
}

/// One forecasting window; `start` is the absolute index of the first
/// input step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instance {
    pub start: usize,
}

/// All windows fully inside `range`.
pub fn make_instances(range: Range<usize>, s: usize, t: usize) -> Result<Vec<Instance>> {
    let len = range.end.saturating_sub(range.start);
    if len < s + t {
        return Err(Error::Data(format!(
            "partition of {len} steps is shorter than {}",
            s + t
        )));
    }
    Ok((range.start..=range.end - s - t)
        .map(|start| Instance { start })
        .collect())
}

/// Index batches for one epoch. Shuffling is keyed by `(seed, epoch)`; the
/// last batch may be short.
pub fn batch_iter(
    num_instances: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!(
            "batch size {batch_size} leaves no candidate negatives"
        )));
    }
    let mut order: Vec<usize> = (0..num_instances).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch, 0));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// A materialized batch.
#[derive(Clone, Debug)]
pub struct InstanceBatch {
    /// `[M, S, N, 2]`: normalized target and time of day.
    pub inputs: Tensor,
    /// `[M, T, N]` targets in original scale.
    pub targets: Tensor,
    /// `[M, T, N]` normalized future values, used by input smoothing.
    pub future: Tensor,
    /// `[M, S, N]` normalized target channel of the window shifted one step
    /// later, used by temporal shifting.
    pub shifted: Tensor,
    /// Whether the next instance of the partition exists; temporal
    /// shifting is the identity where it does not.
    pub has_next: Vec<bool>,
    /// Slot within the day of each window's first input step.
    pub slots: Vec<usize>,
    /// Absolute index of each window's first input step.
    pub starts: Vec<usize>,
}

impl InstanceBatch {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Dataset with its split, scaler and per-partition windows.
#[derive(Clone, Debug)]
pub struct PreparedData {
    dataset: TimeSeriesDataset,
    counts: SplitCounts,
    scaler: ZScore,
    history: usize,
    horizon: usize,
    train: Vec<Instance>,
    val: Vec<Instance>,
    test: Vec<Instance>,
}

impl PreparedData {
    /// Splits, fits the scaler on the training partition only, and builds
    /// windows that never cross a partition boundary.
    pub fn new(
        dataset: TimeSeriesDataset,
        ratios: [f64; 3],
        history: usize,
        horizon: usize,
    ) -> Result<Self> {
        if history == 0 || horizon == 0 {
            return Err(Error::Data("history and horizon must be positive".into()));
        }
        let counts = split(dataset.steps(), ratios, history, horizon)?;
        let train_range = counts.range(Split::Train);
        let scaler = ZScore::fit(
            &dataset.series()
                [train_range.start * dataset.nodes()..train_range.end * dataset.nodes()],
        )?;
        let train = make_instances(counts.range(Split::Train), history, horizon)?;
        let val = make_instances(counts.range(Split::Val), history, horizon)?;
        let test = make_instances(counts.range(Split::Test), history, horizon)?;
        Ok(PreparedData {
            dataset,
            counts,
            scaler,
            history,
            horizon,
            train,
            val,
            test,
        })
    }

    pub fn dataset(&self) -> &TimeSeriesDataset {
        &self.dataset
    }

    pub fn counts(&self) -> SplitCounts {
        self.counts
    }

    pub fn scaler(&self) -> ZScore {
        self.scaler
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn nodes(&self) -> usize {
        self.dataset.nodes()
    }

    pub fn instances(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn batch(&self, split: Split, indices: &[usize]) -> Result<InstanceBatch> {
        let instances = self.instances(split);
        let (s, t, n) = (self.history, self.horizon, self.nodes());
        let m = indices.len();
        let mut inputs = Vec::with_capacity(m * s * n * NUM_FEATURES);
        let mut targets = Vec::with_capacity(m * t * n);
        let mut future = Vec::with_capacity(m * t * n);
        let mut shifted = Vec::with_capacity(m * s * n);
        let mut has_next = Vec::with_capacity(m);
        let mut slots = Vec::with_capacity(m);
        let mut starts = Vec::with_capacity(m);
        for &idx in indices {
            let inst = instances
                .get(idx)
                .ok_or_else(|| Error::Data(format!("instance {idx} out of range for {split:?}")))?;
            let start = inst.start;
            for step in start..start + s {
                let tod = self.dataset.time_of_day(step);
                for &v in self.dataset.row(step) {
                    inputs.push(self.scaler.apply(v));
                    inputs.push(tod);
                }
            }
            for step in start + s..start + s + t {
                for &v in self.dataset.row(step) {
                    targets.push(v);
                    future.push(self.scaler.apply(v));
                }
            }
            // step start + s is the first target step, inside the partition
            for step in start + 1..start + s + 1 {
                shifted.extend(self.dataset.row(step).iter().map(|&v| self.scaler.apply(v)));
            }
            has_next.push(idx + 1 < instances.len());
            slots.push(self.dataset.slot(start));
            starts.push(start);
        }
        Ok(InstanceBatch {
            inputs: Tensor::new([m, s, n, NUM_FEATURES], inputs)?,
            targets: Tensor::new([m, t, n], targets)?,
            future: Tensor::new([m, t, n], future)?,
            shifted: Tensor::new([m, s, n], shifted)?,
            has_next,
            slots,
            starts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(steps: usize, nodes: usize, spd: usize) -> TimeSeriesDataset {
        let series = (0..steps * nodes).map(|v| v as f64).collect();
        TimeSeriesDataset::new(series, steps, nodes, spd).unwrap()
    }

    #[test]
    fn two_point_zscore() {
        let z = ZScore::fit(&[0.0, 10.0]).unwrap();
        assert_eq!((z.mean, z.std), (5.0, 5.0));
        assert_eq!((z.apply(0.0), z.apply(10.0)), (-1.0, 1.0));
        for x in [-3.5, 0.0, 17.25, 1e3] {
            assert!((z.inverse(z.apply(x)) - x).abs() < 1e-12);
        }
        assert!(ZScore::fit(&[2.0, 2.0]).is_err());
    }

    #[test]
    fn scaler_uses_train_partition_only() {
        let ds = ramp(100, 1, 4);
        let prepared = PreparedData::new(ds.clone(), [0.6, 0.2, 0.2], 3, 3).unwrap();
        let train_mean = (0..60).map(|v| v as f64).sum::<f64>() / 60.0;
        let full_mean = (0..100).map(|v| v as f64).sum::<f64>() / 100.0;
        assert_eq!(prepared.scaler().mean, train_mean);
        assert_ne!(prepared.scaler().mean, full_mean);
    }

    #[test]
    fn table_four_window_counts() {
        let pems04 = split(16_992, [0.6, 0.2, 0.2], 12, 12).unwrap();
        assert_eq!(pems04.window_counts(12, 12), [10_172, 3_375, 3_376]);
        let pems08 = split(17_856, [0.6, 0.2, 0.2], 12, 12).unwrap();
        assert_eq!(pems08.window_counts(12, 12), [10_690, 3_548, 3_549]);
    }

    #[test]
    fn split_rejects_short_partitions_and_bad_ratios() {
        assert!(split(50, [0.6, 0.2, 0.2], 12, 12).is_err());
        assert!(split(1000, [0.6, 0.3, 0.2], 12, 12).is_err());
    }

    #[test]
    fn window_count_per_partition() {
        let inst = make_instances(0..40, 12, 12).unwrap();
        assert_eq!(inst.len(), 17);
        assert!(make_instances(0..23, 12, 12).is_err());
    }

    #[test]
    fn batch_contents() {
        let ds = ramp(96, 2, 8);
        let prepared = PreparedData::new(ds.clone(), [0.5, 0.25, 0.25], 3, 2).unwrap();
        let b = prepared.batch(Split::Val, &[0]).unwrap();
        // val partition starts at step 48, which is midnight for 8 steps/day
        assert_eq!(b.starts, vec![48]);
        assert_eq!(b.slots, vec![0]);
        assert_eq!(b.inputs.data()[1], 0.0);
        assert_eq!(b.inputs.data()[2 * NUM_FEATURES + 1], 1.0 / 8.0);
        let raw: Vec<f64> = (51..53)
            .flat_map(|s| [ds.value(s, 0), ds.value(s, 1)])
            .collect();
        assert_eq!(b.targets.data(), raw.as_slice());
        let sc = prepared.scaler();
        assert_eq!(b.shifted.data()[0], sc.apply(ds.value(49, 0)));
    }

    #[test]
    fn batches_cover_instances_once() {
        let batches = batch_iter(17, 64, Some(3), 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 17);
        let batches = batch_iter(100, 16, Some(3), 0).unwrap();
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(batches.last().unwrap().len(), 4);
    }

    #[test]
    fn shuffles_differ_per_epoch_and_repeat_per_seed() {
        let e0 = batch_iter(50, 8, Some(9), 0).unwrap();
        let e1 = batch_iter(50, 8, Some(9), 1).unwrap();
        assert_ne!(e0, e1);
        assert_eq!(e0, batch_iter(50, 8, Some(9), 0).unwrap());
        assert!(batch_iter(50, 1, Some(9), 0).is_err());
    }

    #[test]
    fn dataset_validates_day_length() {
        assert!(TimeSeriesDataset::new(vec![0.0; 7], 7, 1, 7).is_err());
        let ds = TimeSeriesDataset::new(vec![0.0; 288], 288, 1, 288).unwrap();
        assert_eq!(ds.interval_minutes(), 5);
        assert_eq!(ds.time_of_day(288 + 144), 0.5);
    }
}
