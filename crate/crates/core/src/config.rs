//! Experiment configuration file: one strict JSON document.
//!
//! ```json
//! {
//!   "dataset": { "synth": { "nodes": 15 }, "split": [0.6, 0.2, 0.2] },
//!   "graph": { "threshold": 0.1 },
//!   "model": { ... },
//!   "train": { "scheme": "joint", "level": "graph", "lambda": 0.5 },
//!   "output_dir": "runs/jl-graph"
//! }
//! ```
//!
//! Every block is optional and falls back to its defaults. Unknown keys and
//! invalid values are collected across the whole document before failing.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentSpec;
use crate::data::{
    read_csv, read_series, synth_generate, PreparedData, SynthConfig, TimeSeriesDataset,
};
use crate::error::{Error, Result};
use crate::graph::{
    build_adjacency, read_edge_list, DistanceInput, SensorGraph, DEFAULT_THRESHOLD,
};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Generate a synthetic network instead of reading files.
    pub synth: Option<SynthConfig>,
    /// Series file: `.stgs` binary or CSV.
    pub series: Option<PathBuf>,
    /// `from,to,cost` edge list for file-based series.
    pub edges: Option<PathBuf>,
    /// Needed for CSV series only.
    pub steps_per_day: Option<usize>,
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            synth: Some(SynthConfig::default()),
            series: None,
            edges: None,
            steps_per_day: None,
            split: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Kernel-weight threshold.
    pub threshold: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

// Every key the schema accepts, with optional blocks filled in.
fn reference() -> Value {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.series = Some(PathBuf::new());
    cfg.dataset.edges = Some(PathBuf::new());
    cfg.dataset.steps_per_day = Some(0);
    cfg.train.patience = Some(0);
    serde_json::to_value(cfg).expect("serializable")
}

fn unknown_keys(user: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(r)) = (user, reference) else {
        return;
    };
    for (k, v) in u {
        let path = format!("{prefix}{k}");
        match r.get(k) {
            None => out.push(path),
            Some(rv) => unknown_keys(v, rv, &format!("{path}."), out),
        }
    }
}

fn strip_unknown(user: &mut Value, reference: &Value) {
    if let (Value::Object(u), Value::Object(r)) = (user, reference) {
        u.retain(|k, _| r.contains_key(k));
        for (k, v) in u.iter_mut() {
            strip_unknown(v, &r[k]);
        }
    }
}

fn block<T: DeserializeOwned + Default>(root: &Value, key: &str, bad: &mut Vec<String>) -> T {
    match root.get(key) {
        None => T::default(),
        Some(v) => serde_json::from_value(v.clone()).unwrap_or_else(|e| {
            bad.push(format!("{key} ({e})"));
            T::default()
        }),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(vec![format!("<document> ({e})")]))?;
        if !root.is_object() {
            return Err(Error::Config(
                vec!["<document> (expected an object)".into()],
            ));
        }
        let mut root = root;
        let mut bad = Vec::new();
        let reference = reference();
        unknown_keys(&root, &reference, "", &mut bad);
        strip_unknown(&mut root, &reference);
        if let Some(Value::Array(items)) = root.get_mut("train").and_then(|t| t.get_mut("augment"))
        {
            let mut i = 0;
            items.retain(|item| {
                let ok = serde_json::from_value::<AugmentSpec>(item.clone())
                    .map_err(|e| bad.push(format!("train.augment[{i}] ({e})")))
                    .is_ok();
                i += 1;
                ok
            });
        }
        let mut typed = Vec::new();
        let cfg = ExperimentConfig {
            dataset: block(&root, "dataset", &mut typed),
            graph: block(&root, "graph", &mut typed),
            model: block(&root, "model", &mut typed),
            train: block(&root, "train", &mut typed),
            output_dir: block::<Option<PathBuf>>(&root, "output_dir", &mut typed)
                .unwrap_or_else(|| PathBuf::from("runs")),
        };
        bad.extend(typed);
        bad.extend(cfg.invalid_keys());
        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{} ({e})", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Semantic checks on already-typed values.
    pub fn invalid_keys(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let d = &self.dataset;
        match (&d.synth, &d.series) {
            (Some(_), Some(_)) | (None, None) => {
                bad.push("dataset (exactly one of synth or series)".to_string())
            }
            (None, Some(_)) if d.edges.is_none() => bad.push("dataset.edges".into()),
            _ => {}
        }
        let sum: f64 = d.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || d.split.iter().any(|r| *r <= 0.0) {
            bad.push("dataset.split".into());
        }
        if !(0.0..=1.0).contains(&self.graph.threshold) {
            bad.push("graph.threshold".into());
        }
        if let Err(Error::Config(keys)) = self.model.validate() {
            bad.extend(keys.into_iter().map(|k| format!("model.{k}")));
        }
        bad.extend(self.train.invalid_keys("train."));
        bad
    }

    /// Makes relative dataset paths absolute against `base`, so a saved copy
    /// of the config works from any directory.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let d = &mut self.dataset;
        for p in [&mut d.series, &mut d.edges].into_iter().flatten() {
            *p = std::path::absolute(base.join(&*p))?;
        }
        Ok(())
    }

    /// Loads or generates the series and builds the graph. Relative paths
    /// resolve against `base`.
    pub fn load_data(&self, base: &Path) -> Result<(PreparedData, SensorGraph)> {
        let d = &self.dataset;
        let (dataset, dist): (TimeSeriesDataset, DistanceInput) = match (&d.synth, &d.series) {
            (Some(s), None) => {
                let out = synth_generate(s)?;
                let n = out.dataset.nodes();
                (out.dataset, DistanceInput::from_edges(n, &out.edges)?)
            }
            (None, Some(series)) => {
                let series = base.join(series);
                let ds = if series.extension().is_some_and(|e| e == "csv") {
                    let spd = d
                        .steps_per_day
                        .ok_or_else(|| Error::Config(vec!["dataset.steps_per_day".into()]))?;
                    read_csv(&series, spd)?
                } else {
                    read_series(&series)?
                };
                let edges = d
                    .edges
                    .as_ref()
                    .ok_or_else(|| Error::Config(vec!["dataset.edges".into()]))?;
                let dist = read_edge_list(&base.join(edges), ds.nodes())?;
                (ds, dist)
            }
            _ => return Err(Error::Config(vec!["dataset".into()])),
        };
        let graph = build_adjacency(&dist, self.graph.threshold)?;
        let data = PreparedData::new(dataset, d.split, self.model.history, self.model.horizon)?;
        Ok((data, graph))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(
            ExperimentConfig::from_json("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn echo_roundtrips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn lists_every_offending_key() {
        let text = r#"{
            "colour": 1,
            "train": {"lambda": -1, "tau": 0, "bogus": true,
                      "augment": [{"method": "input_mask", "ratio": 0.01}, {"method": "warp"}]},
            "model": {"encoder": {"hidden": 16, "depth": 3}},
            "graph": {"threshold": 3.0}
        }"#;
        let Err(Error::Config(keys)) = ExperimentConfig::from_json(text) else {
            panic!("expected config error");
        };
        for k in [
            "colour",
            "train.bogus",
            "model.encoder.depth",
            "graph.threshold",
            "train.lambda",
            "train.tau",
        ] {
            assert!(keys.iter().any(|x| x == k), "{k} missing from {keys:?}");
        }
        assert!(keys.iter().any(|x| x.starts_with("train.augment[1]")));
    }

    #[test]
    fn semantic_errors_collected() {
        let text = r#"{"train": {"lambda": -1, "tau": 0}, "dataset": {"split": [0.5, 0.2, 0.2]}}"#;
        let Err(Error::Config(keys)) = ExperimentConfig::from_json(text) else {
            panic!();
        };
        assert_eq!(keys, vec!["dataset.split", "train.lambda", "train.tau"]);
    }

    #[test]
    fn synth_data_loads() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.synth = Some(SynthConfig {
            nodes: 3,
            days: 6,
            steps_per_day: 24,
            ..Default::default()
        });
        let (data, graph) = cfg.load_data(Path::new(".")).unwrap();
        assert_eq!((data.nodes(), graph.n()), (3, 3));
    }
}
