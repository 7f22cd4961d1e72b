//! Forecast error measures on original-scale values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Entries with `|y| ≤ MAPE_EPS` are left out of MAPE.
pub const MAPE_EPS: f64 = 1e-8;

/// Mean absolute error as a differentiable tape op.
pub fn prediction_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(
            "prediction_loss",
            tape.shape(pred),
            tape.shape(target),
        ));
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based forecast step.
    pub step: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    /// Over every forecast step.
    pub average: Metrics,
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    n: usize,
    pct: f64,
    n_pct: usize,
}

impl Acc {
    fn push(&mut self, p: f64, y: f64) {
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if y.abs() > MAPE_EPS {
            self.pct += (e / y).abs();
            self.n_pct += 1;
        }
    }

    fn finish(&self) -> Result<Metrics> {
        if self.n_pct == 0 {
            return Err(Error::invalid("MAPE undefined: every target is zero"));
        }
        let n = self.n as f64;
        Ok(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: 100.0 * self.pct / self.n_pct as f64,
        })
    }
}

/// Per-step metrics for `[M, T, N]` forecasts at the 1-based `horizons`,
/// plus the average over all `T` steps.
pub fn metrics(pred: &Tensor, target: &Tensor, horizons: &[usize]) -> Result<MetricsReport> {
    if pred.shape() != target.shape() || pred.ndim() != 3 {
        return Err(Error::shape("metrics", pred.shape(), target.shape()));
    }
    let (t, n) = (pred.shape()[1], pred.shape()[2]);
    if let Some(h) = horizons.iter().find(|&&h| h == 0 || h > t) {
        return Err(Error::invalid(format!("horizon {h} outside 1..={t}")));
    }
    let mut per_step: Vec<Acc> = (0..t).map(|_| Acc::default()).collect();
    let mut all = Acc::default();
    for (k, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
        per_step[(k / n) % t].push(p, y);
        all.push(p, y);
    }
    Ok(MetricsReport {
        horizons: horizons
            .iter()
            .map(|&h| {
                Ok(HorizonMetrics {
                    step: h,
                    metrics: per_step[h - 1].finish()?,
                })
            })
            .collect::<Result<_>>()?,
        average: all.finish()?,
    })
}
