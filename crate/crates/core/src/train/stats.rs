//! Welch two-sample t-test over per-seed scores.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (`n − 1`).
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Summary {
            mean,
            std: var.sqrt(),
            n,
        }
    }

    /// `mean±std` with two decimals, e.g. `18.88±0.04`.
    pub fn display(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub a: Summary,
    pub b: Summary,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    /// Both arms have zero variance, so `t` is 0 or infinite.
    pub degenerate: bool,
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(format!(
            "t-test needs at least two runs per arm, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (sa, sb) = (Summary::of(a), Summary::of(b));
    let (va, vb) = (sa.std.powi(2) / sa.n as f64, sb.std.powi(2) / sb.n as f64);
    let se2 = va + vb;
    let diff = sa.mean - sb.mean;
    if se2 == 0.0 {
        let (t, p_value) = if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        };
        return Ok(WelchTest {
            a: sa,
            b: sb,
            t,
            df: (sa.n + sb.n - 2) as f64,
            p_value,
            degenerate: true,
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (sa.n - 1) as f64 + vb * vb / (sb.n - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(WelchTest {
        a: sa,
        b: sb,
        t,
        df,
        p_value,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_arms() {
        let x = [1.0, 2.5, 3.0];
        let r = welch_t_test(&x, &x).unwrap();
        assert_eq!((r.t, r.p_value, r.degenerate), (0.0, 1.0, false));
    }

    #[test]
    fn constant_arms_are_flagged() {
        let r = welch_t_test(&[1.0; 3], &[2.0; 3]).unwrap();
        assert!(r.degenerate && r.t == f64::NEG_INFINITY && r.p_value == 0.0);
        let r = welch_t_test(&[1.0; 3], &[1.0; 3]).unwrap();
        assert!(r.degenerate && r.t == 0.0 && r.p_value == 1.0);
    }

    #[test]
    fn textbook_example() {
        // a: mean 20, s² = 2.5 ; b: mean 23, s² = 10 ; n = 5 each
        let a = [18.0, 19.0, 20.0, 21.0, 22.0];
        let b = [19.0, 21.0, 23.0, 25.0, 27.0];
        let r = welch_t_test(&a, &b).unwrap();
        let se2: f64 = 2.5 / 5.0 + 10.0 / 5.0;
        assert!((r.t - (-3.0 / se2.sqrt())).abs() < 1e-12);
        let df = se2 * se2 / ((0.5f64).powi(2) / 4.0 + 4.0 / 4.0);
        assert!((r.df - df).abs() < 1e-12);
        // reference value from an independent Welch implementation
        assert!((r.p_value - 0.107_531_194_9).abs() < 1e-8, "{}", r.p_value);
        assert!(welch_t_test(&[1.0], &a).is_err());
    }

    #[test]
    fn table_format() {
        assert_eq!(Summary::of(&[18.84, 18.92]).display(), "18.88±0.06");
    }
}
