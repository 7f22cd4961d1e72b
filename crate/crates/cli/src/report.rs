//! `stgcl report`: aggregate seed runs per arm and compare arms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stgcl_core::train::{welch_t_test, Metrics, Summary};
use stgcl_core::{Error, Result, RunReport};

struct Arm {
    dir: PathBuf,
    runs: Vec<RunReport>,
}

fn read_report(path: &Path) -> Result<RunReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// A run directory, or a directory of run directories.
fn load_arm(dir: &Path) -> Result<Arm> {
    let single = dir.join("report.json");
    let runs = if single.exists() {
        vec![read_report(&single)?]
    } else {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
            .filter(|p| p.exists())
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| read_report(p))
            .collect::<Result<_>>()?
    };
    if runs.is_empty() {
        return Err(Error::Data(format!(
            "no report.json under {}",
            dir.display()
        )));
    }
    Ok(Arm {
        dir: dir.to_path_buf(),
        runs,
    })
}

fn pick(m: &Metrics, which: usize) -> f64 {
    [m.mae, m.rmse, m.mape][which]
}

const NAMES: [&str; 3] = ["MAE", "RMSE", "MAPE(%)"];

fn arm_name(arm: &Arm) -> String {
    arm.dir.display().to_string()
}

/// Tab-separated loss curves: one row per recorded epoch of every seed.
pub fn loss_curves_tsv(runs: &[RunReport]) -> String {
    let mut out = String::from("seed\tstage\tepoch\tl_pred\tl_cl\tval_mae\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in runs {
        for e in &r.epochs {
            let stage = serde_json::to_value(e.stage).expect("serializable");
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.seed,
                stage.as_str().unwrap_or_default(),
                e.epoch,
                opt(e.l_pred),
                opt(e.l_cl),
                opt(e.val_mae)
            );
        }
    }
    out
}

pub fn report(dirs: &[PathBuf], tsv_dir: Option<&Path>) -> Result<()> {
    let arms = dirs
        .iter()
        .map(|d| load_arm(d))
        .collect::<Result<Vec<_>>>()?;
    let width = arms
        .iter()
        .map(|a| arm_name(a).len())
        .max()
        .unwrap_or(0)
        .max(4);

    println!("Average over all forecast steps");
    println!(
        "{:<width$} {:>5} {:>14} {:>14} {:>14}",
        "arm", "runs", NAMES[0], NAMES[1], NAMES[2]
    );
    for arm in &arms {
        let cells: Vec<String> = (0..3)
            .map(|k| {
                let v: Vec<f64> = arm.runs.iter().map(|r| pick(&r.test.average, k)).collect();
                Summary::of(&v).display()
            })
            .collect();
        println!(
            "{:<width$} {:>5} {:>14} {:>14} {:>14}",
            arm_name(arm),
            arm.runs.len(),
            cells[0],
            cells[1],
            cells[2]
        );
    }

    println!();
    println!("Per horizon (mean over runs)");
    for arm in &arms {
        println!("{}", arm_name(arm));
        println!(
            "  {:>6} {:>14} {:>14} {:>14}",
            "step", NAMES[0], NAMES[1], NAMES[2]
        );
        let steps: Vec<usize> = arm.runs[0].test.horizons.iter().map(|h| h.step).collect();
        for (i, step) in steps.iter().enumerate() {
            let cells: Vec<String> = (0..3)
                .map(|k| {
                    let v: Vec<f64> = arm
                        .runs
                        .iter()
                        .filter_map(|r| r.test.horizons.get(i))
                        .map(|h| pick(&h.metrics, k))
                        .collect();
                    Summary::of(&v).display()
                })
                .collect();
            println!(
                "  {:>6} {:>14} {:>14} {:>14}",
                step, cells[0], cells[1], cells[2]
            );
        }
    }

    if arms.len() > 1 {
        println!();
        println!("Welch t-test against {}", arm_name(&arms[0]));
        for arm in &arms[1..] {
            for (k, name) in NAMES.iter().enumerate() {
                let a: Vec<f64> = arms[0]
                    .runs
                    .iter()
                    .map(|r| pick(&r.test.average, k))
                    .collect();
                let b: Vec<f64> = arm.runs.iter().map(|r| pick(&r.test.average, k)).collect();
                match welch_t_test(&a, &b) {
                    Ok(t) => println!(
                        "  {:<width$} {:<8} t = {:>8.3}  df = {:>6.2}  p = {:.4}{}",
                        arm_name(arm),
                        name,
                        t.t,
                        t.df,
                        t.p_value,
                        if t.degenerate {
                            "  (zero variance)"
                        } else {
                            ""
                        }
                    ),
                    Err(e) => println!("  {:<width$} {:<8} {e}", arm_name(arm), name),
                }
            }
        }
    }

    for arm in &arms {
        let dir = tsv_dir.unwrap_or(&arm.dir);
        std::fs::create_dir_all(dir)?;
        let file = match tsv_dir {
            Some(_) => format!(
                "{}_loss_curves.tsv",
                arm.dir
                    .file_name()
                    .map_or("arm".into(), |n| n.to_string_lossy().into_owned())
            ),
            None => "loss_curves.tsv".to_string(),
        };
        std::fs::write(dir.join(file), loss_curves_tsv(&arm.runs))?;
    }
    Ok(())
}
