//! Output files for a run: `report.json`, `steps.csv`, `curve.csv`, `model.ckpt`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Mode, RunConfig};
use crate::driver::{ComparisonRow, EvalReport, RunResult, StepReport};
use crate::error::Result;
use crate::model::{save_checkpoint, LayerStack};

#[derive(Debug, Serialize)]
pub struct Report<'a> {
    pub mode: Mode,
    pub config: &'a RunConfig,
    pub steps: &'a [StepReport],
    pub eval: &'a EvalReport,
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFiles {
    pub report: PathBuf,
    pub steps: PathBuf,
    pub curve: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn write_outputs(
    outdir: &Path,
    cfg: &RunConfig,
    dense: &LayerStack,
    result: &RunResult,
    eval: &EvalReport,
) -> Result<OutputFiles> {
    fs::create_dir_all(outdir)?;
    let files = OutputFiles {
        report: outdir.join("report.json"),
        steps: outdir.join("steps.csv"),
        curve: outdir.join("curve.csv"),
        checkpoint: outdir.join("model.ckpt"),
    };
    let report = Report {
        mode: result.mode,
        config: cfg,
        steps: &result.steps,
        eval,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&files.report, json)?;
    write_steps_csv(&files.steps, &result.steps)?;
    write_curve_csv(&files.curve, &result.steps)?;

    let masks = Some(result.model.masks.as_slice());
    if result.mode == Mode::LoraBaseline {
        // BA stays outside the mask, so keep the pieces separate.
        let masked = dense
            .layers()
            .iter()
            .zip(&result.model.masks)
            .map(|(l, m)| m.apply(&l.weight))
            .collect::<Result<Vec<_>>>()?;
        save_checkpoint(
            &files.checkpoint,
            &dense.with_weights(masked)?,
            Some(&result.adapters),
            masks,
        )?;
    } else {
        save_checkpoint(&files.checkpoint, &result.model.to_stack()?, None, masks)?;
    }
    Ok(files)
}

pub fn write_steps_csv(path: &Path, steps: &[StepReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = steps.first().map_or(0, |s| s.s.len());
    let mut header = vec!["t".to_string(), "theta".into(), "omega".into()];
    for prefix in ["s", "r", "loss_before", "loss_after"] {
        header.extend((0..n).map(|i| format!("{prefix}{i}")));
    }
    w.write_record(&header)?;
    for st in steps {
        let mut row = vec![st.t.to_string(), fmt(st.theta), fmt(st.omega)];
        row.extend(st.s.iter().copied().map(fmt));
        row.extend(st.r.iter().map(usize::to_string));
        row.extend(st.loss_before.iter().copied().map(fmt));
        row.extend(st.loss_after.iter().copied().map(fmt));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, steps: &[StepReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "t",
        "theta",
        "realized_mean_sparsity",
        "mean_rank",
        "loss_before",
        "loss_after",
    ])?;
    for st in steps {
        w.write_record([
            st.t.to_string(),
            fmt(st.theta),
            fmt(st.realized_mean_s()),
            fmt(st.mean_rank()),
            fmt(st.loss_before.iter().sum()),
            fmt(st.loss_after.iter().sum()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `comparison.csv` and `comparison.json` into `outdir`.
pub fn write_comparison(outdir: &Path, rows: &[ComparisonRow]) -> Result<()> {
    fs::create_dir_all(outdir)?;
    let mut w = csv::Writer::from_path(outdir.join("comparison.csv"))?;
    w.write_record([
        "mode",
        "total_error",
        "end_to_end_mse",
        "mean_sparsity",
        "mean_rank",
        "mergeable",
        "trainable_params",
    ])?;
    for r in rows {
        w.write_record([
            r.mode.as_str().to_string(),
            fmt(r.total_error),
            fmt(r.end_to_end_mse),
            fmt(r.mean_sparsity),
            fmt(r.mean_rank),
            r.mergeable.to_string(),
            r.trainable_params.to_string(),
        ])?;
    }
    w.flush()?;
    let mut json = serde_json::to_string_pretty(rows)?;
    json.push('\n');
    fs::write(outdir.join("comparison.json"), json)?;
    Ok(())
}

/// Shortest string that parses back to the same `f64`.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{evaluate, prepare, run};

    #[test]
    fn writes_all_files() {
        let mut cfg = RunConfig::default();
        cfg.model.dims = vec![6, 8, 4];
        cfg.calib.samples = 16;
        cfg.train.epochs = 2;
        cfg.schedule.steps = 2;
        let (stack, calib) = prepare(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for mode in [Mode::Losa, Mode::LoraBaseline] {
            let cfg = RunConfig { mode, ..cfg.clone() };
            let res = run(&cfg, &stack, &calib).unwrap();
            let eval = evaluate(&stack, &res.model, &calib, cfg.model.activation).unwrap();
            let files = write_outputs(dir.path(), &cfg, &stack, &res, &eval).unwrap();
            let steps = fs::read_to_string(&files.steps).unwrap();
            assert_eq!(steps.lines().count(), 3);
            assert!(steps.starts_with("t,theta,omega,s0,s1,r0,r1,"));
            let v: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(&files.report).unwrap()).unwrap();
            assert_eq!(v["mode"], mode.as_str());
            assert!(v["steps"][0].get("wall_clock_ms").is_none());
            let ck = crate::model::load_checkpoint(&files.checkpoint).unwrap();
            assert_eq!(ck.masks.as_ref().unwrap(), &res.model.masks);
            assert_eq!(ck.adapters.is_some(), mode == Mode::LoraBaseline);
        }
    }
}
