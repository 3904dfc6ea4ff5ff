use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::checkpoint::{BestMetric, CheckpointRecord};
use super::config::TrainConfig;
use super::step::{StepOutcome, TrainState};
use crate::data::{sliding_window_predict, Dataset, Ensemble, Predictor, VolumeSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, MetricsReport};
use crate::network::DualSubnets;
use crate::pseudolabel::SubnetId;

pub const LOSS_HEADER: &str = "iteration,lr,sn1_sup,sn1_fix,sn1_dyn,sn1_total,sn2_sup,sn2_fix,sn2_dyn,sn2_total";
pub const METRIC_HEADER: &str = "iteration,dice,jaccard,hd95,asd";

/// Summary written to `report.json` at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub iteration: usize,
    pub evaluated: String,
    pub metrics: MetricsReport,
    pub best: Option<BestMetric>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: FinalReport,
    /// Steps executed by this call (after the resume point, if any).
    pub steps: Vec<StepOutcome>,
}

/// Predicts every sample with a sliding window and scores it against its mask.
pub fn evaluate_samples(
    predictor: &dyn Predictor,
    samples: &[VolumeSample],
    crop_size: [usize; 3],
    stride: [usize; 3],
    source: SubnetId,
) -> Result<(MetricsReport, Vec<(String, Array3<u8>)>)> {
    let mut cases = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("evaluation sample {} has no mask", s.id)))?;
        let prob = sliding_window_predict(predictor, &s.image.view(), crop_size, stride, source)?;
        cases.push(evaluate_case(&s.id, &prob, &gt.view())?);
        masks.push((s.id.clone(), crate::metrics::foreground_mask(&prob)));
    }
    Ok((MetricsReport::from_cases(cases), masks))
}

/// Evaluates subnet 1, or the probability average of both subnets.
pub fn evaluate_nets(
    nets: &DualSubnets,
    samples: &[VolumeSample],
    config: &TrainConfig,
    ensemble: bool,
) -> Result<(MetricsReport, Vec<(String, Array3<u8>)>)> {
    let crop = config.network.crop_size;
    if ensemble {
        let e = Ensemble(vec![&nets.subnet_1, &nets.subnet_2]);
        evaluate_samples(&e, samples, crop, config.stride, SubnetId::External)
    } else {
        evaluate_samples(&nets.subnet_1, samples, crop, config.stride, SubnetId::Sn1)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

fn loss_row(s: &StepOutcome) -> String {
    let (a, b) = (&s.sn1, &s.sn2);
    format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        s.iteration, s.lr, a.sup, a.fix, a.dyn_, a.total, b.sup, b.fix, b.dyn_, b.total
    )
}

fn metric_row(iteration: usize, m: &MetricsReport) -> String {
    format!(
        "{iteration},{},{},{},{}\n",
        m.mean.dice,
        m.mean.jaccard,
        fmt_opt(m.mean.hd95),
        fmt_opt(m.mean.asd)
    )
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Keeps the header and rows whose leading iteration is at most `upto`.
fn truncate_log(path: &Path, header: &str, upto: usize) -> Result<()> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let it = line.split(',').next().and_then(|v| v.parse::<usize>().ok());
            if it.is_some_and(|i| i <= upto) {
                let _ = writeln!(out, "{line}");
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn checkpoint_path(run_dir: &Path, iteration: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("iter_{iteration:06}.ckpt"))
}

fn check_dataset(config: &TrainConfig, data: &Dataset) -> Result<()> {
    let split = &data.split;
    if split.labeled.is_empty() {
        return Err(Error::config("dataset has no labeled samples"));
    }
    if split.unlabeled.is_empty() && !config.supervised_only() {
        return Err(Error::config("dataset has no unlabeled samples"));
    }
    if data.test.is_empty() {
        return Err(Error::config("dataset has no held-out test samples for evaluation"));
    }
    let crop = config.network.crop_size;
    let sigma = config.sigma as usize;
    for s in split.labeled.iter().chain(&split.unlabeled).chain(&data.test) {
        let shape = s.shape();
        if (0..3).any(|a| shape[a] < crop[a] + 2 * sigma) {
            return Err(Error::config(format!(
                "sample {} of shape {shape:?} cannot hold crop {crop:?} with margin {sigma}",
                s.id
            )));
        }
    }
    Ok(())
}

/// Trains from scratch, writing everything under `run_dir`.
pub fn train(config: &TrainConfig, data: &Dataset, run_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    check_dataset(config, data)?;
    let state = TrainState::new(config)?;
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    fs::write(run_dir.join("losses.csv"), format!("{LOSS_HEADER}\n"))?;
    fs::write(run_dir.join("metrics.csv"), format!("{METRIC_HEADER}\n"))?;
    drive(state, None, data, run_dir)
}

/// Continues a run from a checkpoint; logs beyond the checkpoint are discarded.
pub fn resume(checkpoint: &Path, data: &Dataset, run_dir: &Path) -> Result<RunOutcome> {
    let rec = CheckpointRecord::load(checkpoint)?;
    check_dataset(&rec.state.config, data)?;
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(&rec.state.config)?,
    )?;
    truncate_log(&run_dir.join("losses.csv"), LOSS_HEADER, rec.state.iteration)?;
    truncate_log(&run_dir.join("metrics.csv"), METRIC_HEADER, rec.state.iteration)?;
    drive(rec.state, rec.best, data, run_dir)
}

fn drive(mut state: TrainState, mut best: Option<BestMetric>, data: &Dataset, run_dir: &Path) -> Result<RunOutcome> {
    let config = state.config.clone();
    let max = config.max_iterations;
    let mut steps = Vec::with_capacity(max.saturating_sub(state.iteration));
    let mut final_metrics = None;
    while state.iteration < max {
        let out = state.step(&data.split)?;
        append(&run_dir.join("losses.csv"), &loss_row(&out))?;
        let it = out.iteration;
        steps.push(out);
        let eval_now = it == max || (config.eval_every > 0 && it % config.eval_every == 0);
        if eval_now {
            let (m, _) = evaluate_nets(&state.nets, &data.test, &config, config.ensemble)?;
            append(&run_dir.join("metrics.csv"), &metric_row(it, &m))?;
            if best.is_none_or(|b| m.mean.dice > b.dice) {
                best = Some(BestMetric {
                    iteration: it,
                    dice: m.mean.dice,
                });
            }
            if it == max {
                final_metrics = Some(m);
            }
        }
        if it == max || (config.checkpoint_every > 0 && it % config.checkpoint_every == 0) {
            let rec = CheckpointRecord {
                state: state.clone(),
                best,
            };
            rec.save(&checkpoint_path(run_dir, it))?;
            rec.save(&run_dir.join("checkpoints").join("last.ckpt"))?;
        }
    }
    let metrics = match final_metrics {
        Some(m) => m,
        None => evaluate_nets(&state.nets, &data.test, &config, config.ensemble)?.0,
    };
    let report = FinalReport {
        iteration: state.iteration,
        evaluated: if config.ensemble { "ensemble" } else { "SN1" }.to_string(),
        metrics,
        best,
    };
    fs::write(run_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(run_dir.join("report.csv"), report.metrics.to_csv())?;
    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        report,
        steps,
    })
}
