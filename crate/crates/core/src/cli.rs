//! `duoseg` command line: gen-data, train, eval, ablate, plot.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, load_eval_masks, write_dataset, DataConfig, Dataset, VolumeSample};
use crate::error::{Error, Result};
use crate::plot::{plot_ablation, plot_run, save_overlay};
use crate::trainer::{
    evaluate_nets, plan_ablation, resume, run_ablation, train, AblationGrid, AblationTable, CheckpointRecord,
    FinalReport, TrainConfig,
};

pub const DATA_DIR_ENV: &str = "DUOSEG_DATA_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "duoseg", version, about = "Co-training semi-supervised 3D segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset used when no config file is given.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Dotted `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate the synthetic dataset described by the config's `data` section.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both subnets and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; defaults to $DUOSEG_DATA_DIR, else generated from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint; config flags are then ignored.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with sliding-window inference.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Average both subnets instead of using subnet 1.
        #[arg(long)]
        ensemble: bool,
        /// `test` (held-out set) or `unlabeled` (withheld training masks).
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run a grid of config variants over the configured seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of concurrent training processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render figures for a run directory, an ablation table, or an eval directory.
    Plot {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(p), _) => {
                let text = fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                TrainConfig::from_json(&text)?
            }
            (None, Some(name)) => TrainConfig::preset(name)?,
            (None, None) => TrainConfig::default(),
        };
        let cfg = base.with_overrides(&self.sets)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn data_dir(explicit: &Option<PathBuf>) -> Option<PathBuf> {
    explicit.clone().or_else(|| {
        std::env::var_os(DATA_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
}

fn dataset_for(config: &DataConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => {
            if !d.join("manifest.json").exists() {
                return Err(Error::config(format!("no dataset manifest in {}", d.display())));
            }
            load_dataset(d)
        }
        None => Ok(Dataset::generate(config)?.0),
    }
}

/// Sidecar of an `eval` output directory, enough to re-associate predictions with images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub split: String,
    pub evaluated: String,
    pub data_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub cases: Vec<String>,
    pub shape: [usize; 3],
}

fn cmd_gen_data(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let config = cfg.resolve()?;
    let (data, withheld) = Dataset::generate(&config.data)?;
    write_dataset(out, &data, &withheld)?;
    println!(
        "wrote {} labeled, {} unlabeled, {} test volumes to {}",
        data.split.labeled.len(),
        data.split.unlabeled.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &ConfigArgs, out: &Path, data: &Option<PathBuf>, ckpt: &Option<PathBuf>) -> Result<()> {
    let dir = data_dir(data);
    let outcome = match ckpt {
        Some(path) => {
            if !path.exists() {
                return Err(Error::config(format!("checkpoint {} not found", path.display())));
            }
            let rec = CheckpointRecord::load(path)?;
            let dataset = dataset_for(&rec.state.config.data, dir.as_deref())?;
            resume(path, &dataset, out)?
        }
        None => {
            let config = cfg.resolve()?;
            let dataset = dataset_for(&config.data, dir.as_deref())?;
            train(&config, &dataset, out)?
        }
    };
    let m = &outcome.report.metrics.mean;
    println!(
        "iteration {}: dice {:.4} jaccard {:.4} -> {}",
        outcome.report.iteration,
        m.dice,
        m.jaccard,
        out.display()
    );
    Ok(())
}

fn write_u8(path: &Path, a: &ndarray::Array3<u8>) -> Result<()> {
    fs::write(path, a.iter().copied().collect::<Vec<u8>>())?;
    Ok(())
}

fn read_u8(path: &Path, shape: [usize; 3]) -> Result<ndarray::Array3<u8>> {
    let bytes = fs::read(path).map_err(|_| Error::config(format!("missing input {}", path.display())))?;
    ndarray::Array3::from_shape_vec(shape, bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn eval_samples(dataset: &Dataset, dir: Option<&Path>, config: &DataConfig, split: &str) -> Result<Vec<VolumeSample>> {
    match split {
        "test" => Ok(dataset.test.clone()),
        "unlabeled" => {
            let withheld = match dir {
                Some(d) => load_eval_masks(d)?,
                None => Dataset::generate(config)?.1,
            };
            dataset
                .split
                .unlabeled
                .iter()
                .map(|s| {
                    let m = withheld
                        .0
                        .iter()
                        .find(|(id, _)| *id == s.id)
                        .ok_or_else(|| Error::config(format!("no withheld mask for {}", s.id)))?;
                    VolumeSample::new(s.id.clone(), s.image.clone(), Some(m.1.clone()))
                })
                .collect()
        }
        other => Err(Error::config(format!("unknown split {other:?}; use test or unlabeled"))),
    }
}

fn cmd_eval(ckpt: &Path, data: &Option<PathBuf>, out: &Path, ensemble: bool, split: &str) -> Result<()> {
    if !ckpt.exists() {
        return Err(Error::config(format!("checkpoint {} not found", ckpt.display())));
    }
    let rec = CheckpointRecord::load(ckpt)?;
    let config = &rec.state.config;
    let dir = data_dir(data);
    let dataset = dataset_for(&config.data, dir.as_deref())?;
    let samples = eval_samples(&dataset, dir.as_deref(), &config.data, split)?;
    if samples.is_empty() {
        return Err(Error::config(format!("split {split:?} is empty")));
    }
    let (report, preds) = evaluate_nets(&rec.state.nets, &samples, config, ensemble)?;
    fs::create_dir_all(out.join("predictions"))?;
    report.write(&out.join("metrics.json"), &out.join("metrics.csv"))?;
    for (id, mask) in &preds {
        write_u8(&out.join("predictions").join(format!("{id}.u8")), mask)?;
    }
    let record = EvalRecord {
        split: split.to_string(),
        evaluated: if ensemble { "ensemble" } else { "SN1" }.into(),
        data_dir: dir,
        data: config.data.clone(),
        cases: preds.iter().map(|(id, _)| id.clone()).collect(),
        shape: samples[0].shape(),
    };
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&record)?)?;
    println!(
        "{} cases: dice {:.4} jaccard {:.4} -> {}",
        report.cases.len(),
        report.mean.dice,
        report.mean.jaccard,
        out.display()
    );
    Ok(())
}

fn spawn_run(exe: &Path, config_path: &Path, dir: &Path, data: Option<&Path>) -> Result<Child> {
    let mut cmd = Command::new(exe);
    cmd.arg("train").arg("--config").arg(config_path).arg("--out").arg(dir);
    if let Some(d) = data {
        cmd.arg("--data").arg(d);
    }
    Ok(cmd.spawn()?)
}

fn cmd_ablate(cfg: &ConfigArgs, grid: &Path, out: &Path, data: &Option<PathBuf>, jobs: usize) -> Result<()> {
    let base = cfg.resolve()?;
    if !grid.exists() {
        return Err(Error::config(format!("grid file {} not found", grid.display())));
    }
    let grid = AblationGrid::load(grid)?;
    let dir = data_dir(data);
    let table = if jobs <= 1 {
        let dataset = dir.as_deref().map(load_dataset).transpose()?;
        run_ablation(&base, &grid, out, dataset.as_ref())?
    } else {
        let plan = plan_ablation(&base, &grid, out)?;
        let exe = std::env::current_exe()?;
        let mut results: Vec<Option<Result<FinalReport>>> = plan.iter().map(|_| None).collect();
        let mut running: Vec<(usize, Child)> = Vec::new();
        let mut next = 0;
        while next < plan.len() || !running.is_empty() {
            while next < plan.len() && running.len() < jobs {
                let run = &plan[next];
                fs::create_dir_all(&run.dir)?;
                let cfg_path = run.dir.join("planned_config.json");
                fs::write(&cfg_path, serde_json::to_string_pretty(&run.config)?)?;
                running.push((next, spawn_run(&exe, &cfg_path, &run.dir, dir.as_deref())?));
                next += 1;
            }
            let (i, mut child) = running.remove(0);
            let status = child.wait()?;
            let report_path = plan[i].dir.join("report.json");
            results[i] = Some(if status.success() {
                fs::read_to_string(&report_path)
                    .map_err(Error::from)
                    .and_then(|t| serde_json::from_str(&t).map_err(Error::from))
            } else {
                Err(Error::invalid(format!("run exited with {status}")))
            });
        }
        let results: Vec<Result<FinalReport>> = results.into_iter().map(|r| r.expect("every run waited")).collect();
        let table = AblationTable::from_results(&plan, &results);
        table.write(out)?;
        table
    };
    plot_ablation(&out.join("ablation.csv"), out)?;
    print!("{}", table.to_csv());
    if table.failed() {
        return Err(Error::invalid("some ablation runs failed; see ablation.json"));
    }
    Ok(())
}

fn cmd_plot(input: &Path, out: &Option<PathBuf>) -> Result<()> {
    if !input.exists() {
        return Err(Error::config(format!("missing input {}", input.display())));
    }
    let written: Vec<PathBuf> = if input.is_file() {
        let dir = out
            .clone()
            .unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).to_path_buf());
        vec![plot_ablation(input, &dir)?]
    } else if input.join("ablation.csv").exists() {
        vec![plot_ablation(
            &input.join("ablation.csv"),
            out.as_deref().unwrap_or(input),
        )?]
    } else if input.join("eval.json").exists() {
        plot_eval(input, out.as_deref().unwrap_or(&input.join("overlays")))?
    } else if input.join("losses.csv").exists() {
        plot_run(input, out.as_deref().unwrap_or(input))?
    } else {
        return Err(Error::config(format!(
            "{} is not a run, eval or ablation directory",
            input.display()
        )));
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn plot_eval(eval_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(eval_dir.join("eval.json"))?;
    let rec: EvalRecord = serde_json::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
    let dataset = dataset_for(&rec.data, rec.data_dir.as_deref())?;
    let samples = eval_samples(&dataset, rec.data_dir.as_deref(), &rec.data, &rec.split)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for id in &rec.cases {
        let s = samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::config(format!("case {id} not found in the dataset")))?;
        let pred = read_u8(&eval_dir.join("predictions").join(format!("{id}.u8")), rec.shape)?;
        let p = out.join(format!("{id}.png"));
        save_overlay(&s.image, s.mask.as_ref().expect("eval samples carry masks"), &pred, &p)?;
        written.push(p);
    }
    Ok(written)
}

/// Exit code for an error: 3 for configuration or missing/malformed inputs, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Format { .. } | Error::Json(_) => EXIT_CONFIG,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Cmd::GenData { cfg, out } => cmd_gen_data(cfg, out),
        Cmd::Train { cfg, out, data, resume } => cmd_train(cfg, out, data, resume),
        Cmd::Eval {
            checkpoint,
            data,
            out,
            ensemble,
            split,
        } => cmd_eval(checkpoint, data, out, *ensemble, split),
        Cmd::Ablate {
            cfg,
            grid,
            out,
            data,
            jobs,
        } => cmd_ablate(cfg, grid, out, data, *jobs),
        Cmd::Plot { input, out } => cmd_plot(input, out),
    }
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("duoseg: {e}");
            exit_code(&e)
        }
    }
}
