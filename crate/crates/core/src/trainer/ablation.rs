use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::TrainConfig;
use super::run::{train, FinalReport};
use crate::data::{DataConfig, Dataset};
use crate::error::{Error, Result};

/// A named set of config overrides, keyed by dotted path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    #[serde(default)]
    pub set: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub variants: Vec<AblationVariant>,
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// The four component variants: supervised only, fix + CutMix, fix + dyn, and the full method.
    pub fn components() -> Self {
        let v = |name: &str, fix: bool, dyn_: bool, cutmix: bool| AblationVariant {
            name: name.into(),
            set: [
                ("use_fix".to_string(), Value::Bool(fix)),
                ("use_dyn".to_string(), Value::Bool(dyn_)),
                ("use_cutmix".to_string(), Value::Bool(cutmix)),
            ]
            .into(),
        };
        Self {
            variants: vec![
                v("sup-only", false, false, false),
                v("fix+cutmix", true, false, true),
                v("fix+dyn", true, true, false),
                v("fix+dyn+cutmix", true, true, true),
            ],
        }
    }

    pub fn betas(values: &[f64]) -> Self {
        Self {
            variants: values
                .iter()
                .map(|b| AblationVariant {
                    name: format!("beta={b}"),
                    set: [("beta".to_string(), Value::from(*b))].into(),
                })
                .collect(),
        }
    }
}

/// One training run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub variant: String,
    pub replicate: u64,
    pub config: TrainConfig,
    pub dir: PathBuf,
}

/// Expands the grid into concrete runs; every variant shares the base data seeds.
pub fn plan_ablation(base: &TrainConfig, grid: &AblationGrid, out_dir: &Path) -> Result<Vec<PlannedRun>> {
    if grid.variants.is_empty() {
        return Err(Error::config("ablation grid has no variants"));
    }
    let mut names = std::collections::BTreeSet::new();
    let mut runs = Vec::new();
    for v in &grid.variants {
        if v.name.is_empty() || v.name.contains(['/', '\\']) || !names.insert(v.name.clone()) {
            return Err(Error::config(format!(
                "variant name {:?} is empty, unsafe or repeated",
                v.name
            )));
        }
        let pairs: Vec<(String, Value)> = v.set.iter().map(|(k, x)| (k.clone(), x.clone())).collect();
        let cfg = base.with_values(&pairs)?;
        cfg.validate()?;
        for &k in &cfg.ablation_seeds {
            runs.push(PlannedRun {
                variant: v.name.clone(),
                replicate: k,
                config: TrainConfig {
                    seeds: cfg.seeds.replicate(k),
                    ..cfg.clone()
                },
                dir: out_dir.join(&v.name).join(format!("seed_{k}")),
            });
        }
    }
    Ok(runs)
}

/// Median over replicates of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub completed: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl AblationTable {
    /// Aggregates run results in plan order; variants keep their grid order.
    pub fn from_results(plan: &[PlannedRun], results: &[Result<FinalReport>]) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut by: BTreeMap<String, (Vec<&FinalReport>, Vec<String>)> = BTreeMap::new();
        for (run, res) in plan.iter().zip(results) {
            if !order.contains(&run.variant) {
                order.push(run.variant.clone());
            }
            let entry = by.entry(run.variant.clone()).or_default();
            match res {
                Ok(r) => entry.0.push(r),
                Err(e) => entry.1.push(format!("seed {}: {e}", run.replicate)),
            }
        }
        let rows = order
            .into_iter()
            .map(|name| {
                let (reports, failures) = by.remove(&name).unwrap_or_default();
                let col = |f: &dyn Fn(&FinalReport) -> Option<f64>| {
                    median(&reports.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
                };
                AblationRow {
                    dice: col(&|r| Some(r.metrics.mean.dice)),
                    jaccard: col(&|r| Some(r.metrics.mean.jaccard)),
                    hd95: col(&|r| r.metrics.mean.hd95),
                    asd: col(&|r| r.metrics.mean.asd),
                    completed: reports.len(),
                    failures,
                    variant: name,
                }
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| !r.failures.is_empty())
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut s = String::from("variant,dice,jaccard,hd95,asd,completed,failed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.variant,
                opt(r.dice),
                opt(r.jaccard),
                opt(r.hd95),
                opt(r.asd),
                r.completed,
                r.failures.len()
            );
        }
        s
    }

    /// Parses the CSV produced by [`AblationTable::to_csv`]; failure messages are not kept.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if !header.starts_with("variant,dice,jaccard,hd95,asd") {
            return Err(Error::config("not an ablation table"));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::config(format!("bad number {s:?}")))
            }
        };
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() < 7 {
                    return Err(Error::config(format!("short ablation row {l:?}")));
                }
                let failed: usize = f[6].parse().map_err(|_| Error::config(format!("bad count in {l:?}")))?;
                Ok(AblationRow {
                    variant: f[0].to_string(),
                    dice: num(f[1])?,
                    jaccard: num(f[2])?,
                    hd95: num(f[3])?,
                    asd: num(f[4])?,
                    completed: f[5].parse().map_err(|_| Error::config(format!("bad count in {l:?}")))?,
                    failures: vec![String::new(); failed],
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join("ablation.csv"), self.to_csv())?;
        fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Generates each distinct data configuration once.
pub fn datasets_for(plan: &[PlannedRun]) -> Result<Vec<(DataConfig, Dataset)>> {
    let mut out: Vec<(DataConfig, Dataset)> = Vec::new();
    for run in plan {
        if !out.iter().any(|(c, _)| *c == run.config.data) {
            let (d, _) = Dataset::generate(&run.config.data)?;
            out.push((run.config.data.clone(), d));
        }
    }
    Ok(out)
}

/// Runs every variant and replicate sequentially. Individual failures are
/// recorded in the table; the table is written either way.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &AblationGrid,
    out_dir: &Path,
    data: Option<&Dataset>,
) -> Result<AblationTable> {
    let plan = plan_ablation(base, grid, out_dir)?;
    let generated = if data.is_none() {
        datasets_for(&plan)?
    } else {
        Vec::new()
    };
    let results: Vec<Result<FinalReport>> = plan
        .iter()
        .map(|run| {
            let d = match data {
                Some(d) => d,
                None => {
                    &generated
                        .iter()
                        .find(|(c, _)| *c == run.config.data)
                        .expect("generated above")
                        .1
                }
            };
            train(&run.config, d, &run.dir).map(|o| o.report)
        })
        .collect();
    let table = AblationTable::from_results(&plan, &results);
    table.write(out_dir)?;
    Ok(table)
}
