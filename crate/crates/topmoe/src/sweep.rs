//! Grid sweeps over environment, expert count and balancing weight.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use topmoe_core::envs::EnvKind;
use topmoe_core::eval::mean_std;

use crate::artifacts::{create_dir, write_json};
use crate::commands::{completed_run, param_counts, run_parallel, train_run};
use crate::config::{short_hash, RunConfig};
use crate::error::{CliError, Result};

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// A base run configuration plus the axes to vary. An empty axis keeps the
/// base value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    #[serde(default)]
    pub envs: Vec<EnvKind>,
    #[serde(default)]
    pub n_experts: Vec<usize>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn new(base: RunConfig) -> Self {
        Self { base, envs: Vec::new(), n_experts: Vec::new(), lambdas: Vec::new(), seeds: default_seeds() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::usage(format!("invalid sweep config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::usage("invalid sweep config: `seeds` must list at least one seed"));
        }
        for cell in self.cells() {
            cell.validate()?;
        }
        Ok(())
    }

    /// One configuration per grid cell, ordered env, then M, then λ.
    pub fn cells(&self) -> Vec<RunConfig> {
        let envs = or_base(&self.envs, self.base.env);
        let ms = or_base(&self.n_experts, self.base.sac.n_experts);
        let lambdas = or_base(&self.lambdas, self.base.sac.lambda);
        let mut out = Vec::new();
        for &env in &envs {
            for &m in &ms {
                for &lambda in &lambdas {
                    let mut c = self.base.clone();
                    c.env = env;
                    c.sac.n_experts = m;
                    c.sac.lambda = lambda;
                    c.seeds = self.seeds.clone();
                    out.push(c);
                }
            }
        }
        out
    }

    /// Hash of the whole grid, independent of the output directory.
    pub fn sweep_id(&self) -> String {
        let mut key = self.clone();
        key.base.out_dir = PathBuf::new();
        short_hash(serde_json::to_string(&key).expect("sweep config serializes").as_bytes(), None)
    }

    pub fn dir(&self) -> PathBuf {
        self.base.out_dir.join(format!("sweep_{}", self.sweep_id()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One `(cell, seed)` row of `runs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub env: EnvKind,
    pub n_experts: usize,
    pub lambda: f64,
    pub seed: u64,
    pub avg_er: Option<f64>,
    pub std_er: Option<f64>,
    pub n_act: usize,
    pub n_tot: usize,
    pub run_id: String,
    pub status: RunStatus,
    pub error: String,
}

/// One grid cell of `aggregate.csv`, over its successful seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub env: EnvKind,
    pub n_experts: usize,
    pub lambda: f64,
    pub n_seeds: usize,
    pub n_failed: usize,
    pub avg_er: Option<f64>,
    pub std_er: Option<f64>,
    pub n_act: usize,
    pub n_tot: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<CellAggregate>,
}

/// Mean and population standard deviation of each cell's successful seeds.
pub fn aggregate(cells: &[RunConfig], rows: &[SweepRow]) -> Vec<CellAggregate> {
    cells
        .iter()
        .map(|c| {
            let mine: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.env == c.env && r.n_experts == c.sac.n_experts && r.lambda.to_bits() == c.sac.lambda.to_bits())
                .collect();
            let ers: Vec<f64> = mine.iter().filter_map(|r| r.avg_er).collect();
            let (avg, std) = mean_std(&ers);
            let counts = param_counts(c);
            CellAggregate {
                env: c.env,
                n_experts: c.sac.n_experts,
                lambda: c.sac.lambda,
                n_seeds: ers.len(),
                n_failed: mine.len() - ers.len(),
                avg_er: (!ers.is_empty()).then_some(avg),
                std_er: (!ers.is_empty()).then_some(std),
                n_act: counts.active,
                n_tot: counts.total,
                config_hash: c.config_hash(),
            }
        })
        .collect()
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Trains every `(cell, seed)` not already complete, records failures
/// without stopping, and writes `runs.csv` and `aggregate.csv`.
pub fn run_sweep(cfg: &SweepConfig, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let cells = cfg.cells();
    let jobs_list: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let rows = run_parallel(jobs_list.len(), jobs, |i| {
        let (c, seed) = jobs_list[i];
        let cell = &cells[c];
        let counts = param_counts(cell);
        let mut row = SweepRow {
            env: cell.env,
            n_experts: cell.sac.n_experts,
            lambda: cell.sac.lambda,
            seed,
            avg_er: None,
            std_er: None,
            n_act: counts.active,
            n_tot: counts.total,
            run_id: cell.run_id(seed),
            status: RunStatus::Failed,
            error: String::new(),
        };
        let result = match completed_run(cell, seed) {
            Some(done) => Ok(done),
            None => train_run(cell, seed, true),
        };
        match result {
            Ok(run) => {
                row.avg_er = Some(run.eval.evaluation.mean);
                row.std_er = Some(run.eval.evaluation.std);
                row.status = RunStatus::Ok;
            }
            Err(e) => {
                eprintln!("warning: run {} (seed {seed}) failed: {e}", row.run_id);
                row.error = e.to_string();
            }
        }
        row
    });
    let aggregates = aggregate(&cells, &rows);
    let dir = cfg.dir();
    create_dir(&dir)?;
    write_json(&dir.join("sweep.json"), cfg)?;
    write_csv(&dir.join("runs.csv"), &rows)?;
    write_csv(&dir.join("aggregate.csv"), &aggregates)?;
    Ok(SweepOutcome { dir, rows, aggregates })
}
