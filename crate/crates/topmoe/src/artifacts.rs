//! On-disk formats: checkpoint envelopes, replay states, metrics streams,
//! coefficient CSVs and the run directory layout.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use topmoe_core::distill::{DistilledExpert, ExpertFidelity};
use topmoe_core::envs::EnvKind;
use topmoe_core::interpret::Heatmap;
use topmoe_core::sac::EpisodeRecord;
use topmoe_core::{PolicyParams, Tensor};

use crate::error::{CliError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const REPLAY_MAGIC: &[u8; 4] = b"TMRS";
const REPLAY_VERSION: u32 = 1;

/// Paths inside one run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(out_dir: &Path, run_id: &str) -> Self {
        Self { root: out_dir.join(run_id) }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step_{step:08}.json"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.ndjson")
    }

    pub fn replay_states(&self) -> PathBuf {
        self.root.join("replay_states.bin")
    }

    /// Written last by training; its presence marks a complete run.
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }

    pub fn distill(&self) -> PathBuf {
        self.root.join("distill")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    /// The run directory holding `checkpoint`, assuming the standard layout.
    pub fn of_checkpoint(checkpoint: &Path) -> Option<Self> {
        let dir = checkpoint.parent()?;
        if dir.file_name()? != "checkpoints" {
            return None;
        }
        Some(Self { root: dir.parent()?.to_path_buf() })
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// `{"shape": [...], "values": [...]}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl From<&Tensor> for NamedTensor {
    fn from(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), values: t.values().to_vec() }
    }
}

/// Versioned policy snapshot with the metadata needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub run_id: String,
    pub seed: u64,
    pub step: usize,
    pub env: EnvKind,
    pub dt: Option<f64>,
    pub n_experts: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub top_k: usize,
    pub log_std_bounds: (f64, f64),
    pub tensors: BTreeMap<String, NamedTensor>,
}

fn weights_name(m: usize) -> String {
    format!("expert_{m}.weights")
}

fn log_std_name(m: usize) -> String {
    format!("expert_{m}.log_std")
}

impl Checkpoint {
    pub fn new(run_id: &str, seed: u64, step: usize, env: EnvKind, dt: Option<f64>, policy: &PolicyParams) -> Self {
        let mut tensors = BTreeMap::new();
        tensors.insert("router".to_string(), NamedTensor::from(policy.router()));
        for m in 0..policy.n_experts() {
            tensors.insert(weights_name(m), NamedTensor::from(policy.expert_weights(m)));
            tensors.insert(log_std_name(m), NamedTensor::from(policy.expert_log_std(m)));
        }
        Self {
            version: CHECKPOINT_VERSION,
            run_id: run_id.to_string(),
            seed,
            step,
            env,
            dt,
            n_experts: policy.n_experts(),
            state_dim: policy.state_dim(),
            action_dim: policy.action_dim(),
            top_k: policy.top_k(),
            log_std_bounds: policy.log_std_bounds(),
            tensors,
        }
    }

    /// Rebuilds and validates the policy.
    pub fn policy(&self) -> Result<PolicyParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CliError::usage(format!("unsupported checkpoint version {}", self.version)));
        }
        let get = |name: &str| -> Result<Tensor> {
            let t = self.tensors.get(name).ok_or_else(|| CliError::usage(format!("checkpoint lacks tensor `{name}`")))?;
            Tensor::new(t.shape.clone(), t.values.clone()).map_err(|e| CliError::usage(format!("tensor `{name}`: {e}")))
        };
        let router = get("router")?;
        let weights = (0..self.n_experts).map(|m| get(&weights_name(m))).collect::<Result<Vec<_>>>()?;
        let log_std = (0..self.n_experts).map(|m| get(&log_std_name(m))).collect::<Result<Vec<_>>>()?;
        let p = PolicyParams::from_parts(router, weights, log_std, self.top_k, self.log_std_bounds)
            .map_err(|e| CliError::usage(format!("invalid checkpoint: {e}")))?;
        if p.state_dim() != self.state_dim || p.action_dim() != self.action_dim {
            return Err(CliError::usage("checkpoint dimensions disagree with its tensors"));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// Writes `[rows × cols]` little-endian `f64` states tagged with their run id.
pub fn write_replay_states(path: &Path, run_id: &str, states: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    w.write_all(REPLAY_MAGIC).map_err(io)?;
    w.write_all(&REPLAY_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(run_id.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(run_id.as_bytes()).map_err(io)?;
    w.write_all(&(states.rows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(states.cols() as u64).to_le_bytes()).map_err(io)?;
    for v in states.values() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_replay_states(path: &Path) -> Result<(String, Tensor)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let bad = |what: &str| CliError::usage(format!("{}: {what}", path.display()));
    let mut r = &bytes[..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(bad("truncated replay file"));
        }
        let (head, tail) = r.split_at(n);
        r = tail;
        Ok(head)
    };
    if take(4)? != REPLAY_MAGIC {
        return Err(bad("not a replay-states file"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    if u32_at(take(4)?) != REPLAY_VERSION {
        return Err(bad("unsupported replay-states version"));
    }
    let id_len = u32_at(take(4)?) as usize;
    let run_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("run id is not UTF-8"))?;
    let rows = u64_at(take(8)?) as usize;
    let cols = u64_at(take(8)?) as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| bad("bad dimensions"))?;
    let data = take(n.checked_mul(8).ok_or_else(|| bad("bad dimensions"))?)?;
    let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let states = Tensor::matrix(rows, cols, values).map_err(|e| bad(&e.to_string()))?;
    Ok((run_id, states))
}

/// Append-only newline-delimited JSON episode records.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &EpisodeRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| CliError::runtime(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CliError::runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

/// Matrix with a header row of column names and a leading column of row names.
pub fn write_heatmap(path: &Path, map: &Heatmap) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = std::iter::once(String::new()).chain(map.col_names.iter().cloned());
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for (r, name) in map.row_names.iter().enumerate() {
        let row = std::iter::once(name.clone()).chain((0..map.col_names.len()).map(|c| format!("{}", map.get(r, c))));
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_heatmap(path: &Path, name: &str) -> Result<Heatmap> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut records = rdr.records();
    let header = records.next().ok_or_else(|| CliError::runtime(format!("{}: empty", path.display())))?;
    let header = header.map_err(|e| csv_err(path, e))?;
    let col_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_names = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        row_names.push(rec.get(0).unwrap_or_default().to_string());
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| CliError::runtime(format!("{}: bad number `{field}`", path.display())))?;
            values.push(v);
        }
    }
    if values.len() != row_names.len() * col_names.len() {
        return Err(CliError::runtime(format!("{}: ragged matrix", path.display())));
    }
    Ok(Heatmap { name: name.to_string(), row_names, col_names, values })
}

/// One row per expert (numbered from 1): balanced accuracy and confusion counts.
pub fn write_fidelity_csv(path: &Path, fidelity: &[ExpertFidelity], experts: &[DistilledExpert]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["expert", "balanced_accuracy", "tn", "fp", "fn", "tp", "degenerate"]).map_err(|e| csv_err(path, e))?;
    for f in fidelity {
        let c = f.confusion;
        let degenerate = experts.iter().any(|e| e.expert == f.expert && e.degenerate);
        let row = [
            (f.expert + 1).to_string(),
            format!("{}", f.balanced_accuracy),
            c[0][0].to_string(),
            c[0][1].to_string(),
            c[1][0].to_string(),
            c[1][1].to_string(),
            degenerate.to_string(),
        ];
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a whole file, for byte-level comparisons.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut out)).map_err(|e| CliError::io(path, e))?;
    Ok(out)
}
