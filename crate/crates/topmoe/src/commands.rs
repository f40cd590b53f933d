//! The train / evaluate / distill / interpret / baseline operations behind
//! the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use topmoe_core::distill::{self, label_states, DistillError, DEFAULT_HELDOUT_FRACTION};
use topmoe_core::envs::{EnvKind, Environment};
use topmoe_core::eval::{evaluate, random_baseline, EvalFragment, EvalReport};
use topmoe_core::interpret::{
    extract_equations, feature_bounds, heatmaps, render_report, DistillationSummary, ReportInputs, TrainingSummary,
};
use topmoe_core::policy::ParamCount;
use topmoe_core::sac::{self, SacAgent, TrainingSink};
use topmoe_core::PolicyParams;

use crate::artifacts::{
    create_dir, read_json, read_metrics, read_replay_states, write_fidelity_csv, write_heatmap, write_json,
    write_replay_states, write_text, Checkpoint, MetricsWriter, RunLayout,
};
use crate::config::{make_env, RunConfig};
use crate::error::{CliError, Result};

/// Contents of `eval.json`, the last file a training run writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub n_act: usize,
    pub n_tot: usize,
    pub evaluation: EvalFragment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub layout: RunLayout,
    pub eval: RunEval,
}

/// Runs `f(0..n)` on up to `jobs` threads; results keep index order.
pub fn run_parallel<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("result slots")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("result slots").into_iter().map(|o| o.expect("every index ran")).collect()
}

/// Policy parameter counts for a configuration, without training.
pub fn param_counts(cfg: &RunConfig) -> ParamCount {
    let spec = cfg.make_env().spec().clone();
    PolicyParams::zeros(cfg.sac.n_experts, spec.state_dim, spec.action_dim)
        .map(|p| p.count_params(true))
        .unwrap_or(ParamCount { active: 0, total: 0 })
}

struct RunSink<'a> {
    layout: &'a RunLayout,
    metrics: MetricsWriter,
    run_id: &'a str,
    seed: u64,
    cfg: &'a RunConfig,
}

impl TrainingSink for RunSink<'_> {
    fn on_episode(&mut self, record: &sac::EpisodeRecord) -> Result<(), String> {
        self.metrics.write(record).map_err(|e| e.to_string())
    }

    fn on_checkpoint(&mut self, step: usize, agent: &SacAgent) -> Result<(), String> {
        self.metrics.flush().map_err(|e| e.to_string())?;
        Checkpoint::new(self.run_id, self.seed, step, self.cfg.env, self.cfg.dt, &agent.policy)
            .save(&self.layout.checkpoint(step))
            .map_err(|e| e.to_string())
    }
}

/// Prepares an empty run directory, refusing to overwrite unless `force`.
fn fresh_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        if !force {
            return Err(CliError::usage(format!("{} already exists; pass --force to overwrite", path.display())));
        }
        fs::remove_dir_all(path).map_err(|e| CliError::io(path, e))?;
    }
    create_dir(path)
}

/// Trains one seed, then writes the final checkpoint, replay states and
/// the deterministic evaluation.
pub fn train_run(cfg: &RunConfig, seed: u64, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let run_id = cfg.run_id(seed);
    let layout = RunLayout::new(&cfg.out_dir, &run_id);
    fresh_dir(&layout.root, force)?;
    create_dir(&layout.checkpoints())?;
    let mut resolved = cfg.clone();
    resolved.seeds = vec![seed];
    write_json(&layout.config(), &resolved)?;

    let mut env = cfg.make_env();
    let metrics = MetricsWriter::create(&layout.metrics())?;
    let mut sink = RunSink { layout: &layout, metrics, run_id: &run_id, seed, cfg };
    let outcome = sac::train(&mut env, &cfg.sac, seed, &mut sink)
        .map_err(|e| CliError::runtime(format!("training {run_id} aborted: {e}")))?;
    sink.metrics.flush()?;

    let policy = &outcome.agent.policy;
    Checkpoint::new(&run_id, seed, cfg.sac.total_steps, cfg.env, cfg.dt, policy).save(&layout.final_checkpoint())?;
    write_replay_states(&layout.replay_states(), &run_id, &outcome.buffer.states())?;
    let evaluation = evaluate(policy, &mut env, cfg.eval_episodes, cfg.eval_horizon, seed)
        .map_err(|e| CliError::runtime(format!("evaluating {run_id}: {e}")))?;
    let counts = policy.count_params(true);
    let eval = RunEval { run_id, seed, config_hash: cfg.config_hash(), n_act: counts.active, n_tot: counts.total, evaluation };
    write_json(&layout.eval(), &eval)?;
    Ok(RunSummary { layout, eval })
}

/// Completed run for `(cfg, seed)`, if its directory holds a readable `eval.json`.
pub fn completed_run(cfg: &RunConfig, seed: u64) -> Option<RunSummary> {
    let layout = RunLayout::new(&cfg.out_dir, &cfg.run_id(seed));
    let eval: RunEval = read_json(&layout.eval()).ok()?;
    (eval.run_id == cfg.run_id(seed)).then_some(RunSummary { layout, eval })
}

fn eval_report_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(format!("eval_report_{}.json", cfg.config_hash()))
}

/// Trains every configured seed and writes the multi-seed [`EvalReport`].
pub fn cmd_train(cfg: &RunConfig, jobs: usize, force: bool) -> Result<(Vec<RunSummary>, EvalReport)> {
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    let results = run_parallel(cfg.seeds.len(), jobs, |i| train_run(cfg, cfg.seeds[i], force));
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let per_seed = runs.iter().map(|r| r.eval.evaluation.mean).collect();
    let report = EvalReport::from_seed_means(per_seed, cfg.eval_episodes, param_counts(cfg), cfg.config_hash());
    write_json(&eval_report_path(cfg), &report)?;
    Ok((runs, report))
}

pub fn cmd_evaluate(checkpoint: &Path, episodes: usize, horizon: usize, seed: u64) -> Result<EvalFragment> {
    let ck = Checkpoint::load(checkpoint)?;
    let policy = ck.policy()?;
    let mut env = make_env(ck.env, ck.dt);
    evaluate(&policy, &mut env, episodes, horizon, seed).map_err(|e| CliError::runtime(e.to_string()))
}

pub fn cmd_baseline(env: EnvKind, dt: Option<f64>, episodes: usize, horizon: usize, seed: u64) -> Result<EvalFragment> {
    random_baseline(&mut make_env(env, dt), episodes, horizon, seed).map_err(|e| CliError::runtime(e.to_string()))
}

fn distill_err(e: DistillError) -> CliError {
    CliError::usage(format!("distillation: {e}"))
}

pub fn tree_stem(expert: usize) -> String {
    format!("tree_expert_{}", expert + 1)
}

/// Labels the replay states with the checkpoint's router, fits one tree per
/// expert on a seeded 80% split and scores them on the other 20%.
pub fn cmd_distill(checkpoint: &Path, buffer: &Path, depth: usize, out: &Path) -> Result<DistillationSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let policy = ck.policy()?;
    let (buffer_run, states) = read_replay_states(buffer)?;
    if buffer_run != ck.run_id {
        return Err(CliError::usage(format!("run id mismatch: checkpoint `{}`, buffer `{buffer_run}`", ck.run_id)));
    }
    let dataset = label_states(&policy, &states).map_err(distill_err)?;
    let (train, heldout) = dataset.split(DEFAULT_HELDOUT_FRACTION, ck.seed).map_err(distill_err)?;
    if train.is_empty() || heldout.is_empty() {
        return Err(CliError::usage(format!("{} states are too few to split for distillation", dataset.len())));
    }
    let experts = distill::distill(&train, depth).map_err(distill_err)?;
    let trees: Vec<_> = experts.iter().map(|e| e.tree.clone()).collect();
    let fidelity = distill::fidelity(&trees, &heldout).map_err(distill_err)?;

    create_dir(out)?;
    let spec = make_env(ck.env, ck.dt).spec().clone();
    for e in &experts {
        if e.degenerate {
            eprintln!("warning: expert {} has an empty class in the training split; its tree is constant", e.expert + 1);
        }
        let stem = tree_stem(e.expert);
        write_json(&out.join(format!("{stem}.json")), &e.tree)?;
        write_text(&out.join(format!("{stem}.txt")), &e.tree.rules(&spec.observation_names, &format!("expert {}", e.expert + 1)))?;
    }
    write_fidelity_csv(&out.join("fidelity.csv"), &fidelity, &experts)?;
    let summary = DistillationSummary { run_id: ck.run_id.clone(), depth, experts, fidelity };
    write_json(&out.join("distillation.json"), &summary)?;
    Ok(summary)
}

/// Files written by [`cmd_interpret`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub report: PathBuf,
    pub equations: PathBuf,
    pub heatmaps: Vec<PathBuf>,
}

/// Writes equations, coefficient CSVs and the markdown report. Training
/// metrics, replay states and distillation results are picked up from the
/// checkpoint's run directory when present.
pub fn cmd_interpret(checkpoint: &Path, threshold: f64, out: &Path) -> Result<ReportBundle> {
    let ck = Checkpoint::load(checkpoint)?;
    let policy = ck.policy()?;
    let spec = make_env(ck.env, ck.dt).spec().clone();
    let usage = |e: topmoe_core::interpret::InterpretError| CliError::usage(e.to_string());
    let equations = extract_equations(&policy, &spec, threshold).map_err(usage)?;
    create_dir(out)?;
    let eq_path = out.join("equations.json");
    write_json(&eq_path, &equations)?;
    let mut heatmap_paths = Vec::new();
    for map in heatmaps(&policy, &spec).map_err(usage)? {
        let path = out.join(format!("heatmap_{}.csv", map.name));
        write_heatmap(&path, &map)?;
        heatmap_paths.push(path);
    }

    let layout = RunLayout::of_checkpoint(checkpoint);
    let training = match &layout {
        Some(l) if l.metrics().exists() => {
            Some(TrainingSummary::from_records(&ck.run_id, &read_metrics(&l.metrics())?, policy.n_experts()))
        }
        _ => None,
    };
    let bounds = match &layout {
        Some(l) if l.replay_states().exists() => {
            let (run, states) = read_replay_states(&l.replay_states())?;
            (run == ck.run_id && states.rows() > 0).then(|| feature_bounds(&states))
        }
        _ => None,
    };
    let distillation: Option<DistillationSummary> = match &layout {
        Some(l) if l.distill().join("distillation.json").exists() => Some(read_json(&l.distill().join("distillation.json"))?),
        _ => None,
    };
    let inputs = ReportInputs {
        run_id: &ck.run_id,
        env: &spec,
        equations: &equations,
        counts: policy.count_params(true),
        training: training.as_ref(),
        distillation: distillation.as_ref(),
        feature_bounds: bounds.as_deref(),
    };
    let text = render_report(&inputs).map_err(usage)?;
    let report = out.join("report.md");
    write_text(&report, &text)?;
    Ok(ReportBundle { report, equations: eq_path, heatmaps: heatmap_paths })
}
