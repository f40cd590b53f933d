//! Acceptance checks. Each test prints one `PASS`/`FAIL` line (bypassing
//! output capture) and then asserts its verdict. Tests take a shared lock so
//! that their timings are not distorted by each other.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng;
use topmoe::artifacts::{read_bytes, RunLayout};
use topmoe::commands::{cmd_distill, cmd_evaluate, cmd_interpret, cmd_train, train_run, tree_stem, RunSummary};
use topmoe::sweep::{read_csv, run_sweep, CellAggregate, SweepConfig, SweepRow};
use topmoe::RunConfig;
use topmoe_core::autodiff::{normal_cdf, Graph, Tensor};
use topmoe_core::balancing::{gate_stats, importance_loss, importance_loss_with_grad, load_loss_with_grad, LOAD_CV_EPS};
use topmoe_core::distill::{self, fit_cart, label_states, BinaryDataset, DecisionTree, MIN_IMPURITY_DECREASE, MIN_LEAF_FRACTION};
use topmoe_core::envs::{EnvKind, Environment};
use topmoe_core::eval::random_baseline;
use topmoe_core::policy::TANH_LOG_EPS;
use topmoe_core::rng::{self, standard_normal, RunRng};
use topmoe_core::sac::{self, NullSink, SacConfig};
use topmoe_core::PolicyParams;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{word} [{id:>2}] {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn uniform(r: &mut RunRng, lo: f64, hi: f64) -> f64 {
    r.random_range(lo..hi)
}

fn random_matrix(r: &mut RunRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * standard_normal(r)).collect()).unwrap()
}

fn random_policy(r: &mut RunRng, m: usize, ns: usize, na: usize) -> PolicyParams {
    let mut p = PolicyParams::new_random(m, ns, na, r).unwrap();
    for t in p.tensors_mut() {
        for v in t.values_mut() {
            *v = standard_normal(r);
        }
    }
    for e in 0..m {
        let ls: Vec<f64> = (0..na).map(|_| uniform(r, -1.0, 0.5)).collect();
        p.set_expert_log_std(e, &ls).unwrap();
    }
    p
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

/// `‖analytic − fd‖∞ / max(‖analytic‖∞, ‖fd‖∞)` with central differences.
fn fd_error(x: &[f64], analytic: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut xp = x.to_vec();
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + FD_STEP;
        let up = f(&xp);
        xp[i] = x[i] - FD_STEP;
        let down = f(&xp);
        xp[i] = x[i];
        let fd = (up - down) / (2.0 * FD_STEP);
        diff = diff.max((fd - analytic[i]).abs());
        scale = scale.max(fd.abs()).max(analytic[i].abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn affine_loss(x: &Tensor, w: &Tensor, b: &Tensor, c: &Tensor, want_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.param(x.clone()).unwrap(), g.param(w.clone()).unwrap(), g.param(b.clone()).unwrap());
    let cv = g.constant(c.clone()).unwrap();
    let y = g.affine(xv, wv, Some(bv)).unwrap();
    let weighted = g.mul(y, cv).unwrap();
    let loss = g.sum(weighted);
    let value = g.scalar(loss);
    if !want_grad {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    (value, [xv, wv, bv].iter().map(|&v| g.grad(v).unwrap().to_vec()).collect())
}

fn tanh_loss(x: &Tensor, c: &Tensor, want_grad: bool) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.param(x.clone()).unwrap();
    let cv = g.constant(c.clone()).unwrap();
    let y = g.tanh(xv);
    let weighted = g.mul(y, cv).unwrap();
    let loss = g.sum(weighted);
    let value = g.scalar(loss);
    if !want_grad {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    (value, g.grad(xv).unwrap().to_vec())
}

/// `Σ_b c_b · log π(tanh(u_b))` evaluated by hand, with `u = μ + σ·ε` from the
/// selected expert of each state.
fn scalar_squashed_objective(p: &PolicyParams, states: &Tensor, eps: &Tensor, c: &[f64]) -> f64 {
    let mut total = 0.0;
    for b in 0..states.rows() {
        let s = states.row(b);
        let logits: Vec<f64> = (0..p.n_experts()).map(|m| p.router().row(m).iter().zip(s).map(|(a, x)| a * x).sum()).collect();
        let mut sel = 0;
        for m in 1..logits.len() {
            if logits[m] > logits[sel] {
                sel = m;
            }
        }
        let w = p.expert_weights(sel);
        let ls = p.expert_log_std(sel).values();
        let mut lp = 0.0;
        for j in 0..p.action_dim() {
            let mu: f64 = w.row(j).iter().zip(s).map(|(a, x)| a * x).sum();
            let sigma = ls[j].exp();
            let u = mu + sigma * eps.get(b, j);
            let z = (u - mu) / sigma;
            lp += -0.5 * z * z - ls[j] - 0.5 * (2.0 * std::f64::consts::PI).ln();
            lp -= (1.0 - u.tanh().powi(2) + TANH_LOG_EPS).ln();
        }
        total += c[b] * lp;
    }
    total
}

fn half_cv_sq(v: &[f64], eps: f64) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    0.5 * var / (mean + eps).powi(2)
}

fn logits_of(router: &[f64], m: usize, states: &Tensor) -> Vec<Vec<f64>> {
    let ns = states.cols();
    (0..states.rows())
        .map(|b| (0..m).map(|e| (0..ns).map(|k| router[e * ns + k] * states.get(b, k)).sum()).collect())
        .collect()
}

/// Brute-force importance penalty: softmax mass per expert, then ½·CV².
fn brute_importance(router: &[f64], m: usize, states: &Tensor) -> f64 {
    let mut imp = vec![0.0; m];
    for l in logits_of(router, m, states) {
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
        for e in 0..m {
            imp[e] += (l[e] - mx).exp() / z;
        }
    }
    half_cv_sq(&imp, 0.0)
}

fn brute_load_vector(router: &[f64], m: usize, states: &Tensor, noise_std: f64) -> Vec<f64> {
    let mut load = vec![0.0; m];
    for l in logits_of(router, m, states) {
        for e in 0..m {
            let best_other = (0..m).filter(|&j| j != e).map(|j| l[j]).fold(f64::NEG_INFINITY, f64::max);
            load[e] += normal_cdf((l[e] - best_other) / noise_std);
        }
    }
    load
}

#[test]
fn c01_gradient_finite_difference() {
    let _g = serial();
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut r = rng::stream(101, 0);
    for _ in 0..100 {
        let (bsz, n_in, n_out) = (r.random_range(1..6), r.random_range(1..7), r.random_range(1..5));
        let x = random_matrix(&mut r, bsz, n_in, 1.0);
        let w = random_matrix(&mut r, n_out, n_in, 1.0);
        let b = Tensor::vector((0..n_out).map(|_| standard_normal(&mut r)).collect());
        let c = random_matrix(&mut r, bsz, n_out, 1.0);
        let (_, grads) = affine_loss(&x, &w, &b, &c, true);
        let e_x = fd_error(x.values(), &grads[0], &mut |v| affine_loss(&Tensor::matrix(bsz, n_in, v.to_vec()).unwrap(), &w, &b, &c, false).0);
        let e_w = fd_error(w.values(), &grads[1], &mut |v| affine_loss(&x, &Tensor::matrix(n_out, n_in, v.to_vec()).unwrap(), &b, &c, false).0);
        let e_b = fd_error(b.values(), &grads[2], &mut |v| affine_loss(&x, &w, &Tensor::vector(v.to_vec()), &c, false).0);
        let e = worst.entry("affine").or_insert(0.0);
        *e = e.max(e_x).max(e_w).max(e_b);
    }
    for _ in 0..100 {
        let (rows, cols) = (r.random_range(1..6), r.random_range(1..6));
        let x = random_matrix(&mut r, rows, cols, 1.5);
        let c = random_matrix(&mut r, rows, cols, 1.0);
        let (_, grad) = tanh_loss(&x, &c, true);
        let err = fd_error(x.values(), &grad, &mut |v| tanh_loss(&Tensor::matrix(rows, cols, v.to_vec()).unwrap(), &c, false).0);
        let e = worst.entry("tanh").or_insert(0.0);
        *e = e.max(err);
    }
    for _ in 0..100 {
        let (m, ns, na, bsz) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..4), r.random_range(1..6));
        let mut p = random_policy(&mut r, m, ns, na);
        for t in p.tensors_mut().into_iter().skip(1) {
            for v in t.values_mut() {
                *v *= 0.5;
            }
        }
        let states = random_matrix(&mut r, bsz, ns, 1.0);
        let eps = random_matrix(&mut r, bsz, na, 1.0);
        let c: Vec<f64> = (0..bsz).map(|_| standard_normal(&mut r)).collect();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true).unwrap();
        let sv = g.constant(states.clone()).unwrap();
        let smp = bound.sample(&mut g, sv, None, &eps).unwrap();
        let cv = g.constant(Tensor::matrix(bsz, 1, c.clone()).unwrap()).unwrap();
        let weighted = g.mul(smp.log_prob, cv).unwrap();
        let loss = g.sum(weighted);
        g.backward(loss).unwrap();
        let grads = bound.grads(&g);
        let mut err: f64 = 0.0;
        // index 0 is the router, whose gradient is the straight-through estimate
        for (ti, grad) in grads.iter().enumerate().skip(1) {
            let analytic = grad.map_or_else(|| vec![0.0; p.tensors()[ti].len()], <[f64]>::to_vec);
            let x0 = p.tensors()[ti].values().to_vec();
            let mut probe = p.clone();
            err = err.max(fd_error(&x0, &analytic, &mut |v| {
                probe.tensors_mut()[ti].values_mut().copy_from_slice(v);
                scalar_squashed_objective(&probe, &states, &eps, &c)
            }));
        }
        let e = worst.entry("squashed_gaussian_log_prob").or_insert(0.0);
        *e = e.max(err);
    }
    for kind in ["importance_loss", "load_loss"] {
        for _ in 0..100 {
            let (m, ns, bsz) = (r.random_range(2..7), r.random_range(1..5), r.random_range(2..12));
            let mut p = random_policy(&mut r, m, ns, 1);
            for v in p.router_mut().values_mut() {
                *v *= 0.5;
            }
            let states = random_matrix(&mut r, bsz, ns, 1.0);
            let sigma = 1.0 / m as f64;
            let router = p.router().values().to_vec();
            let err = if kind == "importance_loss" {
                let lg = importance_loss_with_grad(&p, &states).unwrap();
                fd_error(&router, &lg.router_grad, &mut |v| brute_importance(v, m, &states))
            } else {
                let lg = load_loss_with_grad(&p, &states, sigma).unwrap();
                fd_error(&router, &lg.router_grad, &mut |v| half_cv_sq(&brute_load_vector(v, m, &states, sigma), LOAD_CV_EPS))
            };
            let e = worst.entry(kind).or_insert(0.0);
            *e = e.max(err);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.values().all(|&e| e <= FD_TOL) && elapsed < Duration::from_secs(60);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect::<Vec<_>>().join(", ");
    verdict(1, "gradient FD checks (100 configs each, h=1e-4, tol 1e-4)", pass, &format!("worst rel err: {detail}; {:.1}s", elapsed.as_secs_f64()));
    assert!(pass);
}

// ---------------------------------------------------------------- sparsity

#[test]
fn c02_sparsity() {
    let _g = serial();
    let mut r = rng::stream(202, 0);
    let (mut untouched, mut dense_equal) = (0, 0);
    let n = 1000;
    for _ in 0..n {
        let (m, ns, na) = (r.random_range(2..9), r.random_range(1..9), r.random_range(1..5));
        let p = random_policy(&mut r, m, ns, na);
        let s: Vec<f64> = (0..ns).map(|_| 2.0 * standard_normal(&mut r)).collect();
        let sel = p.route_clean(&s).unwrap().selected;
        let before = p.act_deterministic(&s).unwrap();

        let mut other = r.random_range(0..m - 1);
        if other >= sel {
            other += 1;
        }
        let mut q = p.clone();
        for v in q.expert_weights_mut(other).values_mut() {
            *v += 10.0 * standard_normal(&mut r);
        }
        let ls: Vec<f64> = (0..na).map(|_| uniform(&mut r, -3.0, 1.0)).collect();
        q.set_expert_log_std(other, &ls).unwrap();
        let after = q.act_deterministic(&s).unwrap();
        if before.iter().map(|v| v.to_bits()).eq(after.iter().map(|v| v.to_bits())) {
            untouched += 1;
        }

        let selected_only = p.expert_output(sel, &s).unwrap();
        let mut dense = vec![0.0; na];
        for e in 0..m {
            let g = if e == sel { 1.0 } else { 0.0 };
            for (d, y) in dense.iter_mut().zip(p.expert_output(e, &s).unwrap()) {
                *d += g * y;
            }
        }
        // the graph's gated mixture over all experts' outputs
        let mut graph = Graph::new();
        let one_hot = Tensor::matrix(1, m, (0..m).map(|e| if e == sel { 1.0 } else { 0.0 }).collect()).unwrap();
        let all: Vec<f64> = (0..m).flat_map(|e| p.expert_output(e, &s).unwrap()).collect();
        let gv = graph.constant(one_hot).unwrap();
        let yv = graph.constant(Tensor::matrix(1, m * na, all).unwrap()).unwrap();
        let mixed = graph.mix(gv, yv).unwrap();
        if dense == selected_only && graph.value(mixed).values() == selected_only.as_slice() {
            dense_equal += 1;
        }
    }
    let pass = untouched == n && dense_equal == n;
    verdict(2, "sparsity (1000 random pairs)", pass, &format!("act_deterministic unchanged {untouched}/{n}; dense one-hot sum exact {dense_equal}/{n}"));
    assert!(pass);
}

// ---------------------------------------------------------------- balancing oracles

#[test]
fn c03_balancing_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng::stream(303, 0);
    let mut worst_imp: f64 = 0.0;
    for _ in 0..100 {
        let (m, ns, bsz) = (r.random_range(1..9), r.random_range(1..6), r.random_range(1..33));
        let p = random_policy(&mut r, m, ns, 1);
        let states = random_matrix(&mut r, bsz, ns, 1.0);
        let got = importance_loss(&p, &states).unwrap();
        let want = brute_importance(p.router().values(), m, &states);
        worst_imp = worst_imp.max((got - want).abs());
    }

    let draws = 1_000_000usize;
    let mut worst_z: f64 = 0.0;
    let (mut z_sq, mut n_z) = (0.0, 0);
    for inst in 0..20 {
        let (m, ns, bsz) = (r.random_range(2..6), r.random_range(1..4), r.random_range(2..7));
        let mut p = random_policy(&mut r, m, ns, 1);
        for v in p.router_mut().values_mut() {
            *v *= 0.3;
        }
        let states = random_matrix(&mut r, bsz, ns, 1.0);
        let sigma = 1.0 / m as f64;
        let load = gate_stats(&p, &states, sigma).unwrap().load;
        let logits = logits_of(p.router().values(), m, &states);
        let best_other: Vec<Vec<f64>> = logits
            .iter()
            .map(|l| (0..m).map(|e| (0..m).filter(|&j| j != e).map(|j| l[j]).fold(f64::NEG_INFINITY, f64::max)).collect())
            .collect();
        let mut mc = rng::stream(9000 + inst, 0);
        let (mut sum, mut sum_sq) = (vec![0.0; m], vec![0.0; m]);
        for _ in 0..draws {
            for e in 0..m {
                let mut hits = 0.0;
                for b in 0..bsz {
                    if logits[b][e] + sigma * standard_normal(&mut mc) > best_other[b][e] {
                        hits += 1.0;
                    }
                }
                sum[e] += hits;
                sum_sq[e] += hits * hits;
            }
        }
        for e in 0..m {
            let mean = sum[e] / draws as f64;
            let var = (sum_sq[e] / draws as f64 - mean * mean).max(0.0);
            let se = (var / draws as f64).sqrt();
            let z = (load[e] - mean).abs() / se.max(1e-12);
            worst_z = worst_z.max(z);
            if se > 0.0 {
                z_sq += z * z;
                n_z += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_imp <= 1e-10 && worst_z <= 3.0 && elapsed < Duration::from_secs(300);
    verdict(
        3,
        "balancing oracles",
        pass,
        &format!("importance max |Δ| {worst_imp:.2e} over 100 batches; load worst |Δ|/SE {worst_z:.2} (rms {:.2} over {n_z} loads) on 20 instances × 1e6 draws; {:.1}s", (z_sq / n_z.max(1) as f64).sqrt(), elapsed.as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- load-balancing effect

fn usage_cv(selections: &[u16], m: usize) -> f64 {
    let mut counts = vec![0.0; m];
    for &s in selections {
        counts[s as usize] += 1.0;
    }
    let mean = counts.iter().sum::<f64>() / m as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / m as f64;
    var.sqrt() / mean
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[test]
fn c04_load_balancing_effect() {
    let _g = serial();
    let start = Instant::now();
    let window = 10_000;
    let mut medians = Vec::new();
    let mut all = Vec::new();
    for lambda in [0.1, 0.0] {
        let cfg = SacConfig { n_experts: 4, lambda, total_steps: 30_000, warmup_steps: 5_000, checkpoint_every: 0, ..SacConfig::default() };
        let mut cvs: Vec<f64> = (0..5u64)
            .map(|seed| {
                let mut env = EnvKind::TwoLinkReacher.make();
                let out = sac::train(&mut env, &cfg, seed, &mut NullSink).unwrap();
                let sel = &out.selections[out.selections.len() - window..];
                usage_cv(sel, 4)
            })
            .collect();
        all.push(cvs.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
        medians.push(median(&mut cvs));
    }
    let pass = medians[0] < medians[1];
    verdict(
        4,
        "load balancing lowers usage CV (reacher, M=4, 5 seeds, last 10k steps)",
        pass,
        &format!(
            "median CV λ=0.1 {:.4} [{}] vs λ=0 {:.4} [{}]; {:.0}s",
            medians[0],
            all[0],
            medians[1],
            all[1],
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- reacher learning + distillation

struct ReacherRuns {
    _dir: tempfile::TempDir,
    runs: Vec<(RunSummary, Duration)>,
    baseline: Vec<f64>,
}

fn reacher_cfg(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(EnvKind::TwoLinkReacher);
    cfg.sac.n_experts = 4;
    cfg.sac.total_steps = 200_000;
    cfg.out_dir = out.to_path_buf();
    cfg.seeds = vec![0, 1, 2];
    cfg
}

fn reacher_runs() -> &'static ReacherRuns {
    static RUNS: OnceLock<ReacherRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = reacher_cfg(dir.path());
        let mut runs = Vec::new();
        let mut baseline = Vec::new();
        for &seed in &cfg.seeds {
            let t = Instant::now();
            let run = train_run(&cfg, seed, false).unwrap();
            runs.push((run, t.elapsed()));
            let b = random_baseline(&mut cfg.make_env(), cfg.eval_episodes, cfg.eval_horizon, seed).unwrap();
            baseline.push(b.mean);
        }
        ReacherRuns { _dir: dir, runs, baseline }
    })
}

#[test]
fn c05_reacher_learning() {
    let _g = serial();
    let rr = reacher_runs();
    let mut pass = true;
    let mut parts = Vec::new();
    for ((run, took), base) in rr.runs.iter().zip(&rr.baseline) {
        let er = run.eval.evaluation.mean;
        let ok = er >= base / 3.0 && *took <= Duration::from_secs(30 * 60);
        pass &= ok;
        parts.push(format!("seed {} ER {er:.3} vs baseline {base:.3} (bar {:.3}) in {:.0}s", run.eval.seed, base / 3.0, took.as_secs_f64()));
    }
    verdict(5, "reacher learning (M=4, 200k steps, 3 seeds, ER ≥ baseline/3)", pass, &parts.join("; "));
    assert!(pass);
}

#[test]
fn c06_distillation_fidelity() {
    let _g = serial();
    let rr = reacher_runs();
    let mut worst: f64 = 1.0;
    let mut parts = Vec::new();
    for (run, _) in &rr.runs {
        let l = &run.layout;
        let summary = cmd_distill(&l.final_checkpoint(), &l.replay_states(), 3, &l.distill()).unwrap();
        let accs: Vec<f64> = summary.fidelity.iter().map(|f| f.balanced_accuracy).collect();
        worst = accs.iter().cloned().fold(worst, f64::min);
        parts.push(format!("seed {}: [{}]", run.eval.seed, accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")));
    }

    // a router that looks at one feature only: expert 0 iff s_f > 0
    let mut r = rng::stream(606, 0);
    let (ns, f) = (5, 2);
    let mut p = PolicyParams::zeros(2, ns, 1).unwrap();
    p.router_mut().set(0, f, 1.0);
    let states = random_matrix(&mut r, 2000, ns, 1.0);
    let ds = label_states(&p, &states).unwrap();
    let (train, heldout) = ds.split(0.2, 7).unwrap();
    let trees: Vec<DecisionTree> = distill::distill(&train, 1).unwrap().into_iter().map(|e| e.tree).collect();
    let synth = distill::fidelity(&trees, &heldout).unwrap();
    let synth_min = synth.iter().map(|f| f.balanced_accuracy).fold(1.0, f64::min);

    let pass = worst >= 0.85 && synth_min == 1.0;
    verdict(
        6,
        "distillation fidelity (depth 3 ≥ 0.85 per expert; one-hot router depth 1 = 1.0)",
        pass,
        &format!("trained: {}; worst {worst:.3}; synthetic min {synth_min:.3}", parts.join("; ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- CART oracle

enum OracleNode {
    Leaf(bool),
    Split { feature: usize, threshold: f64, left: Box<OracleNode>, right: Box<OracleNode> },
}

impl OracleNode {
    fn predict(&self, x: &[f64]) -> bool {
        match self {
            OracleNode::Leaf(c) => *c,
            OracleNode::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

fn oracle_gini(pts: &[(Vec<f64>, bool, f64)]) -> (f64, f64) {
    let w1: f64 = pts.iter().filter(|p| p.1).map(|p| p.2).sum();
    let w0: f64 = pts.iter().filter(|p| !p.1).map(|p| p.2).sum();
    let w = w0 + w1;
    if w <= 0.0 {
        return (0.0, 0.0);
    }
    (w, 1.0 - (w0 / w).powi(2) - (w1 / w).powi(2))
}

/// Tries every feature and every midpoint between distinct values, scoring
/// each partition from scratch.
fn oracle_grow(pts: &[(Vec<f64>, bool, f64)], depth: usize, max_depth: usize, min_leaf: f64) -> OracleNode {
    let w1: f64 = pts.iter().filter(|p| p.1).map(|p| p.2).sum();
    let w0: f64 = pts.iter().filter(|p| !p.1).map(|p| p.2).sum();
    let leaf = OracleNode::Leaf(w1 > w0);
    if depth >= max_depth {
        return leaf;
    }
    let (w_node, parent) = oracle_gini(pts);
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..pts[0].0.len() {
        let mut vals: Vec<f64> = pts.iter().map(|p| p.0[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for pair in vals.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let mid = lo + (hi - lo) / 2.0;
            let t = if mid >= hi { lo } else { mid };
            let (l, r): (Vec<_>, Vec<_>) = pts.iter().cloned().partition(|p| p.0[f] <= t);
            let ((wl, gl), (wr, gr)) = (oracle_gini(&l), oracle_gini(&r));
            if wl < min_leaf || wr < min_leaf {
                continue;
            }
            let dec = parent - (wl * gl + wr * gr) / w_node;
            if best.is_none_or(|b| dec > b.2 + 1e-12) {
                best = Some((f, t, dec));
            }
        }
    }
    match best {
        Some((feature, threshold, dec)) if dec >= MIN_IMPURITY_DECREASE => {
            let (l, r): (Vec<_>, Vec<_>) = pts.iter().cloned().partition(|p| p.0[feature] <= threshold);
            OracleNode::Split {
                feature,
                threshold,
                left: Box::new(oracle_grow(&l, depth + 1, max_depth, min_leaf)),
                right: Box::new(oracle_grow(&r, depth + 1, max_depth, min_leaf)),
            }
        }
        _ => leaf,
    }
}

#[test]
fn c07_cart_matches_exhaustive_oracle() {
    let _g = serial();
    let mut r = rng::stream(707, 0);
    let mut matched = 0;
    let mut details = Vec::new();
    for d in 0..50 {
        let xs: Vec<Vec<f64>> = (0..30).map(|_| (0..2).map(|_| (uniform(&mut r, -1.0, 1.0) * 10.0).round() / 10.0).collect()).collect();
        let labels: Vec<bool> = if d % 2 == 0 {
            xs.iter().map(|_| r.random_bool(0.4)).collect::<Vec<_>>()
        } else {
            xs.iter().map(|x| x[0] + 0.5 * x[1] + 0.3 * standard_normal(&mut r) > 0.0).collect()
        };
        let data = BinaryDataset::new(2, xs.concat(), labels.clone()).unwrap();
        let tree = fit_cart(&data, 2).unwrap();

        let n = labels.len() as f64;
        let n1 = labels.iter().filter(|&&l| l).count() as f64;
        let w = |l: bool| if l { n / (2.0 * n1) } else { n / (2.0 * (n - n1)) };
        let pts: Vec<(Vec<f64>, bool, f64)> = xs.iter().zip(&labels).map(|(x, &l)| (x.clone(), l, w(l))).collect();
        let total: f64 = pts.iter().map(|p| p.2).sum();
        let oracle = oracle_grow(&pts, 0, 2, MIN_LEAF_FRACTION * total);

        let acc = |pred: &dyn Fn(&[f64]) -> bool| xs.iter().zip(&labels).filter(|(x, &l)| pred(x) == l).count();
        let (a_tree, a_oracle) = (acc(&|x| tree.predict(x)), acc(&|x| oracle.predict(x)));
        if a_tree == a_oracle {
            matched += 1;
        } else {
            details.push(format!("dataset {d}: {a_tree} vs {a_oracle}"));
        }
    }
    let pass = matched == 50;
    verdict(7, "depth-2 CART vs exhaustive split oracle (50 datasets × 30 points)", pass, &format!("accuracy equal on {matched}/50 {}", details.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- reproducibility and accounting

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), read_bytes(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn tiny_cfg(out: &Path, env: EnvKind, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::new(env);
    cfg.sac.n_experts = 3;
    cfg.sac.total_steps = steps;
    cfg.sac.warmup_steps = steps / 3;
    cfg.sac.checkpoint_every = steps / 2;
    cfg.sac.batch_size = 64;
    cfg.eval_episodes = 5;
    cfg.out_dir = out.to_path_buf();
    cfg.seeds = vec![3, 4];
    cfg
}

fn tiny_sweep(out: &Path) -> SweepConfig {
    let mut s = SweepConfig::new(tiny_cfg(out, EnvKind::PointMass, 900));
    s.envs = vec![EnvKind::PointMass, EnvKind::Pendulum];
    s.n_experts = vec![2, 3];
    s.lambdas = vec![0.0, 0.1];
    s.seeds = vec![0, 1];
    s
}

#[test]
fn c08_reproducibility() {
    let _g = serial();
    // repeated into the same directory, since the resolved configs record it
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path(), EnvKind::PointMass, 1500);
    let (runs, _) = cmd_train(&cfg, 1, false).unwrap();
    let first = tree_bytes(dir.path());
    cmd_train(&cfg, 2, true).unwrap();
    let train_same = tree_bytes(dir.path()) == first && runs.len() == 2;

    let ck = runs[0].layout.final_checkpoint();
    let eval_json = || serde_json::to_vec(&cmd_evaluate(&ck, 10, 1000, 9).unwrap()).unwrap();
    let eval_same = eval_json() == eval_json();

    let sdir = tempfile::tempdir().unwrap();
    let sweep = tiny_sweep(sdir.path());
    let out_a = run_sweep(&sweep, 1).unwrap();
    let first = tree_bytes(sdir.path());
    // a second invocation resumes from the completed runs
    let resumed = run_sweep(&sweep, 1).unwrap();
    let resumed_same = tree_bytes(sdir.path()) == first && resumed.rows == out_a.rows;
    std::fs::remove_dir_all(sdir.path()).unwrap();
    let out_b = run_sweep(&sweep, 3).unwrap();
    let sweep_same = resumed_same && tree_bytes(sdir.path()) == first && out_b.rows == out_a.rows;

    let pass = train_same && eval_same && sweep_same;
    verdict(8, "reproducibility (train, evaluate, sweep)", pass, &format!("train {train_same}, evaluate {eval_same}, sweep {sweep_same} (resume {resumed_same})"));
    assert!(pass);
}

#[test]
fn c09_param_accounting() {
    let _g = serial();
    let mut r = rng::stream(909, 0);
    let mut count_ok = 0;
    for _ in 0..20 {
        let (m, ns, na) = (r.random_range(1..17), r.random_range(1..33), r.random_range(1..9));
        let c = PolicyParams::zeros(m, ns, na).unwrap().count_params(true);
        if c.active == m * ns + na * ns + na && c.total == m * ns + m * (na * ns + na) {
            count_ok += 1;
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let sweep = tiny_sweep(dir.path());
    let out = run_sweep(&sweep, 1).unwrap();
    let rows: Vec<SweepRow> = read_csv(&out.dir.join("runs.csv")).unwrap();
    let aggs: Vec<CellAggregate> = read_csv(&out.dir.join("aggregate.csv")).unwrap();
    let mut table_ok = rows.len() == 16 && aggs.len() == 8;
    for row in &rows {
        let spec = row.env.make().spec().clone();
        let (m, ns, na) = (row.n_experts, spec.state_dim, spec.action_dim);
        table_ok &= row.n_act == m * ns + na * ns + na && row.n_tot == m * ns + m * (na * ns + na);
    }
    for a in &aggs {
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.env == a.env && r.n_experts == a.n_experts && r.lambda == a.lambda).collect();
        let ers: Vec<f64> = mine.iter().filter_map(|r| r.avg_er).collect();
        let mean = ers.iter().sum::<f64>() / ers.len() as f64;
        let std = (ers.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / ers.len() as f64).sqrt();
        table_ok &= mine.iter().all(|r| r.n_act == a.n_act && r.n_tot == a.n_tot);
        table_ok &= a.n_seeds == ers.len() && a.avg_er.is_some_and(|v| (v - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        table_ok &= a.std_er.is_some_and(|v| (v - std).abs() <= 1e-12 * std.abs().max(1.0));
    }
    let pass = count_ok == 20 && table_ok;
    verdict(9, "parameter accounting", pass, &format!("closed form {count_ok}/20; sweep tables consistent {table_ok}"));
    assert!(pass);
}

#[test]
fn c10_end_to_end_smoke() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(EnvKind::PointMass);
    cfg.sac.n_experts = 4;
    cfg.sac.total_steps = 5_000;
    cfg.sac.warmup_steps = 1_000;
    cfg.eval_episodes = 20;
    cfg.out_dir = dir.path().to_path_buf();
    let (runs, _) = cmd_train(&cfg, 1, false).unwrap();
    let layout: &RunLayout = &runs[0].layout;
    cmd_distill(&layout.final_checkpoint(), &layout.replay_states(), cfg.distill_depth, &layout.distill()).unwrap();
    cmd_interpret(&layout.final_checkpoint(), cfg.threshold, &layout.report()).unwrap();
    let elapsed = start.elapsed();

    let mut expected = vec![layout.config(), layout.final_checkpoint(), layout.metrics(), layout.replay_states(), layout.eval()];
    expected.push(layout.distill().join("fidelity.csv"));
    expected.push(layout.distill().join("distillation.json"));
    expected.push(layout.report().join("report.md"));
    expected.push(layout.report().join("equations.json"));
    expected.push(layout.report().join("heatmap_router.csv"));
    for m in 0..4 {
        expected.push(layout.distill().join(format!("{}.json", tree_stem(m))));
        expected.push(layout.distill().join(format!("{}.txt", tree_stem(m))));
        expected.push(layout.report().join(format!("heatmap_expert_{}.csv", m + 1)));
    }
    let missing: Vec<String> = expected.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    let report = std::fs::read_to_string(layout.report().join("report.md")).unwrap_or_default();
    let complete = missing.is_empty() && report.contains("## Expert 4") && report.contains("Decision tree");
    let pass = complete && elapsed < Duration::from_secs(120);
    verdict(
        10,
        "end-to-end smoke (point mass, 5k steps)",
        pass,
        &format!("{} files checked, missing {:?}; {:.1}s", expected.len(), missing, elapsed.as_secs_f64()),
    );
    assert!(pass);
}
