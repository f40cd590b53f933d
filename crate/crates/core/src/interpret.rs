//! Human-readable views of a trained policy: per-expert score and control
//! equations, coefficient matrices for heatmaps, and a markdown report.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::distill::{DistilledExpert, ExpertFidelity};
use crate::envs::EnvSpec;
use crate::policy::{ParamCount, PolicyParams};
use crate::sac::EpisodeRecord;

/// Coefficients smaller than this in magnitude are left out of equations.
pub const DEFAULT_THRESHOLD: f64 = 1.5;
/// Decimal places used when rendering coefficients for reading.
pub const DISPLAY_DECIMALS: usize = 1;

const MINUS: char = '−';

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterpretError {
    #[error("threshold must be finite and non-negative, got {0}")]
    Threshold(f64),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("run id mismatch: report is for `{expected}`, {what} is from `{got}`")]
    RunId { what: &'static str, expected: String, got: String },
    #[error("cannot parse equation: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub feature: String,
    pub index: usize,
    pub coefficient: f64,
}

/// `output ≈ Σ c_i·x_i` over the coefficients that survive the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearEquation {
    pub output: String,
    /// Retained terms, largest magnitude first.
    pub terms: Vec<Term>,
    pub threshold: f64,
    /// The full coefficient row, retained or not.
    pub coefficients: Vec<f64>,
}

impl LinearEquation {
    pub fn from_row(output: &str, row: &[f64], names: &[String], threshold: f64) -> Self {
        let mut terms: Vec<Term> = row
            .iter()
            .enumerate()
            .filter(|(_, c)| c.abs() >= threshold)
            .map(|(i, &c)| Term { feature: names[i].clone(), index: i, coefficient: c })
            .collect();
        terms.sort_by(|a, b| b.coefficient.abs().total_cmp(&a.coefficient.abs()).then(a.index.cmp(&b.index)));
        Self { output: output.to_string(), terms, threshold, coefficients: row.to_vec() }
    }

    /// Renders terms in observation order, e.g. `S_1 ≈ 2.7·y_T − 5.6·Δ_y`.
    ///
    /// `decimals = None` prints each coefficient in its shortest exact form.
    pub fn render(&self, decimals: Option<usize>) -> String {
        let mut ordered: Vec<&Term> = self.terms.iter().collect();
        ordered.sort_by_key(|t| t.index);
        let mut out = format!("{} ≈ ", self.output);
        if ordered.is_empty() {
            out.push('0');
            return out;
        }
        for (k, t) in ordered.iter().enumerate() {
            let negative = t.coefficient.is_sign_negative();
            let magnitude = match decimals {
                Some(d) => format!("{:.*}", d, t.coefficient.abs()),
                None => format!("{}", t.coefficient.abs()),
            };
            match (k, negative) {
                (0, false) => {}
                (0, true) => out.push(MINUS),
                (_, false) => out.push_str(" + "),
                (_, true) => {
                    out.push(' ');
                    out.push(MINUS);
                    out.push(' ');
                }
            }
            let _ = write!(out, "{magnitude}·{}", t.feature);
        }
        out
    }

    /// Value of the retained terms at `state`.
    pub fn evaluate(&self, state: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.coefficient * state[t.index]).sum()
    }

    /// Value of the full coefficient row at `state`.
    pub fn evaluate_full(&self, state: &[f64]) -> f64 {
        self.coefficients.iter().zip(state).map(|(c, s)| c * s).sum()
    }

    /// Largest possible gap between [`evaluate`](Self::evaluate) and the full
    /// row over states with `|x_i| ≤ bounds[i]`; at most `threshold·Σ bounds`
    /// over the dropped features.
    pub fn error_bound(&self, bounds: &[f64]) -> f64 {
        let mut kept = alloc::vec![false; self.coefficients.len()];
        for t in &self.terms {
            kept[t.index] = true;
        }
        self.coefficients.iter().zip(bounds).zip(&kept).filter(|(_, &k)| !k).map(|((c, b), _)| c.abs() * b).sum()
    }
}

/// Parses a rendered equation back into `(output, [(feature index, coefficient)])`.
pub fn parse_equation(text: &str, names: &[String]) -> Result<(String, Vec<(usize, f64)>), InterpretError> {
    let err = || InterpretError::Parse(text.to_string());
    let (output, rhs) = text.split_once(" ≈ ").ok_or_else(err)?;
    if rhs == "0" {
        return Ok((output.to_string(), Vec::new()));
    }
    let mut terms = Vec::new();
    let mut rest = rhs;
    let mut negative = false;
    if let Some(r) = rest.strip_prefix(MINUS) {
        negative = true;
        rest = r;
    }
    loop {
        let plus = rest.find(" + ");
        let minus = rest.find(" − ");
        let (term, next) = match (plus, minus) {
            (Some(p), Some(m)) if p < m => (&rest[..p], Some((false, &rest[p + 3..]))),
            (Some(p), None) => (&rest[..p], Some((false, &rest[p + 3..]))),
            (_, Some(m)) => (&rest[..m], Some((true, &rest[m + " − ".len()..]))),
            (None, None) => (rest, None),
        };
        let (coef, name) = term.split_once('·').ok_or_else(err)?;
        let magnitude: f64 = coef.parse().map_err(|_| err())?;
        let index = names.iter().position(|n| n == name).ok_or_else(err)?;
        terms.push((index, if negative { -magnitude } else { magnitude }));
        match next {
            Some((neg, r)) => {
                negative = neg;
                rest = r;
            }
            None => break,
        }
    }
    Ok((output.to_string(), terms))
}

/// Score and control equations of one expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertEquations {
    pub expert: usize,
    /// `S_m` from row `m` of the router.
    pub score: LinearEquation,
    /// One pre-squash equation per action dimension.
    pub controls: Vec<LinearEquation>,
}

fn check_spec(params: &PolicyParams, spec: &EnvSpec) -> Result<(), InterpretError> {
    let checks = [
        ("observation names", params.state_dim(), spec.observation_names.len()),
        ("action names", params.action_dim(), spec.action_names.len()),
    ];
    for (what, expected, got) in checks {
        if expected != got {
            return Err(InterpretError::Shape { what, expected, got });
        }
    }
    Ok(())
}

/// Expert numbers in equations and reports start at 1.
pub fn score_name(m: usize) -> String {
    format!("S_{}", m + 1)
}

pub fn extract_equations(params: &PolicyParams, spec: &EnvSpec, threshold: f64) -> Result<Vec<ExpertEquations>, InterpretError> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(InterpretError::Threshold(threshold));
    }
    check_spec(params, spec)?;
    let names = &spec.observation_names;
    Ok((0..params.n_experts())
        .map(|m| {
            let score = LinearEquation::from_row(&score_name(m), params.router().row(m), names, threshold);
            let w = params.expert_weights(m);
            let controls = (0..params.action_dim())
                .map(|j| LinearEquation::from_row(&spec.action_names[j], w.row(j), names, threshold))
                .collect();
            ExpertEquations { expert: m, score, controls }
        })
        .collect())
}

/// A labeled coefficient matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub name: String,
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
    /// Row-major, `row_names.len() × col_names.len()`.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.col_names.len() + c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.row_names.len(), self.col_names.len(), self.values.clone())
            .expect("heatmap dimensions are consistent")
    }
}

/// Router (`M × n_s`) followed by each expert (`n_a × n_s`).
pub fn heatmaps(params: &PolicyParams, spec: &EnvSpec) -> Result<Vec<Heatmap>, InterpretError> {
    check_spec(params, spec)?;
    let cols = spec.observation_names.clone();
    let mut out = Vec::with_capacity(params.n_experts() + 1);
    out.push(Heatmap {
        name: "router".to_string(),
        row_names: (0..params.n_experts()).map(score_name).collect(),
        col_names: cols.clone(),
        values: params.router().values().to_vec(),
    });
    for m in 0..params.n_experts() {
        out.push(Heatmap {
            name: format!("expert_{}", m + 1),
            row_names: spec.action_names.clone(),
            col_names: cols.clone(),
            values: params.expert_weights(m).values().to_vec(),
        });
    }
    Ok(out)
}

/// Largest magnitude of each feature over the rows of `states`.
pub fn feature_bounds(states: &Tensor) -> Vec<f64> {
    let mut b = alloc::vec![0.0f64; states.cols()];
    for r in 0..states.rows() {
        for (bi, x) in b.iter_mut().zip(states.row(r)) {
            *bi = bi.max(x.abs());
        }
    }
    b
}

/// Condensed learning curve for the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub run_id: String,
    pub episodes: usize,
    pub total_steps: usize,
    /// Mean return of the first and last ten episodes.
    pub early_return: f64,
    pub late_return: f64,
    pub best_return: f64,
    pub final_alpha: f64,
    /// Fraction of policy-driven steps routed to each expert.
    pub usage: Vec<f64>,
}

impl TrainingSummary {
    pub fn from_records(run_id: &str, records: &[EpisodeRecord], n_experts: usize) -> Self {
        let mean = |rs: &[EpisodeRecord]| {
            if rs.is_empty() {
                0.0
            } else {
                rs.iter().map(|r| r.episodic_return).sum::<f64>() / rs.len() as f64
            }
        };
        let k = records.len().min(10);
        let mut hist = alloc::vec![0u64; n_experts];
        for r in records {
            for (h, c) in hist.iter_mut().zip(&r.expert_histogram) {
                *h += c;
            }
        }
        let total: u64 = hist.iter().sum();
        let usage = hist.iter().map(|&h| if total == 0 { 0.0 } else { h as f64 / total as f64 }).collect();
        Self {
            run_id: run_id.to_string(),
            episodes: records.len(),
            total_steps: records.last().map_or(0, |r| r.step),
            early_return: mean(&records[..k]),
            late_return: mean(&records[records.len() - k..]),
            best_return: records.iter().map(|r| r.episodic_return).reduce(f64::max).unwrap_or(0.0),
            final_alpha: records.last().map_or(0.0, |r| r.alpha),
            usage,
        }
    }
}

/// Distilled trees with their held-out fidelity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationSummary {
    pub run_id: String,
    pub depth: usize,
    pub experts: Vec<DistilledExpert>,
    pub fidelity: Vec<ExpertFidelity>,
}

pub struct ReportInputs<'a> {
    pub run_id: &'a str,
    pub env: &'a EnvSpec,
    pub equations: &'a [ExpertEquations],
    pub counts: ParamCount,
    pub training: Option<&'a TrainingSummary>,
    pub distillation: Option<&'a DistillationSummary>,
    /// Per-feature magnitude bounds for the truncation error of each equation.
    pub feature_bounds: Option<&'a [f64]>,
}

fn bound_note(eq: &LinearEquation, bounds: Option<&[f64]>) -> String {
    match bounds {
        Some(b) => format!(" (dropped terms: |error| ≤ {:.3})", eq.error_bound(b)),
        None => String::new(),
    }
}

/// Assembles the markdown interpretation report.
pub fn render_report(inputs: &ReportInputs<'_>) -> Result<String, InterpretError> {
    let run_id = inputs.run_id;
    if let Some(t) = inputs.training.filter(|t| t.run_id != run_id) {
        return Err(InterpretError::RunId { what: "training summary", expected: run_id.to_string(), got: t.run_id.clone() });
    }
    if let Some(d) = inputs.distillation.filter(|d| d.run_id != run_id) {
        return Err(InterpretError::RunId { what: "distillation", expected: run_id.to_string(), got: d.run_id.clone() });
    }
    let threshold = inputs.equations.first().map_or(DEFAULT_THRESHOLD, |e| e.score.threshold);
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "# Policy interpretation: `{run_id}`\n");
    let _ = writeln!(w, "- environment: `{}` (n_s = {}, n_a = {})", inputs.env.name, inputs.env.state_dim, inputs.env.action_dim);
    let _ = writeln!(w, "- experts: {}", inputs.equations.len());
    let _ = writeln!(w, "- parameters: N_act = {}, N_tot = {}", inputs.counts.active, inputs.counts.total);
    let _ = writeln!(w, "- coefficients with |c| < {threshold} are omitted; values rounded to {DISPLAY_DECIMALS} decimal\n");

    let _ = writeln!(w, "## Training\n");
    match inputs.training {
        Some(t) => {
            let _ = writeln!(w, "| episodes | steps | first-10 return | last-10 return | best return | final α |");
            let _ = writeln!(w, "|---|---|---|---|---|---|");
            let _ = writeln!(
                w,
                "| {} | {} | {:.3} | {:.3} | {:.3} | {:.4} |\n",
                t.episodes, t.total_steps, t.early_return, t.late_return, t.best_return, t.final_alpha
            );
        }
        None => {
            let _ = writeln!(w, "_training metrics not available_\n");
        }
    }

    let fidelity_of = |m: usize| inputs.distillation.and_then(|d| d.fidelity.iter().find(|f| f.expert == m));
    if let Some(d) = inputs.distillation {
        let _ = writeln!(w, "## Distillation fidelity (depth {})\n", d.depth);
        let _ = writeln!(w, "| expert | balanced accuracy | TN | FP | FN | TP |");
        let _ = writeln!(w, "|---|---|---|---|---|---|");
        for f in &d.fidelity {
            let c = f.confusion;
            let _ = writeln!(w, "| {} | {:.4} | {} | {} | {} | {} |", f.expert + 1, f.balanced_accuracy, c[0][0], c[0][1], c[1][0], c[1][1]);
        }
        let _ = writeln!(w);
    }

    for eq in inputs.equations {
        let m = eq.expert;
        let _ = writeln!(w, "## Expert {}\n", m + 1);
        if let Some(t) = inputs.training {
            let u = t.usage.get(m).copied().unwrap_or(0.0);
            let _ = writeln!(w, "Usage during training: {:.1}%\n", 100.0 * u);
        }
        let _ = writeln!(w, "Score: `{}`{}\n", eq.score.render(Some(DISPLAY_DECIMALS)), bound_note(&eq.score, inputs.feature_bounds));
        let _ = writeln!(w, "Controls (before tanh squashing):\n");
        for c in &eq.controls {
            let _ = writeln!(w, "- `{}`{}", c.render(Some(DISPLAY_DECIMALS)), bound_note(c, inputs.feature_bounds));
        }
        let _ = writeln!(w);
        let tree = inputs.distillation.and_then(|d| d.experts.iter().find(|e| e.expert == m));
        match tree {
            Some(t) => {
                let _ = writeln!(w, "Decision tree:\n");
                if t.degenerate {
                    let _ = writeln!(w, "_one class was empty in the training split; the tree is constant_\n");
                }
                let _ = writeln!(w, "```text");
                let _ = write!(w, "{}", t.tree.rules(&inputs.env.observation_names, &format!("expert {}", m + 1)));
                let _ = writeln!(w, "```");
                if let Some(f) = fidelity_of(m) {
                    let _ = writeln!(w, "\nHeld-out balanced accuracy: {:.4}", f.balanced_accuracy);
                }
                let _ = writeln!(w);
            }
            None => {
                let _ = writeln!(w, "Decision tree: _distillation not run_\n");
            }
        }
    }
    Ok(out)
}
