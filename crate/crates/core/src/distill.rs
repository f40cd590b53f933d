//! Router distillation into shallow axis-aligned decision trees.
//!
//! States are labeled with the expert the trained router selects, split into
//! one class-rebalanced "expert m vs. rest" problem per expert, and each
//! problem is fitted with a depth-bounded CART tree over raw observations.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::policy::{PolicyError, PolicyParams};
use crate::rng;

/// Splits whose Gini decrease falls below this are rejected.
pub const MIN_IMPURITY_DECREASE: f64 = 1e-7;
/// Smallest leaf, as a fraction of the total training weight.
pub const MIN_LEAF_FRACTION: f64 = 0.01;
pub const DEFAULT_HELDOUT_FRACTION: f64 = 0.2;
pub const DEFAULT_DEPTH: usize = 3;
/// Candidate splits closer than this in impurity decrease count as tied.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistillError {
    #[error("empty dataset")]
    Empty,
    #[error("expert index {index} out of range for {n_experts} experts")]
    ExpertIndex { index: usize, n_experts: usize },
    #[error("max depth must be at least 1")]
    Depth,
    #[error("held-out fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("state dimension {got} does not match {expected}")]
    Shape { expected: usize, got: usize },
    #[error("invalid tree: {0}")]
    InvalidTree(&'static str),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// States with the expert index the router assigns to each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    state_dim: usize,
    n_classes: usize,
    states: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(state_dim: usize, n_classes: usize, states: Vec<f64>, labels: Vec<usize>) -> Result<Self, DistillError> {
        if state_dim == 0 || states.len() != labels.len() * state_dim {
            return Err(DistillError::Shape { expected: labels.len() * state_dim, got: states.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DistillError::ExpertIndex { index: bad, n_experts: n_classes });
        }
        Ok(Self { state_dim, n_classes, states, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of states per expert.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = alloc::vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn subset(&self, idx: &[usize]) -> Self {
        let mut states = Vec::with_capacity(idx.len() * self.state_dim);
        for &i in idx {
            states.extend_from_slice(self.state(i));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self { state_dim: self.state_dim, n_classes: self.n_classes, states, labels }
    }

    /// Seeded train/held-out split; both parts keep the original order.
    pub fn split(&self, heldout_fraction: f64, seed: u64) -> Result<(Self, Self), DistillError> {
        if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
            return Err(DistillError::Fraction(heldout_fraction));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, rng::STREAM_SPLIT));
        let n_held = libm::round(n as f64 * heldout_fraction) as usize;
        let mut held = alloc::vec![false; n];
        for &i in &order[..n_held] {
            held[i] = true;
        }
        let (h, t): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| held[i]);
        Ok((self.subset(&t), self.subset(&h)))
    }
}

/// Labels every row of `states` (`[N × n_s]`) with its noise-free route.
pub fn label_states(params: &PolicyParams, states: &Tensor) -> Result<LabeledDataset, DistillError> {
    if states.rows() == 0 {
        return Err(DistillError::Empty);
    }
    if states.cols() != params.state_dim() {
        return Err(DistillError::Shape { expected: params.state_dim(), got: states.cols() });
    }
    let labels = (0..states.rows())
        .map(|r| params.route_clean(states.row(r)).map(|g| g.selected))
        .collect::<Result<Vec<_>, _>>()?;
    LabeledDataset::new(params.state_dim(), params.n_experts(), states.values().to_vec(), labels)
}

/// Labels the states stored in a replay buffer.
pub fn label_buffer(buffer: &crate::sac::ReplayBuffer, params: &PolicyParams) -> Result<LabeledDataset, DistillError> {
    if buffer.is_empty() {
        return Err(DistillError::Empty);
    }
    label_states(params, &buffer.states())
}

/// One-vs-rest problem for a single expert with class-balancing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryDataset {
    state_dim: usize,
    states: Vec<f64>,
    labels: Vec<bool>,
    weights: Vec<f64>,
    /// Set when one of the two classes has no members.
    pub degenerate: bool,
}

impl BinaryDataset {
    /// Weights each sample by `N / (2·N_c)` for its class `c`.
    pub fn new(state_dim: usize, states: Vec<f64>, labels: Vec<bool>) -> Result<Self, DistillError> {
        if labels.is_empty() {
            return Err(DistillError::Empty);
        }
        if state_dim == 0 || states.len() != labels.len() * state_dim {
            return Err(DistillError::Shape { expected: labels.len() * state_dim, got: states.len() });
        }
        let n = labels.len() as f64;
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let n_neg = n - n_pos;
        let w_pos = if n_pos > 0.0 { n / (2.0 * n_pos) } else { 0.0 };
        let w_neg = if n_neg > 0.0 { n / (2.0 * n_neg) } else { 0.0 };
        let weights = labels.iter().map(|&l| if l { w_pos } else { w_neg }).collect();
        Ok(Self { state_dim, states, labels, weights, degenerate: n_pos == 0.0 || n_neg == 0.0 })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Expert `m` against all other experts.
pub fn binarize(dataset: &LabeledDataset, m: usize) -> Result<BinaryDataset, DistillError> {
    if m >= dataset.n_classes() {
        return Err(DistillError::ExpertIndex { index: m, n_experts: dataset.n_classes() });
    }
    let labels = dataset.labels().iter().map(|&l| l == m).collect();
    BinaryDataset::new(dataset.state_dim(), dataset.states.clone(), labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    /// Samples with `state[feature] ≤ threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { class: u8, counts: [usize; 2], weights: [f64; 2] },
}

/// Binary axis-aligned tree; `nodes[0]` is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub max_depth: usize,
    pub n_features: usize,
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    /// Checks indices, depth and leaf classes, e.g. after deserializing.
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.nodes.is_empty() {
            return Err(DistillError::InvalidTree("no nodes"));
        }
        let mut seen = alloc::vec![false; self.nodes.len()];
        let mut stack = alloc::vec![(0usize, 0usize)];
        while let Some((i, depth)) = stack.pop() {
            if i >= self.nodes.len() || seen[i] {
                return Err(DistillError::InvalidTree("bad child index"));
            }
            seen[i] = true;
            match self.nodes[i] {
                TreeNode::Split { feature, threshold, left, right } => {
                    if feature >= self.n_features || !threshold.is_finite() {
                        return Err(DistillError::InvalidTree("bad split"));
                    }
                    if depth >= self.max_depth {
                        return Err(DistillError::InvalidTree("deeper than max_depth"));
                    }
                    stack.push((left, depth + 1));
                    stack.push((right, depth + 1));
                }
                TreeNode::Leaf { class, .. } if class > 1 => return Err(DistillError::InvalidTree("leaf class")),
                TreeNode::Leaf { .. } => {}
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(DistillError::InvalidTree("unreachable node"));
        }
        Ok(())
    }

    pub fn predict(&self, state: &[f64]) -> bool {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if state[feature] <= threshold { left } else { right };
                }
                TreeNode::Leaf { class, .. } => return class == 1,
            }
        }
    }

    /// Length of the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Indented if/else rules naming features and the positive class.
    pub fn rules(&self, feature_names: &[String], positive: &str) -> String {
        let mut out = String::new();
        self.write_rules(0, 0, feature_names, positive, &mut out);
        out
    }

    fn write_rules(&self, i: usize, indent: usize, names: &[String], positive: &str, out: &mut String) {
        let pad = "  ".repeat(indent);
        match &self.nodes[i] {
            TreeNode::Split { feature, threshold, left, right } => {
                let name = names.get(*feature).map_or_else(|| alloc::format!("x[{feature}]"), Clone::clone);
                let _ = writeln!(out, "{pad}if {name} ≤ {threshold:.4}:");
                self.write_rules(*left, indent + 1, names, positive, out);
                let _ = writeln!(out, "{pad}else:  # {name} > {threshold:.4}");
                self.write_rules(*right, indent + 1, names, positive, out);
            }
            TreeNode::Leaf { class, counts, .. } => {
                let verdict = if *class == 1 { alloc::format!("{positive}") } else { alloc::format!("not {positive}") };
                let _ = writeln!(out, "{pad}then {verdict}  (n = {}, {} positive)", counts[0] + counts[1], counts[1]);
            }
        }
    }
}

fn gini(w0: f64, w1: f64) -> f64 {
    let w = w0 + w1;
    if w <= 0.0 {
        return 0.0;
    }
    let (p0, p1) = (w0 / w, w1 / w);
    1.0 - p0 * p0 - p1 * p1
}

/// Best split of `idx`: `(feature, threshold, decrease)`.
struct Candidate {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

/// Midpoint that stays strictly below `hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let t = lo + (hi - lo) / 2.0;
    if t >= hi {
        lo
    } else {
        t
    }
}

fn best_split(data: &BinaryDataset, idx: &[usize], min_leaf: f64) -> Option<Candidate> {
    let mut totals = [0.0; 2];
    for &i in idx {
        totals[data.labels[i] as usize] += data.weights[i];
    }
    let w_node = totals[0] + totals[1];
    let parent = gini(totals[0], totals[1]);
    let mut best: Option<Candidate> = None;
    let mut order = idx.to_vec();
    for f in 0..data.state_dim {
        order.sort_by(|&a, &b| data.state(a)[f].total_cmp(&data.state(b)[f]));
        let mut left = [0.0; 2];
        for k in 0..order.len() - 1 {
            let i = order[k];
            left[data.labels[i] as usize] += data.weights[i];
            let (lo, hi) = (data.state(i)[f], data.state(order[k + 1])[f]);
            if lo == hi {
                continue;
            }
            let right = [totals[0] - left[0], totals[1] - left[1]];
            let (wl, wr) = (left[0] + left[1], right[0] + right[1]);
            if wl < min_leaf || wr < min_leaf {
                continue;
            }
            let child = (wl * gini(left[0], left[1]) + wr * gini(right[0], right[1])) / w_node;
            let decrease = parent - child;
            if best.as_ref().is_none_or(|b| decrease > b.decrease + TIE_EPS) {
                best = Some(Candidate { feature: f, threshold: midpoint(lo, hi), decrease });
            }
        }
    }
    best.filter(|b| b.decrease >= MIN_IMPURITY_DECREASE)
}

fn leaf(data: &BinaryDataset, idx: &[usize]) -> TreeNode {
    let mut counts = [0usize; 2];
    let mut weights = [0.0; 2];
    for &i in idx {
        let c = data.labels[i] as usize;
        counts[c] += 1;
        weights[c] += data.weights[i];
    }
    TreeNode::Leaf { class: u8::from(weights[1] > weights[0]), counts, weights }
}

fn grow(data: &BinaryDataset, idx: &[usize], depth: usize, max_depth: usize, min_leaf: f64, nodes: &mut Vec<TreeNode>) -> usize {
    let at = nodes.len();
    nodes.push(leaf(data, idx));
    if depth >= max_depth {
        return at;
    }
    let Some(c) = best_split(data, idx, min_leaf) else {
        return at;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| data.state(i)[c.feature] <= c.threshold);
    let left = grow(data, &l, depth + 1, max_depth, min_leaf, nodes);
    let right = grow(data, &r, depth + 1, max_depth, min_leaf, nodes);
    nodes[at] = TreeNode::Split { feature: c.feature, threshold: c.threshold, left, right };
    at
}

/// Greedy weighted-Gini CART limited to `max_depth` levels of splits.
///
/// Ties between candidate splits go to the lowest feature index, then the
/// lowest threshold.
pub fn fit_cart(data: &BinaryDataset, max_depth: usize) -> Result<DecisionTree, DistillError> {
    if max_depth == 0 {
        return Err(DistillError::Depth);
    }
    if data.is_empty() {
        return Err(DistillError::Empty);
    }
    let total: f64 = data.weights.iter().sum();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut nodes = Vec::new();
    grow(data, &idx, 0, max_depth, MIN_LEAF_FRACTION * total, &mut nodes);
    Ok(DecisionTree { max_depth, n_features: data.state_dim, nodes })
}

/// One distilled tree per expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistilledExpert {
    pub expert: usize,
    pub tree: DecisionTree,
    /// The expert was never (or always) selected in the training data.
    pub degenerate: bool,
}

pub fn distill(dataset: &LabeledDataset, max_depth: usize) -> Result<Vec<DistilledExpert>, DistillError> {
    (0..dataset.n_classes())
        .map(|m| {
            let data = binarize(dataset, m)?;
            let tree = fit_cart(&data, max_depth)?;
            Ok(DistilledExpert { expert: m, tree, degenerate: data.degenerate })
        })
        .collect()
}

/// Held-out agreement of one expert's tree with the router.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFidelity {
    pub expert: usize,
    /// `confusion[actual][predicted]`, class 1 meaning "expert selected".
    pub confusion: [[usize; 2]; 2],
    /// Mean recall over the classes present in the held-out set.
    pub balanced_accuracy: f64,
}

pub fn balanced_accuracy(confusion: &[[usize; 2]; 2]) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for (c, row) in confusion.iter().enumerate() {
        let n = row[0] + row[1];
        if n > 0 {
            sum += row[c] as f64 / n as f64;
            present += 1;
        }
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

pub fn fidelity(trees: &[DecisionTree], heldout: &LabeledDataset) -> Result<Vec<ExpertFidelity>, DistillError> {
    if heldout.is_empty() {
        return Err(DistillError::Empty);
    }
    trees
        .iter()
        .enumerate()
        .map(|(m, tree)| {
            if tree.n_features != heldout.state_dim() {
                return Err(DistillError::Shape { expected: heldout.state_dim(), got: tree.n_features });
            }
            let mut confusion = [[0usize; 2]; 2];
            for i in 0..heldout.len() {
                let actual = heldout.labels()[i] == m;
                confusion[actual as usize][tree.predict(heldout.state(i)) as usize] += 1;
            }
            Ok(ExpertFidelity { expert: m, confusion, balanced_accuracy: balanced_accuracy(&confusion) })
        })
        .collect()
}
