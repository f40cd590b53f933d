use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{affine_into, Tensor};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply_in_place(self, xs: &mut [f64]) {
        match self {
            Activation::Tanh => super::math::tanh_in_place(xs),
            Activation::Relu => xs.iter_mut().for_each(|x| *x = x.max(0.0)),
        }
    }
}

/// Fully connected network with one activation per hidden layer and a
/// linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Graph handles for one [`MlpParams`] instance.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    weights: Vec<Var>,
    biases: Vec<Var>,
    activations: Vec<Activation>,
}

impl MlpParams {
    /// `widths = [n_in, hidden.., n_out]`; weights and biases drawn
    /// uniformly from `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(AutodiffError::Usage { detail: "mlp needs >= 2 non-zero layer widths" });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let bound = 1.0 / libm::sqrt(n_in as f64);
            let w: Vec<f64> = (0..n_in * n_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..n_out).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(Tensor::matrix(n_out, n_in, w)?);
            biases.push(Tensor::vector(b));
        }
        Ok(Self {
            widths: widths.to_vec(),
            activations: vec![activation; widths.len() - 2],
            weights,
            biases,
        })
    }

    /// Builds from explicit layers, checking dimension compatibility.
    pub fn from_layers(
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        activations: Vec<Activation>,
    ) -> Result<Self, AutodiffError> {
        if weights.is_empty() || weights.len() != biases.len() || activations.len() + 1 != weights.len() {
            return Err(AutodiffError::Usage { detail: "mlp layer lists disagree in length" });
        }
        let mut widths = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.cols() != *widths.last().unwrap() || b.len() != w.rows() {
                return Err(AutodiffError::Shape {
                    op: "mlp",
                    detail: alloc::format!("layer {:?} does not follow width {}", w.shape(), widths.last().unwrap()),
                });
            }
            widths.push(w.rows());
        }
        Ok(Self { widths, activations, weights, biases })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `Σ_l (in_l·out_l + out_l)`
    pub fn analytic_param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    /// Parameter tensors in `[w0, b0, w1, b1, ..]` order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Records the parameters on `graph`, tracked or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Result<BoundMlp, AutodiffError> {
        let leaf = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            weights.push(leaf(graph, w)?);
            biases.push(leaf(graph, b)?);
        }
        Ok(BoundMlp { weights, biases, activations: self.activations.clone() })
    }

    /// Graph-free forward pass over a `[batch × n_in]` matrix.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        if x.cols() != self.input_dim() {
            return Err(AutodiffError::Shape {
                op: "mlp_forward",
                detail: alloc::format!("input {:?}, expected {} columns", x.shape(), self.input_dim()),
            });
        }
        let batch = x.rows();
        let mut h = x.values().to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (n_in, n_out) = (w.cols(), w.rows());
            let mut out = vec![0.0; batch * n_out];
            affine_into(&h, n_in, w.values(), n_out, Some(b.values()), &mut out);
            if let Some(act) = self.activations.get(l) {
                act.apply_in_place(&mut out);
            }
            h = out;
        }
        Tensor::matrix(batch, self.output_dim(), h)
    }

    /// Gradients accumulated for `bound`, in [`MlpParams::tensors`] order.
    pub fn grads<'g>(&self, graph: &'g Graph, bound: &BoundMlp) -> Vec<Option<&'g [f64]>> {
        bound.weights.iter().zip(&bound.biases).flat_map(|(w, b)| [graph.grad(*w), graph.grad(*b)]).collect()
    }

    /// `self ← (1 − tau)·self + tau·online`
    pub fn polyak_from(&mut self, online: &MlpParams, tau: f64) {
        for (t, o) in self.tensors_mut().into_iter().zip(online.tensors()) {
            for (a, b) in t.values_mut().iter_mut().zip(o.values()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }
}

impl BoundMlp {
    pub fn forward(&self, graph: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
        let mut h = x;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = graph.affine(h, *w, Some(*b))?;
            h = match self.activations.get(l) {
                Some(Activation::Tanh) => graph.tanh(h),
                Some(Activation::Relu) => graph.relu(h),
                None => h,
            };
        }
        Ok(h)
    }
}
