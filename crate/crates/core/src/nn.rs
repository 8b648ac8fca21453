//! Multilayer perceptrons, orthogonal initialization and first-order optimizers.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ApexError, Result};
use crate::graph::{Graph, Var};
use crate::rng::{rng, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ApexError::invalid("an MLP needs at least one layer"));
        }
        let mut prev_out = None;
        for (i, l) in layers.iter().enumerate() {
            let (out, inp) = l.weight.dims2()?;
            if l.bias.shape() != [out] {
                return Err(ApexError::shape(
                    "MlpParams::new",
                    format!("layer {i}: bias {:?} for {out} outputs", l.bias.shape()),
                ));
            }
            if let Some(p) = prev_out {
                if p != inp {
                    return Err(ApexError::shape(
                        "MlpParams::new",
                        format!("layer {i} takes {inp} inputs but previous layer emits {p}"),
                    ));
                }
            }
            prev_out = Some(out);
        }
        Ok(Self { layers })
    }

    /// Random MLP over `sizes` (input, hidden..., output): ReLU on hidden
    /// layers, linear output. `zero_last` zeroes the final layer.
    pub fn init(sizes: &[usize], zero_last: bool, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ApexError::invalid(format!("bad MLP sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (inp, out) = (sizes[i], sizes[i + 1]);
                let last = i == n - 1;
                let activation = if last { Activation::Linear } else { Activation::Relu };
                let weight = if last && zero_last {
                    Tensor::zeros(vec![out, inp])
                } else {
                    // He-uniform for ReLU layers, LeCun-uniform for the linear head.
                    let gain = if last { 3.0 } else { 6.0 };
                    let bound = (gain / inp as f64).sqrt();
                    let data = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::from_parts(vec![out, inp], data)
                };
                Layer {
                    weight,
                    bias: Tensor::zeros(vec![out]),
                    activation,
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[0]
    }

    /// Weight and bias tensors in layer order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        self.bind_with(g, true)
    }

    /// Registers parameters as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundMlp {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                };
                (w, b, l.activation)
            })
            .collect();
        BoundMlp { layers }
    }

    /// Plain evaluation of a single input vector, no graph.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(ApexError::shape(
                "mlp_forward",
                format!("input of {} for {} features", x.len(), self.input_dim()),
            ));
        }
        let mut h = x.to_vec();
        for l in &self.layers {
            let (out, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
            let w = l.weight.data();
            h = (0..out)
                .map(|o| {
                    let s: f64 = w[o * inp..(o + 1) * inp].iter().zip(&h).map(|(a, b)| a * b).sum();
                    let v = s + l.bias.data()[o];
                    match l.activation {
                        Activation::Linear => v,
                        Activation::Relu => v.max(0.0),
                    }
                })
                .collect();
        }
        Ok(h)
    }
}

/// Graph handles for one MLP's parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    /// Applies the network to `x`, either `[in]` or a batch `[n × in]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let in_dim = g.value(self.layers[0].0).shape()[1];
        let xs = g.value(x).shape().to_vec();
        if xs.last() != Some(&in_dim) || xs.len() > 2 {
            return Err(ApexError::shape(
                "mlp_forward",
                format!("input shape {xs:?} for {in_dim} features"),
            ));
        }
        let single = xs.len() == 1;
        let mut h = if single { g.reshape(x, vec![1, in_dim])? } else { x };
        for &(w, b, act) in &self.layers {
            let wt = g.transpose(w)?;
            let z = g.matmul(h, wt)?;
            let z = g.add_bias(z, b)?;
            h = match act {
                Activation::Linear => z,
                Activation::Relu => g.relu(z),
            };
        }
        if single {
            let out = g.value(h).shape()[1];
            h = g.reshape(h, vec![out])?;
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }

    /// Gradients in the same order as [`MlpParams::tensors`].
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| g.grad(v)).collect()
    }
}

/// Convenience wrapper: bind `params` as trainable and apply them to `x`.
pub fn mlp_forward(g: &mut Graph, params: &MlpParams, x: Var) -> Result<(Var, BoundMlp)> {
    let bound = params.bind(g);
    let y = bound.forward(g, x)?;
    Ok((y, bound))
}

/// `j` unit rows of length `k`, pairwise orthogonal.
///
/// With `allow_blocks`, `j > k` is served by stacking independent orthonormal
/// blocks of at most `k` rows; rows from different blocks are unconstrained.
pub fn orthogonal_rows(j: usize, k: usize, seed: u64, allow_blocks: bool) -> Result<Tensor> {
    if j == 0 || k == 0 {
        return Err(ApexError::invalid("orthogonal_rows needs j, k >= 1"));
    }
    if j > k && !allow_blocks {
        return Err(ApexError::invalid(format!(
            "cannot fit {j} orthonormal rows in dimension {k} without block fallback"
        )));
    }
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(j * k);
    let mut remaining = j;
    while remaining > 0 {
        let rows = remaining.min(k);
        data.extend(orthonormal_block(rows, k, &mut r));
        remaining -= rows;
    }
    Ok(Tensor::from_parts(vec![j, k], data))
}

fn orthonormal_block(rows: usize, k: usize, r: &mut Rng) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(rows * k);
    let mut i = 0;
    while i < rows {
        let mut v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(r)).collect();
        // Modified Gram-Schmidt, applied twice for numerical orthogonality.
        for _ in 0..2 {
            for prev in out.chunks_exact(k) {
                let d: f64 = prev.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= d * p;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue; // resample a numerically dependent draw
        }
        out.extend(v.iter().map(|x| x / n));
        i += 1;
    }
    out
}

fn check_update(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(ApexError::shape(
            "sgd_step",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(ApexError::shape(
                "sgd_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(ApexError::TrainingDiverged(format!(
                "non-finite gradient for parameter {i}"
            )));
        }
    }
    Ok(())
}

/// `p ← p − η·g` for every parameter. Nothing is modified on error.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], eta: f64) -> Result<()> {
    check_update(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= eta * d;
        }
    }
    Ok(())
}

/// Adam state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], eta: f64) -> Result<()> {
        check_update(params, grads)?;
        if params.len() != self.m.len() {
            return Err(ApexError::shape("adam", "parameter count changed"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                *x -= eta * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
