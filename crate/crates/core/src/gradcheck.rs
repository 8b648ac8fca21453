//! Central finite differences for checking analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Numerical gradient of a scalar function at `x` by central differences.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `max|a−b| / max(max|a|, max|b|)`, with a tiny floor so all-zero pairs compare as 0.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-10);
    a.max_abs_diff(b) / scale
}

/// Compares the reverse-mode gradient of `Σ f(inputs) ⊙ weights` against
/// central differences for every input and returns the worst relative error.
/// `weights` must match the output shape; `None` weights every entry by 1.
pub fn graph_gradient_error<F>(inputs: &[Tensor], weights: Option<&Tensor>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], params: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| if params { g.param(x.clone()) } else { g.constant(x.clone()) })
            .collect();
        let out = f(&mut g, &vars)?;
        let loss = match weights {
            Some(w) => {
                let w = g.constant(w.clone());
                let prod = g.mul(out, w)?;
                g.sum(prod)
            }
            None => g.sum(out),
        };
        Ok((g, vars, loss))
    };
    let (mut g, vars, loss) = eval(inputs, true)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v);
        let err = std::cell::RefCell::new(None);
        let numeric = central_difference(
            |x| {
                let mut xs = inputs.to_vec();
                xs[k] = x.clone();
                match eval(&xs, false) {
                    Ok((g, _, l)) => g.value(l).item(),
                    Err(e) => {
                        err.borrow_mut().get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &inputs[k],
            FD_STEP,
        );
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn differentiates_cubic() {
        let x = Tensor::vector(vec![0.5, -2.0]);
        let g = central_difference(|t| t.data().iter().map(|v| v * v * v).sum(), &x, FD_STEP);
        let exact = Tensor::vector(vec![0.75, 12.0]);
        assert!(relative_error(&g, &exact) < 1e-9);
    }
}
