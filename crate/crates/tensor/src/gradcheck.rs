//! Central finite-difference checking of recorded backward rules.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_error: f64,
    /// `(input, element)` where `max_error` occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Deterministic projection weights in `[-1, 1]`, used to reduce a
/// tensor-valued output to a scalar.
fn projection(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i as f32 * 0.7548) + 0.31).sin()).collect()
}

/// `Σ w·(plus − minus)`, differenced per element so that outputs untouched by
/// the perturbation cancel exactly instead of adding rounding noise.
fn projected_difference(plus: &Tensor, minus: &Tensor, w: &[f32]) -> f64 {
    plus.data().iter().zip(minus.data()).zip(w).map(|((&p, &m), &w)| (p as f64 - m as f64) * w as f64).sum()
}

/// Compares the backward pass of `f` against central differences with step
/// `h`. `f` receives one leaf per input; its output may have any shape and is
/// projected onto fixed weights to form the scalar objective.
pub fn check_gradients<F>(inputs: &[Tensor], h: f32, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let w = projection(g.value(out).numel());
    let shape = g.shape(out).to_vec();
    let wv = g.constant(Tensor::new(&shape, w.clone())?);
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };

    let mut report = GradCheckReport { max_error: 0.0, worst: None, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            let (hi, lo) = (orig + h, orig - h);
            work[i].data_mut()[j] = hi;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = lo;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // The step actually taken after rounding to f32.
            let step = hi as f64 - lo as f64;
            let numeric = projected_difference(&plus, &minus, &w) / step;
            let a = analytic[j] as f64;
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_error || report.worst.is_none() {
                report.max_error = err;
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
