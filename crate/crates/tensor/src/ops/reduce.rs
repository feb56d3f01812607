use crate::error::{invalid, shape_err, Result};
use crate::graph::{Backward, BackwardCtx, Graph, InputGrads, Var};
use crate::tensor::Tensor;

struct FillRule {
    len: usize,
    factor: f32,
}

impl Backward for FillRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        Ok(vec![Some(vec![ctx.grad_output()[0] * self.factor; self.len])])
    }
}

struct L2NormRule {
    dim: usize,
    norms: Vec<f32>,
}

impl Backward for L2NormRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let (y, g) = (ctx.output().data(), ctx.grad_output());
        let mut dx = vec![0.0; y.len()];
        for (r, &norm) in self.norms.iter().enumerate() {
            let row = r * self.dim..(r + 1) * self.dim;
            let dot: f32 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
            for i in row {
                dx[i] = (g[i] - y[i] * dot) / norm;
            }
        }
        Ok(vec![Some(dx)])
    }
}

impl Graph {
    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = self.try_value(x)?;
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let len = t.numel();
        self.record("sum", &[x], Tensor::scalar(s as f32), FillRule { len, factor: 1.0 })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.try_value(x)?;
        let len = t.numel();
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let factor = 1.0 / len as f32;
        self.record("mean", &[x], Tensor::scalar((s / len as f64) as f32), FillRule { len, factor })
    }

    /// Scales every row of `[N,D]` to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.try_value(x)?;
        let &[n, d] = t.shape() else {
            return Err(shape_err("l2_normalize", format!("expected [N,D], got {:?}", t.shape())));
        };
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in t.data().chunks(d) {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
            if norm <= f32::MIN_POSITIVE {
                return Err(invalid("l2_normalize", "zero-norm row"));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let out = Tensor::from_parts(vec![n, d], out);
        self.record("l2_normalize", &[x], out, L2NormRule { dim: d, norms })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = g.sum(x).unwrap();
        assert_eq!(g.value(s).data(), &[-0.5]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, -1.0, 0.0]).unwrap());
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, -1.0, 0.0]);
        let z = g.constant(Tensor::zeros(&[1, 2]));
        assert!(g.l2_normalize(z).is_err());
    }
}
