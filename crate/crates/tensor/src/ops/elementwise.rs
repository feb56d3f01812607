use crate::error::{shape_err, Result};
use crate::graph::{Backward, BackwardCtx, Graph, InputGrads, Var};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

struct BinaryRule(BinaryOp);

impl Backward for BinaryRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let g = ctx.grad_output();
        Ok(match self.0 {
            BinaryOp::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            BinaryOp::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())],
            BinaryOp::Mul => {
                let (a, b) = (ctx.input(0).data(), ctx.input(1).data());
                vec![
                    ctx.needs_grad(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    ctx.needs_grad(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
        })
    }
}

struct ScaleRule(f32);

impl Backward for ScaleRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        Ok(vec![Some(ctx.grad_output().iter().map(|g| g * self.0).collect())])
    }
}

struct PassRule;

impl Backward for PassRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        Ok(vec![Some(ctx.grad_output().to_vec())])
    }
}

struct ReluRule;

impl Backward for ReluRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let x = ctx.input(0).data();
        Ok(vec![Some(ctx.grad_output().iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())])
    }
}

struct SigmoidRule;

impl Backward for SigmoidRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let y = ctx.output().data();
        Ok(vec![Some(ctx.grad_output().iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())])
    }
}

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.try_value(a)?, self.try_value(b)?);
        if ta.shape() != tb.shape() {
            return Err(shape_err("elementwise", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let f: fn(f32, f32) -> f32 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        self.record(name, &[a, b], out, BinaryRule(op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let t = self.try_value(a)?;
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect());
        self.record("scale", &[a], out, ScaleRule(factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let t = self.try_value(a)?;
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect());
        self.record("add_scalar", &[a], out, PassRule)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.try_value(a)?;
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x.max(0.0)).collect());
        self.record("relu", &[a], out, ReluRule)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.try_value(a)?;
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| sigmoid_scalar(x)).collect());
        self.record("sigmoid", &[a], out, SigmoidRule)
    }

    /// Elementwise square, `a ⊙ a`.
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn add_and_its_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1.0, 2.0]), true);
        let b = g.constant(t(&[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.wrt(b).is_none());
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 2.0]), true);
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
        assert!(g.is_empty());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1.0, 2.0]));
        let b = g.constant(t(&[1.0]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(t(&[f32::MAX]));
        assert!(matches!(g.scale(a, 10.0), Err(crate::TensorError::NonFinite { op: "scale" })));
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1.0, 2.0]), true);
        assert!(matches!(g.backward(a), Err(crate::TensorError::NonScalarLoss(_))));
        let c = g.constant(t(&[1.0]));
        assert!(matches!(g.backward(c), Err(crate::TensorError::DetachedLoss)));
    }
}
