use crate::error::{shape_err, Result};
use crate::gemm::gemm;
use crate::graph::{Backward, BackwardCtx, Graph, InputGrads, Var};
use crate::tensor::Tensor;

struct MatMulRule {
    m: usize,
    k: usize,
    n: usize,
}

impl MatMulRule {
    fn grads(&self, ctx: &BackwardCtx<'_>) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
        let Self { m, k, n } = *self;
        let g = ctx.grad_output();
        let da = ctx.needs_grad(0).then(|| {
            let mut da = vec![0.0; m * k];
            gemm(m, n, k, g, false, ctx.input(1).data(), true, &mut da, false);
            da
        });
        let db = ctx.needs_grad(1).then(|| {
            let mut db = vec![0.0; k * n];
            gemm(k, m, n, ctx.input(0).data(), true, g, false, &mut db, false);
            db
        });
        (da, db)
    }
}

impl Backward for MatMulRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let (da, db) = self.grads(ctx);
        Ok(vec![da, db])
    }
}

struct LinearRule(MatMulRule);

impl Backward for LinearRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let (dx, dw) = self.0.grads(ctx);
        let n = self.0.n;
        let db = ctx.needs_grad(2).then(|| {
            let mut db = vec![0.0f64; n];
            for row in ctx.grad_output().chunks(n) {
                db.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64);
            }
            db.into_iter().map(|v| v as f32).collect()
        });
        Ok(vec![dx, dw, db])
    }
}

fn matmul_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err(op, format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

impl Graph {
    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.try_value(a)?, self.try_value(b)?);
        let (m, k, n) = matmul_dims("matmul", ta, tb)?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let out = Tensor::from_parts(vec![m, n], out);
        self.record("matmul", &[a, b], out, MatMulRule { m, k, n })
    }

    /// Fully connected layer `x·W + b` with `x: [B,I]`, `W: [I,O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.try_value(x)?, self.try_value(w)?, self.try_value(b)?);
        let (m, k, n) = matmul_dims("linear", tx, tw)?;
        if tb.shape() != [n] {
            return Err(shape_err("linear", format!("bias {:?} for {n} outputs", tb.shape())));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(m, k, n, tx.data(), false, tw.data(), false, &mut out, true);
        let out = Tensor::from_parts(vec![m, n], out);
        self.record("linear", &[x, w, b], out, LinearRule(MatMulRule { m, k, n }))
    }
}
