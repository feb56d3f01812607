use crate::error::{invalid, shape_err, Result};
use crate::graph::{Backward, BackwardCtx, Graph, InputGrads, Var};
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `data` laid out as `shape` into the axis order `axes`.
fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

struct ReshapeRule;

impl Backward for ReshapeRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        Ok(vec![Some(ctx.grad_output().to_vec())])
    }
}

struct PermuteRule {
    out_shape: Vec<usize>,
    inverse: Vec<usize>,
}

impl Backward for PermuteRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let (_, g) = permute_data(ctx.grad_output(), &self.out_shape, &self.inverse);
        Ok(vec![Some(g)])
    }
}

/// Block copy geometry shared by concat and narrow: `outer` blocks, each
/// holding `inner`-sized rows along the chosen axis.
struct AxisBlocks {
    outer: usize,
    inner: usize,
}

impl AxisBlocks {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self { outer: shape[..axis].iter().product(), inner: shape[axis + 1..].iter().product() }
    }
}

struct ConcatRule {
    blocks: AxisBlocks,
    sizes: Vec<usize>,
}

impl Backward for ConcatRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let g = ctx.grad_output();
        let total: usize = self.sizes.iter().sum();
        let mut start = 0;
        let mut grads = Vec::with_capacity(self.sizes.len());
        for (i, &len) in self.sizes.iter().enumerate() {
            if !ctx.needs_grad(i) {
                grads.push(None);
            } else {
                let mut gi = Vec::with_capacity(self.blocks.outer * len * self.blocks.inner);
                for o in 0..self.blocks.outer {
                    let base = (o * total + start) * self.blocks.inner;
                    gi.extend_from_slice(&g[base..base + len * self.blocks.inner]);
                }
                grads.push(Some(gi));
            }
            start += len;
        }
        Ok(grads)
    }
}

struct NarrowRule {
    blocks: AxisBlocks,
    axis_len: usize,
    start: usize,
    len: usize,
}

impl Backward for NarrowRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let g = ctx.grad_output();
        let inner = self.blocks.inner;
        let mut dx = vec![0.0; self.blocks.outer * self.axis_len * inner];
        for o in 0..self.blocks.outer {
            let dst = (o * self.axis_len + self.start) * inner;
            dx[dst..dst + self.len * inner].copy_from_slice(&g[o * self.len * inner..(o + 1) * self.len * inner]);
        }
        Ok(vec![Some(dx)])
    }
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.try_value(x)?.clone().reshape(shape)?;
        self.record("reshape", &[x], out, ReshapeRule)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.try_value(x)?;
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank() || axes.iter().any(|&a| a >= t.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("axes {axes:?} for rank {}", t.rank())));
        }
        let (out_shape, data) = permute_data(t.data(), t.shape(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out = Tensor::from_parts(out_shape.clone(), data);
        self.record("permute", &[x], out, PermuteRule { out_shape, inverse })
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.try_value(*xs.first().ok_or_else(|| invalid("concat", "no inputs"))?)?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.try_value(v)?.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let blocks = AxisBlocks::new(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(blocks.outer * total * blocks.inner);
        for o in 0..blocks.outer {
            for (&v, &len) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * len * blocks.inner..(o + 1) * len * blocks.inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        self.record("concat", xs, out, ConcatRule { blocks, sizes })
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.try_value(x)?;
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(invalid("narrow", format!("{start}+{len} on axis {axis} of {:?}", t.shape())));
        }
        let blocks = AxisBlocks::new(t.shape(), axis);
        let axis_len = t.shape()[axis];
        let mut data = Vec::with_capacity(blocks.outer * len * blocks.inner);
        for o in 0..blocks.outer {
            let src = (o * axis_len + start) * blocks.inner;
            data.extend_from_slice(&t.data()[src..src + len * blocks.inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::from_parts(shape, data);
        self.record("narrow", &[x], out, NarrowRule { blocks, axis_len, start, len })
    }
}
