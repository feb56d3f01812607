use std::ops::Range;

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Backward, BackwardCtx, Graph, InputGrads, Var};
use crate::tensor::Tensor;

/// Row ranges of `parts` horizontal stripes over `height` rows: stripe `g`
/// covers `⌊g·H/G⌋ .. ⌊(g+1)·H/G⌋`. The stripes partition `0..height`.
pub fn stripe_bounds(height: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 || parts > height {
        return Err(invalid("stripes", format!("{parts} stripes over {height} rows")));
    }
    Ok((0..parts).map(|g| (g * height / parts)..((g + 1) * height / parts)).collect())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(shape_err(op, format!("expected [B,C,H,W], got {s:?}"))),
    }
}

struct RegionPoolRule {
    dims: [usize; 4],
    stripes: Vec<Range<usize>>,
}

impl Backward for RegionPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let [b, c, h, w] = self.dims;
        let parts = self.stripes.len();
        let g = ctx.grad_output();
        let mut dx = vec![0.0; b * c * h * w];
        for bc in 0..b * c {
            for (p, rows) in self.stripes.iter().enumerate() {
                let share = g[bc * parts + p] / (rows.len() * w) as f32;
                dx[bc * h * w + rows.start * w..bc * h * w + rows.end * w].fill(share);
            }
        }
        Ok(vec![Some(dx)])
    }
}

impl Graph {
    /// Averages each of `parts` horizontal stripes: `[B,C,H,W] -> [B,C,G]`.
    pub fn region_avg_pool(&mut self, x: Var, parts: usize) -> Result<Var> {
        let tx = self.try_value(x)?;
        let dims @ [b, c, h, w] = dims4("region_avg_pool", tx)?;
        let stripes = stripe_bounds(h, parts)?;
        let mut out = Vec::with_capacity(b * c * parts);
        for plane in tx.data().chunks(h * w) {
            for rows in &stripes {
                let s: f64 = plane[rows.start * w..rows.end * w].iter().map(|&v| v as f64).sum();
                out.push((s / (rows.len() * w) as f64) as f32);
            }
        }
        let out = Tensor::from_parts(vec![b, c, parts], out);
        self.record("region_avg_pool", &[x], out, RegionPoolRule { dims, stripes })
    }

    /// Global average pooling `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, _, _] = dims4("global_avg_pool", self.try_value(x)?)?;
        let pooled = self.region_avg_pool(x, 1)?;
        self.reshape(pooled, &[b, c])
    }
}
