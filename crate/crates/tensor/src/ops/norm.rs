use crate::error::{invalid, shape_err, Result};
use crate::graph::{Backward, BackwardCtx, Graph, InputGrads, Var};
use crate::par;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// How a batch-norm call treats its statistics.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics; optionally fold them into the running
    /// estimates.
    Train { update_stats: bool },
    /// Normalize with the running estimates.
    Eval,
}

impl NormMode {
    pub const TRAIN: NormMode = NormMode::Train { update_stats: true };
}

/// `[B,C,H,W]` (or `[B,C]`) viewed as batch × channel × plane.
#[derive(Copy, Clone)]
struct Layout {
    batch: usize,
    channels: usize,
    plane: usize,
}

impl Layout {
    fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [b, c] => Ok(Self { batch: b, channels: c, plane: 1 }),
            [b, c, h, w] => Ok(Self { batch: b, channels: c, plane: h * w }),
            _ => Err(shape_err("batch_norm", format!("expected [B,C] or [B,C,H,W], got {shape:?}"))),
        }
    }

    fn count(&self) -> usize {
        self.batch * self.plane
    }

    /// The `batch` contiguous planes belonging to channel `c`.
    fn planes<'a>(&self, data: &'a [f32], c: usize) -> impl Iterator<Item = &'a [f32]> + 'a {
        let (plane, channels) = (self.plane, self.channels);
        (0..self.batch).map(move |b| &data[(b * channels + c) * plane..][..plane])
    }
}

struct BatchNormRule {
    layout: Layout,
    /// Normalized input, same layout as `x`.
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    train: bool,
}

impl Backward for BatchNormRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let l = self.layout;
        let g = ctx.grad_output();
        let gamma = ctx.input(1).data();
        let n = l.count() as f64;
        // Per-channel Σdy and Σdy·x̂.
        let sums: Vec<(f64, f64)> = par::map_range(l.channels, |c| {
            l.planes(g, c).zip(l.planes(&self.xhat, c)).fold((0.0, 0.0), |(s, sx), (gp, xp)| {
                let (ps, psx) = gp.iter().zip(xp).fold((0.0f32, 0.0f32), |(a, b), (&dy, &xh)| (a + dy, b + dy * xh));
                (s + ps as f64, sx + psx as f64)
            })
        });
        let dx = ctx.needs_grad(0).then(|| {
            let mut dx = vec![0.0; g.len()];
            par::for_each_chunk_mut(&mut dx, l.channels * l.plane, |b, dx_b| {
                for c in 0..l.channels {
                    let off = (b * l.channels + c) * l.plane;
                    let scale = gamma[c] * self.inv_std[c];
                    let (s, sx) = sums[c];
                    let (mean_dy, mean_dyx) = ((s / n) as f32, (sx / n) as f32);
                    for i in 0..l.plane {
                        let dy = g[off + i];
                        dx_b[c * l.plane + i] = if self.train {
                            scale * (dy - mean_dy - self.xhat[off + i] * mean_dyx)
                        } else {
                            scale * dy
                        };
                    }
                }
            });
            dx
        });
        let dgamma = ctx.needs_grad(1).then(|| sums.iter().map(|&(_, sx)| sx as f32).collect());
        let dbeta = ctx.needs_grad(2).then(|| sums.iter().map(|&(s, _)| s as f32).collect());
        Ok(vec![dx, dgamma, dbeta])
    }
}

impl Graph {
    /// Per-channel batch normalization with affine `gamma`/`beta` (`[C]` each).
    ///
    /// Train mode uses the biased batch variance; when `update_stats` is set the
    /// running estimates move by momentum 0.1 toward the batch mean and the
    /// unbiased batch variance.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        mode: NormMode,
    ) -> Result<Var> {
        let tx = self.try_value(x)?;
        let l = Layout::of(tx.shape())?;
        for t in [self.try_value(gamma)?, self.try_value(beta)?, running_mean, running_var] {
            if t.shape() != [l.channels] {
                return Err(shape_err(
                    "batch_norm",
                    format!("per-channel tensor {:?} for {} channels", t.shape(), l.channels),
                ));
            }
        }
        let train = matches!(mode, NormMode::Train { .. });
        if train && l.count() < 2 {
            return Err(invalid("batch_norm", "train mode needs at least two values per channel"));
        }
        let (mean, var): (Vec<f32>, Vec<f32>) = if train {
            par::map_range(l.channels, |c| {
                let n = l.count() as f64;
                let mean = l.planes(tx.data(), c).map(|p| p.iter().sum::<f32>() as f64).sum::<f64>() / n;
                let m32 = mean as f32;
                let var = l
                    .planes(tx.data(), c)
                    .map(|p| p.iter().map(|&v| (v - m32) * (v - m32)).sum::<f32>() as f64)
                    .sum::<f64>()
                    / n;
                (m32, var as f32)
            })
            .into_iter()
            .unzip()
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut y = vec![0.0; tx.numel()];
        let per_image = l.channels * l.plane;
        par::for_each_chunk_mut(&mut xhat, per_image, |b, xh| {
            for c in 0..l.channels {
                let off = (b * l.channels + c) * l.plane;
                for i in 0..l.plane {
                    xh[c * l.plane + i] = (tx.data()[off + i] - mean[c]) * inv_std[c];
                }
            }
        });
        par::for_each_chunk_mut(&mut y, per_image, |b, yb| {
            for c in 0..l.channels {
                let off = c * l.plane;
                let src = &xhat[b * per_image + off..][..l.plane];
                for (d, s) in yb[off..off + l.plane].iter_mut().zip(src) {
                    *d = s * g[c] + bt[c];
                }
            }
        });

        if let NormMode::Train { update_stats: true } = mode {
            let n = l.count() as f32;
            let unbias = n / (n - 1.0);
            for c in 0..l.channels {
                let rm = &mut running_mean.data_mut()[c];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[c];
                let rv = &mut running_var.data_mut()[c];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[c] * unbias;
            }
        }

        let out = Tensor::from_parts(tx.shape().to_vec(), y);
        self.record("batch_norm", &[x, gamma, beta], out, BatchNormRule { layout: l, xhat, inv_std, train })
    }
}
