use crate::error::{invalid, shape_err, Result};
use crate::gemm::gemm;
use crate::graph::{Backward, BackwardCtx, Graph, InputGrads, Var};
use crate::par;
use crate::tensor::Tensor;

/// Images per work unit in the filter-gradient reduction. Fixed so the
/// summation order never depends on the thread count.
const GRAD_CHUNK: usize = 4;

/// Shape bookkeeping for a square-kernel 2-D cross-correlation.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], filters: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[batch, c_in, height, width] = x else {
            return Err(shape_err("conv2d", format!("input must be [B,C,H,W], got {x:?}")));
        };
        let &[c_out, fc_in, kh, kw] = filters else {
            return Err(shape_err("conv2d", format!("filters must be [O,C,S,S], got {filters:?}")));
        };
        if fc_in != c_in || kh != kw {
            return Err(shape_err("conv2d", format!("input {x:?} with filters {filters:?}")));
        }
        if kh % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel size {kh} is not odd")));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if height + 2 * pad < kh || width + 2 * pad < kh {
            return Err(invalid("conv2d", format!("{kh}x{kh} window does not fit a padded {height}x{width} input")));
        }
        Ok(Self {
            batch,
            c_in,
            height,
            width,
            c_out,
            kernel: kh,
            stride,
            pad,
            out_height: (height + 2 * pad - kh) / stride + 1,
            out_width: (width + 2 * pad - kh) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Rows of the unfolded patch matrix, `C_in·S·S`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_image(&self) -> usize {
        self.c_in * self.height * self.width
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.out_height, self.out_width]
    }

    /// Unfolds one image `[C_in,H,W]` into `[C_in·S·S, H'·W']`.
    pub fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        let (s, plane) = (self.kernel, self.out_plane());
        for c in 0..self.c_in {
            let src = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for u in 0..s {
                for v in 0..s {
                    let row = &mut cols[((c * s + u) * s + v) * plane..][..plane];
                    for oy in 0..self.out_height {
                        let iy = (oy * self.stride + u) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.out_width..(oy + 1) * self.out_width];
                        if iy < 0 || iy >= self.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * self.width..][..self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + v) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.width as isize { 0.0 } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto the image.
    pub fn col2im(&self, cols: &[f32], image: &mut [f32]) {
        let (s, plane) = (self.kernel, self.out_plane());
        for c in 0..self.c_in {
            let dst = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for u in 0..s {
                for v in 0..s {
                    let row = &cols[((c * s + u) * s + v) * plane..][..plane];
                    for oy in 0..self.out_height {
                        let iy = (oy * self.stride + u) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * self.width..][..self.width];
                        for ox in 0..self.out_width {
                            let ix = (ox * self.stride + v) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst_row[ix as usize] += row[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation on raw buffers.
pub fn conv2d_forward(geom: &ConvGeometry, x: &[f32], filters: &[f32]) -> Vec<f32> {
    let per_out = geom.c_out * geom.out_plane();
    let mut out = vec![0.0; geom.batch * per_out];
    par::for_each_chunk_mut(&mut out, per_out, |b, out_b| {
        let xb = &x[b * geom.in_image()..(b + 1) * geom.in_image()];
        if geom.is_pointwise() {
            gemm(geom.c_out, geom.c_in, geom.out_plane(), filters, false, xb, false, out_b, false);
        } else {
            let mut cols = vec![0.0; geom.patch_len() * geom.out_plane()];
            geom.im2col(xb, &mut cols);
            gemm(geom.c_out, geom.patch_len(), geom.out_plane(), filters, false, &cols, false, out_b, false);
        }
    });
    out
}

/// Gradients of the cross-correlation w.r.t. its input and filters.
pub fn conv2d_backward(
    geom: &ConvGeometry,
    x: &[f32],
    filters: &[f32],
    grad_out: &[f32],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (k, plane) = (geom.patch_len(), geom.out_plane());
    let per_out = geom.c_out * plane;
    let mut dx = vec![0.0; geom.batch * geom.in_image()];
    let partials = par::map_chunks_mut(&mut dx, GRAD_CHUNK * geom.in_image(), |ci, dx_chunk| {
        let mut dw = if need_w { vec![0.0; geom.c_out * k] } else { Vec::new() };
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * plane] };
        let mut dcols = if need_x && !geom.is_pointwise() { vec![0.0; k * plane] } else { Vec::new() };
        for (j, dx_b) in dx_chunk.chunks_mut(geom.in_image()).enumerate() {
            let b = ci * GRAD_CHUNK + j;
            let xb = &x[b * geom.in_image()..(b + 1) * geom.in_image()];
            let gb = &grad_out[b * per_out..(b + 1) * per_out];
            if need_w {
                let patches: &[f32] = if geom.is_pointwise() {
                    xb
                } else {
                    geom.im2col(xb, &mut cols);
                    &cols
                };
                gemm(geom.c_out, plane, k, gb, false, patches, true, &mut dw, true);
            }
            if need_x {
                if geom.is_pointwise() {
                    gemm(k, geom.c_out, plane, filters, true, gb, false, dx_b, false);
                } else {
                    gemm(k, geom.c_out, plane, filters, true, gb, false, &mut dcols, false);
                    geom.col2im(&dcols, dx_b);
                }
            }
        }
        dw
    });
    let dw = need_w.then(|| {
        let mut total = vec![0.0; geom.c_out * k];
        for p in &partials {
            total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        total
    });
    (need_x.then_some(dx), dw)
}

struct Conv2dRule(ConvGeometry);

impl Backward for Conv2dRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads> {
        let (dx, dw) = conv2d_backward(
            &self.0,
            ctx.input(0).data(),
            ctx.input(1).data(),
            ctx.grad_output(),
            ctx.needs_grad(0),
            ctx.needs_grad(1),
        );
        Ok(vec![dx, dw])
    }
}

impl Graph {
    /// Cross-correlation of `x: [B,C_in,H,W]` with `filters: [C_out,C_in,S,S]`.
    /// Output size is `⌊(H + 2·pad − S)/stride⌋ + 1`.
    pub fn conv2d(&mut self, x: Var, filters: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.try_value(x)?, self.try_value(filters)?);
        let geom = ConvGeometry::new(tx.shape(), tw.shape(), stride, pad)?;
        let out = conv2d_forward(&geom, tx.data(), tw.data());
        let out = Tensor::from_parts(geom.out_shape().to_vec(), out);
        self.record("conv2d", &[x, filters], out, Conv2dRule(geom))
    }
}
