//! Modality-adaptive convolution decomposition: filters of a layer are
//! `W = αΨ`, with per-modality spatial bases `α: [K, S, S]` and a shared
//! channel coefficient `Ψ: [K, C_in, C_out]`.

use mid_tensor::{Backward, BackwardCtx, Graph, InputGrads, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::Rng;

use crate::error::{MidError, Result};
use crate::modality::Modality;
use crate::nn::bind;

/// Bases and coefficient of one decomposed layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedConvParams {
    pub alpha_rgb: Tensor,
    pub alpha_ir: Tensor,
    pub alpha_mix: Tensor,
    pub psi: Tensor,
}

impl DecomposedConvParams {
    pub fn alpha(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::Rgb => &self.alpha_rgb,
            Modality::Ir => &self.alpha_ir,
            Modality::Mix => &self.alpha_mix,
        }
    }

    /// `(K, S, C_in, C_out)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let a = self.alpha_rgb.shape();
        let p = self.psi.shape();
        (a[0], a[1], p[1], p[2])
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.alpha_rgb.shape();
        let bad = a.len() != 3
            || a[1] != a[2]
            || self.alpha_ir.shape() != a
            || self.alpha_mix.shape() != a
            || self.psi.rank() != 3
            || self.psi.shape()[0] != a[0];
        if bad {
            return Err(MidError::Config(format!(
                "bases {:?}/{:?}/{:?} and coefficient {:?} are inconsistent",
                a,
                self.alpha_ir.shape(),
                self.alpha_mix.shape(),
                self.psi.shape()
            )));
        }
        Ok(())
    }
}

/// Random decomposition whose composed filters have He-normal variance
/// `2 / (S² C_in)`. The three bases start identical.
pub fn init_decomposition<R: Rng + ?Sized>(
    k_bases: usize,
    kernel: usize,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Result<DecomposedConvParams> {
    if k_bases == 0 || kernel == 0 || c_in == 0 || c_out == 0 {
        return Err(MidError::Config("decomposition sizes must be positive".into()));
    }
    let alpha = Tensor::randn(&[k_bases, kernel, kernel], (2.0 / (kernel * kernel) as f32).sqrt(), rng);
    let psi = Tensor::randn(&[k_bases, c_in, c_out], 1.0 / ((k_bases * c_in) as f32).sqrt(), rng);
    Ok(DecomposedConvParams { alpha_rgb: alpha.clone(), alpha_ir: alpha.clone(), alpha_mix: alpha, psi })
}

/// `3·K·S² + K·C_in·C_out`.
pub fn decomposed_param_count(k_bases: usize, kernel: usize, c_in: usize, c_out: usize) -> usize {
    3 * k_bases * kernel * kernel + k_bases * c_in * c_out
}

/// Three independent full convolutions, `3·S²·C_in·C_out`.
pub fn full_param_count(kernel: usize, c_in: usize, c_out: usize) -> usize {
    3 * kernel * kernel * c_in * c_out
}

struct Compose;

impl Backward for Compose {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads, TensorError> {
        let (alpha, psi) = (ctx.input(0), ctx.input(1));
        let (k, ss) = (alpha.shape()[0], alpha.shape()[1] * alpha.shape()[2]);
        let (c_in, c_out) = (psi.shape()[1], psi.shape()[2]);
        let dw = ctx.grad_output();
        let (a, p) = (alpha.data(), psi.data());
        let d_alpha = ctx.needs_grad(0).then(|| {
            let mut out = vec![0.0f32; k * ss];
            for kk in 0..k {
                for uv in 0..ss {
                    let mut s = 0.0f64;
                    for o in 0..c_out {
                        for c in 0..c_in {
                            s += dw[(o * c_in + c) * ss + uv] as f64 * p[(kk * c_in + c) * c_out + o] as f64;
                        }
                    }
                    out[kk * ss + uv] = s as f32;
                }
            }
            out
        });
        let d_psi = ctx.needs_grad(1).then(|| {
            let mut out = vec![0.0f32; k * c_in * c_out];
            for kk in 0..k {
                for c in 0..c_in {
                    for o in 0..c_out {
                        let w = &dw[(o * c_in + c) * ss..][..ss];
                        let s: f64 = w.iter().zip(&a[kk * ss..][..ss]).map(|(&x, &y)| x as f64 * y as f64).sum();
                        out[(kk * c_in + c) * c_out + o] = s as f32;
                    }
                }
            }
            out
        });
        Ok(vec![d_alpha, d_psi])
    }
}

/// `W[o, c, u, v] = Σ_k α[k, u, v] · Ψ[k, c, o]`, recorded so gradients reach
/// both factors.
pub fn compose_filters(g: &mut Graph, alpha: Var, psi: Var) -> Result<Var> {
    let (a, p) = (g.try_value(alpha)?, g.try_value(psi)?);
    if a.rank() != 3 || a.shape()[1] != a.shape()[2] || p.rank() != 3 || p.shape()[0] != a.shape()[0] {
        return Err(MidError::Config(format!("bases {:?} and coefficient {:?} do not compose", a.shape(), p.shape())));
    }
    let (k, s) = (a.shape()[0], a.shape()[1]);
    let (c_in, c_out) = (p.shape()[1], p.shape()[2]);
    let ss = s * s;
    let mut w = vec![0.0f32; c_out * c_in * ss];
    for o in 0..c_out {
        for c in 0..c_in {
            for uv in 0..ss {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    acc += a.data()[kk * ss + uv] as f64 * p.data()[(kk * c_in + c) * c_out + o] as f64;
                }
                w[(o * c_in + c) * ss + uv] = acc as f32;
            }
        }
    }
    let out = Tensor::new(&[c_out, c_in, s, s], w)?;
    Ok(g.record("compose_filters", &[alpha, psi], out, Compose)?)
}

/// Forward through the composed filters: a single convolution.
pub fn composed_conv(g: &mut Graph, x: Var, alpha: Var, psi: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = compose_filters(g, alpha, psi)?;
    Ok(g.conv2d(x, w, stride, pad)?)
}

/// Forward in two stages: every input channel convolved with each basis
/// (channel `c·K + k` holds channel `c` under basis `k`), then a 1×1
/// convolution mixing the `K·C_in` maps with `Ψ`.
pub fn two_stage_conv(g: &mut Graph, x: Var, alpha: Var, psi: Var, stride: usize, pad: usize) -> Result<Var> {
    let xs = g.try_value(x)?.shape().to_vec();
    let (k, s) = {
        let a = g.try_value(alpha)?.shape();
        if a.len() != 3 {
            return Err(MidError::Config(format!("bases {a:?} are not [K, S, S]")));
        }
        (a[0], a[1])
    };
    let ps = g.try_value(psi)?.shape().to_vec();
    let [b, c_in, h, w] = xs[..] else {
        return Err(MidError::Config(format!("input {xs:?} is not [B, C, H, W]")));
    };
    if ps.len() != 3 || ps[0] != k || ps[1] != c_in {
        return Err(MidError::Config(format!("coefficient {ps:?} does not match {k} bases and {c_in} channels")));
    }
    let c_out = ps[2];
    let planes = g.reshape(x, &[b * c_in, 1, h, w])?;
    let bases = g.reshape(alpha, &[k, 1, s, s])?;
    let spatial = g.conv2d(planes, bases, stride, pad)?;
    let (ho, wo) = (g.shape(spatial)[2], g.shape(spatial)[3]);
    let stacked = g.reshape(spatial, &[b, c_in * k, ho, wo])?;
    let mixing = g.permute(psi, &[2, 1, 0])?;
    let mixing = g.reshape(mixing, &[c_out, c_in * k, 1, 1])?;
    Ok(g.conv2d(stacked, mixing, 1, 0)?)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum ForwardPath {
    #[default]
    Composed,
    TwoStage,
}

/// A decomposed layer whose factors live in a parameter store under
/// `<name>.alpha.{rgb|ir|mix}` and `<name>.psi`.
#[derive(Clone, Debug)]
pub struct DecomposedConv {
    pub alpha: [ParamId; 3],
    pub psi: ParamId,
    pub k_bases: usize,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl DecomposedConv {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        params: DecomposedConvParams,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        params.validate()?;
        let (k_bases, kernel, c_in, c_out) = params.dims();
        let alpha = [
            store.add_param(&format!("{name}.alpha.rgb"), params.alpha_rgb)?,
            store.add_param(&format!("{name}.alpha.ir"), params.alpha_ir)?,
            store.add_param(&format!("{name}.alpha.mix"), params.alpha_mix)?,
        ];
        let psi = store.add_param(&format!("{name}.psi"), params.psi)?;
        Ok(Self { alpha, psi, k_bases, kernel, c_in, c_out, stride, pad })
    }

    /// Current factors, copied out of the store.
    pub fn params(&self, store: &ParamStore) -> DecomposedConvParams {
        DecomposedConvParams {
            alpha_rgb: store.get(self.alpha[0]).clone(),
            alpha_ir: store.get(self.alpha[1]).clone(),
            alpha_mix: store.get(self.alpha[2]).clone(),
            psi: store.get(self.psi).clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        decomposed_param_count(self.k_bases, self.kernel, self.c_in, self.c_out)
    }

    fn factors(&self, g: &mut Graph, store: &ParamStore, modality: Modality, trainable: bool) -> (Var, Var) {
        let alpha = bind(g, store, self.alpha[modality.index()], trainable);
        let psi = bind(g, store, self.psi, trainable);
        (alpha, psi)
    }

    pub fn compose(&self, g: &mut Graph, store: &ParamStore, modality: Modality) -> Result<Var> {
        let (alpha, psi) = self.factors(g, store, modality, true);
        compose_filters(g, alpha, psi)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        modality: Modality,
        path: ForwardPath,
        trainable: bool,
    ) -> Result<Var> {
        let (alpha, psi) = self.factors(g, store, modality, trainable);
        match path {
            ForwardPath::Composed => composed_conv(g, x, alpha, psi, self.stride, self.pad),
            ForwardPath::TwoStage => two_stage_conv(g, x, alpha, psi, self.stride, self.pad),
        }
    }
}
