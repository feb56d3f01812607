use mid_tensor::{par, Tensor};
use rand::Rng;

use super::Dataset;
use crate::error::{MidError, Result};
use crate::modality::Modality;

/// Mirror a `[C, H, W]` image left-right.
pub fn hflip(img: &Tensor) -> Tensor {
    let (c, h, w) = dims(img);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..c * h {
        let s = &src[row * w..(row + 1) * w];
        for (d, v) in out[row * w..(row + 1) * w].iter_mut().zip(s.iter().rev()) {
            *d = *v;
        }
    }
    Tensor::new(img.shape(), out).expect("shape preserved")
}

/// Zero-pad by `pad` on every side, then crop back to the original size with
/// the crop's top-left corner at `(top, left)` in padded coordinates.
pub fn pad_crop(img: &Tensor, pad: usize, top: usize, left: usize) -> Tensor {
    let (c, h, w) = dims(img);
    assert!(top <= 2 * pad && left <= 2 * pad, "crop offset outside padded image");
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + top) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + left) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(img.shape(), out).expect("shape preserved")
}

fn dims(img: &Tensor) -> (usize, usize, usize) {
    match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => panic!("expected a [C, H, W] image, got {:?}", img.shape()),
    }
}

/// Training augmentation plus per-channel standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub pad: usize,
    pub flip: bool,
}

#[derive(Copy, Clone)]
struct Augment {
    flip: bool,
    top: usize,
    left: usize,
}

impl Preprocessor {
    /// Channel statistics over every image of both modalities.
    pub fn fit(dataset: &Dataset, pad: usize, flip: bool) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0usize;
        for id in dataset.identities() {
            for img in id.rgb.iter().chain(&id.ir) {
                let plane = img.numel() / 3;
                for c in 0..3 {
                    for &v in &img.data()[c * plane..(c + 1) * plane] {
                        sum[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                }
                n += plane;
            }
        }
        let mut mean = [0f32; 3];
        let mut std = [0f32; 3];
        for c in 0..3 {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(0.0);
            if var < 1e-12 {
                return Err(MidError::Data(format!("channel {c} is constant over the dataset")));
            }
            mean[c] = m as f32;
            std[c] = var.sqrt() as f32;
        }
        Ok(Self { mean, std, pad, flip })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Augment {
        Augment {
            flip: self.flip && rng.random_bool(0.5),
            top: rng.random_range(0..=2 * self.pad),
            left: rng.random_range(0..=2 * self.pad),
        }
    }

    fn apply_one(&self, img: &Tensor, aug: Option<Augment>) -> Tensor {
        let mut out = match aug {
            Some(a) => {
                let t = if a.flip { hflip(img) } else { img.clone() };
                pad_crop(&t, self.pad, a.top, a.left)
            }
            None => img.clone(),
        };
        let plane = out.numel() / 3;
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    /// One `[3, H, W]` image. Train mode draws flip and crop from `rng`.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Tensor, train: bool, rng: &mut R) -> Tensor {
        let aug = train.then(|| self.draw(rng));
        self.apply_one(img, aug)
    }

    /// A `[B, 3, H, W]` batch. Random draws happen sequentially so the result
    /// does not depend on the thread count.
    pub fn apply_batch<R: Rng + ?Sized>(&self, batch: &Tensor, train: bool, rng: &mut R) -> Result<Tensor> {
        let b = batch.shape().first().copied().unwrap_or(0);
        let augs: Vec<Option<Augment>> = (0..b).map(|_| train.then(|| self.draw(rng))).collect();
        self.apply_augs(batch, &augs)
    }

    /// Eval-mode preprocessing of a `[B, 3, H, W]` batch: standardization only.
    pub fn standardize_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let b = batch.shape().first().copied().unwrap_or(0);
        self.apply_augs(batch, &vec![None; b])
    }

    fn apply_augs(&self, batch: &Tensor, augs: &[Option<Augment>]) -> Result<Tensor> {
        let b = augs.len();
        let images = par::map_range(b, |i| {
            let img = batch.index_first(i).expect("index within batch");
            self.apply_one(&img, augs[i])
        });
        let refs: Vec<&Tensor> = images.iter().collect();
        Ok(Tensor::stack(&refs)?)
    }

    /// Standardized stack of every image of one modality, in label order.
    pub fn eval_stack(&self, dataset: &Dataset, modality: Modality) -> Result<(Tensor, Vec<usize>)> {
        let (x, labels) = dataset.stacked(modality)?;
        Ok((self.standardize_batch(&x)?, labels))
    }
}
