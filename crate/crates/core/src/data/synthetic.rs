use std::str::FromStr;

use mid_tensor::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, Dataset, IdentityImages};
use crate::error::{MidError, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    fn noise_std(self) -> f32 {
        match self {
            Difficulty::Easy => 0.05,
            Difficulty::Hard => 0.15,
        }
    }

    fn brightness(self) -> (f32, f32) {
        match self {
            Difficulty::Easy => (0.8, 1.2),
            Difficulty::Hard => (0.6, 1.4),
        }
    }

    fn gamma(self) -> (f32, f32) {
        match self {
            Difficulty::Easy => (0.7, 1.4),
            Difficulty::Hard => (0.5, 2.0),
        }
    }

    fn max_shift(self) -> i64 {
        match self {
            Difficulty::Easy => 2,
            Difficulty::Hard => 3,
        }
    }
}

impl FromStr for Difficulty {
    type Err = MidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(MidError::Config(format!("unknown difficulty `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_ids: 16, imgs_per_id: 8, height: 72, width: 36, seed: 7, difficulty: Difficulty::Easy }
    }
}

type Rgb = [f32; 3];

/// Luminance seen by the infrared camera for a surface of visible colour `c`.
/// Deliberately unrelated to visible brightness: a surface that looks bright
/// may be dark in IR and vice versa.
fn ir_luminance(c: Rgb) -> f32 {
    let t = ((0.8 * c[0] + 0.5 * c[1] - 0.6 * c[2] + 0.6) / 1.9).clamp(0.0, 1.0);
    0.9 - 0.8 * t * t * (3.0 - 2.0 * t)
}

#[derive(Copy, Clone)]
enum Pattern {
    Solid,
    HStripes(usize),
    VStripes(usize),
    Checker(usize),
}

impl Pattern {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let period = rng.random_range(3..=6);
        match rng.random_range(0..4) {
            0 => Pattern::Solid,
            1 => Pattern::HStripes(period),
            2 => Pattern::VStripes(period),
            _ => Pattern::Checker(period),
        }
    }

    fn secondary(self, y: usize, x: usize) -> bool {
        match self {
            Pattern::Solid => false,
            Pattern::HStripes(p) => (y / p) % 2 == 1,
            Pattern::VStripes(p) => (x / p) % 2 == 1,
            Pattern::Checker(p) => (y / p + x / p) % 2 == 1,
        }
    }
}

/// Per-pixel palette index; index 0 is background.
struct Template {
    height: usize,
    width: usize,
    index: Vec<u8>,
    palette: Vec<Rgb>,
}

fn random_colour(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// Splits `lo..hi` into `n` bands at random interior cut points.
fn bands(rng: &mut ChaCha8Rng, lo: usize, hi: usize, n: usize) -> Vec<(usize, usize)> {
    if hi < lo + 4 {
        return vec![(lo, hi)];
    }
    let mut cuts: Vec<usize> = (1..n).map(|_| rng.random_range(lo + 2..hi - 1)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut start = lo;
    for c in cuts.into_iter().chain(std::iter::once(hi)) {
        if c > start {
            out.push((start, c));
            start = c;
        }
    }
    out
}

impl Template {
    fn new(height: usize, width: usize, seed: u64, identity: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1D00 + identity as u64));
        let (h, w) = (height as f32, width as f32);
        let mut palette = vec![[0.0; 3]];
        let mut index = vec![0u8; height * width];
        let cx = w / 2.0;

        // Head: skin with a hair cap.
        let skin = palette.len() as u8;
        palette.push(random_colour(&mut rng));
        let hair = palette.len() as u8;
        palette.push(random_colour(&mut rng));
        let head_top = (0.04 * h) as usize;
        let head_bottom = (0.18 * h) as usize;
        let head_half = 0.14 * w * rng.random_range(0.85..1.15);
        let hair_rows = rng.random_range(1..=((head_bottom - head_top) / 2).max(1));
        let head_cy = (head_top + head_bottom) as f32 / 2.0;
        let head_ry = (head_bottom - head_top) as f32 / 2.0;
        for y in head_top..head_bottom {
            let dy = (y as f32 + 0.5 - head_cy) / head_ry;
            let half = head_half * (1.0 - dy * dy).max(0.0).sqrt();
            for x in 0..width {
                if (x as f32 + 0.5 - cx).abs() <= half {
                    index[y * width + x] = if y < head_top + hair_rows { hair } else { skin };
                }
            }
        }

        // Torso and legs, each split into garment bands with their own pattern.
        let waist = (h * rng.random_range(0.5..0.6)) as usize;
        let feet = (0.96 * h) as usize;
        let torso_half = w * rng.random_range(0.22..0.33);
        let leg_half = w * rng.random_range(0.17..0.25);
        let gap = w * rng.random_range(0.02..0.07);
        let n_torso = rng.random_range(1..=3);
        let n_legs = rng.random_range(1..=2);
        let torso_bands = bands(&mut rng, head_bottom, waist, n_torso);
        let leg_bands = bands(&mut rng, waist, feet, n_legs);
        for (part, list) in [(0, torso_bands), (1, leg_bands)] {
            for (lo, hi) in list {
                let primary = palette.len() as u8;
                palette.push(random_colour(&mut rng));
                palette.push(random_colour(&mut rng));
                let pattern = Pattern::random(&mut rng);
                for y in lo..hi {
                    for x in 0..width {
                        let d = (x as f32 + 0.5 - cx).abs();
                        let inside = if part == 0 { d <= torso_half } else { d <= leg_half && d >= gap };
                        if inside {
                            index[y * width + x] = primary + pattern.secondary(y, x) as u8;
                        }
                    }
                }
            }
        }
        Self { height, width, index, palette }
    }

    fn shifted_index(&self, y: usize, x: usize, dy: i64, dx: i64) -> usize {
        let sy = y as i64 - dy;
        let sx = x as i64 - dx;
        if sy < 0 || sx < 0 || sy >= self.height as i64 || sx >= self.width as i64 {
            0
        } else {
            self.index[sy as usize * self.width + sx as usize] as usize
        }
    }
}

fn render(template: &Template, spec: &SyntheticSpec, infrared: bool, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (template.height, template.width);
    let d = spec.difficulty;
    let shift = d.max_shift();
    let dy = rng.random_range(-shift..=shift);
    let dx = rng.random_range(-shift..=shift);
    let grey = rng.random_range(0.3..0.4);
    let background: Rgb = [grey; 3];
    let noise = Normal::new(0.0f32, d.noise_std()).expect("positive std");
    let mut out = vec![0.0f32; 3 * h * w];
    if infrared {
        let (g_lo, g_hi) = d.gamma();
        let gamma = rng.random_range(g_lo..g_hi);
        let levels: Vec<f32> = std::iter::once(background)
            .chain(template.palette[1..].iter().copied())
            .map(|c| ir_luminance(c).powf(gamma))
            .collect();
        for y in 0..h {
            for x in 0..w {
                let v = (levels[template.shifted_index(y, x, dy, dx)] + noise.sample(rng)).clamp(0.0, 1.0);
                for c in 0..3 {
                    out[(c * h + y) * w + x] = v;
                }
            }
        }
    } else {
        let (b_lo, b_hi) = d.brightness();
        let brightness = rng.random_range(b_lo..b_hi);
        for y in 0..h {
            for x in 0..w {
                let i = template.shifted_index(y, x, dy, dx);
                let colour = if i == 0 { background } else { template.palette[i] };
                for c in 0..3 {
                    out[(c * h + y) * w + x] = (colour[c] * brightness + noise.sample(rng)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(&[3, h, w], out).expect("shape matches buffer")
}

/// The identity's clean template rendered as a background-free RGB image.
/// Useful for inspecting what distinguishes identities.
pub fn template_image(spec: &SyntheticSpec, identity: usize) -> Tensor {
    let t = Template::new(spec.height, spec.width, spec.seed, identity);
    let (h, w) = (spec.height, spec.width);
    let mut out = vec![0.0f32; 3 * h * w];
    for (p, &i) in t.index.iter().enumerate() {
        for c in 0..3 {
            out[c * h * w + p] = t.palette[i as usize][c];
        }
    }
    Tensor::new(&[3, h, w], out).expect("shape matches buffer")
}

/// Renders a seeded two-modality dataset. Every identity is a fixed template
/// of garment bands; RGB images apply its colours with brightness jitter and
/// noise, IR images pass the colours through a fixed luminance map and a
/// per-image gamma, replicated to three channels.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_ids < 2 || spec.imgs_per_id == 0 || spec.height < 24 || spec.width < 12 {
        return Err(MidError::Config(format!(
            "synthetic data needs ≥2 ids, ≥1 image, H ≥ 24 and W ≥ 12 (got {} ids, {} images, {}×{})",
            spec.n_ids, spec.imgs_per_id, spec.height, spec.width
        )));
    }
    let identities = par::map_range(spec.n_ids, |id| {
        let template = Template::new(spec.height, spec.width, spec.seed, id);
        let images = |infrared: bool| -> Vec<Tensor> {
            (0..spec.imgs_per_id)
                .map(|k| {
                    let stream = ((id as u64) << 32) | ((infrared as u64) << 31) | k as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream));
                    render(&template, spec, infrared, &mut rng)
                })
                .collect()
        };
        IdentityImages { name: format!("id{id:04}"), rgb: images(false), ir: images(true) }
    });
    Dataset::new(spec.height, spec.width, identities)
}
