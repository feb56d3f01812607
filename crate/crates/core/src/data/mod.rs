//! Identity-labelled two-modality image data.

mod directory;
mod preprocess;
mod sampler;
mod synthetic;

pub use directory::{export_dataset, load_image_directory, ImageFormat};
pub use preprocess::{hflip, pad_crop, Preprocessor};
pub use sampler::{pk_sample, Batch, BatchSpec, Sample};
pub use synthetic::{generate_synthetic_dataset, template_image, Difficulty, SyntheticSpec};

use mid_tensor::Tensor;

use crate::error::{MidError, Result};
use crate::modality::Modality;

/// All images of one identity. Images are `[3, H, W]` tensors in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityImages {
    pub name: String,
    pub rgb: Vec<Tensor>,
    pub ir: Vec<Tensor>,
}

impl IdentityImages {
    pub fn images(&self, modality: Modality) -> Result<&[Tensor]> {
        match modality {
            Modality::Rgb => Ok(&self.rgb),
            Modality::Ir => Ok(&self.ir),
            Modality::Mix => Err(MidError::Data("datasets hold no mixed images".into())),
        }
    }
}

/// A labelled collection of identities; the label of an identity is its index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    identities: Vec<IdentityImages>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, identities: Vec<IdentityImages>) -> Result<Self> {
        if identities.is_empty() {
            return Err(MidError::Data("dataset has no identities".into()));
        }
        for id in &identities {
            if id.rgb.is_empty() || id.ir.is_empty() {
                return Err(MidError::Data(format!("identity `{}` lacks images in one modality", id.name)));
            }
            for img in id.rgb.iter().chain(&id.ir) {
                if img.shape() != [3, height, width] {
                    return Err(MidError::Data(format!(
                        "identity `{}`: image shape {:?}, expected [3, {height}, {width}]",
                        id.name,
                        img.shape()
                    )));
                }
            }
        }
        Ok(Self { height, width, identities })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn identities(&self) -> &[IdentityImages] {
        &self.identities
    }

    pub fn identity(&self, label: usize) -> &IdentityImages {
        &self.identities[label]
    }

    pub fn n_images(&self, modality: Modality) -> usize {
        self.identities.iter().map(|id| id.images(modality).map_or(0, <[Tensor]>::len)).sum()
    }

    /// Every image of one modality stacked to `[N, 3, H, W]`, with labels.
    pub fn stacked(&self, modality: Modality) -> Result<(Tensor, Vec<usize>)> {
        let mut refs = Vec::new();
        let mut labels = Vec::new();
        for (label, id) in self.identities.iter().enumerate() {
            for img in id.images(modality)? {
                refs.push(img);
                labels.push(label);
            }
        }
        Ok((Tensor::stack(&refs)?, labels))
    }

    /// Identity-disjoint split: the last `ceil(fraction · P)` identities are
    /// held out. Both halves are relabelled densely from zero.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(MidError::Config(format!("holdout fraction {fraction} outside (0, 1)")));
        }
        let n = self.identities.len();
        let held = ((n as f64 * fraction).ceil() as usize).max(1);
        if held >= n {
            return Err(MidError::Data(format!("cannot hold out {held} of {n} identities and still train")));
        }
        let (train, eval) = self.identities.split_at(n - held);
        Ok((
            Dataset::new(self.height, self.width, train.to_vec())?,
            Dataset::new(self.height, self.width, eval.to_vec())?,
        ))
    }
}

/// SplitMix64 finaliser, used to derive independent seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let ids = (0..n)
            .map(|i| IdentityImages {
                name: format!("{i}"),
                rgb: vec![Tensor::full(&[3, 4, 2], i as f32 / 10.0)],
                ir: vec![Tensor::zeros(&[3, 4, 2]); 2],
            })
            .collect();
        Dataset::new(4, 2, ids).unwrap()
    }

    #[test]
    fn holdout_takes_last_quarter() {
        let (train, eval) = toy(16).split_holdout(0.25).unwrap();
        assert_eq!(train.n_identities(), 12);
        assert_eq!(eval.n_identities(), 4);
        assert_eq!(eval.identity(0).name, "12");
    }

    #[test]
    fn stacked_counts_images() {
        let d = toy(3);
        let (x, labels) = d.stacked(Modality::Ir).unwrap();
        assert_eq!(x.shape(), &[6, 3, 4, 2]);
        assert_eq!(labels, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(d.n_images(Modality::Rgb), 3);
    }

    #[test]
    fn rejects_missing_modality() {
        let ids = vec![IdentityImages { name: "a".into(), rgb: vec![], ir: vec![Tensor::zeros(&[3, 4, 2])] }];
        assert!(matches!(Dataset::new(4, 2, ids), Err(MidError::Data(_))));
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
