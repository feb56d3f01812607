use mid_tensor::Tensor;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{MidError, Result};

/// `p_ids` identities with `k_imgs` images each, per modality.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub p_ids: usize,
    pub k_imgs: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { p_ids: 8, k_imgs: 4 }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.p_ids * self.k_imgs
    }
}

/// One identity-labelled RGB/IR pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: Tensor,
    pub ir: Tensor,
    pub identity: usize,
}

/// A PK batch. Row `i` of `rgb` and row `i` of `ir` form a pair with label
/// `labels[i]`; each identity occupies `k_imgs` consecutive rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rgb: Tensor,
    pub ir: Tensor,
    pub labels: Vec<usize>,
    pub spec: BatchSpec,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        Ok(Sample { rgb: self.rgb.index_first(i)?, ir: self.ir.index_first(i)?, identity: self.labels[i] })
    }
}

/// `k` indices into `0..n`: distinct when possible, otherwise every index once
/// plus draws with replacement.
fn pick<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if n >= k {
        return index::sample(rng, n, k).into_vec();
    }
    let mut out: Vec<usize> = (0..n).collect();
    out.extend((n..k).map(|_| rng.random_range(0..n)));
    out.shuffle(rng);
    out
}

/// Draws a PK batch. Pairs are formed index-wise inside each identity from
/// independent RGB and IR draws.
pub fn pk_sample<R: Rng + ?Sized>(dataset: &Dataset, spec: BatchSpec, rng: &mut R) -> Result<Batch> {
    if spec.p_ids == 0 || spec.k_imgs == 0 {
        return Err(MidError::Config("batch needs p_ids ≥ 1 and k_imgs ≥ 1".into()));
    }
    if dataset.n_identities() < spec.p_ids {
        return Err(MidError::Data(format!(
            "batch needs {} identities, dataset has {}",
            spec.p_ids,
            dataset.n_identities()
        )));
    }
    let ids = index::sample(rng, dataset.n_identities(), spec.p_ids).into_vec();
    let mut rgb = Vec::with_capacity(spec.batch_size());
    let mut ir = Vec::with_capacity(spec.batch_size());
    let mut labels = Vec::with_capacity(spec.batch_size());
    for &id in &ids {
        let images = dataset.identity(id);
        for i in pick(images.rgb.len(), spec.k_imgs, rng) {
            rgb.push(&images.rgb[i]);
        }
        for i in pick(images.ir.len(), spec.k_imgs, rng) {
            ir.push(&images.ir[i]);
        }
        labels.extend(std::iter::repeat_n(id, spec.k_imgs));
    }
    Ok(Batch { rgb: Tensor::stack(&rgb)?, ir: Tensor::stack(&ir)?, labels, spec })
}
