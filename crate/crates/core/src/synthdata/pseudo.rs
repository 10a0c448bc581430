use std::collections::HashSet;

use rand_distr::{Distribution, StandardNormal};

use super::CenterDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// An unlabelled synthetic image tagged with the center whose statistics it
/// was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSample {
    pub image: Tensor,
    pub center_id: u32,
}

/// Per-pixel standard deviations are floored so a degenerate source (for
/// instance a single image) still yields images that differ from it.
pub const MIN_PIXEL_STD: f64 = 1e-3;

const MAX_RESAMPLES: usize = 1000;

fn image_key(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Fits a diagonal Gaussian (mean image, per-pixel variance, pooled over
/// classes) to `dataset` and draws `n` clamped samples from it. A draw that
/// equals a real image bit-for-bit is redrawn.
pub fn generate_pseudo_images(
    dataset: &CenterDataset,
    n: usize,
    seed: u64,
) -> Result<Vec<PseudoSample>> {
    if n == 0 {
        return Err(Error::contract("pseudo image count must be positive"));
    }
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::contract(format!("center {} has no images", dataset.center_id)))?;
    let shape = first.image.shape().to_vec();
    let len = first.image.len();
    let count = dataset.len() as f64;

    let mut mean = vec![0.0; len];
    for s in &dataset.samples {
        for (m, v) in mean.iter_mut().zip(s.image.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut std = vec![0.0; len];
    for s in &dataset.samples {
        for ((sd, v), m) in std.iter_mut().zip(s.image.data()).zip(&mean) {
            *sd += (v - m).powi(2);
        }
    }
    std.iter_mut()
        .for_each(|sd| *sd = (*sd / count).sqrt().max(MIN_PIXEL_STD));

    let real: HashSet<Vec<u64>> = dataset.samples.iter().map(|s| image_key(&s.image)).collect();
    let mut rng = rng::stream(seed, &[rng::tag::PSEUDO, dataset.center_id as u64]);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut attempts = 0;
        let image = loop {
            let data = mean
                .iter()
                .zip(&std)
                .map(|(m, sd)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (m + sd * z).clamp(0.0, 1.0)
                })
                .collect();
            let candidate = Tensor::from_parts(shape.clone(), data);
            if !real.contains(&image_key(&candidate)) {
                break candidate;
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLES {
                return Err(Error::contract(format!(
                    "center {}: could not draw a pseudo image distinct from the real ones",
                    dataset.center_id
                )));
            }
        };
        out.push(PseudoSample {
            image,
            center_id: dataset.center_id,
        });
    }
    Ok(out)
}

/// Number of (pseudo, real) pairs whose images are bitwise equal.
pub fn count_collisions<'a>(
    pseudo: impl IntoIterator<Item = &'a Tensor>,
    real: impl IntoIterator<Item = &'a Tensor>,
) -> usize {
    let real: HashSet<Vec<u64>> = real.into_iter().map(image_key).collect();
    pseudo
        .into_iter()
        .filter(|p| real.contains(&image_key(p)))
        .count()
}
