use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// Per-center affine color map `rgb ↦ M·rgb + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainTransform {
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl StainTransform {
    pub fn identity() -> Self {
        StainTransform {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: [0.0; 3],
        }
    }

    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let mut out = self.offset;
        for (o, row) in out.iter_mut().zip(&self.matrix) {
            *o += row.iter().zip(&rgb).map(|(m, c)| m * c).sum::<f64>();
        }
        out
    }
}

/// Spatial pattern shared by one class across every center: a plane wave
/// blended with a Gaussian blob. Coordinates are fractions of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPrototype {
    pub freq_x: f64,
    pub freq_y: f64,
    pub phase: f64,
    pub blob_x: f64,
    pub blob_y: f64,
    pub blob_radius: f64,
    /// Blend weight of the blob in `[0, 1]`; the wave gets the rest.
    pub blob_weight: f64,
}

impl ClassPrototype {
    /// Structure value in `[0, 1]` at pixel `(y, x)` of an `h×w` image.
    pub fn structure(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let (fy, fx) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
        let arg = std::f64::consts::TAU * (self.freq_x * fx + self.freq_y * fy) + self.phase;
        let wave = 0.5 + 0.5 * arg.sin();
        let r2 = (fx - self.blob_x).powi(2) + (fy - self.blob_y).powi(2);
        let blob = (-r2 / (2.0 * self.blob_radius.powi(2).max(1e-12))).exp();
        (1.0 - self.blob_weight) * wave + self.blob_weight * blob
    }
}

/// Four patterns: wide bands, narrow bands, a central blob and diagonal bands
/// with an off-center blob. No two are dihedral images of each other, so the
/// classes survive flip/rotation augmentation.
pub fn default_prototypes() -> Vec<ClassPrototype> {
    let wave = |fx: f64, fy: f64| ClassPrototype {
        freq_x: fx,
        freq_y: fy,
        phase: 0.0,
        blob_x: 0.5,
        blob_y: 0.5,
        blob_radius: 0.2,
        blob_weight: 0.0,
    };
    vec![
        wave(0.0, 1.0),
        wave(3.0, 0.0),
        ClassPrototype {
            blob_weight: 1.0,
            ..wave(0.0, 0.0)
        },
        ClassPrototype {
            blob_x: 0.3,
            blob_y: 0.7,
            blob_radius: 0.15,
            blob_weight: 0.5,
            ..wave(1.5, 1.5)
        },
    ]
}

/// Unstained tissue color and how strongly structure absorbs each channel.
const BACKGROUND: [f64; 3] = [0.92, 0.80, 0.88];
const ABSORPTION: [f64; 3] = [0.45, 0.70, 0.30];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterSpec {
    pub center_id: u32,
    pub n_per_class: usize,
    pub prototypes: Vec<ClassPrototype>,
    pub stain: StainTransform,
    /// Standard deviation of the pixel noise added before staining.
    pub noise_sigma: f64,
    /// Scale of the structure's absorption, in `[0, 1]`.
    pub contrast: f64,
}

impl CenterSpec {
    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototypes.is_empty() || self.n_per_class == 0 {
            return Err(Error::contract(format!(
                "center {} needs at least one class and one sample per class",
                self.center_id
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::contract(format!(
                "center {}: noise_sigma must be ≥ 0 and contrast in [0, 1]",
                self.center_id
            )));
        }
        let finite = self.stain.matrix.iter().flatten().chain(&self.stain.offset);
        if !finite.clone().all(|v| v.is_finite()) {
            return Err(Error::contract(format!(
                "center {}: stain transform must be finite",
                self.center_id
            )));
        }
        Ok(())
    }
}

/// Three centers with Table-I-like imbalance (24, 12 and 32 images per class)
/// and distinct stains.
pub fn default_centers() -> Vec<CenterSpec> {
    let stains = [
        StainTransform::identity(),
        StainTransform {
            matrix: [[1.05, 0.15, 0.0], [0.0, 0.75, 0.05], [0.10, 0.0, 0.90]],
            offset: [0.12, -0.12, 0.06],
        },
        StainTransform {
            matrix: [[0.80, 0.0, 0.10], [0.08, 0.95, 0.0], [0.0, 0.10, 1.05]],
            offset: [-0.12, 0.04, 0.12],
        },
    ];
    stains
        .into_iter()
        .zip([24, 12, 32])
        .enumerate()
        .map(|(i, (stain, n))| CenterSpec {
            center_id: i as u32,
            n_per_class: n,
            prototypes: default_prototypes(),
            stain,
            noise_sigma: 0.2,
            contrast: 0.5,
        })
        .collect()
}

/// A labelled image from one center. `image` is `[3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub center_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterDataset {
    pub center_id: u32,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl CenterDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> CenterDataset {
        CenterDataset {
            center_id: self.center_id,
            n_classes: self.n_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// `n_per_class` images per class, class-major order, each
/// `clamp(stain(structure + N(0, σ)), 0, 1)`.
pub fn generate_center_dataset(
    spec: &CenterSpec,
    image_side: usize,
    seed: u64,
) -> Result<CenterDataset> {
    spec.validate()?;
    if image_side == 0 {
        return Err(Error::contract("image side must be ≥ 1"));
    }
    let mut rng = rng::stream(seed, &[rng::tag::DATA, spec.center_id as u64]);
    let (h, w) = (image_side, image_side);
    let plane = h * w;
    let mut samples = Vec::with_capacity(spec.n_per_class * spec.n_classes());
    for (label, proto) in spec.prototypes.iter().enumerate() {
        let structure: Vec<f64> = (0..plane)
            .map(|p| proto.structure(p / w, p % w, h, w))
            .collect();
        for _ in 0..spec.n_per_class {
            let mut data = vec![0.0; 3 * plane];
            for (p, s) in structure.iter().enumerate() {
                let mut rgb = [0.0; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    *v = BACKGROUND[c] - spec.contrast * ABSORPTION[c] * s
                        + spec.noise_sigma * noise;
                }
                for (c, v) in spec.stain.apply(rgb).into_iter().enumerate() {
                    data[c * plane + p] = v.clamp(0.0, 1.0);
                }
            }
            samples.push(Sample {
                image: Tensor::from_parts(vec![3, h, w], data),
                label,
                center_id: spec.center_id,
            });
        }
    }
    Ok(CenterDataset {
        center_id: spec.center_id,
        n_classes: spec.n_classes(),
        samples,
    })
}

/// Per-channel mean over every pixel of every image.
pub fn channel_means<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Vec<f64> {
    let mut sums = Vec::new();
    let mut count = 0usize;
    for img in images {
        let c = img.shape()[0];
        let plane = img.len() / c;
        sums.resize(c, 0.0);
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += img.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
        count += plane;
    }
    sums.into_iter().map(|s| s / count.max(1) as f64).collect()
}
