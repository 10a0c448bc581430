use rand::seq::index;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::contract(format!("expected a [C, H, W] image, got {other:?}"))),
    }
}

/// Splits the image into `grid × grid` patches and swaps `k_swaps` disjoint,
/// uniformly chosen pairs of them across all channels.
pub fn corrupt(image: &Tensor, grid: usize, k_swaps: usize, seed: u64) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::contract(format!(
            "image {h}×{w} is not divisible into a {grid}×{grid} patch grid"
        )));
    }
    let patches = grid * grid;
    if 2 * k_swaps > patches {
        return Err(Error::contract(format!(
            "{k_swaps} disjoint swaps need {} patches, grid has {patches}",
            2 * k_swaps
        )));
    }
    let mut out = image.clone();
    if k_swaps == 0 {
        return Ok(out);
    }
    let (ph, pw) = (h / grid, w / grid);
    let mut rng = rng::stream(seed, &[rng::tag::CORRUPT]);
    let chosen = index::sample(&mut rng, patches, 2 * k_swaps).into_vec();
    let data = out.data_mut();
    for pair in chosen.chunks_exact(2) {
        let (a, b) = (pair[0], pair[1]);
        let (ay, ax) = ((a / grid) * ph, (a % grid) * pw);
        let (by, bx) = ((b / grid) * ph, (b % grid) * pw);
        for ch in 0..c {
            for dy in 0..ph {
                for dx in 0..pw {
                    let ia = ch * h * w + (ay + dy) * w + ax + dx;
                    let ib = ch * h * w + (by + dy) * w + bx + dx;
                    data.swap(ia, ib);
                }
            }
        }
    }
    Ok(out)
}

/// Rotates each channel 90° counter-clockwise.
pub fn rotate90(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    if h != w {
        return Err(Error::contract(format!("rotation needs a square image, got {h}×{w}")));
    }
    let src = image.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                data[base + i * w + j] = src[base + j * w + (w - 1 - i)];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], data))
}

/// Mirrors each channel left to right.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let src = image.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            let row = ch * h * w + i * w;
            for j in 0..w {
                data[row + j] = src[row + w - 1 - j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], data))
}

/// The eight dihedral variants: rotations by 0°, 90°, 180° and 270°, then the
/// same four rotations followed by a horizontal flip. Element 0 is the input.
pub fn augment(image: &Tensor) -> Result<Vec<Tensor>> {
    let mut rotations = vec![image.clone()];
    for i in 0..3 {
        rotations.push(rotate90(&rotations[i])?);
    }
    let mut out = rotations.clone();
    for r in &rotations {
        out.push(flip_horizontal(r)?);
    }
    Ok(out)
}

/// One variant of [`augment`] without building the other seven.
pub fn augment_variant(image: &Tensor, variant: usize) -> Result<Tensor> {
    let mut out = image.clone();
    for _ in 0..variant % 4 {
        out = rotate90(&out)?;
    }
    if variant % 8 >= 4 {
        out = flip_horizontal(&out)?;
    }
    Ok(out)
}
