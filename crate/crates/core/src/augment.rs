//! Exactly-invertible geometric augmentations plus photometric jitter.
//!
//! Geometric ops are pure index permutations (flips and quarter-turn
//! rotations), so applying them and then [`invert_geometric`] reproduces the
//! input bit for bit. That exactness is what lets the feature-consistency loss
//! compare augmented and original feature maps pixel by pixel. Photometric
//! jitter is pointwise (plus a permutation-invariant image mean), so it
//! commutes with the geometric ops exactly as well.

use ndarray::{Array2, Array3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One invertible geometric transform.
///
/// `Rot90 { k }` rotates by `k` quarter turns counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeometricOp {
    HFlip,
    VFlip,
    Rot90 { k: u8 },
}

impl GeometricOp {
    /// The op that undoes `self`: flips are involutions, rotations negate `k`.
    pub fn inverse(self) -> GeometricOp {
        match self {
            GeometricOp::HFlip => GeometricOp::HFlip,
            GeometricOp::VFlip => GeometricOp::VFlip,
            GeometricOp::Rot90 { k } => GeometricOp::Rot90 { k: (4 - k % 4) % 4 },
        }
    }
}

/// Colour jitter factors, each drawn uniformly from `[1 - strength, 1 + strength]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricOp {
    #[serde(rename = "b")]
    pub brightness: f64,
    #[serde(rename = "c")]
    pub contrast: f64,
    #[serde(rename = "s")]
    pub saturation: f64,
}

impl PhotometricOp {
    pub fn identity() -> Self {
        PhotometricOp {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }
}

/// The concrete, replayable transform applied to one training sample.
///
/// `geometric` is applied in order; `photometric` (if any) afterwards, to the
/// RGB channels only. `seed` records the draw that produced this record, so
/// the identical record can be regenerated with [`AugRecord::from_seed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub geometric: Vec<GeometricOp>,
    pub photometric: Option<PhotometricOp>,
    pub seed: u64,
}

impl AugRecord {
    pub fn identity() -> Self {
        AugRecord {
            geometric: Vec::new(),
            photometric: None,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.geometric.is_empty() && self.photometric.is_none()
    }

    /// True if any op in the record requires a square input.
    pub fn needs_square(&self) -> bool {
        self.geometric
            .iter()
            .any(|op| matches!(op, GeometricOp::Rot90 { .. }))
    }

    /// Rebuild the exact record that `sample_aug` produced for this seed.
    pub fn from_seed(seed: u64, p_apply: f64, sigma_p: f64) -> Result<Self> {
        let mut draw = ChaCha8Rng::seed_from_u64(seed);
        Ok(draw_record(&mut draw, seed, p_apply, sigma_p)?)
    }
}

/// Draw a random [`AugRecord`].
///
/// Each of horizontal flip, vertical flip, quarter-turn rotation, and colour
/// jitter is included independently with probability `p_apply`; the rotation
/// count `k` is uniform on `{0, 1, 2, 3}` when included.
pub fn sample_aug(rng: &mut impl RngCore, p_apply: f64, sigma_p: f64) -> Result<AugRecord> {
    if !(0.0..=1.0).contains(&p_apply) {
        return Err(Error::InvalidInput(format!(
            "p_apply must lie in [0,1], got {p_apply}"
        )));
    }
    let seed = rng.next_u64();
    let mut draw = ChaCha8Rng::seed_from_u64(seed);
    draw_record(&mut draw, seed, p_apply, sigma_p)
}

fn draw_record(
    draw: &mut ChaCha8Rng,
    seed: u64,
    p_apply: f64,
    sigma_p: f64,
) -> Result<AugRecord> {
    if !(0.0..1.0).contains(&sigma_p) && sigma_p != 0.0 {
        return Err(Error::InvalidInput(format!(
            "sigma_p must lie in [0,1), got {sigma_p}"
        )));
    }
    let mut geometric = Vec::new();
    if draw.random::<f64>() < p_apply {
        geometric.push(GeometricOp::HFlip);
    }
    if draw.random::<f64>() < p_apply {
        geometric.push(GeometricOp::VFlip);
    }
    if draw.random::<f64>() < p_apply {
        let k = draw.random_range(0..4u8);
        geometric.push(GeometricOp::Rot90 { k });
    }
    let photometric = if draw.random::<f64>() < p_apply {
        let lo = 1.0 - sigma_p;
        let hi = 1.0 + sigma_p;
        Some(PhotometricOp {
            brightness: draw.random_range(lo..=hi),
            contrast: draw.random_range(lo..=hi),
            saturation: draw.random_range(lo..=hi),
        })
    } else {
        None
    };
    Ok(AugRecord {
        geometric,
        photometric,
        seed,
    })
}

fn check_square(h: usize, w: usize, ops: &[GeometricOp]) -> Result<()> {
    let has_rot = ops.iter().any(|op| matches!(op, GeometricOp::Rot90 { .. }));
    if has_rot && h != w {
        return Err(Error::InvalidInput(format!(
            "rot90 requires a square input, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Apply one op to a 2-d plane. `Rot90 {k: 1}` maps `input[i][j]` to
/// `output[w-1-j][i]`.
fn apply_op_plane<T: Copy>(plane: &Array2<T>, op: GeometricOp) -> Array2<T> {
    let (h, w) = plane.dim();
    match op {
        GeometricOp::HFlip => Array2::from_shape_fn((h, w), |(i, j)| plane[(i, w - 1 - j)]),
        GeometricOp::VFlip => Array2::from_shape_fn((h, w), |(i, j)| plane[(h - 1 - i, j)]),
        GeometricOp::Rot90 { k } => {
            let mut out = plane.clone();
            for _ in 0..(k % 4) {
                let (ch, cw) = out.dim();
                let mut next = Array2::from_elem((cw, ch), out[(0, 0)]);
                for i in 0..ch {
                    for j in 0..cw {
                        next[(cw - 1 - j, i)] = out[(i, j)];
                    }
                }
                out = next;
            }
            out
        }
    }
}

/// Apply a list of geometric ops to a 2-d mask or plane, in order.
pub fn apply_geometric_mask<T: Copy>(mask: &Array2<T>, ops: &[GeometricOp]) -> Result<Array2<T>> {
    let (h, w) = mask.dim();
    check_square(h, w, ops)?;
    let mut out = mask.clone();
    for &op in ops {
        out = apply_op_plane(&out, op);
    }
    Ok(out)
}

/// Undo a list of geometric ops on a 2-d mask or plane.
pub fn invert_geometric_mask<T: Copy>(mask: &Array2<T>, ops: &[GeometricOp]) -> Result<Array2<T>> {
    let (h, w) = mask.dim();
    check_square(h, w, ops)?;
    let mut out = mask.clone();
    for &op in ops.iter().rev() {
        out = apply_op_plane(&out, op.inverse());
    }
    Ok(out)
}

/// Apply geometric ops to every channel of a `[C, H, W]` tensor.
pub fn apply_geometric(x: &Array3<f64>, ops: &[GeometricOp]) -> Result<Array3<f64>> {
    transform_channels(x, ops, false)
}

/// Undo geometric ops on every channel of a `[C, H, W]` tensor, so that
/// `invert_geometric(apply_geometric(x, ops), ops) == x` bit-exactly.
pub fn invert_geometric(x: &Array3<f64>, ops: &[GeometricOp]) -> Result<Array3<f64>> {
    transform_channels(x, ops, true)
}

fn transform_channels(x: &Array3<f64>, ops: &[GeometricOp], invert: bool) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    check_square(h, w, ops)?;
    let mut planes = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ch).to_owned();
        let out = if invert {
            invert_geometric_mask(&plane, ops)?
        } else {
            apply_geometric_mask(&plane, ops)?
        };
        planes.push(out);
    }
    let (oh, ow) = planes[0].dim();
    let mut out = Array3::zeros((c, oh, ow));
    for (ch, plane) in planes.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), ch).assign(plane);
    }
    Ok(out)
}

/// Mean of the per-pixel luma over the RGB channels, summed in sorted order so
/// the value is identical for any spatial permutation of the image.
fn grey_mean(x: &Array3<f64>) -> f64 {
    let (_, h, w) = x.dim();
    let mut lumas: Vec<f64> = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            lumas.push(luma(x[(0, i, j)], x[(1, i, j)], x[(2, i, j)]));
        }
    }
    lumas.sort_by(f64::total_cmp);
    let sum: f64 = lumas.iter().sum();
    sum / (h * w) as f64
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Colour jitter on the RGB channels of a `[3.., H, W]` tensor.
///
/// Applies brightness, then contrast (against the image grey mean), then
/// saturation (against per-pixel luma), then clamps to `[0, 1]`. Channels
/// beyond the first three (NIR) pass through untouched.
pub fn apply_photometric(x: &Array3<f64>, op: &PhotometricOp) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    if c < 3 {
        return Err(Error::InvalidInput(format!(
            "photometric jitter needs at least 3 channels, got {c}"
        )));
    }
    let mut out = x.clone();

    // Brightness.
    for ch in 0..3 {
        for i in 0..h {
            for j in 0..w {
                out[(ch, i, j)] *= op.brightness;
            }
        }
    }
    // Contrast, against the permutation-invariant grey mean.
    let mean = grey_mean(&out);
    for ch in 0..3 {
        for i in 0..h {
            for j in 0..w {
                out[(ch, i, j)] = mean + (out[(ch, i, j)] - mean) * op.contrast;
            }
        }
    }
    // Saturation, against per-pixel luma.
    for i in 0..h {
        for j in 0..w {
            let grey = luma(out[(0, i, j)], out[(1, i, j)], out[(2, i, j)]);
            for ch in 0..3 {
                out[(ch, i, j)] = grey + (out[(ch, i, j)] - grey) * op.saturation;
            }
        }
    }
    // Clamp once at the end; identity factors on in-range input stay bit-exact.
    for ch in 0..3 {
        for i in 0..h {
            for j in 0..w {
                out[(ch, i, j)] = out[(ch, i, j)].clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Apply a full record to an image and its label mask: the image gets the
/// geometric ops then the photometric op, the mask gets the geometric ops only.
pub fn apply_full(
    x: &Array3<f64>,
    y: &Array2<u8>,
    rec: &AugRecord,
) -> Result<(Array3<f64>, Array2<u8>)> {
    let mut img = apply_geometric(x, &rec.geometric)?;
    if let Some(ref p) = rec.photometric {
        img = apply_photometric(&img, p)?;
    }
    let mask = apply_geometric_mask(y, &rec.geometric)?;
    Ok((img, mask))
}
