//! Synthetic dataset generator: imbalanced multi-class scenes of noisy
//! rectangles and ellipses on a textured background, with a class-informative
//! NIR channel, sized for minutes-long CPU training runs.
//!
//! Generation is a pure function of the seed — identical seeds produce
//! byte-identical files.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ground-truth bookkeeping from one generation run, usable as an oracle for
/// what a loader should find on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthReport {
    pub ids: Vec<String>,
    pub pixel_counts: Vec<u64>,
    pub per_class_image_counts: Vec<usize>,
}

/// Fraction of images that contain class `c`, given its target pixel
/// frequency. Rare classes appear in few images so each appearance carries a
/// visible footprint — and so membership lists X_c differ meaningfully in
/// size, which is what class-first sampling feeds on.
fn presence_fraction(freq: f64) -> f64 {
    (3.0 * freq + 0.1).clamp(0.15, 1.0)
}

/// Generate `n` samples of `size`×`size` at `out`, with per-class pixel
/// frequencies approximating `class_freqs` (class 0 = background) over the
/// whole set. Writes RGB + NIR images, label masks, and `classes.json`.
pub fn generate_synthetic(
    out: &Path,
    n: usize,
    size: usize,
    class_freqs: &[f64],
    seed: u64,
) -> Result<SynthReport> {
    let nc = class_freqs.len();
    if nc < 2 {
        return Err(Error::InvalidInput(format!(
            "class_freqs needs at least background + 1 class, got {nc} entries"
        )));
    }
    if nc > 256 {
        return Err(Error::InvalidInput(format!(
            "class_freqs has {nc} entries, masks are 8-bit"
        )));
    }
    if class_freqs.iter().any(|&f| f < 0.0 || !f.is_finite()) {
        return Err(Error::InvalidInput(
            "class_freqs entries must be finite and non-negative".into(),
        ));
    }
    let total: f64 = class_freqs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "class_freqs must sum to 1, got {total}"
        )));
    }
    if size == 0 || size % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "size must be a positive multiple of 4 (the model stride), got {size}"
        )));
    }

    fs::create_dir_all(out.join("images")).map_err(|e| Error::io(out, e))?;
    fs::create_dir_all(out.join("labels")).map_err(|e| Error::io(out, e))?;
    let names: Vec<String> = (0..nc)
        .map(|c| {
            if c == 0 {
                "background".to_string()
            } else {
                format!("class_{c:02}")
            }
        })
        .collect();
    let classes_path = out.join("classes.json");
    let classes_json = serde_json::to_string(&names).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(&classes_path, classes_json + "\n").map_err(|e| Error::io(&classes_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Which images contain which foreground class.
    let mut contains = vec![vec![false; nc]; n];
    let mut per_class_image_counts = vec![0usize; nc];
    per_class_image_counts[0] = n;
    for c in 1..nc {
        let k = ((presence_fraction(class_freqs[c]) * n as f64).round() as usize)
            .clamp(usize::from(n > 0), n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..k] {
            contains[i][c] = true;
        }
        per_class_image_counts[c] = k;
    }

    // Pixel budget per containing image, chosen so the set-wide frequency
    // lands on class_freqs.
    let area = (size * size) as f64;
    let budgets: Vec<f64> = (0..nc)
        .map(|c| {
            if c == 0 || per_class_image_counts[c] == 0 {
                0.0
            } else {
                class_freqs[c] * area * n as f64 / per_class_image_counts[c] as f64
            }
        })
        .collect();

    let mut ids = Vec::with_capacity(n);
    let mut pixel_counts = vec![0u64; nc];
    for i in 0..n {
        let id = format!("synth_{i:04}");
        let mut labels = Array2::<u8>::zeros((size, size));
        let mut painted_total = 0usize;
        let cap = (0.9 * area) as usize;
        for c in 1..nc {
            if !contains[i][c] {
                continue;
            }
            let target = (budgets[c] * rng.random_range(0.85..1.15)) as usize;
            let mut painted = 0usize;
            let mut attempts = 0;
            while painted < target && painted_total < cap && attempts < 200 {
                attempts += 1;
                painted += paint_shape(
                    &mut labels,
                    c as u8,
                    target - painted,
                    size,
                    &mut rng,
                );
                painted_total = labels.iter().filter(|&&v| v != 0).count();
            }
        }
        for &v in labels.iter() {
            pixel_counts[v as usize] += 1;
        }
        render(out, &id, &labels, &mut rng)?;
        ids.push(id);
    }

    Ok(SynthReport {
        ids,
        pixel_counts,
        per_class_image_counts,
    })
}

/// Paint one rectangle or ellipse of class `c` onto background pixels only.
/// Returns how many pixels changed. The footprint shrinks toward `remaining`
/// so class budgets are not badly overshot by the final shape.
fn paint_shape(
    labels: &mut Array2<u8>,
    c: u8,
    remaining: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let smax = (size / 3).max(5);
    let mut w = rng.random_range(3..=smax);
    let mut h = rng.random_range(3..=smax);
    let shrink_to = ((remaining as f64 * 1.2).sqrt().ceil() as usize).max(2);
    if w * h > remaining * 13 / 10 {
        w = w.min(shrink_to);
        h = h.min(shrink_to);
    }
    let ellipse = rng.random::<bool>();
    let top = rng.random_range(0..=size - h);
    let left = rng.random_range(0..=size - w);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut painted = 0;
    for di in 0..h {
        for dj in 0..w {
            if ellipse {
                let ny = (di as f64 + 0.5 - cy) / cy;
                let nx = (dj as f64 + 0.5 - cx) / cx;
                if ny * ny + nx * nx > 1.0 {
                    continue;
                }
            }
            let cell = &mut labels[(top + di, left + dj)];
            if *cell == 0 {
                *cell = c;
                painted += 1;
            }
        }
    }
    painted
}

/// Per-class colors: distinct hues for foreground classes on an earthy
/// background, plus a class-informative NIR response.
fn class_rgb(c: u8) -> (f64, f64, f64) {
    if c == 0 {
        (0.30, 0.42, 0.24)
    } else {
        let h = ((c - 1) as f64 * 0.37).fract();
        hsv_to_rgb(h, 0.65, 0.75)
    }
}

fn class_nir(c: u8) -> f64 {
    if c == 0 {
        0.8
    } else {
        0.15 + 0.55 * ((c - 1) as f64 * 0.41).fract()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match h6.floor() as u8 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn render(out: &Path, id: &str, labels: &Array2<u8>, rng: &mut ChaCha8Rng) -> Result<()> {
    let (h, w) = labels.dim();
    let mut rgb = RgbImage::new(w as u32, h as u32);
    let mut nir = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let c = labels[(i, j)];
            let (r, g, b) = class_rgb(c);
            let px = [
                to_byte(r + rng.random_range(-0.06..0.06)),
                to_byte(g + rng.random_range(-0.06..0.06)),
                to_byte(b + rng.random_range(-0.06..0.06)),
            ];
            rgb.put_pixel(j as u32, i as u32, Rgb(px));
            let z = class_nir(c) + rng.random_range(-0.04..0.04);
            nir.put_pixel(j as u32, i as u32, Luma([to_byte(z)]));
        }
    }
    let rgb_path = out.join("images").join(format!("{id}_rgb.png"));
    rgb.save(&rgb_path).map_err(|e| Error::image(&rgb_path, e))?;
    let nir_path = out.join("images").join(format!("{id}_nir.png"));
    nir.save(&nir_path).map_err(|e| Error::image(&nir_path, e))?;
    let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([labels[(y as usize, x as usize)]])
    });
    let mask_path = out.join("labels").join(format!("{id}.png"));
    mask.save(&mask_path).map_err(|e| Error::image(&mask_path, e))?;
    Ok(())
}
