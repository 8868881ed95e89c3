//! Dataset representation and statistics: the class taxonomy, in-memory
//! samples, the per-class membership index driving adaptive sampling, and the
//! static class-frequency vector `dist`.
//!
//! On-disk ingestion lives in [`io`], the synthetic dataset generator in
//! [`synth`].

mod io;
mod synth;

pub use io::{Dataset, load_sample, load_taxonomy, scan_index};
pub use synth::{SynthReport, generate_synthetic};

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered class names; the position in the list is the class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    names: Vec<String>,
    background_id: u8,
}

impl ClassTaxonomy {
    /// Build a taxonomy with class 0 as background. Names must be unique and
    /// non-empty, and there must be at least two classes (masks are 8-bit, so
    /// at most 256).
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Dataset(format!(
                "taxonomy needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if names.len() > 256 {
            return Err(Error::Dataset(format!(
                "taxonomy exceeds the 256 classes an 8-bit mask can hold: {}",
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Dataset(format!("class {i} has an empty name")));
            }
            if names[..i].contains(name) {
                return Err(Error::Dataset(format!("duplicate class name '{name}'")));
            }
        }
        Ok(ClassTaxonomy {
            names,
            background_id: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, c: u8) -> Option<&str> {
        self.names.get(c as usize).map(String::as_str)
    }

    pub fn background_id(&self) -> u8 {
        self.background_id
    }
}

/// One training or evaluation item, fully decoded.
///
/// Pixel values are `f64` in `[0,1]`; the label mask holds class ids. A
/// missing `valid` mask means every pixel counts.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub rgb: Array3<f64>,
    pub nir: Option<Array3<f64>>,
    pub labels: Array2<u8>,
    pub valid: Option<Array2<bool>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    /// Check the shape, range, and stride contracts that loading enforces.
    pub fn validate(&self, num_classes: usize, stride: usize) -> Result<()> {
        let (h, w) = self.labels.dim();
        let (rc, rh, rw) = self.rgb.dim();
        if rc != 3 {
            return Err(Error::Dataset(format!(
                "sample '{}': rgb must have 3 channels, got {rc}",
                self.id
            )));
        }
        if (rh, rw) != (h, w) {
            return Err(Error::Dataset(format!(
                "sample '{}': rgb is {rh}x{rw} but labels are {h}x{w}",
                self.id
            )));
        }
        if let Some(ref nir) = self.nir {
            let (nc, nh, nw) = nir.dim();
            if nc != 1 || (nh, nw) != (h, w) {
                return Err(Error::Dataset(format!(
                    "sample '{}': nir is [{nc},{nh},{nw}], expected [1,{h},{w}]",
                    self.id
                )));
            }
        }
        if let Some(ref valid) = self.valid
            && valid.dim() != (h, w)
        {
            return Err(Error::Dataset(format!(
                "sample '{}': valid mask is {:?}, expected ({h}, {w})",
                self.id,
                valid.dim()
            )));
        }
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Dataset(format!(
                "sample '{}': size {h}x{w} is not a multiple of the model stride {stride}",
                self.id
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Dataset(format!(
                "sample '{}': label out of range ({bad} >= {num_classes})",
                self.id
            )));
        }
        Ok(())
    }

    /// True if any pixel of class `c` is valid in this sample.
    pub fn contains_class(&self, c: u8) -> bool {
        match &self.valid {
            None => self.labels.iter().any(|&v| v == c),
            Some(valid) => self
                .labels
                .iter()
                .zip(valid.iter())
                .any(|(&v, &ok)| ok && v == c),
        }
    }
}

/// Stack the NIR channel under RGB, producing the 4-channel input tensor
/// ordered `[R, G, B, NIR]`.
pub fn concat_nir(sample: &Sample) -> Result<Array3<f64>> {
    let nir = sample.nir.as_ref().ok_or_else(|| {
        Error::Dataset(format!(
            "sample '{}' has no NIR channel; run with use_nir=false for RGB-only data",
            sample.id
        ))
    })?;
    let (_, h, w) = sample.rgb.dim();
    let mut out = Array3::zeros((4, h, w));
    for ch in 0..3 {
        out.index_axis_mut(Axis(0), ch)
            .assign(&sample.rgb.index_axis(Axis(0), ch));
    }
    out.index_axis_mut(Axis(0), 3)
        .assign(&nir.index_axis(Axis(0), 0));
    Ok(out)
}

/// Where each class occurs and how many valid pixels it covers, over one
/// dataset. Membership lists hold positions into `samples`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub samples: Vec<String>,
    pub per_class_members: Vec<Vec<usize>>,
    pub pixel_counts: Vec<u64>,
}

impl DatasetIndex {
    pub fn empty(num_classes: usize) -> Self {
        DatasetIndex {
            samples: Vec::new(),
            per_class_members: vec![Vec::new(); num_classes],
            pixel_counts: vec![0; num_classes],
        }
    }
}

/// Min-max normalize raw pixel counts to the `[0,1]` frequency vector `dist`:
/// the most frequent class maps to 1, the rarest to 0.
///
/// All-equal counts are degenerate (zero range); they map to all-0.5 so
/// downstream scores stay finite and class-neutral.
pub fn compute_dist(pixel_counts: &[u64]) -> Vec<f64> {
    let min = pixel_counts.iter().copied().min().unwrap_or(0);
    let max = pixel_counts.iter().copied().max().unwrap_or(0);
    if min == max {
        log::warn!("all class pixel counts equal ({min}); dist degenerates to 0.5 everywhere");
        return vec![0.5; pixel_counts.len()];
    }
    let range = (max - min) as f64;
    pixel_counts
        .iter()
        .map(|&c| (c - min) as f64 / range)
        .collect()
}

/// The `stats.json` payload: raw counts, the normalized `dist`, and per-class
/// member lists (as sample ids, so the file stands alone).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub pixel_counts: Vec<u64>,
    pub dist: Vec<f64>,
    pub per_class_members: Vec<Vec<String>>,
}

impl Stats {
    pub fn from_index(index: &DatasetIndex) -> Self {
        let members = index
            .per_class_members
            .iter()
            .map(|m| m.iter().map(|&i| index.samples[i].clone()).collect())
            .collect();
        Stats {
            pixel_counts: index.pixel_counts.clone(),
            dist: compute_dist(&index.pixel_counts),
            per_class_members: members,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Dataset(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: invalid stats file: {e}", path.display())))
    }
}
