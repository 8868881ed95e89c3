//! On-disk dataset ingestion.
//!
//! Layout: `root/images/<id>_rgb.png` (8-bit RGB), optional
//! `root/images/<id>_nir.png` (8-bit grey), `root/labels/<id>.png` (8-bit
//! grey, pixel value = class id), optional `root/valid/<id>.png` (0 =
//! invalid, 255 = valid), and `root/classes.json` (ordered class-name array).

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::datamodel::{ClassTaxonomy, DatasetIndex, Sample};
use crate::error::{Error, Result};

/// Read `root/classes.json`.
pub fn load_taxonomy(root: &Path) -> Result<ClassTaxonomy> {
    let path = root.join("classes.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: invalid class list: {e}", path.display())))?;
    ClassTaxonomy::new(names)
}

fn rgb_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}_rgb.png"))
}

fn nir_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}_nir.png"))
}

fn labels_path(root: &Path, id: &str) -> PathBuf {
    root.join("labels").join(format!("{id}.png"))
}

fn valid_path(root: &Path, id: &str) -> PathBuf {
    root.join("valid").join(format!("{id}.png"))
}

/// Sorted sample ids found under `root/images`, by stripping the `_rgb.png`
/// suffix.
fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_rgb.png") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::image(path, e))
}

fn decode_grey(path: &Path, what: &str) -> Result<GrayImage> {
    let img = open_image(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::Dataset(format!(
            "{}: {what} must be 8-bit single-channel, got {:?}",
            path.display(),
            img.color()
        )));
    }
    Ok(img.into_luma8())
}

fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = open_image(path)?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::Dataset(format!(
            "{}: image must be 8-bit 3-channel RGB, got {:?}",
            path.display(),
            img.color()
        )));
    }
    Ok(img.into_rgb8())
}

fn grey_to_mask(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0]
    })
}

fn grey_to_valid(img: &GrayImage) -> Array2<bool> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] != 0
    })
}

/// Load one fully decoded sample and run its shape/range checks.
pub fn load_sample(
    root: &Path,
    id: &str,
    taxonomy: &ClassTaxonomy,
    stride: usize,
) -> Result<Sample> {
    let rgb_img = decode_rgb(&rgb_path(root, id))?;
    let (w, h) = rgb_img.dimensions();
    let rgb = Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        rgb_img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    });

    let lp = labels_path(root, id);
    if !lp.exists() {
        return Err(Error::Dataset(format!(
            "sample '{id}': missing label mask {}",
            lp.display()
        )));
    }
    let labels = grey_to_mask(&decode_grey(&lp, "label mask")?);

    let np = nir_path(root, id);
    let nir = if np.exists() {
        let img = decode_grey(&np, "NIR channel")?;
        let (nw, nh) = img.dimensions();
        Some(Array3::from_shape_fn(
            (1, nh as usize, nw as usize),
            |(_, i, j)| img.get_pixel(j as u32, i as u32)[0] as f64 / 255.0,
        ))
    } else {
        None
    };

    let vp = valid_path(root, id);
    let valid = if vp.exists() {
        Some(grey_to_valid(&decode_grey(&vp, "validity mask")?))
    } else {
        None
    };

    let sample = Sample {
        id: id.to_string(),
        rgb,
        nir,
        labels,
        valid,
    };
    sample.validate(taxonomy.num_classes(), stride)?;
    Ok(sample)
}

/// Build the dataset index — ids, valid-pixel counts per class, and per-class
/// membership lists — without retaining pixel data.
pub fn scan_index(root: &Path, taxonomy: &ClassTaxonomy, stride: usize) -> Result<DatasetIndex> {
    let ids = list_ids(root)?;
    let nc = taxonomy.num_classes();
    let mut index = DatasetIndex::empty(nc);
    for (pos, id) in ids.iter().enumerate() {
        let lp = labels_path(root, id);
        if !lp.exists() {
            return Err(Error::Dataset(format!(
                "sample '{id}': missing label mask {}",
                lp.display()
            )));
        }
        let labels = grey_to_mask(&decode_grey(&lp, "label mask")?);
        let (h, w) = labels.dim();

        let (rw, rh) =
            image::image_dimensions(rgb_path(root, id)).map_err(|e| Error::image(&lp, e))?;
        if (rh as usize, rw as usize) != (h, w) {
            return Err(Error::Dataset(format!(
                "sample '{id}': rgb is {rh}x{rw} but labels are {h}x{w}"
            )));
        }
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Dataset(format!(
                "sample '{id}': size {h}x{w} is not a multiple of the model stride {stride}"
            )));
        }

        let vp = valid_path(root, id);
        let valid = if vp.exists() {
            Some(grey_to_valid(&decode_grey(&vp, "validity mask")?))
        } else {
            None
        };
        if let Some(ref v) = valid
            && v.dim() != (h, w)
        {
            return Err(Error::Dataset(format!(
                "sample '{id}': valid mask is {:?}, expected ({h}, {w})",
                v.dim()
            )));
        }

        let mut present = vec![false; nc];
        for (i, &label) in labels.indexed_iter() {
            if let Some(ref v) = valid
                && !v[i]
            {
                continue;
            }
            let c = label as usize;
            if c >= nc {
                return Err(Error::Dataset(format!(
                    "sample '{id}': label out of range ({label} >= {nc})"
                )));
            }
            index.pixel_counts[c] += 1;
            present[c] = true;
        }
        for (c, &p) in present.iter().enumerate() {
            if p {
                index.per_class_members[c].push(pos);
            }
        }
        index.samples.push(id.clone());
    }
    Ok(index)
}

/// A fully loaded dataset: taxonomy, index, and every decoded sample.
///
/// Desk-scale sets fit comfortably in memory, so the training loop works off
/// eager samples; [`scan_index`] + [`load_sample`] remain available for
/// index-only or streaming access.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub taxonomy: ClassTaxonomy,
    pub samples: Vec<Sample>,
    pub index: DatasetIndex,
}

impl Dataset {
    /// Load `root` end to end, enforcing that every side is a multiple of
    /// `stride`.
    pub fn load(root: &Path, stride: usize) -> Result<Dataset> {
        let taxonomy = load_taxonomy(root)?;
        let index = scan_index(root, &taxonomy, stride)?;
        let samples = index
            .samples
            .iter()
            .map(|id| load_sample(root, id, &taxonomy, stride))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            taxonomy,
            samples,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }
}
