//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/00000.png   8-bit RGB
//! <dir>/labels/00000.png   8-bit gray, pixel value = class id
//! ```

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::synth::{class_families, Dataset, GenConfig, ImageSample, SHAPE_FAMILIES, TEXTURE_FAMILIES};
use super::{ClassId, Mask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: ClassId,
    pub shape: String,
    pub texture: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub class_id: ClassId,
    pub image: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub generator: GenConfig,
    pub classes: Vec<ClassEntry>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn describe(dataset: &Dataset) -> Self {
        let n = dataset.config.num_classes;
        Self {
            format: MANIFEST_FORMAT,
            generator: dataset.config,
            classes: (1..=n as ClassId)
                .map(|id| {
                    let (s, t) = class_families(n, id);
                    ClassEntry {
                        id,
                        shape: SHAPE_FAMILIES[s].to_string(),
                        texture: TEXTURE_FAMILIES[t].to_string(),
                    }
                })
                .collect(),
            samples: dataset
                .samples
                .iter()
                .map(|s| SampleEntry {
                    id: s.id,
                    class_id: s.class_id,
                    image: format!("images/{:05}.png", s.id),
                    label: format!("labels/{:05}.png", s.id),
                })
                .collect(),
        }
    }
}

fn to_rgb(image: &Tensor<f32>) -> RgbImage {
    let (_, h, w) = image.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn from_rgb(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::from_fn(3, h as usize, w as usize, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .expect("mask buffer matches its dimensions");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_vec(h as usize, w as usize, img.into_raw()))
}

/// Writes images, label maps and `manifest.json` under `dir` (created if missing).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(Error::io("creating dataset directory", &p))?;
    }
    let manifest = DatasetManifest::describe(dataset);
    for (sample, entry) in dataset.samples.iter().zip(&manifest.samples) {
        let ip = dir.join(&entry.image);
        to_rgb(&sample.image).save(&ip).map_err(|source| Error::Image { path: ip.clone(), source })?;
        save_mask_png(&sample.label_map, &dir.join(&entry.label))?;
    }
    let mp = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mp, text + "\n").map_err(Error::io("writing manifest", &mp))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mp = dir.join("manifest.json");
    let text = fs::read_to_string(&mp).map_err(Error::io("reading manifest", &mp))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json { path: mp.clone(), source })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::InvalidConfig(format!("unsupported manifest format {}", manifest.format)));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let ip = dir.join(&entry.image);
        let img = image::open(&ip)
            .map_err(|source| Error::Image { path: ip.clone(), source })?
            .into_rgb8();
        let label_map = load_mask_png(&dir.join(&entry.label))?;
        let image = from_rgb(&img);
        if (image.height(), image.width()) != label_map.dims() {
            return Err(Error::ShapeMismatch(format!("sample {}: image and label sizes differ", entry.id)));
        }
        samples.push(ImageSample {
            id: entry.id,
            image,
            label_map,
            class_id: entry.class_id,
        });
    }
    Ok(Dataset::new(manifest.generator, samples))
}
