//! Synthetic shapes-world dataset: generation, class splits, episode sampling,
//! weak annotations and on-disk persistence.

mod episode;
mod io;
mod mask;
mod synth;
mod weak;

pub use episode::{sample_episode, Episode, Phase, SupportPair};
pub use io::{load_dataset, load_mask_png, save_dataset, save_mask_png, DatasetManifest};
pub use mask::{binarize_mask, connected_components, Mask};
pub use synth::{class_families, generate_dataset, Dataset, GenConfig, ImageSample, SHAPE_FAMILIES, TEXTURE_FAMILIES};
pub use weak::{weaken_annotation, Annotation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Foreground class identifier; 0 is background and [`IGNORE_LABEL`] is reserved.
pub type ClassId = u8;

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Disjoint train/test class partition for one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub split_index: usize,
    pub train_classes: Vec<ClassId>,
    pub test_classes: Vec<ClassId>,
}

/// Holds out the `split_index`-th contiguous quarter of `1..=num_classes` for testing.
pub fn make_splits(num_classes: usize, split_index: usize) -> Result<SplitConfig> {
    if split_index > 3 {
        return Err(Error::SplitIndex(split_index));
    }
    if num_classes == 0 || num_classes % 4 != 0 || num_classes > 254 {
        return Err(Error::InvalidConfig(format!(
            "num_classes must be a positive multiple of 4 below 255, got {num_classes}"
        )));
    }
    let quarter = num_classes / 4;
    let lo = split_index * quarter + 1;
    let hi = lo + quarter;
    let (test_classes, train_classes) = (1..=num_classes as ClassId).partition(|&c| (lo..hi).contains(&(c as usize)));
    Ok(SplitConfig {
        split_index,
        train_classes,
        test_classes,
    })
}

impl SplitConfig {
    pub fn num_classes(&self) -> usize {
        self.train_classes.len() + self.test_classes.len()
    }

    /// Maps dataset labels onto the multi-class head's targets: background 0,
    /// train classes `1..=|train|` in ascending order, everything else ignored.
    pub fn train_label_lut(&self) -> [u8; 256] {
        let mut lut = [IGNORE_LABEL; 256];
        lut[0] = 0;
        for (i, &c) in self.train_classes.iter().enumerate() {
            lut[c as usize] = (i + 1) as u8;
        }
        lut
    }
}
