use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{binarize_mask, ClassId, Dataset, Mask, SplitConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportPair {
    pub sample_id: usize,
    pub image: Tensor<f32>,
    /// Binary mask of the target class.
    pub mask: Mask,
    /// Dense label map, used by the multi-class branch during training.
    pub labels: Mask,
}

/// One k-shot task: `k` annotated supports and a query of the same class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub supports: Vec<SupportPair>,
    pub query_id: usize,
    pub query_image: Tensor<f32>,
    pub query_mask: Mask,
    pub query_labels: Mask,
    pub target_class: ClassId,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    /// Mirrors every image and mask of the episode.
    pub fn flipped(&self) -> Episode {
        Episode {
            supports: self
                .supports
                .iter()
                .map(|s| SupportPair {
                    sample_id: s.sample_id,
                    image: s.image.flip_horizontal(),
                    mask: s.mask.flip_horizontal(),
                    labels: s.labels.flip_horizontal(),
                })
                .collect(),
            query_id: self.query_id,
            query_image: self.query_image.flip_horizontal(),
            query_mask: self.query_mask.flip_horizontal(),
            query_labels: self.query_labels.flip_horizontal(),
            target_class: self.target_class,
        }
    }
}

/// Draws a target class of the phase's class set uniformly, then `k + 1`
/// distinct images of it without replacement.
pub fn sample_episode<R: Rng>(
    dataset: &Dataset,
    split: &SplitConfig,
    phase: Phase,
    k: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidConfig("episodes need at least one support".into()));
    }
    let classes = match phase {
        Phase::Train => &split.train_classes,
        Phase::Test => &split.test_classes,
    };
    if classes.is_empty() {
        return Err(Error::Empty("split has no classes for this phase"));
    }
    let class = classes[rng.random_range(0..classes.len())];
    let pool = dataset.indices_of(class);
    if pool.len() < k + 1 {
        return Err(Error::InsufficientImages {
            class,
            available: pool.len(),
            needed: k + 1,
        });
    }
    let picks = index::sample(rng, pool.len(), k + 1);
    let mut drawn = picks.iter().map(|i| &dataset.samples[pool[i]]);
    let query = drawn.next().expect("k + 1 >= 2 picks");
    let supports = drawn
        .map(|s| {
            let mask = binarize_mask(&s.label_map, class);
            SupportPair {
                sample_id: s.id,
                image: s.image.clone(),
                mask,
                labels: s.label_map.clone(),
            }
        })
        .collect();
    Ok(Episode {
        supports,
        query_id: query.id,
        query_image: query.image.clone(),
        query_mask: binarize_mask(&query.label_map, class),
        query_labels: query.label_map.clone(),
        target_class: class,
    })
}
