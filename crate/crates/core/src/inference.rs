//! One-shot and k-shot segmentation, including the two-pass fused-prototype
//! refinement that pools a pseudo-prototype from the first-pass prediction.

use serde::{Deserialize, Serialize};

use crate::data::{Episode, Mask};
use crate::error::{Error, Result};
use crate::heads::SegLogits;
use crate::model::Network;
use crate::prototype::{fuse_prototypes, masked_average_pool, Prototype, PrototypeSource};
use crate::tensor::{Scalar, Tensor};

/// Which prototype guides the final prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeMode {
    /// Single pass with the support prototype.
    Support,
    /// Second pass with the pseudo-prototype alone.
    Pseudo,
    /// Second pass with the average of support and pseudo-prototypes.
    #[default]
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredMask<T> {
    pub mask: Mask,
    pub logits: SegLogits<T>,
    /// 1 for a single pass, 2 when the refined prototype was used.
    pub pass_index: u8,
    /// True when a second pass was requested but the first-pass mask was empty.
    pub fallback: bool,
    pub prototype: Prototype<T>,
}

/// Per-pixel argmax of binary logits; exact ties go to background.
pub fn argmax_mask<T: Scalar>(logits: &SegLogits<T>) -> Mask {
    let (k, h, w) = logits.data.shape();
    assert_eq!(k, 2, "argmax_mask expects foreground/background logits");
    let bg = logits.data.plane(0);
    let fg = logits.data.plane(1);
    Mask::from_vec(h, w, bg.iter().zip(fg).map(|(&b, &f)| (f > b) as u8).collect())
}

impl<T: Scalar> Network<T> {
    /// Classifies `query_features` guided by `prototype`.
    pub fn predict_with(&self, query_features: &Tensor<T>, prototype: Prototype<T>, out_hw: (usize, usize), pass_index: u8) -> Result<PredMask<T>> {
        let logits = self.segment_logits(query_features, &prototype.vector, out_hw)?;
        Ok(PredMask {
            mask: argmax_mask(&logits),
            logits,
            pass_index,
            fallback: false,
            prototype,
        })
    }

    fn support_prototypes(&self, episode: &Episode) -> Result<Vec<Prototype<T>>> {
        if episode.supports.is_empty() {
            return Err(Error::Empty("episode supports"));
        }
        episode
            .supports
            .iter()
            .map(|s| {
                let f = self.features(&s.image.cast())?;
                masked_average_pool(&f, &s.mask, PrototypeSource::Support, episode.target_class)
            })
            .collect()
    }

    /// Second pass: pools a pseudo-prototype from `first.mask` over the query
    /// features and combines it with `guide` according to `mode`. Returns
    /// `first` unchanged (flagged) if its mask is empty.
    pub fn refine(&self, query_features: &Tensor<T>, guide: &[Prototype<T>], first: PredMask<T>, mode: PrototypeMode) -> Result<PredMask<T>> {
        if mode == PrototypeMode::Support {
            return Ok(first);
        }
        if first.mask.is_empty_mask() {
            return Ok(PredMask { fallback: true, ..first });
        }
        let class_id = first.prototype.class_id;
        let pseudo = masked_average_pool(query_features, &first.mask, PrototypeSource::Pseudo, class_id)?;
        let proto = match mode {
            PrototypeMode::Pseudo => pseudo,
            _ => {
                let mut all = guide.to_vec();
                all.push(pseudo);
                fuse_prototypes(&all, None)?
            }
        };
        self.predict_with(query_features, proto, first.mask.dims(), 2)
    }

    /// Runs pass 2 with an externally chosen prototype.
    pub fn second_pass_with(&self, query_features: &Tensor<T>, first: &PredMask<T>, prototype: Prototype<T>) -> Result<PredMask<T>> {
        self.predict_with(query_features, prototype, first.mask.dims(), 2)
    }

    /// Single forward pass guided by the (first) support prototype.
    pub fn segment_support_guided(&self, episode: &Episode) -> Result<PredMask<T>> {
        self.segment(episode, PrototypeMode::Support)
    }

    /// Two passes: support-guided prediction, then the fused prototype.
    pub fn segment_prototype_fused(&self, episode: &Episode) -> Result<PredMask<T>> {
        self.segment(episode, PrototypeMode::Fused)
    }

    /// One-shot segmentation with the first support of `episode`.
    pub fn segment(&self, episode: &Episode, mode: PrototypeMode) -> Result<PredMask<T>> {
        let support = episode.supports.first().ok_or(Error::Empty("episode supports"))?;
        let fs = self.features(&support.image.cast())?;
        let proto = masked_average_pool(&fs, &support.mask, PrototypeSource::Support, episode.target_class)?;
        let fq = self.features(&episode.query_image.cast())?;
        let hw = episode.query_mask.dims();
        let first = self.predict_with(&fq, proto.clone(), hw, 1)?;
        self.refine(&fq, &[proto], first, mode)
    }

    /// k-shot segmentation: average of all support prototypes, optionally
    /// refined with the pseudo-prototype (average over k + 1).
    pub fn segment_kshot(&self, episode: &Episode, include_pseudo: bool) -> Result<PredMask<T>> {
        let protos = self.support_prototypes(episode)?;
        let avg = fuse_prototypes(&protos, None)?;
        let fq = self.features(&episode.query_image.cast())?;
        let first = self.predict_with(&fq, avg, episode.query_mask.dims(), 1)?;
        let mode = if include_pseudo { PrototypeMode::Fused } else { PrototypeMode::Support };
        self.refine(&fq, &protos, first, mode)
    }
}
