//! The assembled network and the episodic training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Episode, Mask, IGNORE_LABEL};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusedFeatures, Fusion, FusionKind};
use crate::heads::{cross_entropy_with_grad, total_loss, AsppHead, LossBundle, Reduction, SegLogits, ASPP_RATES};
use crate::params::{Gradients, ParamStore};
use crate::prototype::PoolWeights;
use crate::tensor::{Scalar, Tensor};

/// Pixel values are shifted by this before encoding.
const INPUT_MEAN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionKind,
    /// Channels of the fused features (the reduced width inside pyramid fusion).
    pub fusion_width: usize,
    pub aspp_hidden: usize,
    pub aspp_rates: Vec<usize>,
    /// Foreground classes seen in training; the multi-class head has one more channel.
    pub num_train_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion: FusionKind::Pyramid,
            fusion_width: 64,
            aspp_hidden: 64,
            aspp_rates: ASPP_RATES.to_vec(),
            num_train_classes: 12,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for gradient checks and fast tests.
    pub fn micro(num_train_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::default().scaled_down(4),
            fusion: FusionKind::Pyramid,
            fusion_width: 16,
            aspp_hidden: 16,
            aspp_rates: ASPP_RATES.to_vec(),
            num_train_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.fusion_width == 0 || self.aspp_hidden == 0 || self.aspp_rates.is_empty() {
            return Err(Error::InvalidConfig("fusion and head widths must be positive".into()));
        }
        if self.num_train_classes == 0 || self.num_train_classes > 254 {
            return Err(Error::InvalidConfig(format!("num_train_classes {} out of range", self.num_train_classes)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub fusion: Fusion,
    /// Foreground/background classifier shared by the query and support branches.
    pub head: AsppHead,
    /// Multi-class classifier over encoder features.
    pub mcl_head: AsppHead,
}

struct Modules {
    encoder: Encoder,
    fusion: Fusion,
    head: AsppHead,
    mcl_head: AsppHead,
}

fn build_modules<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Modules {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.encoder.feature_dim;
    let encoder = Encoder::new(store, &mut rng, &config.encoder);
    let fusion = Fusion::new(store, &mut rng, config.fusion, c, config.fusion_width);
    let head = AsppHead::new(store, &mut rng, "head", config.fusion_width, config.aspp_hidden, 2, &config.aspp_rates);
    let mcl_head = AsppHead::new(
        store,
        &mut rng,
        "mcl_head",
        c,
        config.aspp_hidden,
        config.num_train_classes + 1,
        &config.aspp_rates,
    );
    Modules {
        encoder,
        fusion,
        head,
        mcl_head,
    }
}

/// Which parts of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    pub use_spt: bool,
    pub use_mcl: bool,
    pub lambda_mcl: f64,
    pub reduction: Reduction,
    /// When false the encoder receives no gradient.
    pub train_encoder: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            use_spt: true,
            use_mcl: true,
            lambda_mcl: 0.1,
            reduction: Reduction::Mean,
            train_encoder: true,
        }
    }
}

/// A one-shot training pair in network precision.
#[derive(Clone, Debug)]
pub struct TrainingPair<T> {
    pub support_image: Tensor<T>,
    pub support_mask: Mask,
    /// Multi-class targets (background 0, train classes 1.., others ignored).
    pub support_targets: Mask,
    pub query_image: Tensor<T>,
    pub query_mask: Mask,
    pub query_targets: Mask,
}

impl<T: Scalar> TrainingPair<T> {
    /// Uses the first support of `episode`; `lut` maps dataset labels to head targets.
    pub fn from_episode(episode: &Episode, lut: &[u8; 256]) -> Result<Self> {
        let support = episode.supports.first().ok_or(Error::Empty("episode supports"))?;
        Ok(Self {
            support_image: support.image.cast(),
            support_mask: support.mask.clone(),
            support_targets: support.labels.remap(lut),
            query_image: episode.query_image.cast(),
            query_mask: episode.query_mask.clone(),
            query_targets: episode.query_labels.remap(lut),
        })
    }
}

impl<T: Scalar> Network<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let m = build_modules(&config, &mut params, seed);
        Ok(Self {
            config,
            params,
            encoder: m.encoder,
            fusion: m.fusion,
            head: m.head,
            mcl_head: m.mcl_head,
        })
    }

    /// Rebuilds the module graph for `config` and installs `params` into it.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamStore::<T>::new();
        let m = build_modules(&config, &mut layout, 0);
        if !layout.same_layout(&params) {
            return Err(Error::Checkpoint("parameter names or shapes do not match the model config".into()));
        }
        Ok(Self {
            config,
            params,
            encoder: m.encoder,
            fusion: m.fusion,
            head: m.head,
            mcl_head: m.mcl_head,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            head: self.head.clone(),
            mcl_head: self.mcl_head.clone(),
        }
    }

    /// Parameter ids that belong to the encoder.
    pub fn encoder_param_ids(&self) -> Vec<crate::params::ParamId> {
        self.encoder.stages().iter().flat_map(|c| [c.weight, c.bias]).collect()
    }

    fn normalize(image: &Tensor<T>) -> Tensor<T> {
        let mean = T::from_f64(INPUT_MEAN);
        image.map(|v| v - mean)
    }

    /// Encoder features of an image with values in `[0, 1]`.
    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (f, _) = self.encoder.forward(&self.params, &Self::normalize(image))?;
        Ok(f.data)
    }

    pub fn fuse(&self, features: &Tensor<T>, proto: &[T]) -> Result<FusedFeatures<T>> {
        Ok(self.fusion.forward(&self.params, features, proto)?.0)
    }

    /// Foreground/background logits at `out_hw` for features guided by `proto`.
    pub fn segment_logits(&self, features: &Tensor<T>, proto: &[T], out_hw: (usize, usize)) -> Result<SegLogits<T>> {
        let fused = self.fuse(features, proto)?;
        Ok(self.head.forward(&self.params, &fused.data, out_hw).0)
    }

    pub fn multiclass_logits(&self, features: &Tensor<T>, out_hw: (usize, usize)) -> SegLogits<T> {
        self.mcl_head.forward(&self.params, features, out_hw).0
    }

    /// Evaluates the training objective; when `grads` is given, accumulates
    /// the gradient of `total` into it.
    pub fn objective(&self, pair: &TrainingPair<T>, opts: &ObjectiveOptions, mut grads: Option<&mut Gradients<T>>) -> Result<LossBundle> {
        if opts.lambda_mcl < 0.0 {
            return Err(Error::NegativeWeight(opts.lambda_mcl));
        }
        let p = &self.params;
        let hw = (pair.query_image.height(), pair.query_image.width());
        let shw = (pair.support_image.height(), pair.support_image.width());
        let (fs, enc_s) = self.encoder.forward(p, &Self::normalize(&pair.support_image))?;
        let (fq, enc_q) = self.encoder.forward(p, &Self::normalize(&pair.query_image))?;
        let (fs, fq) = (fs.data, fq.data);
        let pool = PoolWeights::new(&pair.support_mask, (fs.height(), fs.width()))?;
        let proto = pool.pool(&fs);

        let mut d_fs = Tensor::zeros(fs.channels(), fs.height(), fs.width());
        let mut d_fq = Tensor::zeros(fq.channels(), fq.height(), fq.width());
        let mut d_proto = vec![T::zero(); proto.len()];

        // Binary branch on one image: fuse with the prototype, classify, score.
        let mut binary_branch = |features: &Tensor<T>, mask: &Mask, out_hw: (usize, usize), d_feat: &mut Tensor<T>, grads: Option<&mut Gradients<T>>| -> Result<f64> {
            let (fused, fc) = self.fusion.forward(p, features, &proto)?;
            let (logits, hc) = self.head.forward(p, &fused.data, out_hw);
            let (loss, dl) = cross_entropy_with_grad(&logits.data, mask.data(), IGNORE_LABEL, opts.reduction)?;
            if let Some(g) = grads {
                let d_fused = self.head.backward(p, &hc, &dl, g);
                let (df, dp) = self.fusion.backward(p, &fc, &d_fused, g);
                d_feat.add_assign(&df);
                for (a, b) in d_proto.iter_mut().zip(dp) {
                    *a += b;
                }
            }
            Ok(loss.as_f64())
        };

        let l_q = binary_branch(&fq, &pair.query_mask, hw, &mut d_fq, grads.as_deref_mut())?;
        let l_s = if opts.use_spt {
            binary_branch(&fs, &pair.support_mask, shw, &mut d_fs, grads.as_deref_mut())?
        } else {
            0.0
        };

        let mut l_seg = 0.0;
        if opts.use_mcl {
            let lambda = T::from_f64(opts.lambda_mcl);
            for (features, targets, out_hw, d_feat) in [
                (&fs, &pair.support_targets, shw, &mut d_fs),
                (&fq, &pair.query_targets, hw, &mut d_fq),
            ] {
                let (logits, hc) = self.mcl_head.forward(p, features, out_hw);
                let (loss, mut dl) = cross_entropy_with_grad(&logits.data, targets.data(), IGNORE_LABEL, opts.reduction)?;
                l_seg += loss.as_f64();
                if let Some(g) = grads.as_deref_mut() {
                    dl.scale(lambda);
                    d_feat.add_assign(&self.mcl_head.backward(p, &hc, &dl, g));
                }
            }
        }

        if let Some(g) = grads {
            pool.backward(&d_proto, &mut d_fs);
            if opts.train_encoder {
                self.encoder.backward(p, &enc_s, &d_fs, g);
                self.encoder.backward(p, &enc_q, &d_fq, g);
            }
        }
        total_loss(l_q, l_s, l_seg, opts.lambda_mcl)
    }
}
