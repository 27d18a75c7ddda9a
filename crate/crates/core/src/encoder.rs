//! Convolutional feature encoder with output stride 8.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Conv2d, ConvCache, ConvSpec};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channel_widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilation_last_stage: usize,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channel_widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            dilation_last_stage: 2,
            feature_dim: 64,
        }
    }
}

impl EncoderConfig {
    /// Every width divided by `factor` (used for micro models in gradient checks).
    pub fn scaled_down(&self, factor: usize) -> Self {
        let channel_widths: Vec<usize> = self.channel_widths.iter().map(|w| (w / factor).max(1)).collect();
        Self {
            feature_dim: *channel_widths.last().expect("at least one stage"),
            channel_widths,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_widths.is_empty() || self.channel_widths.len() != self.strides.len() {
            return Err(Error::InvalidConfig("encoder widths and strides must be nonempty and of equal length".into()));
        }
        if self.channel_widths.last() != Some(&self.feature_dim) {
            return Err(Error::InvalidConfig("encoder feature_dim must equal the last channel width".into()));
        }
        if self.strides.iter().product::<usize>() != OUTPUT_STRIDE {
            return Err(Error::InvalidConfig(format!("encoder strides must multiply to {OUTPUT_STRIDE}")));
        }
        if self.dilation_last_stage == 0 {
            return Err(Error::InvalidConfig("dilation must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encoder output: `feature_dim × H/8 × W/8`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Tensor<T>) -> Self {
        Self {
            data,
            stride: OUTPUT_STRIDE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    stages: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    convs: Vec<ConvCache<T>>,
    /// Post-activation output of every stage.
    outputs: Vec<Tensor<T>>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: &EncoderConfig) -> Self {
        let mut in_ch = 3;
        let last = config.channel_widths.len() - 1;
        let stages = config
            .channel_widths
            .iter()
            .zip(&config.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let dilation = if i == last { config.dilation_last_stage } else { 1 };
                let conv = Conv2d::new(
                    store,
                    rng,
                    &format!("encoder.stage{}", i + 1),
                    ConvSpec::new(in_ch, w, 3).stride(s).dilation(dilation),
                );
                in_ch = w;
                conv
            })
            .collect();
        Self { stages }
    }

    pub fn stages(&self) -> &[Conv2d] {
        &self.stages
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<(FeatureMap<T>, EncoderCache<T>)> {
        let (c, h, w) = image.shape();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("encoder expects 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} is not divisible by the output stride {OUTPUT_STRIDE}"
            )));
        }
        let mut convs = Vec::with_capacity(self.stages.len());
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let x = outputs.last().unwrap_or(image);
            let (pre, cache) = conv.forward(params, x);
            convs.push(cache);
            outputs.push(relu(&pre));
        }
        let features = outputs.last().expect("encoder has stages").clone();
        debug_assert_eq!((features.height(), features.width()), (h / OUTPUT_STRIDE, w / OUTPUT_STRIDE));
        Ok((FeatureMap::new(features), EncoderCache { convs, outputs }))
    }

    /// Accumulates parameter gradients. The image gradient is not formed.
    pub fn backward<T: Scalar>(&self, params: &ParamStore<T>, cache: &EncoderCache<T>, d_features: &Tensor<T>, grads: &mut Gradients<T>) {
        let mut grad = d_features.clone();
        for (i, conv) in self.stages.iter().enumerate().rev() {
            let d_pre = relu_backward(&cache.outputs[i], &grad);
            match conv.backward(params, &cache.convs[i], &d_pre, grads, i > 0) {
                Some(dx) => grad = dx,
                None => break,
            }
        }
    }
}

pub fn encode<T: Scalar>(encoder: &Encoder, params: &ParamStore<T>, image: &Tensor<T>) -> Result<FeatureMap<T>> {
    encoder.forward(params, image).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: &EncoderConfig, seed: u64) -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&mut store, &mut rng, config);
        (enc, store)
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(3, h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn output_shape_is_stride_8_for_all_divisible_sizes() {
        let (enc, store) = build(&EncoderConfig::default(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in (16..=128).step_by(8) {
            let img = random_image(&mut rng, s, s);
            let f = encode(&enc, &store, &img).unwrap();
            assert_eq!(f.data.shape(), (64, s / 8, s / 8));
            assert_eq!(f.stride, 8);
            assert!(f.data.all_finite());
        }
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let (enc, store) = build(&EncoderConfig::default(), 1);
        let img = Tensor::<f64>::zeros(3, 417, 417);
        assert!(matches!(encode(&enc, &store, &img), Err(Error::ShapeMismatch(_))));
        let img = Tensor::<f64>::zeros(3, 64, 60);
        assert!(encode(&enc, &store, &img).is_err());
    }

    #[test]
    fn zero_image_follows_bias_propagation() {
        let (enc, mut store) = build(&EncoderConfig::default(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for conv in enc.stages() {
            for b in store.values_mut(conv.bias) {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let f = encode(&enc, &store, &Tensor::zeros(3, 32, 32)).unwrap();
        // Layer-by-layer oracle on constant maps, away from the zero-padded border:
        // with a constant input v, an interior output is bias + v * sum(weights).
        let mut v = vec![0.0f64; 3];
        for conv in enc.stages() {
            let w = store.values(conv.weight);
            let b = store.values(conv.bias);
            let kk = conv.kernel * conv.kernel;
            v = (0..conv.out_channels)
                .map(|o| {
                    let mut s = b[o];
                    for (ci, vi) in v.iter().enumerate() {
                        let base = (o * conv.in_channels + ci) * kk;
                        s += vi * w[base..base + kk].iter().sum::<f64>();
                    }
                    s.max(0.0)
                })
                .collect();
        }
        // Interior cells of a 32x32 input exist only for stage outputs far from the
        // border; the final 4x4 map is fully border-affected, so check a larger input.
        let big = encode(&enc, &store, &Tensor::zeros(3, 128, 128)).unwrap();
        for (c, want) in v.iter().enumerate() {
            let got = big.data.at(c, 8, 8);
            assert!((got - want).abs() < 1e-12, "channel {c}: {got} vs {want}");
        }
        // zero biases give an exactly zero output
        for conv in enc.stages() {
            store.values_mut(conv.bias).fill(0.0);
        }
        let z = encode(&enc, &store, &Tensor::zeros(3, 32, 32)).unwrap();
        assert!(z.data.data().iter().all(|&x| x == 0.0));
        assert_eq!(f.data.shape(), (64, 4, 4));
    }

    #[test]
    fn shifting_input_by_8_shifts_interior_features_by_one_cell() {
        let (enc, store) = build(&EncoderConfig::default(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 64, 64);
        let shifted = img.translate(8, 8);
        let a = encode(&enc, &store, &img).unwrap().data;
        let b = encode(&enc, &store, &shifted).unwrap().data;
        // receptive field reaches ~3 cells; compare cells well inside both maps
        for c in 0..a.channels() {
            for y in 3..5 {
                for x in 3..5 {
                    assert!((a.at(c, y, x) - b.at(c, y + 1, x + 1)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let config = EncoderConfig::default().scaled_down(4);
        let (enc, store) = build(&config, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 16, 16);
        let (f, cache) = enc.forward(&store, &img).unwrap();
        let r = Tensor::from_fn(f.data.channels(), f.data.height(), f.data.width(), |_, _, _| rng.random_range(-1.0..1.0));
        let objective = |st: &ParamStore<f64>| -> f64 {
            let out = encode(&enc, st, &img).unwrap().data;
            out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut grads = store.zero_gradients();
        enc.backward(&store, &cache, &r, &mut grads);
        let h = 1e-5;
        let mut checked = 0;
        for id in store.ids() {
            let n = store.values(id).len();
            for i in (0..n).step_by((n / 7).max(1)) {
                let mut p = store.clone();
                p.values_mut(id)[i] += h;
                let up = objective(&p);
                p.values_mut(id)[i] -= 2.0 * h;
                let down = objective(&p);
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(id)[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4, "{} [{i}]: fd {fd} vs analytic {an}", store.get(id).name);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            feature_dim: 32,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_stride = EncoderConfig {
            strides: vec![2, 2, 1, 1],
            ..EncoderConfig::default()
        };
        assert!(bad_stride.validate().is_err());
    }
}
