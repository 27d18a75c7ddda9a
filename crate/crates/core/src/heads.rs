//! ASPP-style classifiers and the pixelwise cross-entropy losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Bilinear, Conv2d, ConvCache, ConvSpec};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const ASPP_RATES: [usize; 3] = [1, 2, 4];

/// Class scores at input resolution, `K × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> SegLogits<T> {
    pub fn num_classes(&self) -> usize {
        self.data.channels()
    }

    /// Per-pixel softmax over the class axis.
    pub fn softmax(&self) -> Tensor<T> {
        let (k, h, w) = self.data.shape();
        let n = h * w;
        let mut out = self.data.clone();
        let d = out.data_mut();
        for i in 0..n {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(d[c * n + i]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (d[c * n + i] - m).exp();
                d[c * n + i] = e;
                z += e;
            }
            for c in 0..k {
                d[c * n + i] = d[c * n + i] / z;
            }
        }
        out
    }
}

/// Parallel dilated 3×3 branches (each followed by ReLU) summed, then a 1×1
/// projection to class scores and bilinear upsampling to the image size.
#[derive(Clone, Debug, PartialEq)]
pub struct AsppHead {
    pub branches: Vec<Conv2d>,
    pub project: Conv2d,
}

pub struct AsppCache<T> {
    branches: Vec<(ConvCache<T>, Tensor<T>)>,
    project: ConvCache<T>,
    up: Bilinear,
}

impl AsppHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        hidden: usize,
        num_classes: usize,
        rates: &[usize],
    ) -> Self {
        let branches = rates
            .iter()
            .map(|&r| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.rate{r}"),
                    ConvSpec::new(in_channels, hidden, 3).dilation(r),
                )
            })
            .collect();
        let project = Conv2d::new(store, rng, &format!("{name}.project"), ConvSpec::new(hidden, num_classes, 1));
        Self { branches, project }
    }

    pub fn num_classes(&self) -> usize {
        self.project.out_channels
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>, out_hw: (usize, usize)) -> (SegLogits<T>, AsppCache<T>) {
        let mut sum: Option<Tensor<T>> = None;
        let mut branches = Vec::with_capacity(self.branches.len());
        for conv in &self.branches {
            let (pre, cache) = conv.forward(params, x);
            let act = relu(&pre);
            match &mut sum {
                Some(s) => s.add_assign(&act),
                None => sum = Some(act.clone()),
            }
            branches.push((cache, act));
        }
        let hidden = sum.expect("ASPP needs at least one branch");
        let (scores, project) = self.project.forward(params, &hidden);
        let up = Bilinear::new((x.height(), x.width()), out_hw);
        let logits = SegLogits { data: up.forward(&scores) };
        (logits, AsppCache { branches, project, up })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Scalar>(&self, params: &ParamStore<T>, cache: &AsppCache<T>, d_logits: &Tensor<T>, grads: &mut Gradients<T>) -> Tensor<T> {
        let d_scores = cache.up.backward(d_logits);
        let d_hidden = self
            .project
            .backward(params, &cache.project, &d_scores, grads, true)
            .expect("input grad");
        let mut dx: Option<Tensor<T>> = None;
        for (conv, (cc, act)) in self.branches.iter().zip(&cache.branches) {
            let d_pre = relu_backward(act, &d_hidden);
            let d = conv.backward(params, cc, &d_pre, grads, true).expect("input grad");
            match &mut dx {
                Some(s) => s.add_assign(&d),
                None => dx = Some(d),
            }
        }
        dx.expect("ASPP needs at least one branch")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Average over non-ignored pixels.
    #[default]
    Mean,
    /// Plain sum over non-ignored pixels.
    Sum,
}

/// Softmax cross-entropy of `K × H × W` logits against per-pixel class targets.
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &Tensor<T>, target: &[u8], ignore: u8, reduction: Reduction) -> Result<(T, Tensor<T>)> {
    let (k, h, w) = logits.shape();
    let n = h * w;
    if target.len() != n {
        return Err(Error::ShapeMismatch(format!("target has {} pixels, logits {h}x{w}", target.len())));
    }
    if let Some(&bad) = target.iter().find(|&&t| t != ignore && t as usize >= k) {
        return Err(Error::TargetOutOfRange { value: bad, classes: k });
    }
    let valid = target.iter().filter(|&&t| t != ignore).count();
    let mut grad = Tensor::zeros(k, h, w);
    if valid == 0 {
        return Ok((T::zero(), grad));
    }
    let scale = match reduction {
        Reduction::Mean => T::from_f64(1.0 / valid as f64),
        Reduction::Sum => T::one(),
    };
    let src = logits.data();
    let g = grad.data_mut();
    let mut loss = T::zero();
    for (i, &t) in target.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let mut m = T::neg_infinity();
        for c in 0..k {
            m = m.max(src[c * n + i]);
        }
        let mut z = T::zero();
        for c in 0..k {
            z += (src[c * n + i] - m).exp();
        }
        let log_z = z.ln() + m;
        loss += log_z - src[t as usize * n + i];
        for c in 0..k {
            let p = (src[c * n + i] - log_z).exp();
            let onehot = if c == t as usize { T::one() } else { T::zero() };
            g[c * n + i] = (p - onehot) * scale;
        }
    }
    Ok((loss * scale, grad))
}

pub fn cross_entropy_mask<T: Scalar>(logits: &SegLogits<T>, target: &[u8], ignore: u8, reduction: Reduction) -> Result<T> {
    cross_entropy_with_grad(&logits.data, target, ignore, reduction).map(|(l, _)| l)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_q: f64,
    pub l_s: f64,
    pub l_seg: f64,
    pub total: f64,
    pub lambda_mcl: f64,
}

pub fn total_loss(l_q: f64, l_s: f64, l_seg: f64, lambda_mcl: f64) -> Result<LossBundle> {
    if lambda_mcl < 0.0 || !lambda_mcl.is_finite() {
        return Err(Error::NegativeWeight(lambda_mcl));
    }
    Ok(LossBundle {
        l_q,
        l_s,
        l_seg,
        total: l_q + l_s + lambda_mcl * l_seg,
        lambda_mcl,
    })
}
