//! Fusion of query (or support) features with a broadcast prototype.
//!
//! Two variants: a single 3×3 convolution over the concatenation, and the
//! pyramid module that reduces channels, runs three scale paths (1, 1/2, 1/4)
//! that are upsampled and summed, then refines with two bottleneck residual blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{avg_pool, avg_pool_backward, relu, relu_backward, Bilinear, Conv2d, ConvCache, ConvSpec};
use crate::params::{Gradients, ParamStore};
use crate::prototype::{broadcast_backward, broadcast_prototype};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Base,
    Pyramid,
}

/// Output of a fusion module; same spatial size as its feature input.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures<T> {
    pub data: Tensor<T>,
}

/// `relu(conv(x))`, the unit used throughout the fusion module.
#[derive(Clone, Debug, PartialEq)]
struct ConvRelu {
    conv: Conv2d,
}

struct ConvReluCache<T> {
    conv: ConvCache<T>,
    out: Tensor<T>,
}

impl ConvRelu {
    fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, ConvReluCache<T>) {
        let (pre, conv) = self.conv.forward(params, x);
        let out = relu(&pre);
        (out.clone(), ConvReluCache { conv, out })
    }

    fn backward<T: Scalar>(&self, params: &ParamStore<T>, cache: &ConvReluCache<T>, dy: &Tensor<T>, grads: &mut Gradients<T>) -> Tensor<T> {
        let d_pre = relu_backward(&cache.out, dy);
        self.conv
            .backward(params, &cache.conv, &d_pre, grads, true)
            .expect("input gradient requested")
    }
}

/// Single 3×3 convolution (with ReLU) over `[features; prototype]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseFusion {
    unit: ConvRelu,
}

/// Pre-activation bottleneck: `x + c3(relu(c2(relu(c1(relu(x))))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

struct ResidualCache<T> {
    x_act: Tensor<T>,
    c1: ConvCache<T>,
    a1: Tensor<T>,
    c2: ConvCache<T>,
    a2: Tensor<T>,
    c3: ConvCache<T>,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, width: usize, bottleneck: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), ConvSpec::new(width, bottleneck, 1)),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), ConvSpec::new(bottleneck, bottleneck, 3)),
            conv3: Conv2d::new(store, rng, &format!("{name}.conv3"), ConvSpec::new(bottleneck, width, 1)),
        }
    }

    fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, ResidualCache<T>) {
        let x_act = relu(x);
        let (p1, c1) = self.conv1.forward(params, &x_act);
        let a1 = relu(&p1);
        let (p2, c2) = self.conv2.forward(params, &a1);
        let a2 = relu(&p2);
        let (mut out, c3) = self.conv3.forward(params, &a2);
        out.add_assign(x);
        (
            out,
            ResidualCache {
                x_act,
                c1,
                a1,
                c2,
                a2,
                c3,
            },
        )
    }

    fn backward<T: Scalar>(&self, params: &ParamStore<T>, cache: &ResidualCache<T>, dy: &Tensor<T>, grads: &mut Gradients<T>) -> Tensor<T> {
        let d_a2 = self.conv3.backward(params, &cache.c3, dy, grads, true).expect("input grad");
        let d_p2 = relu_backward(&cache.a2, &d_a2);
        let d_a1 = self.conv2.backward(params, &cache.c2, &d_p2, grads, true).expect("input grad");
        let d_p1 = relu_backward(&cache.a1, &d_a1);
        let d_xact = self.conv1.backward(params, &cache.c1, &d_p1, grads, true).expect("input grad");
        let mut dx = relu_backward(&cache.x_act, &d_xact);
        dx.add_assign(dy);
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFusion {
    reduce: ConvRelu,
    paths: [ConvRelu; 3],
    pub blocks: [ResidualBlock; 2],
}

const PATH_FACTORS: [usize; 3] = [1, 2, 4];

struct PathCache<T> {
    unit: ConvReluCache<T>,
    up: Option<Bilinear>,
}

impl PyramidFusion {
    /// `width` is the reduced channel count; residual bottlenecks use `width / 8`.
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, in_channels: usize, width: usize) -> Self {
        let unit = |store: &mut ParamStore<T>, rng: &mut R, name: &str, i: usize| ConvRelu {
            conv: Conv2d::new(store, rng, name, ConvSpec::new(i, width, 3)),
        };
        let reduce = unit(store, rng, "fusion.reduce", in_channels);
        let paths = [
            unit(store, rng, "fusion.path1", width),
            unit(store, rng, "fusion.path2", width),
            unit(store, rng, "fusion.path4", width),
        ];
        let b = (width / 8).max(1);
        let blocks = [
            ResidualBlock::new(store, rng, "fusion.res1", width, b),
            ResidualBlock::new(store, rng, "fusion.res2", width, b),
        ];
        Self { reduce, paths, blocks }
    }

    /// Scalar parameter count for a given concatenated input and reduced width.
    pub fn param_count(in_channels: usize, width: usize) -> usize {
        let b = (width / 8).max(1);
        let block = ConvSpec::new(width, b, 1).param_count()
            + ConvSpec::new(b, b, 3).param_count()
            + ConvSpec::new(b, width, 1).param_count();
        ConvSpec::new(in_channels, width, 3).param_count() + 3 * ConvSpec::new(width, width, 3).param_count() + 2 * block
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Fusion {
    Base(BaseFusion),
    Pyramid(PyramidFusion),
}

enum Inner<T> {
    Base(ConvReluCache<T>),
    Pyramid {
        reduce: ConvReluCache<T>,
        paths: Vec<PathCache<T>>,
        blocks: Vec<ResidualCache<T>>,
    },
}

/// Everything [`Fusion::backward`] needs from the forward pass.
pub struct FusionCache<T> {
    feature_channels: usize,
    inner: Inner<T>,
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, kind: FusionKind, feature_dim: usize, width: usize) -> Self {
        match kind {
            FusionKind::Base => Fusion::Base(BaseFusion {
                unit: ConvRelu {
                    conv: Conv2d::new(store, rng, "fusion.base", ConvSpec::new(2 * feature_dim, width, 3)),
                },
            }),
            FusionKind::Pyramid => Fusion::Pyramid(PyramidFusion::new(store, rng, 2 * feature_dim, width)),
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Base(_) => FusionKind::Base,
            Fusion::Pyramid(_) => FusionKind::Pyramid,
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, features: &Tensor<T>, proto: &[T]) -> Result<(FusedFeatures<T>, FusionCache<T>)> {
        let (c, h, w) = features.shape();
        if proto.len() != c {
            return Err(Error::ShapeMismatch(format!("prototype dim {} vs feature channels {c}", proto.len())));
        }
        let x = Tensor::concat_channels(features, &broadcast_prototype(proto, h, w));
        let (out, inner) = match self {
            Fusion::Base(b) => {
                let (y, cache) = b.unit.forward(params, &x);
                (y, Inner::Base(cache))
            }
            Fusion::Pyramid(p) => {
                let (reduced, reduce) = p.reduce.forward(params, &x);
                let mut sum: Option<Tensor<T>> = None;
                let mut paths = Vec::with_capacity(3);
                for (unit, &f) in p.paths.iter().zip(&PATH_FACTORS) {
                    let input = if f == 1 { reduced.clone() } else { avg_pool(&reduced, f) };
                    let (y, cache) = unit.forward(params, &input);
                    let (y, up) = if f == 1 {
                        (y, None)
                    } else {
                        let up = Bilinear::new((input.height(), input.width()), (h, w));
                        (up.forward(&y), Some(up))
                    };
                    match &mut sum {
                        Some(s) => s.add_assign(&y),
                        None => sum = Some(y),
                    }
                    paths.push(PathCache { unit: cache, up });
                }
                let mut y = sum.expect("three paths");
                let mut blocks = Vec::with_capacity(2);
                for block in &p.blocks {
                    let (next, cache) = block.forward(params, &y);
                    blocks.push(cache);
                    y = next;
                }
                (y, Inner::Pyramid { reduce, paths, blocks })
            }
        };
        Ok((
            FusedFeatures { data: out },
            FusionCache {
                feature_channels: c,
                inner,
            },
        ))
    }

    /// Returns gradients with respect to the features and the prototype vector.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: &FusionCache<T>,
        d_out: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> (Tensor<T>, Vec<T>) {
        let dx = match (self, &cache.inner) {
            (Fusion::Base(b), Inner::Base(c)) => b.unit.backward(params, c, d_out, grads),
            (Fusion::Pyramid(p), Inner::Pyramid { reduce, paths, blocks }) => {
                let mut dy = d_out.clone();
                for (block, c) in p.blocks.iter().zip(blocks).rev() {
                    dy = block.backward(params, c, &dy, grads);
                }
                let mut d_reduced: Option<Tensor<T>> = None;
                for ((unit, &f), pc) in p.paths.iter().zip(&PATH_FACTORS).zip(paths) {
                    let d_path = match &pc.up {
                        Some(up) => up.backward(&dy),
                        None => dy.clone(),
                    };
                    let d_in = unit.backward(params, &pc.unit, &d_path, grads);
                    let d_in = if f == 1 { d_in } else { avg_pool_backward(&d_in, f, (dy.height(), dy.width())) };
                    match &mut d_reduced {
                        Some(d) => d.add_assign(&d_in),
                        None => d_reduced = Some(d_in),
                    }
                }
                p.reduce.backward(params, reduce, &d_reduced.expect("three paths"), grads)
            }
            _ => panic!("fusion cache does not match the module variant"),
        };
        let (d_features, d_broadcast) = dx.split_channels(cache.feature_channels);
        (d_features, broadcast_backward(&d_broadcast))
    }
}
