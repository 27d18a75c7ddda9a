//! Layer primitives with explicit forward caches and backward passes.
//!
//! Every differentiable op here comes as a `forward` that returns whatever the
//! matching `backward` needs. Composite modules (encoder, fusion, heads) chain
//! these by hand; there is no tape.

use rand::Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Square 2-D convolution with "same"-style padding `dilation·(kernel−1)/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

/// Shape description used to create a [`Conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Weight plus bias scalars.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, spec: ConvSpec) -> Self {
        assert!(spec.kernel % 2 == 1, "only odd kernels are supported");
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let weight = store.add_fan_in(
            format!("{name}.weight"),
            vec![spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            fan_in,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), vec![spec.out_channels]);
        Self {
            weight,
            bias,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            dilation: spec.dilation,
        }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1);
        let pad = self.padding();
        (
            (h + 2 * pad - span - 1) / self.stride + 1,
            (w + 2 * pad - span - 1) / self.stride + 1,
        )
    }

    fn kdim(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.channels(), self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.output_size(x.height(), x.width());
        let npos = oh * ow;
        let cols = self.im2col(x, oh, ow);
        let bias = params.values(self.bias);
        let mut out = Vec::with_capacity(self.out_channels * npos);
        for &b in bias {
            out.extend(std::iter::repeat_n(b, npos));
        }
        T::gemm(
            self.out_channels,
            self.kdim(),
            npos,
            params.values(self.weight),
            (self.kdim() as isize, 1),
            &cols,
            (npos as isize, 1),
            T::one(),
            &mut out,
            (npos as isize, 1),
        );
        (
            Tensor::from_vec(self.out_channels, oh, ow, out),
            ConvCache {
                cols,
                in_shape: x.shape(),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_input_grad`.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (oh, ow) = cache.out_hw;
        assert_eq!(dy.shape(), (self.out_channels, oh, ow), "conv grad shape mismatch");
        let npos = oh * ow;
        let kdim = self.kdim();
        let dyd = dy.data();
        T::gemm(
            self.out_channels,
            npos,
            kdim,
            dyd,
            (npos as isize, 1),
            &cache.cols,
            (1, npos as isize),
            T::one(),
            grads.get_mut(self.weight),
            (kdim as isize, 1),
        );
        let db = grads.get_mut(self.bias);
        for (o, g) in db.iter_mut().enumerate() {
            *g += dyd[o * npos..(o + 1) * npos].iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); kdim * npos];
        T::gemm(
            kdim,
            self.out_channels,
            npos,
            params.values(self.weight),
            (1, kdim as isize),
            dyd,
            (npos as isize, 1),
            T::zero(),
            &mut dcols,
            (npos as isize, 1),
        );
        Some(self.col2im(&dcols, cache.in_shape, oh, ow))
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `off`.
    fn valid_range(&self, off: isize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        // i = o*s + off must satisfy 0 <= i < in_len
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if in_len as isize - off <= 0 {
            0
        } else {
            ((in_len as isize - off + s - 1) / s).min(out_len as isize)
        };
        (lo.max(0) as usize, hi.max(lo).max(0) as usize)
    }

    fn im2col<T: Scalar>(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        let (c, h, w) = x.shape();
        let k = self.kernel;
        let npos = oh * ow;
        let pad = self.padding() as isize;
        let mut cols = vec![T::zero(); c * k * k * npos];
        let xd = x.data();
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let offy = (ky * self.dilation) as isize - pad;
                let (ylo, yhi) = self.valid_range(offy, h, oh);
                for kx in 0..k {
                    let offx = (kx * self.dilation) as isize - pad;
                    let (xlo, xhi) = self.valid_range(offx, w, ow);
                    let row = ((ci * k + ky) * k + kx) * npos;
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = (oy * self.stride) as isize + offy;
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        if self.stride == 1 {
                            let ix0 = (xlo as isize + offx) as usize;
                            dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                dst[ox] = src[((ox * self.stride) as isize + offx) as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, dcols: &[T], in_shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor<T> {
        let (c, h, w) = in_shape;
        let k = self.kernel;
        let npos = oh * ow;
        let pad = self.padding() as isize;
        let mut dx = Tensor::zeros(c, h, w);
        let dxd = dx.data_mut();
        for ci in 0..c {
            for ky in 0..k {
                let offy = (ky * self.dilation) as isize - pad;
                let (ylo, yhi) = self.valid_range(offy, h, oh);
                for kx in 0..k {
                    let offx = (kx * self.dilation) as isize - pad;
                    let (xlo, xhi) = self.valid_range(offx, w, ow);
                    if xlo >= xhi {
                        continue;
                    }
                    let row = ((ci * k + ky) * k + kx) * npos;
                    for oy in ylo..yhi {
                        let iy = ((oy * self.stride) as isize + offy) as usize;
                        let base = ci * h * w + iy * w;
                        let src = &dcols[row + oy * ow..row + (oy + 1) * ow];
                        for ox in xlo..xhi {
                            let ix = ((ox * self.stride) as isize + offx) as usize;
                            dxd[base + ix] += src[ox];
                        }
                    }
                }
            }
        }
        dx
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its forward output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(y.shape(), dy.shape());
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    let (c, h, w) = y.shape();
    Tensor::from_vec(c, h, w, data)
}

/// Non-overlapping `factor × factor` average pooling. Edge windows that run
/// past the input (ceil mode) average only the cells they cover.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = Tensor::zeros(c, oh, ow);
    for ci in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                *out.at_mut(ci, y / factor, x_ / factor) += x.at(ci, y, x_);
            }
        }
    }
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                *out.at_mut(ci, oy, ox) = out.at(ci, oy, ox) * pool_norm(factor, (h, w), oy, ox);
            }
        }
    }
    out
}

fn pool_norm<T: Scalar>(factor: usize, in_hw: (usize, usize), oy: usize, ox: usize) -> T {
    let rows = in_hw.0.min((oy + 1) * factor) - oy * factor;
    let cols = in_hw.1.min((ox + 1) * factor) - ox * factor;
    T::from_f64(1.0 / (rows * cols) as f64)
}

/// Adjoint of [`avg_pool`] for an input of size `in_hw`.
pub fn avg_pool_backward<T: Scalar>(dy: &Tensor<T>, factor: usize, in_hw: (usize, usize)) -> Tensor<T> {
    let (c, oh, ow) = dy.shape();
    assert_eq!((oh, ow), (in_hw.0.div_ceil(factor), in_hw.1.div_ceil(factor)), "avg_pool_backward size mismatch");
    Tensor::from_fn(c, in_hw.0, in_hw.1, |ci, y, x| {
        let (oy, ox) = (y / factor, x / factor);
        dy.at(ci, oy, ox) * pool_norm::<T>(factor, in_hw, oy, ox)
    })
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
#[derive(Clone, Debug, PartialEq)]
pub struct Bilinear {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn interp_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

impl Bilinear {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        assert!(in_hw.0 > 0 && in_hw.1 > 0 && out_hw.0 > 0 && out_hw.1 > 0);
        Self {
            in_hw,
            out_hw,
            rows: interp_taps(in_hw.0, out_hw.0),
            cols: interp_taps(in_hw.1, out_hw.1),
        }
    }

    pub fn output_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (c, h, w) = x.shape();
        assert_eq!((h, w), self.in_hw, "bilinear input size mismatch");
        let (oh, ow) = self.out_hw;
        let mut out = Tensor::zeros(c, oh, ow);
        let mut tmp = vec![T::zero(); h * ow];
        let taps_x: Vec<(usize, usize, T, T)> = self
            .cols
            .iter()
            .map(|&(a, b, f)| (a, b, T::from_f64(1.0 - f), T::from_f64(f)))
            .collect();
        let taps_y: Vec<(usize, usize, T, T)> = self
            .rows
            .iter()
            .map(|&(a, b, f)| (a, b, T::from_f64(1.0 - f), T::from_f64(f)))
            .collect();
        for ci in 0..c {
            let src = x.plane(ci);
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for (ox, &(a, b, wa, wb)) in taps_x.iter().enumerate() {
                    tmp[y * ow + ox] = wa * row[a] + wb * row[b];
                }
            }
            let dst = out.plane_mut(ci);
            for (oy, &(a, b, wa, wb)) in taps_y.iter().enumerate() {
                for ox in 0..ow {
                    dst[oy * ow + ox] = wa * tmp[a * ow + ox] + wb * tmp[b * ow + ox];
                }
            }
        }
        out
    }

    /// Adjoint of [`Bilinear::forward`].
    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Tensor<T> {
        let (c, oh, ow) = dy.shape();
        assert_eq!((oh, ow), self.out_hw, "bilinear grad size mismatch");
        let (h, w) = self.in_hw;
        let mut dx = Tensor::zeros(c, h, w);
        let mut tmp = vec![T::zero(); h * ow];
        for ci in 0..c {
            tmp.fill(T::zero());
            let g = dy.plane(ci);
            for (oy, &(a, b, f)) in self.rows.iter().enumerate() {
                let (wa, wb) = (T::from_f64(1.0 - f), T::from_f64(f));
                for ox in 0..ow {
                    let v = g[oy * ow + ox];
                    tmp[a * ow + ox] += wa * v;
                    tmp[b * ow + ox] += wb * v;
                }
            }
            let dst = dx.plane_mut(ci);
            for y in 0..h {
                for (ox, &(a, b, f)) in self.cols.iter().enumerate() {
                    let v = tmp[y * ow + ox];
                    dst[y * w + a] += T::from_f64(1.0 - f) * v;
                    dst[y * w + b] += T::from_f64(f) * v;
                }
            }
        }
        dx
    }
}
