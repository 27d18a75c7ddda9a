//! Class prototypes: masked average pooling, averaging and spatial broadcast.
//!
//! Pooling is defined on features bilinearly upsampled to mask resolution.
//! Since upsampling is linear, the prototype is computed without materializing
//! the upsampled map: the mask is pulled back through the adjoint of the
//! upsampler into per-cell weights over the coarse features.

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Mask};
use crate::error::{Error, Result};
use crate::nn::Bilinear;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeSource {
    Support,
    Pseudo,
    Fused,
    KShot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype<T> {
    pub vector: Vec<T>,
    pub source: PrototypeSource,
    pub class_id: ClassId,
}

impl<T: Scalar> Prototype<T> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn all_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

/// Per-cell pooling weights over a coarse feature grid for a full-resolution mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolWeights<T> {
    weights: Tensor<T>,
}

impl<T: Scalar> PoolWeights<T> {
    pub fn new(mask: &Mask, feature_hw: (usize, usize)) -> Result<Self> {
        let count = mask.count_nonzero();
        if count == 0 {
            return Err(Error::EmptyMask("masked average pooling"));
        }
        let (h, w) = mask.dims();
        let m = Tensor::from_vec(
            1,
            h,
            w,
            mask.data().iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect(),
        );
        let mut weights = Bilinear::new(feature_hw, (h, w)).backward(&m);
        weights.scale(T::from_f64(1.0 / count as f64));
        Ok(Self { weights })
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn pool(&self, features: &Tensor<T>) -> Vec<T> {
        assert_eq!(
            (features.height(), features.width()),
            (self.weights.height(), self.weights.width()),
            "pooling weights do not match the feature grid"
        );
        let w = self.weights.data();
        (0..features.channels())
            .map(|c| features.plane(c).iter().zip(w).map(|(&f, &m)| f * m).sum())
            .collect()
    }

    /// Adds `d_proto[c] · weights` into every channel of `d_features`.
    pub fn backward(&self, d_proto: &[T], d_features: &mut Tensor<T>) {
        let w = self.weights.data();
        for (c, &g) in d_proto.iter().enumerate() {
            for (d, &m) in d_features.plane_mut(c).iter_mut().zip(w) {
                *d += g * m;
            }
        }
    }
}

pub fn masked_average_pool<T: Scalar>(
    features: &Tensor<T>,
    mask: &Mask,
    source: PrototypeSource,
    class_id: ClassId,
) -> Result<Prototype<T>> {
    let weights = PoolWeights::new(mask, (features.height(), features.width()))?;
    Ok(Prototype {
        vector: weights.pool(features),
        source,
        class_id,
    })
}

/// Weighted (default uniform) average of prototypes of one class.
pub fn fuse_prototypes<T: Scalar>(protos: &[Prototype<T>], weights: Option<&[f64]>) -> Result<Prototype<T>> {
    let first = protos.first().ok_or(Error::Empty("prototype list"))?;
    let dim = first.dim();
    if let Some(p) = protos.iter().find(|p| p.dim() != dim) {
        return Err(Error::ShapeMismatch(format!("prototype dims {dim} and {}", p.dim())));
    }
    if protos.iter().any(|p| p.class_id != first.class_id) {
        return Err(Error::ShapeMismatch("prototypes of different classes".into()));
    }
    let mut vector = vec![T::zero(); dim];
    match weights {
        None => {
            for p in protos {
                for (a, &b) in vector.iter_mut().zip(&p.vector) {
                    *a += b;
                }
            }
            let n = T::from_f64(protos.len() as f64);
            for v in &mut vector {
                *v = *v / n;
            }
        }
        Some(ws) => {
            if ws.len() != protos.len() {
                return Err(Error::ShapeMismatch(format!("{} weights for {} prototypes", ws.len(), protos.len())));
            }
            if let Some(&w) = ws.iter().find(|&&w| w < 0.0 || !w.is_finite()) {
                return Err(Error::NegativeWeight(w));
            }
            let total: f64 = ws.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("prototype weights sum to {total}, expected 1")));
            }
            for (p, &w) in protos.iter().zip(ws) {
                let w = T::from_f64(w);
                for (a, &b) in vector.iter_mut().zip(&p.vector) {
                    *a += w * b;
                }
            }
        }
    }
    let source = if protos.iter().all(|p| p.source == PrototypeSource::Support) && protos.len() > 1 {
        PrototypeSource::KShot
    } else if protos.len() == 1 {
        first.source
    } else {
        PrototypeSource::Fused
    };
    Ok(Prototype {
        vector,
        source,
        class_id: first.class_id,
    })
}

/// Spatially constant map with `vector` at every cell.
pub fn broadcast_prototype<T: Scalar>(vector: &[T], h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(vector.len(), h, w, |c, _, _| vector[c])
}

/// Adjoint of [`broadcast_prototype`]: per-channel spatial sums.
pub fn broadcast_backward<T: Scalar>(d_map: &Tensor<T>) -> Vec<T> {
    (0..d_map.channels()).map(|c| d_map.plane(c).iter().copied().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-2.0..2.0))
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
        let mut m = Mask::from_fn(h, w, |_, _| rng.random_bool(p) as u8);
        if m.is_empty_mask() {
            m.set(rng.random_range(0..h), rng.random_range(0..w), 1);
        }
        m
    }

    /// Upsamples explicitly, then averages with a double loop over pixels.
    fn pool_oracle(features: &Tensor<f64>, mask: &Mask) -> Vec<f64> {
        let (h, w) = mask.dims();
        let up = Bilinear::new((features.height(), features.width()), (h, w)).forward(features);
        let mut acc = vec![0.0; features.channels()];
        let mut n = 0.0;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) == 0 {
                    continue;
                }
                n += 1.0;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += up.at(c, y, x);
                }
            }
        }
        acc.iter().map(|a| a / n).collect()
    }

    fn proto(v: Vec<f64>, source: PrototypeSource) -> Prototype<f64> {
        Prototype {
            vector: v,
            source,
            class_id: 3,
        }
    }

    #[test]
    fn pooling_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let f = random_features(&mut rng, 64, 8, 8);
            let p = rng.random_range(0.01..0.6);
            let m = random_mask(&mut rng, 64, 64, p);
            let p = masked_average_pool(&f, &m, PrototypeSource::Support, 1).unwrap();
            for (a, b) in p.vector.iter().zip(pool_oracle(&f, &m)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_features_pool_to_constant() {
        let f = Tensor::from_fn(4, 8, 8, |c, _, _| c as f64 * 0.5 - 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mask(&mut rng, 64, 64, 0.1);
        let p = masked_average_pool(&f, &m, PrototypeSource::Support, 1).unwrap();
        for (c, v) in p.vector.iter().enumerate() {
            assert!((v - (c as f64 * 0.5 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_mask_selects_the_upsampled_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_features(&mut rng, 5, 8, 8);
        let up = Bilinear::new((8, 8), (64, 64)).forward(&f);
        let mut m = Mask::zeros(64, 64);
        m.set(17, 42, 1);
        let p = masked_average_pool(&f, &m, PrototypeSource::Support, 1).unwrap();
        for c in 0..5 {
            assert!((p.vector[c] - up.at(c, 17, 42)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let f = Tensor::<f64>::zeros(4, 8, 8);
        let err = masked_average_pool(&f, &Mask::zeros(64, 64), PrototypeSource::Pseudo, 1).unwrap_err();
        assert!(matches!(err, Error::EmptyMask(_)));
    }

    #[test]
    fn broadcast_then_pool_recovers_prototype() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = broadcast_prototype(&v, 8, 8);
        let m = random_mask(&mut rng, 64, 64, 0.2);
        let p = masked_average_pool(&b, &m, PrototypeSource::Support, 1).unwrap();
        for (a, b) in p.vector.iter().zip(&v) {
            assert!((a - b).abs() < 1e-6);
        }
        let one = broadcast_prototype(&v, 1, 1);
        assert_eq!(one.data(), &v[..]);
    }

    #[test]
    fn pooling_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_features(&mut rng, 6, 8, 8);
        let m = random_mask(&mut rng, 64, 64, 0.3);
        let pw = PoolWeights::new(&m, (8, 8)).unwrap();
        let g: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = pw.pool(&f).iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut df = Tensor::zeros(6, 8, 8);
        pw.backward(&g, &mut df);
        let rhs: f64 = f.data().iter().zip(df.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn fusion_rules() {
        let p = proto(vec![1.0, -2.0, 0.5], PrototypeSource::Support);
        let q = proto(vec![3.0, 0.0, -0.5], PrototypeSource::Pseudo);
        let same = fuse_prototypes(&[p.clone(), p.clone()], None).unwrap();
        assert_eq!(same.vector, p.vector);
        assert_eq!(same.source, PrototypeSource::KShot);
        let fused = fuse_prototypes(&[p.clone(), q.clone()], None).unwrap();
        assert_eq!(fused.vector, vec![2.0, -1.0, 0.0]);
        assert_eq!(fused.source, PrototypeSource::Fused);
        let single = fuse_prototypes(std::slice::from_ref(&q), None).unwrap();
        assert_eq!(single, q);
        let weighted = fuse_prototypes(&[p.clone(), q.clone()], Some(&[0.25, 0.75])).unwrap();
        assert_eq!(weighted.vector, vec![2.5, -0.5, -0.25]);
    }

    #[test]
    fn fusion_errors() {
        let p = proto(vec![1.0, 2.0], PrototypeSource::Support);
        let q = proto(vec![1.0], PrototypeSource::Support);
        assert!(matches!(fuse_prototypes::<f64>(&[], None), Err(Error::Empty(_))));
        assert!(fuse_prototypes(&[p.clone(), q], None).is_err());
        assert!(fuse_prototypes(&[p.clone(), p.clone()], Some(&[1.5, -0.5])).is_err());
        assert!(fuse_prototypes(&[p.clone(), p.clone()], Some(&[0.3, 0.3])).is_err());
        let mut other = p.clone();
        other.class_id = 9;
        assert!(fuse_prototypes(&[p, other], None).is_err());
    }

    #[test]
    fn five_prototypes_average_to_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ps: Vec<_> = (0..5)
            .map(|_| proto((0..64).map(|_| rng.random_range(-3.0..3.0)).collect(), PrototypeSource::Support))
            .collect();
        let fused = fuse_prototypes(&ps, None).unwrap();
        for c in 0..64 {
            let mean = ps.iter().map(|p| p.vector[c]).sum::<f64>() / 5.0;
            assert!((fused.vector[c] - mean).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pooling_properties(seed in any::<u64>(), alpha in -3.0f64..3.0, p in 0.02f64..0.8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_features(&mut rng, 3, 4, 4);
            let m = random_mask(&mut rng, 16, 16, p);
            let base = masked_average_pool(&f, &m, PrototypeSource::Support, 1).unwrap().vector;

            let mut scaled = f.clone();
            scaled.scale(alpha);
            let s = masked_average_pool(&scaled, &m, PrototypeSource::Support, 1).unwrap().vector;
            for (a, b) in s.iter().zip(&base) {
                prop_assert!((a - alpha * b).abs() < 1e-9);
            }

            // convex combination of upsampled values, so bounded per channel
            let up = Bilinear::new((4, 4), (16, 16)).forward(&f);
            for (c, v) in base.iter().enumerate() {
                let lo = up.plane(c).iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = up.plane(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        #[test]
        fn pooling_is_invariant_to_joint_pixel_permutation(seed in any::<u64>()) {
            // Pool the explicitly upsampled map (identity upsampler) so pixels can be permuted freely.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let up = random_features(&mut rng, 3, 16, 16);
            let m = random_mask(&mut rng, 16, 16, 0.3);
            let mut perm: Vec<usize> = (0..256).collect();
            for i in (1..256).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pf = Tensor::from_fn(3, 16, 16, |c, y, x| {
                let s = perm[y * 16 + x];
                up.at(c, s / 16, s % 16)
            });
            let pm = Mask::from_fn(16, 16, |y, x| {
                let s = perm[y * 16 + x];
                m.get(s / 16, s % 16)
            });
            let a = masked_average_pool(&up, &m, PrototypeSource::Support, 1).unwrap().vector;
            let b = masked_average_pool(&pf, &pm, PrototypeSource::Support, 1).unwrap().vector;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn uniform_fusion_is_commutative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = proto((0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), PrototypeSource::Support);
            let b = proto((0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), PrototypeSource::Pseudo);
            let ab = fuse_prototypes(&[a.clone(), b.clone()], None).unwrap();
            let ba = fuse_prototypes(&[b, a], None).unwrap();
            prop_assert_eq!(ab.vector, ba.vector);
        }
    }
}
