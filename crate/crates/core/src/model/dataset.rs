//! Synthetic labelled datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub const SHAPES3_SIDE: usize = 16;
pub const SHAPES3_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

/// Shapes on 16x16 grayscale grids: 0 horizontal bar, 1 square outline,
/// 2 diagonal bar, bars two pixels thick. Size, position, intensity and
/// background noise are drawn from `seed`; samples are interleaved by class.
pub fn shapes3(seed: u64, per_class: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = SHAPES3_SIDE;
    let mut out = Vec::with_capacity(per_class * SHAPES3_CLASSES);
    for _ in 0..per_class {
        for label in 0..SHAPES3_CLASSES {
            let size = rng.random_range(5..=9usize);
            let top = rng.random_range(0..=n - size);
            let left = rng.random_range(0..=n - size);
            let ink = rng.random_range(0.7..=1.0);
            let mut px = vec![0.0; n * n];
            for v in px.iter_mut() {
                *v = rng.random_range(0.0..0.1);
            }
            let mid = size / 2;
            for r in 0..size {
                for c in 0..size {
                    let on = match label {
                        0 => r == mid || r + 1 == mid,
                        1 => r == 0 || c == 0 || r == size - 1 || c == size - 1,
                        _ => r == c || r == c + 1,
                    };
                    if on {
                        px[(top + r) * n + left + c] = ink;
                    }
                }
            }
            out.push(Sample {
                image: Tensor::new(vec![n, n, 1], px).expect("16x16x1"),
                label,
            });
        }
    }
    out
}

/// Two Gaussian blobs in the plane centred at (-2, -2) and (2, 2), unit
/// variance halved. Linearly separable with overwhelming probability.
pub fn blobs2(seed: u64, per_class: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).expect("valid std");
    let mut out = Vec::with_capacity(per_class * 2);
    for _ in 0..per_class {
        for label in 0..2 {
            let centre = if label == 0 { -2.0 } else { 2.0 };
            let p = vec![
                centre + noise.sample(&mut rng),
                centre + noise.sample(&mut rng),
            ];
            out.push(Sample {
                image: Tensor::from_vec(p),
                label,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes3_is_deterministic_and_balanced() {
        let a = shapes3(3, 10);
        assert_eq!(a, shapes3(3, 10));
        assert_ne!(a, shapes3(4, 10));
        assert_eq!(a.len(), 30);
        for c in 0..3 {
            assert_eq!(a.iter().filter(|s| s.label == c).count(), 10);
        }
        assert!(a
            .iter()
            .all(|s| s.image.min() >= 0.0 && s.image.max() <= 1.0));
    }

    #[test]
    fn blobs_are_separated_by_the_diagonal() {
        for s in blobs2(1, 50) {
            let side = s.image.data()[0] + s.image.data()[1] > 0.0;
            assert_eq!(side, s.label == 1);
        }
    }
}
