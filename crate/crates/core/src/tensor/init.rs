//! Seeded weight initialization.

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic tensor initializer over a ChaCha stream. All draws happen
/// in f64 and convert down, so a given seed produces the same weights up to
/// rounding for every scalar type.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> ArrayD<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::from_f64(z * std)
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> ArrayD<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(self.rng.gen_range(lo..hi)))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Kaiming-style init for a conv/linear weight whose shape is
    /// `(out, in, ...)`: normal with std `gain / sqrt(fan_in)`.
    pub fn kaiming<T: Scalar>(&mut self, shape: &[usize], gain: f64) -> ArrayD<T> {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(shape, gain / (fan_in as f64).sqrt())
    }

    pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
        ArrayD::zeros(IxDyn(shape))
    }
}
