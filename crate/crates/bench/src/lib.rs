//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmcl_core::point::Point3;
use xmcl_core::losses::CorrespondenceBatch;
use xmcl_core::Tensor;

pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::leaf(uniform(rows * cols, seed), &[rows, cols], true).expect("shape matches data")
}

/// Four `[n, d]` feature matrices that require gradients.
pub fn batch(n: usize, d: usize, seed: u64) -> CorrespondenceBatch {
    let m = |k| matrix(n, d, seed.wrapping_add(k));
    CorrespondenceBatch::new(m(0), m(1), m(2), m(3)).expect("equal shapes")
}

pub fn cloud(n: usize, seed: u64) -> Vec<Point3> {
    uniform(3 * n, seed).chunks(3).map(|c| [10.0 * c[0], 10.0 * c[1], 2.0 * c[2]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let b = batch(8, 6, 1);
        assert_eq!((b.n(), b.width()), (8, 6));
        assert_eq!(cloud(5, 2).len(), 5);
        assert_eq!(uniform(4, 3), uniform(4, 3));
    }
}
