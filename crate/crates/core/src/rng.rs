//! Seeded random streams. Every random draw in the crate goes through here so
//! results are reproducible from a `u64` seed.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent stream derived from a base seed and a stream tag.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}

/// SplitMix64-style combination of two words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian_vector<R: rand::Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}

/// `rows x cols` matrix of i.i.d. standard normals, filled row by row.
pub fn gaussian_matrix<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)))
}

/// Uniform direction on the unit sphere.
pub fn unit_vector<R: rand::Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let v = gaussian_vector(rng, d);
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}
