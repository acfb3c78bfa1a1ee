//! Seeded fixtures shared by the criterion benches.

use moduleport::{AdapterParams, LayerModules, Matrix, PeftModuleSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Student activations that are a noisy, shuffled subset of the teacher columns.
pub fn sample_pair(n: usize, d_teacher: usize, d_student: usize, seed: u64) -> (Matrix, Matrix) {
    let xt = gaussian(n, d_teacher, seed);
    let noise = gaussian(n, d_student, seed ^ 0x5eed);
    let xs = Matrix::from_fn(n, d_student, |i, j| xt.get(i, (j * 7 + 3) % d_teacher) + 0.1 * noise.get(i, j));
    (xs, xt)
}

pub fn adapter_set(layers: usize, d: usize, bottleneck: usize, seed: u64) -> PeftModuleSet {
    let layers = (0..layers as u64)
        .map(|l| {
            let s = seed.wrapping_mul(31).wrapping_add(l * 4);
            LayerModules::Adapter(
                AdapterParams::from_parts(
                    gaussian(bottleneck, d, s),
                    gaussian(1, bottleneck, s + 1).into_data(),
                    gaussian(d, bottleneck, s + 2),
                    gaussian(1, d, s + 3).into_data(),
                )
                .expect("consistent adapter shapes"),
            )
        })
        .collect();
    PeftModuleSet::new(layers).expect("uniform layers")
}
