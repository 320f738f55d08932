//! Per-trajectory random streams.
//!
//! Every stream is a ChaCha8 generator keyed on the root seed and selected by
//! the trajectory index through the cipher's 64-bit stream id, so the numbers
//! a trajectory sees depend only on `(root_seed, index)` and never on the
//! scheduling of other trajectories.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// Stream number `index` under `root_seed`.
pub fn stream(root_seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

/// Complex Gaussian `(x + i y)` with independent standard-normal quadratures.
pub fn complex_normal(rng: &mut Stream) -> Complex64 {
    let re = standard_normal(rng);
    let im = standard_normal(rng);
    Complex64::new(re, im)
}
