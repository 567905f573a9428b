//! Fixtures shared by the benchmarks.

use attnprof_core::numkernel::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor of `rows × cols`.
pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape matches data")
}

/// Query, key and value constants for one sequence of `n` tokens.
pub fn qkv(g: &Graph, n: usize, d: usize) -> (Var, Var, Var) {
    (
        g.constant(random_tensor(n, d, 1)),
        g.constant(random_tensor(n, d, 2)),
        g.constant(random_tensor(n, d, 3)),
    )
}
