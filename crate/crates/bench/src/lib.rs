//! Shared fixtures for the benchmarks.
use cfm::prox_apg::{default_lambda, SolverConfig};
use cfm::simulate::{generate, Dgp, DgpSpec, SimTruth};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A simulated panel of the given size, seeded deterministically.
pub fn simulated(which: Dgp, n: usize, t: usize) -> SimTruth {
    generate(&DgpSpec::new(which, n, t, 17)).expect("fixture DGP")
}

/// Solver settings at tuning constant `c` for a simulated panel.
pub fn solver_at(truth: &SimTruth, which: Dgp, c: f64) -> SolverConfig {
    let lambda = default_lambda(&truth.panel, which.default_family(), c).expect("fixture lambda");
    SolverConfig::new(lambda)
}

/// Low-rank plus noise, the shape the prox sees near convergence.
pub fn low_rank_plus_noise(rows: usize, cols: usize, rank: usize, noise: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = DMatrix::from_fn(rows, rank, |_, _| rng.gen_range(-1.0..1.0));
    let b = DMatrix::from_fn(rank, cols, |_, _| rng.gen_range(-1.0..1.0));
    a * b + DMatrix::from_fn(rows, cols, |_, _| noise * rng.gen_range(-1.0..1.0))
}
