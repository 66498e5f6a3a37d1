//! Shared fixtures for the benchmarks in `benches/`.

use pathfield::bsde::{BsdeProblem, Generator, LawStat, LawTerm};
use pathfield::funcalc::corpus::{self, RandomComposite};
use pathfield::ito::DiffusionCoeffs;
use pathfield::master::{MasterProblem, Preset};
use pathfield::{DiscretePath, FunctionalSpec, ParticleMeasure, TimeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SEED: u64 = 2024;

pub fn grid(steps: usize) -> TimeGrid {
    TimeGrid::new(1.0, steps).expect("valid grid")
}

/// A random path and a random `particles`-particle measure on `grid`.
pub fn arguments(grid: TimeGrid, particles: usize) -> (DiscretePath, ParticleMeasure) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let omega = corpus::random_path(grid, 0.0, 1.0, &mut rng);
    (omega, corpus::random_measure(grid, particles, &mut rng))
}

/// The general path-and-measure functional of the corpus.
pub fn mixed_functional() -> FunctionalSpec {
    RandomComposite::random(&mut ChaCha8Rng::seed_from_u64(27)).functional()
}

/// Terminal `ω(T)²` with generator `y + E[Y]/2`.
pub fn mean_field_problem(grid: TimeGrid, particles: usize) -> MasterProblem {
    let generator = Generator::linear(1.0, 1).with_law(LawTerm { coeff: 0.5, stat: LawStat::Mean });
    let bsde = BsdeProblem::new(corpus::path_square(), generator, DiffusionCoeffs::standard(1), grid, particles, SEED);
    MasterProblem::new(bsde, Preset::General).expect("valid problem")
}
