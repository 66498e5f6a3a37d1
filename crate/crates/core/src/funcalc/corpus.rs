//! Reference functionals with known derivatives and random probe generators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use super::{Composite, FunctionalSpec, Leaf, Profile, SmoothMap, TimeWeight};
use crate::pathspace::{DiscretePath, ParticleMeasure, TimeGrid};

/// `ω(t)²`.
pub fn path_square() -> FunctionalSpec {
    Leaf::PathEval { h: SmoothMap::square() }.into()
}

/// `∫_0^t ω(r)² dr`.
pub fn running_square() -> FunctionalSpec {
    Leaf::RunningIntegral { f: SmoothMap::square(), weight: TimeWeight::Uniform }.into()
}

/// `E^μ[W(t)²]`.
pub fn measure_square() -> FunctionalSpec {
    Leaf::MeasureEval { h: SmoothMap::square() }.into()
}

/// `E^μ[∫_0^t W(r)² dr]`.
pub fn measure_running_square() -> FunctionalSpec {
    Leaf::MeasureIntegral { f: SmoothMap::square(), weight: TimeWeight::Uniform }.into()
}

/// Ingredients of a composite `F(t, ω(t), ∫f₁(ω), E^μ[f₂(W(t))], E^μ[∫f₃(W)], E^μ[f₄(W(t), ∫f₅(W))])`.
#[derive(Clone, Debug)]
pub struct RandomComposite {
    pub outer: SmoothMap,
    pub f1: SmoothMap,
    pub f2: SmoothMap,
    pub f3: SmoothMap,
    pub f4: SmoothMap,
    pub f5: SmoothMap,
}

impl RandomComposite {
    /// Random smooth instance with bounded low-order derivatives (`d = 1`).
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut u = |a: f64, b: f64| rng.gen_range(a..b);
        let ridge_sin = |n: usize, u: &mut dyn FnMut(f64, f64) -> f64| {
            let w: Vec<f64> = (0..n).map(|_| u(-0.8, 0.8)).collect();
            SmoothMap::ridge(w, u(-1.0, 1.0), Profile::Sin { amplitude: u(0.5, 1.5), frequency: u(0.5, 1.2), phase: u(-1.0, 1.0) })
        };
        let outer = ridge_sin(6, &mut u)
            .plus(ridge_sin(6, &mut u))
            .plus(SmoothMap::ridge((0..6).map(|_| u(-0.3, 0.3)).collect(), 0.0, Profile::ExpScalar { scale: u(0.2, 0.6), rate: u(-0.8, 0.8) }))
            .plus(SmoothMap::product(6, 1, 3, u(-0.5, 0.5)))
            .plus(SmoothMap::product(6, 2, 5, u(-0.5, 0.5)));
        let f1 = SmoothMap::sin(u(0.5, 1.5), u(0.5, 1.2), u(-1.0, 1.0));
        let f2 = SmoothMap::poly(vec![u(-1.0, 1.0), u(-1.0, 1.0), u(-0.5, 0.5)]);
        let f3 = SmoothMap::sin(u(0.5, 1.5), u(0.5, 1.2), u(-1.0, 1.0)).plus(SmoothMap::poly(vec![0.0, u(-1.0, 1.0)]));
        let f4 = ridge_sin(2, &mut u).plus(SmoothMap::product(2, 0, 1, u(-0.5, 0.5)));
        let f5 = SmoothMap::sin(u(0.5, 1.5), u(0.5, 1.2), u(-1.0, 1.0));
        Self { outer, f1, f2, f3, f4, f5 }
    }

    pub fn composite(&self) -> Composite {
        Composite::new(
            vec![
                Leaf::Time,
                Leaf::PathEval { h: SmoothMap::identity() },
                Leaf::RunningIntegral { f: self.f1.clone(), weight: TimeWeight::Uniform },
                Leaf::MeasureEval { h: self.f2.clone() },
                Leaf::MeasureIntegral { f: self.f3.clone(), weight: TimeWeight::Uniform },
                Leaf::MeasureComposite { outer: self.f4.clone(), inner: self.f5.clone(), weight: TimeWeight::Uniform },
            ],
            Some(self.outer.clone()),
        )
    }

    pub fn functional(&self) -> FunctionalSpec {
        self.composite().into()
    }
}

/// Scalar random-walk path started at `x0` with step scale `sigma·√Δt`.
pub fn random_path(grid: TimeGrid, x0: f64, sigma: f64, rng: &mut impl Rng) -> DiscretePath {
    let s = sigma * grid.dt().sqrt();
    let mut x = x0;
    let values = (0..=grid.steps())
        .map(|k| {
            if k > 0 {
                x += s * rng.sample::<f64, _>(StandardNormal);
            }
            x
        })
        .collect();
    DiscretePath::scalar(grid, values).expect("grid-sized path")
}

/// `n` random-walk particles with starting points spread over `[-1, 1]`.
pub fn random_measure(grid: TimeGrid, n: usize, rng: &mut impl Rng) -> ParticleMeasure {
    let ps = (0..n)
        .map(|_| {
            let x0 = rng.gen_range(-1.0..1.0);
            random_path(grid, x0, 1.0, rng)
        })
        .collect();
    ParticleMeasure::new(ps).expect("non-empty ensemble")
}

/// One random derivative probe `(k_τ ≤ k_t, ω, μ)`.
#[derive(Clone, Debug)]
pub struct Probe {
    pub k_tau: usize,
    pub k_t: usize,
    pub omega: DiscretePath,
    pub mu: ParticleMeasure,
}

/// Deterministic probe set for cross-checks.
pub fn probes(grid: TimeGrid, count: usize, particles: usize, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let k_t = rng.gen_range(1..=grid.steps());
            let k_tau = rng.gen_range(0..=k_t);
            let x0 = rng.gen_range(-1.0..1.0);
            Probe { k_tau, k_t, omega: random_path(grid, x0, 1.0, &mut rng), mu: random_measure(grid, particles, &mut rng) }
        })
        .collect()
}
