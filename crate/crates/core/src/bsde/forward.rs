//! Euler–Maruyama forward ensembles on counter-addressed noise streams.
//!
//! Every Gaussian is addressed by `(seed, tag, particle, step)`, so an
//! ensemble started at a later node reuses the increments of one started
//! earlier, and results do not depend on how particles are split across
//! threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{domain, shape, Result};
use crate::ito::{CoeffFn, DiffusionCoeffs};
use crate::pathspace::{DiscretePath, ParticleMeasure, SnapMode, TimeGrid};

/// Stream driving the state `X` and, in the BSDE, the law ensemble `X'` as well.
pub const TAG_STATE: u32 = 0;
/// Independent stream for the law ensemble of the Itô checks.
pub const TAG_LAW: u32 = 1;
/// Independent stream for disjoint tilde ensembles.
pub const TAG_TILDE: u32 = 2;

/// A family of standard Gaussian streams, one per `(tag, particle)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    pub tag: u32,
}

impl NoiseStream {
    pub fn new(seed: u64, tag: u32) -> Self {
        Self { seed, tag }
    }

    /// Standard normals for steps `from..to`, `d` per step, step-major.
    pub fn gaussians(&self, particle: usize, from: usize, to: usize, d: usize) -> Vec<f64> {
        let pairs = d.div_ceil(2);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((u64::from(self.tag) << 48) | particle as u64);
        // Each pair consumes two u64 draws, i.e. four 32-bit words.
        rng.set_word_pos((from * pairs * 4) as u128);
        let mut out = Vec::with_capacity((to.saturating_sub(from)) * d);
        for _ in from..to {
            for p in 0..pairs {
                let u1 = 1.0 - rng.gen::<f64>();
                let u2 = rng.gen::<f64>();
                let r = (-2.0 * u1.ln()).sqrt();
                let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
                out.push(r * c);
                if 2 * p + 1 < d {
                    out.push(r * s);
                }
            }
        }
        out
    }
}

/// Simulated paths together with their Brownian increments.
#[derive(Clone, Debug)]
pub struct ForwardEnsemble {
    /// Node at which the paths leave their starting data.
    pub start: usize,
    pub paths: ParticleMeasure,
    /// `ΔB` per particle, step and component; zero before `start`.
    increments: Vec<f64>,
    pub noise: NoiseStream,
}

impl ForwardEnsemble {
    pub fn grid(&self) -> TimeGrid {
        self.paths.grid()
    }

    pub fn dim(&self) -> usize {
        self.paths.dim()
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn path(&self, j: usize) -> &DiscretePath {
        self.paths.particle(j)
    }

    /// `B(t_{k+1}) − B(t_k)` of particle `j`.
    pub fn db(&self, j: usize, k: usize) -> &[f64] {
        let (m, d) = (self.grid().steps(), self.dim());
        &self.increments[(j * m + k) * d..(j * m + k + 1) * d]
    }

    /// `X(t_{k+1}) − X(t_k)` of particle `j`.
    pub fn dx(&self, j: usize, k: usize) -> Vec<f64> {
        let p = self.path(j);
        p.value(k + 1).iter().zip(p.value(k)).map(|(a, b)| a - b).collect()
    }

    /// The same increments driving new starting data and coefficients.
    pub fn redrive(&self, drift: &CoeffFn, vol: &CoeffFn, start: &(dyn Fn(usize) -> DiscretePath + Sync)) -> Result<Self> {
        let grid = self.grid();
        let (k0, d, m) = (self.start, self.dim(), grid.steps());
        let paths: Vec<DiscretePath> = (0..self.len())
            .into_par_iter()
            .map(|j| euler(grid, k0, drift, vol, start(j), &self.increments[j * m * d..(j + 1) * m * d]))
            .collect();
        Ok(Self { start: k0, paths: ParticleMeasure::new(paths)?, increments: self.increments.clone(), noise: self.noise })
    }
}

fn euler(grid: TimeGrid, k0: usize, drift: &CoeffFn, vol: &CoeffFn, start: DiscretePath, db: &[f64]) -> DiscretePath {
    let d = start.dim();
    let dt = grid.dt();
    let mut p = start.stop_index(k0);
    let v = p.values_mut();
    let (mut b, mut s) = (vec![0.0; d], vec![0.0; d * d]);
    for k in k0..grid.steps() {
        let t = grid.node(k);
        drift.eval_into(t, &mut b);
        vol.eval_into(t, &mut s);
        let dbk = &db[k * d..(k + 1) * d];
        for a in 0..d {
            let noise: f64 = (0..d).map(|c| s[a * d + c] * dbk[c]).sum();
            v[(k + 1) * d + a] = v[k * d + a] + b[a] * dt + noise;
        }
    }
    p
}

/// Euler–Maruyama ensemble of `n` paths, particle `j` started from `start(j)` stopped at `t_{k0}`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    grid: TimeGrid,
    dim: usize,
    drift: &CoeffFn,
    vol: &CoeffFn,
    k0: usize,
    n: usize,
    noise: NoiseStream,
    start: &(dyn Fn(usize) -> DiscretePath + Sync),
) -> Result<ForwardEnsemble> {
    if n == 0 {
        return domain("an ensemble needs at least one particle");
    }
    if k0 > grid.steps() {
        return domain(format!("start node {k0} beyond the grid"));
    }
    let m = grid.steps();
    let sq = grid.dt().sqrt();
    let per: Vec<(DiscretePath, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut db = vec![0.0; m * dim];
            for (x, z) in db[k0 * dim..].iter_mut().zip(noise.gaussians(j, k0, m, dim)) {
                *x = sq * z;
            }
            let s = start(j);
            (euler(grid, k0, drift, vol, s, &db), db)
        })
        .collect();
    let mut increments = Vec::with_capacity(n * m * dim);
    let mut paths = Vec::with_capacity(n);
    for (p, db) in per {
        if p.dim() != dim || p.grid() != grid {
            return shape("starting path does not match the grid or dimension");
        }
        paths.push(p);
        increments.extend(db);
    }
    Ok(ForwardEnsemble { start: k0, paths: ParticleMeasure::new(paths)?, increments, noise })
}

/// `X^{γ_t}` under `(b_1, σ_1)`: `n` paths agreeing with `γ` on `[0, t]`.
pub fn simulate_forward(coeffs: &DiffusionCoeffs, gamma: &DiscretePath, t: f64, n: usize, seed: u64) -> Result<ForwardEnsemble> {
    coeffs.check_dim(gamma.dim())?;
    let grid = gamma.grid();
    let k0 = grid.snap(t, SnapMode::Nearest)?;
    simulate(grid, gamma.dim(), &coeffs.b1, &coeffs.sigma1, k0, n, NoiseStream::new(seed, TAG_STATE), &|_| gamma.clone())
}

/// `X'^{η_t}` under `(b_2, σ_2)`: particle `j` starts from particle `j mod |η|` of `η`.
pub fn simulate_law(coeffs: &DiffusionCoeffs, eta: &ParticleMeasure, t: f64, n: usize, noise: NoiseStream) -> Result<ForwardEnsemble> {
    coeffs.check_dim(eta.dim())?;
    let grid = eta.grid();
    let k0 = grid.snap(t, SnapMode::Nearest)?;
    let m = eta.len();
    if n % m != 0 {
        log::warn!("{n} law particles are not a multiple of |η| = {m}; the initial law is off by O(|η|/{n})");
    }
    simulate(grid, eta.dim(), &coeffs.b2, &coeffs.sigma2, k0, n, noise, &|j| eta.particle(j % m).clone())
}
