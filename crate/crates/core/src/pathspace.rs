//! Càdlàg step paths on a uniform grid and uniformly weighted particle measures.
//!
//! A [`DiscretePath`] stores `M+1` node values `v_0..v_M` in `R^d` and is read
//! as `ω(s) = v_k` for `s ∈ [t_k, t_{k+1})`. Stopping, bumping and
//! concatenation are therefore exact grid operations.

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};

/// Relative slack used when mapping a time onto a grid node.
const NODE_SLACK: f64 = 1e-9;

/// How an off-grid time is mapped onto the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapMode {
    /// Round to the nearest node.
    #[default]
    Nearest,
    /// Reject times that are not a node.
    Strict,
}

/// Uniform partition `t_k = kT/M` of `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return domain(format!("horizon must be positive, got {horizon}"));
        }
        if steps == 0 {
            return domain("grid needs at least one step");
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    fn check_range(&self, t: f64) -> Result<()> {
        let slack = NODE_SLACK * self.dt();
        if !t.is_finite() || t < -slack || t > self.horizon + slack {
            return domain(format!("time {t} outside [0, {}]", self.horizon));
        }
        Ok(())
    }

    /// Index of the node matching `t` under `mode`.
    pub fn snap(&self, t: f64, mode: SnapMode) -> Result<usize> {
        self.check_range(t)?;
        let x = t / self.dt();
        let k = x.round().clamp(0.0, self.steps as f64) as usize;
        if mode == SnapMode::Strict && (x - k as f64).abs() > NODE_SLACK {
            return domain(format!("time {t} is not a grid node"));
        }
        Ok(k)
    }

    /// Largest `k` with `t_k ≤ t`; this is the node whose value a step path takes at `t`.
    pub fn floor_index(&self, t: f64) -> Result<usize> {
        self.check_range(t)?;
        let x = t / self.dt() + NODE_SLACK;
        Ok((x.floor().max(0.0) as usize).min(self.steps))
    }

    /// Whether `t` coincides with a node.
    pub fn is_node(&self, t: f64) -> bool {
        self.snap(t, SnapMode::Strict).is_ok()
    }
}

/// A càdlàg step path with values in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl DiscretePath {
    /// Builds a path from node values laid out node-major (`values[k*d + j]`).
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return shape("path dimension must be positive");
        }
        if values.len() != (grid.steps() + 1) * dim {
            return shape(format!(
                "expected {} values for M={} d={}, got {}",
                (grid.steps() + 1) * dim,
                grid.steps(),
                dim,
                values.len()
            ));
        }
        Ok(Self { grid, dim, values })
    }

    /// One-dimensional path from its node values.
    pub fn scalar(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, 1, values)
    }

    pub fn constant(grid: TimeGrid, x: &[f64]) -> Self {
        let values = x.iter().copied().cycle().take((grid.steps() + 1) * x.len()).collect();
        Self { grid, dim: x.len(), values }
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self::constant(grid, &vec![0.0; dim])
    }

    /// Scalar path sampled from `f(t_k)`.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().into_iter().map(f).collect();
        Self { grid, dim: 1, values }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Node value `v_k`.
    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// First component of `v_k`.
    pub fn scalar_at(&self, k: usize) -> f64 {
        self.values[k * self.dim]
    }

    /// `ω(t)` under the càdlàg convention.
    pub fn at_time(&self, t: f64) -> Result<&[f64]> {
        Ok(self.value(self.grid.floor_index(t)?))
    }

    /// Path frozen after node `k`.
    pub fn stop_index(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.stop_index_in_place(k);
        out
    }

    pub fn stop_index_in_place(&mut self, k: usize) {
        let d = self.dim;
        let (head, tail) = self.values.split_at_mut((k + 1) * d);
        let last = &head[k * d..];
        for chunk in tail.chunks_mut(d) {
            chunk.copy_from_slice(last);
        }
    }

    /// `ω_t`, with `t` snapped to the nearest node.
    pub fn stop(&self, t: f64) -> Result<Self> {
        self.stop_with(t, SnapMode::Nearest)
    }

    pub fn stop_with(&self, t: f64, mode: SnapMode) -> Result<Self> {
        Ok(self.stop_index(self.grid.snap(t, mode)?))
    }

    /// `ω + x·1_{[t_k, T]}`.
    pub fn bump_index(&self, k: usize, x: &[f64]) -> Self {
        let mut out = self.clone();
        out.bump_index_in_place(k, x);
        out
    }

    pub fn bump_index_in_place(&mut self, k: usize, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        for chunk in self.values[k * self.dim..].chunks_mut(self.dim) {
            for (v, dx) in chunk.iter_mut().zip(x) {
                *v += dx;
            }
        }
    }

    /// `ω + x·1_{[τ, T]}`.
    pub fn bump(&self, tau: f64, x: &[f64]) -> Result<Self> {
        self.bump_with(tau, x, SnapMode::Nearest)
    }

    pub fn bump_with(&self, tau: f64, x: &[f64], mode: SnapMode) -> Result<Self> {
        if x.len() != self.dim {
            return shape(format!("bump of size {} on a {}-dimensional path", x.len(), self.dim));
        }
        Ok(self.bump_index(self.grid.snap(tau, mode)?, x))
    }

    /// `γ_t + (ω − ω(t))·1_{[t,T]}` with `t = t_k`.
    pub fn concat_index(gamma: &Self, omega: &Self, k: usize) -> Result<Self> {
        if gamma.grid != omega.grid || gamma.dim != omega.dim {
            return shape("concatenated paths must share grid and dimension");
        }
        let d = gamma.dim;
        let mut values = gamma.values.clone();
        for (i, v) in values.iter_mut().enumerate().skip(k * d) {
            let j = k * d + i % d;
            *v = (omega.values[i] - omega.values[j]) + gamma.values[j];
        }
        Ok(Self { grid: gamma.grid, dim: d, values })
    }

    pub fn concat(gamma: &Self, omega: &Self, t: f64) -> Result<Self> {
        let k = gamma.grid.snap(t, SnapMode::Nearest)?;
        Self::concat_index(gamma, omega, k)
    }

    /// Uniform norm over the nodes that determine the path on `[a, b]`.
    pub fn sup_norm(&self, a: f64, b: f64) -> Result<f64> {
        if a > b {
            return domain(format!("empty window [{a}, {b}]"));
        }
        let lo = self.grid.floor_index(a)?;
        let hi = self.grid.floor_index(b)?;
        Ok((lo..=hi).map(|k| norm(self.value(k))).fold(0.0, f64::max))
    }

    /// Uniform norm over `[0, T]`.
    pub fn sup(&self) -> f64 {
        (0..=self.grid.steps()).map(|k| norm(self.value(k))).fold(0.0, f64::max)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Free-function form of [`DiscretePath::stop`].
pub fn stop_path(omega: &DiscretePath, t: f64) -> Result<DiscretePath> {
    omega.stop(t)
}

/// Free-function form of [`DiscretePath::bump`].
pub fn bump_path(omega: &DiscretePath, tau: f64, x: &[f64]) -> Result<DiscretePath> {
    omega.bump(tau, x)
}

/// Free-function form of [`DiscretePath::concat`].
pub fn concat_path(gamma: &DiscretePath, omega: &DiscretePath, t: f64) -> Result<DiscretePath> {
    DiscretePath::concat(gamma, omega, t)
}

/// Uniformly weighted ensemble of paths on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleMeasure {
    grid: TimeGrid,
    dim: usize,
    particles: Vec<DiscretePath>,
}

impl ParticleMeasure {
    pub fn new(particles: Vec<DiscretePath>) -> Result<Self> {
        let first = particles.first().ok_or_else(|| Error::Shape("a particle measure needs at least one particle".into()))?;
        let (grid, dim) = (first.grid, first.dim);
        if particles.iter().any(|p| p.grid != grid || p.dim != dim) {
            return shape("all particles must share grid and dimension");
        }
        Ok(Self { grid, dim, particles })
    }

    /// Dirac mass at a single path.
    pub fn dirac(path: DiscretePath) -> Self {
        Self { grid: path.grid, dim: path.dim, particles: vec![path] }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[DiscretePath] {
        &self.particles
    }

    pub fn particle(&self, i: usize) -> &DiscretePath {
        &self.particles[i]
    }

    pub fn into_particles(self) -> Vec<DiscretePath> {
        self.particles
    }

    /// `|||μ||| = sqrt(E^μ[‖W‖²])`.
    pub fn moment(&self) -> f64 {
        let s: f64 = self.particles.iter().map(|p| p.sup().powi(2)).sum();
        (s / self.len() as f64).sqrt()
    }

    /// Image of `μ` under the stopping map at node `k`.
    pub fn stop_index(&self, k: usize) -> Self {
        let particles = self.particles.iter().map(|p| p.stop_index(k)).collect();
        Self { grid: self.grid, dim: self.dim, particles }
    }

    pub fn stop(&self, t: f64) -> Result<Self> {
        Ok(self.stop_index(self.grid.snap(t, SnapMode::Nearest)?))
    }

    /// Measure with particle `i` bumped by `x` from node `k` on.
    pub fn bump_particle_index(&self, i: usize, k: usize, x: &[f64]) -> Self {
        let mut out = self.clone();
        out.particles[i].bump_index_in_place(k, x);
        out
    }

    pub fn bump_particle(&self, i: usize, tau: f64, x: &[f64]) -> Result<Self> {
        if i >= self.len() {
            return domain(format!("particle index {i} out of range for N={}", self.len()));
        }
        if x.len() != self.dim {
            return shape("bump dimension mismatch");
        }
        Ok(self.bump_particle_index(i, self.grid.snap(tau, SnapMode::Nearest)?, x))
    }

    /// Every particle bumped by the same `x` at `τ`.
    pub fn bump_all(&self, tau: f64, x: &[f64]) -> Result<Self> {
        let particles = self.particles.iter().map(|p| p.bump(tau, x)).collect::<Result<_>>()?;
        Ok(Self { grid: self.grid, dim: self.dim, particles })
    }

    /// The same law carried by `copies` replicas of every particle.
    pub fn replicate(&self, copies: usize) -> Self {
        let particles = (0..copies.max(1)).flat_map(|_| self.particles.iter().cloned()).collect();
        Self { grid: self.grid, dim: self.dim, particles }
    }

    /// First coordinate of every particle at node `k`.
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        self.particles.iter().map(|p| p.scalar_at(k)).collect()
    }
}

/// Pairing rule for [`w2_estimate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Coupling {
    /// Particle `i` of one measure paired with particle `i` of the other; an upper bound on W2.
    Index,
    /// Exact empirical W2 of the one-dimensional marginals at node `node`.
    Sorted1d { node: usize },
}

/// Wasserstein-2 estimate between two particle measures.
pub fn w2_estimate(mu: &ParticleMeasure, nu: &ParticleMeasure, coupling: Coupling) -> Result<f64> {
    if mu.grid != nu.grid || mu.dim != nu.dim {
        return shape("measures live on different grids or dimensions");
    }
    match coupling {
        Coupling::Index => {
            if mu.len() != nu.len() {
                return shape(format!("index coupling needs equal sizes, got {} and {}", mu.len(), nu.len()));
            }
            let s: f64 = mu
                .particles
                .iter()
                .zip(&nu.particles)
                .map(|(u, v)| {
                    let d = u.values.iter().zip(&v.values).map(|(a, b)| a - b).collect::<Vec<_>>();
                    (0..=mu.grid.steps()).map(|k| norm(&d[k * mu.dim..(k + 1) * mu.dim])).fold(0.0, f64::max).powi(2)
                })
                .sum();
            Ok((s / mu.len() as f64).sqrt())
        }
        Coupling::Sorted1d { node } => {
            if mu.dim != 1 {
                return shape("sorted-1d coupling needs d = 1");
            }
            if node > mu.grid.steps() {
                return domain(format!("node {node} beyond M={}", mu.grid.steps()));
            }
            w2_empirical_1d(&mu.marginal(node), &nu.marginal(node))
        }
    }
}

/// Exact W2 between two empirical laws on the reals via the quantile coupling.
pub fn w2_empirical_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return shape("empirical laws need at least one atom");
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    if x.len() == y.len() {
        let s: f64 = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum();
        return Ok((s / x.len() as f64).sqrt());
    }
    // Walk the merged quantile breakpoints i/n and j/m.
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut u, mut acc) = (0usize, 0usize, 0.0f64, 0.0f64);
    while i < n && j < m {
        // Compare (i+1)/n with (j+1)/m exactly in integers.
        let (li, lj) = ((i + 1) * m, (j + 1) * n);
        let next = li.min(lj) as f64 / (n * m) as f64;
        acc += (next - u) * (x[i] - y[j]).powi(2);
        u = next;
        if li <= lj {
            i += 1;
        }
        if lj <= li {
            j += 1;
        }
    }
    Ok(acc.sqrt())
}
