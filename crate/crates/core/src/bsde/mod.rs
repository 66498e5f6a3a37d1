//! Backward solvers on simulated forward ensembles.
//!
//! Every solver runs the same θ = ½ regression scheme
//!
//! ```text
//! Z_k = Ê_k[(Y_{k+1} − Ê_k Y_{k+1}) ΔB_k] / Δt
//! Y_k = Ê_k[Y_{k+1} + ½Δt f_{k+1}] + ½Δt f_k(Y_k, Z_k)
//! ```
//!
//! with `Z_M = Z_{M−1}` and the implicit part solved per particle. The
//! mean-field solvers wrap it in a Picard loop, on the mean-field term for the
//! linear equation and on the law flow `ν` for the nonlinear one.

pub mod forward;
pub mod linear;
pub(crate) mod regression;
pub mod variation;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::funcalc::{Cut, FunctionalSpec, SmoothMap};
use crate::ito::DiffusionCoeffs;
use crate::pathspace::{w2_empirical_1d, ParticleMeasure, TimeGrid};

pub use forward::{simulate_forward, simulate_law, ForwardEnsemble, NoiseStream, TAG_LAW, TAG_STATE, TAG_TILDE};
pub use linear::{solve_linear_mf_bsde, Coef, LinearMfBsde};
pub use variation::{solve_pair, solve_variation_bsde, SolvedPair, VariationKind};

use regression::{mean_stderr, Design};

/// A statistic of the law `ν` of `Y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LawStat {
    Mean,
    SecondMoment,
    /// Empirical quantile with linear interpolation between order statistics.
    Quantile {
        p: f64,
    },
}

impl LawStat {
    pub fn eval(&self, sample: &[f64]) -> f64 {
        let n = sample.len() as f64;
        match self {
            LawStat::Mean => sample.iter().sum::<f64>() / n,
            LawStat::SecondMoment => sample.iter().map(|y| y * y).sum::<f64>() / n,
            LawStat::Quantile { p } => {
                let mut s = sample.to_vec();
                s.sort_by(f64::total_cmp);
                let h = (n - 1.0) * p.clamp(0.0, 1.0);
                let lo = h.floor() as usize;
                let hi = (lo + 1).min(s.len() - 1);
                s[lo] + (h - lo as f64) * (s[hi] - s[lo])
            }
        }
    }

    /// `∂_ν` of the statistic at `ỹ` and its `ỹ`-derivative.
    fn kernel(&self, y: f64) -> Option<(f64, f64)> {
        match self {
            LawStat::Mean => Some((1.0, 0.0)),
            LawStat::SecondMoment => Some((2.0 * y, 2.0)),
            LawStat::Quantile { .. } => None,
        }
    }
}

/// `c · stat(ν)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawTerm {
    pub coeff: f64,
    pub stat: LawStat,
}

/// `f(t, ω, y, z, μ, ν) = s(t, ω, μ) + φ(y, z) + Σ_m c_m stat_m(ν)`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub source: FunctionalSpec,
    /// `φ` on `R^{1+d}` with arguments `(y, z)`.
    pub driver: SmoothMap,
    pub law: Vec<LawTerm>,
}

impl Generator {
    pub fn zero(d: usize) -> Self {
        Self { source: FunctionalSpec::zero(), driver: SmoothMap::constant(1 + d, 0.0), law: Vec::new() }
    }

    /// `f = c`.
    pub fn constant(c: f64, d: usize) -> Self {
        Self { source: FunctionalSpec::constant(c), ..Self::zero(d) }
    }

    /// `f = a·y`.
    pub fn linear(a: f64, d: usize) -> Self {
        Self { driver: SmoothMap::coordinate(1 + d, 0).scaled(a), ..Self::zero(d) }
    }

    /// `f = c·mean(ν)`.
    pub fn law_mean(c: f64, d: usize) -> Self {
        Self { law: vec![LawTerm { coeff: c, stat: LawStat::Mean }], ..Self::zero(d) }
    }

    pub fn with_source(mut self, s: FunctionalSpec) -> Self {
        self.source = s;
        self
    }

    pub fn with_driver(mut self, phi: SmoothMap) -> Self {
        self.driver = phi;
        self
    }

    pub fn with_law(mut self, term: LawTerm) -> Self {
        self.law.push(term);
        self
    }

    pub fn reads_law(&self) -> bool {
        self.law.iter().any(|t| t.coeff != 0.0)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.source.validate(d)?;
        let a = self.driver.arity();
        if !(a == 1 + d || (a == 0 && self.driver.terms.is_empty())) || !self.driver.is_consistent() {
            return shape(format!("driver has arity {a} but needs {}", 1 + d));
        }
        for t in &self.law {
            if let LawStat::Quantile { p } = t.stat {
                if !(0.0..=1.0).contains(&p) {
                    return domain(format!("quantile level {p} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// `Σ_m c_m stat_m(ν)`.
    pub fn law_value(&self, nu: &[f64]) -> f64 {
        self.law.iter().filter(|t| t.coeff != 0.0).map(|t| t.coeff * t.stat.eval(nu)).sum()
    }

    /// `(∂_ν f(ỹ), ∂_ỹ∂_ν f(ỹ))`.
    pub fn law_kernel(&self, y: f64) -> Result<(f64, f64)> {
        let mut out = (0.0, 0.0);
        for t in self.law.iter().filter(|t| t.coeff != 0.0) {
            let Some((k, dk)) = t.stat.kernel(y) else {
                return domain("quantile law terms have no measure derivative");
            };
            out.0 += t.coeff * k;
            out.1 += t.coeff * dk;
        }
        Ok(out)
    }

    fn driver_args(y: f64, z: &[f64]) -> Vec<f64> {
        let mut a = Vec::with_capacity(1 + z.len());
        a.push(y);
        a.extend_from_slice(z);
        a
    }

    pub fn driver_value(&self, y: f64, z: &[f64]) -> f64 {
        if self.driver.terms.is_empty() {
            return self.driver.constant;
        }
        self.driver.value(&Self::driver_args(y, z))
    }

    /// Value, gradient and Hessian of `φ` in `(y, z)`.
    pub fn driver_jet(&self, y: f64, z: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = 1 + z.len();
        if self.driver.terms.is_empty() {
            return (self.driver.constant, vec![0.0; n], vec![0.0; n * n]);
        }
        self.driver.jet(&Self::driver_args(y, z))
    }
}

/// Picard budgets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Sup-in-time `L²` gap for the linear mean-field loop.
    pub picard_tol: f64,
    /// Sup-in-time `W_2` gap for the law loop.
    pub law_tol: f64,
    pub max_iter: usize,
    /// Use a disjoint ensemble (own noise stream) for independent copies.
    pub strict_copies: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { picard_tol: 1e-6, law_tol: 1e-4, max_iter: 50, strict_copies: false }
    }
}

/// Terminal functional, generator, forward coefficients and Monte Carlo budget.
#[derive(Clone, Debug)]
pub struct BsdeProblem {
    pub terminal: FunctionalSpec,
    pub generator: Generator,
    pub coeffs: DiffusionCoeffs,
    pub grid: TimeGrid,
    pub particles: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl BsdeProblem {
    pub fn new(terminal: FunctionalSpec, generator: Generator, coeffs: DiffusionCoeffs, grid: TimeGrid, particles: usize, seed: u64) -> Self {
        Self { terminal, generator, coeffs, grid, particles, seed, solver: SolverConfig::default() }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.coeffs.validate()?;
        let d = self.dim();
        self.terminal.validate(d)?;
        self.generator.validate(d)?;
        if self.particles < 2 {
            return domain(format!("need at least two particles, got {}", self.particles));
        }
        let s = &self.solver;
        if !(s.picard_tol > 0.0 && s.law_tol > 0.0 && s.max_iter > 0) {
            return domain("Picard tolerances and iteration budget must be positive");
        }
        Ok(())
    }
}

/// Iterations run and the successive gaps they produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PicardLog {
    pub iterations: usize,
    pub gaps: Vec<f64>,
}

impl PicardLog {
    /// Every ratio of successive gaps over the last `window` iterations is below one.
    pub fn is_contracting(&self, window: usize) -> bool {
        let g = &self.gaps;
        g.len() > window && g[g.len() - window - 1..].windows(2).all(|w| w[1] < w[0])
    }
}

/// `(Y, Z)` on every node from `start`, per particle.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub start: usize,
    pub n: usize,
    pub dim: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    f: Vec<f64>,
    /// `Y_M + Σ_k ½Δt (f_k + f_{k+1})` per particle, an unbiased proxy for `Y_start`.
    pub pathwise: Vec<f64>,
    /// Per cell: mean and standard error of the compensated increment
    /// `Y_{k+1} − Y_k + ½Δt(f_k + f_{k+1})`.
    pub martingale: Vec<(f64, f64)>,
    pub picard: PicardLog,
    pub ridge_fallbacks: usize,
}

impl BsdeSolution {
    /// `Y(t_k)` across particles, i.e. the law snapshot `ν_k`.
    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.n..(k + 1) * self.n]
    }

    pub fn y(&self, k: usize, j: usize) -> f64 {
        self.y[k * self.n + j]
    }

    pub fn z(&self, k: usize, j: usize) -> &[f64] {
        let d = self.dim;
        &self.z[(k * self.n + j) * d..(k * self.n + j + 1) * d]
    }

    /// Generator values `f_k` across particles.
    pub fn generator_at(&self, k: usize) -> &[f64] {
        &self.f[k * self.n..(k + 1) * self.n]
    }

    /// The whole `Y` flow, node-major.
    pub fn y_flow(&self) -> &[f64] {
        &self.y
    }

    /// Mean of `Y` at the start node.
    pub fn value(&self) -> f64 {
        regression::mean(self.y_at(self.start))
    }

    /// Standard error of [`Self::value`] from the pathwise representation.
    pub fn stderr(&self) -> f64 {
        mean_stderr(&self.pathwise).1
    }

    /// Mean of `Z` across particles at node `k`.
    pub fn z_mean(&self, k: usize) -> Vec<f64> {
        let d = self.dim;
        let s = regression::chunked_sum(self.n, d, |j, a| {
            for (ai, v) in a.iter_mut().zip(self.z(k, j)) {
                *ai += v;
            }
        });
        s.into_iter().map(|v| v / self.n as f64).collect()
    }

    /// Standard error of `Z` at the start node, from `(Y_{k+1} − Y_k)ΔB_k/Δt` per particle.
    pub fn z_stderr(&self, ens: &ForwardEnsemble) -> Vec<f64> {
        let k = self.start;
        let dt = self.grid.dt();
        (0..self.dim)
            .map(|a| {
                let v: Vec<f64> = (0..self.n).map(|j| (self.y(k + 1, j) - self.y(k, j)) * ens.db(j, k)[a] / dt).collect();
                mean_stderr(&v).1
            })
            .collect()
    }
}

/// The generator of one backward pass as a function of `(k, j, y, z)`.
pub(crate) trait Driver: Sync {
    fn eval(&self, k: usize, j: usize, y: f64, z: &[f64]) -> f64;

    /// Solves `y = a + c·f(k, j, y, z)`.
    fn implicit(&self, k: usize, j: usize, a: f64, c: f64, z: &[f64]) -> f64 {
        let mut y = a + c * self.eval(k, j, a, z);
        for _ in 0..200 {
            let next = a + c * self.eval(k, j, y, z);
            if (next - y).abs() <= 1e-15 * (1.0 + y.abs()) {
                return next;
            }
            y = next;
        }
        y
    }
}

/// Frozen source and law values plus the smooth driver.
struct GenDriver<'a> {
    gen: &'a Generator,
    n: usize,
    source: &'a [f64],
    law: Vec<f64>,
}

impl Driver for GenDriver<'_> {
    fn eval(&self, k: usize, j: usize, y: f64, z: &[f64]) -> f64 {
        self.source[k * self.n + j] + self.law[k] + self.gen.driver_value(y, z)
    }
}

fn check_finite(v: &[f64], context: impl Fn() -> String) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index, context: context() }),
        None => Ok(()),
    }
}

/// One backward pass of the θ-scheme.
pub(crate) fn backward(ens: &ForwardEnsemble, design: &Design, terminal: &[f64], driver: &dyn Driver) -> Result<BsdeSolution> {
    let grid = ens.grid();
    let (m, n, d, k0) = (grid.steps(), ens.len(), ens.dim(), ens.start);
    if terminal.len() != n || design.len() != n {
        return shape("terminal values or regression design do not match the ensemble");
    }
    check_finite(terminal, || "terminal value".into())?;
    let dt = grid.dt();
    let h = 0.5 * dt;
    let mut y = vec![0.0; (m + 1) * n];
    let mut z = vec![0.0; (m + 1) * n * d];
    let mut f = vec![0.0; (m + 1) * n];
    y[m * n..].copy_from_slice(terminal);
    for k in (k0..m).rev() {
        let next = y[(k + 1) * n..(k + 2) * n].to_vec();
        let e_next = design.project(k, &[&next]).remove(0);
        let zt: Vec<Vec<f64>> = (0..d)
            .map(|a| (0..n).into_par_iter().map(|j| (next[j] - e_next[j]) * ens.db(j, k)[a] / dt).collect())
            .collect();
        let zr: Vec<&[f64]> = zt.iter().map(|v| v.as_slice()).collect();
        let zk = design.project(k, &zr);
        for j in 0..n {
            for a in 0..d {
                z[(k * n + j) * d + a] = zk[a][j];
            }
        }
        if k + 1 == m {
            let (lo, hi) = z.split_at_mut(m * n * d);
            hi.copy_from_slice(&lo[(m - 1) * n * d..]);
            let fm: Vec<f64> = (0..n).into_par_iter().map(|j| driver.eval(m, j, y[m * n + j], &z[(m * n + j) * d..(m * n + j + 1) * d])).collect();
            f[m * n..].copy_from_slice(&fm);
        }
        let target: Vec<f64> = (0..n).map(|j| next[j] + h * f[(k + 1) * n + j]).collect();
        let a = design.project(k, &[&target]).remove(0);
        let zs = &z[k * n * d..(k + 1) * n * d];
        let yk: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|j| {
                let zj = &zs[j * d..(j + 1) * d];
                let yj = driver.implicit(k, j, a[j], h, zj);
                (yj, driver.eval(k, j, yj, zj))
            })
            .collect();
        for (j, (yj, fj)) in yk.into_iter().enumerate() {
            y[k * n + j] = yj;
            f[k * n + j] = fj;
        }
        check_finite(&y[k * n..(k + 1) * n], || format!("Y at node {k}"))?;
    }
    let pathwise: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut p = y[m * n + j];
            for k in k0..m {
                p += h * (f[k * n + j] + f[(k + 1) * n + j]);
            }
            p
        })
        .collect();
    let martingale = (k0..m)
        .map(|k| {
            let r: Vec<f64> = (0..n).map(|j| y[(k + 1) * n + j] - y[k * n + j] + h * (f[k * n + j] + f[(k + 1) * n + j])).collect();
            mean_stderr(&r)
        })
        .collect();
    Ok(BsdeSolution { grid, start: k0, n, dim: d, y, z, f, pathwise, martingale, picard: PicardLog { iterations: 1, gaps: Vec::new() }, ridge_fallbacks: design.fallbacks })
}

/// Laws held fixed during a conditioned solve: the forward law `μ` as an
/// ensemble of paths and the flow `ν` of `Y`, node-major.
#[derive(Clone, Copy, Debug)]
pub struct FrozenLaws<'a> {
    pub mu: &'a ParticleMeasure,
    pub nu: &'a [f64],
}

/// Regression statistics of a forward ensemble for the given functionals:
/// the state plus every history-reading leaf at each node.
pub(crate) fn design_for(ens: &ForwardEnsemble, specs: &[&FunctionalSpec]) -> Design {
    let grid = ens.grid();
    let d = ens.dim();
    let dsl: Vec<_> = specs.iter().filter_map(|s| s.as_dsl()).collect();
    let probe = ens.path(0);
    let extra: usize = dsl.iter().map(|c| c.history_leaf_values(Cut::node(grid, 0), probe).len()).sum();
    Design::build(ens.len(), grid.steps(), ens.start, d + extra, |k, j, out| {
        let p = ens.path(j);
        out[..d].copy_from_slice(p.value(k));
        let mut q = d;
        for c in &dsl {
            for v in c.history_leaf_values(Cut::node(grid, k), p) {
                out[q] = v;
                q += 1;
            }
        }
    })
}

/// `f(t_k, X_j, μ_k)` for every node from the ensemble start, node-major.
pub(crate) fn functional_flow(spec: &FunctionalSpec, ens: &ForwardEnsemble, mu: &ParticleMeasure) -> Result<Vec<f64>> {
    let grid = ens.grid();
    let (m, n) = (grid.steps(), ens.len());
    let mut out = vec![0.0; (m + 1) * n];
    for k in ens.start..=m {
        let vals = functional_at(spec, ens, mu, k)?;
        out[k * n..(k + 1) * n].copy_from_slice(&vals);
    }
    Ok(out)
}

/// `f(t_k, X_j, μ_k)` across particles at one node.
pub(crate) fn functional_at(spec: &FunctionalSpec, ens: &ForwardEnsemble, mu: &ParticleMeasure, k: usize) -> Result<Vec<f64>> {
    let grid = ens.grid();
    let t = grid.node(k);
    let vals: Vec<f64> = match spec {
        FunctionalSpec::Dsl(c) => {
            let ms = c.measure_state_at(Cut::node(grid, k), mu)?;
            (0..ens.len()).into_par_iter().map(|j| c.eval_with(ens.path(j), &ms)).collect()
        }
        FunctionalSpec::Opaque(_) => {
            let mu_k = mu.stop_index(k);
            (0..ens.len()).into_par_iter().map(|j| spec.eval(t, &ens.path(j).stop_index(k), &mu_k)).collect::<Result<_>>()?
        }
    };
    check_finite(&vals, || format!("functional at node {k}"))?;
    Ok(vals)
}

/// Frozen ingredients of a regression solve on one ensemble.
pub(crate) struct Prepared {
    pub design: Design,
    pub terminal: Vec<f64>,
    pub source: Vec<f64>,
}

pub(crate) fn prepare(problem: &BsdeProblem, ens: &ForwardEnsemble, mu: &ParticleMeasure) -> Result<Prepared> {
    if ens.grid() != problem.grid || ens.dim() != problem.dim() || mu.grid() != problem.grid || mu.dim() != problem.dim() {
        return shape("ensemble or law does not match the problem's grid and dimension");
    }
    let design = design_for(ens, &[&problem.terminal, &problem.generator.source]);
    let terminal = functional_at(&problem.terminal, ens, mu, problem.grid.steps())?;
    let source = functional_flow(&problem.generator.source, ens, mu)?;
    Ok(Prepared { design, terminal, source })
}

pub(crate) fn solve_prepared(problem: &BsdeProblem, ens: &ForwardEnsemble, prep: &Prepared, nu: Option<&[f64]>) -> Result<BsdeSolution> {
    let nodes = problem.grid.steps() + 1;
    let law = match nu {
        Some(nu) if problem.generator.reads_law() => {
            let per = nu.len() / nodes;
            (0..nodes).map(|k| if k < ens.start { 0.0 } else { problem.generator.law_value(&nu[k * per..(k + 1) * per]) }).collect()
        }
        None if problem.generator.reads_law() => return domain("the generator reads ν; freeze a law flow or use solve_mf_bsde"),
        _ => vec![0.0; nodes],
    };
    let driver = GenDriver { gen: &problem.generator, n: ens.len(), source: &prep.source, law };
    backward(ens, &prep.design, &prep.terminal, &driver)
}

/// Regression solve of the path-dependent BSDE on `ens`. With frozen laws it
/// is the conditioned equation; without, `μ` is the ensemble's own law and
/// the generator must not read `ν`.
pub fn solve_bsde_regression(problem: &BsdeProblem, ens: &ForwardEnsemble, frozen: Option<FrozenLaws<'_>>) -> Result<BsdeSolution> {
    problem.validate()?;
    let mu = frozen.map_or(&ens.paths, |f| f.mu);
    let prep = prepare(problem, ens, mu)?;
    if let Some(f) = frozen {
        if f.nu.is_empty() || f.nu.len() % (problem.grid.steps() + 1) != 0 {
            return shape("frozen ν flow must cover every node");
        }
    }
    solve_prepared(problem, ens, &prep, frozen.map(|f| f.nu))
}

/// Mean-field BSDE on the diagonal ensemble `ens` (its own law is `μ`):
/// Picard on the law flow `ν`, starting from the law of the terminal value.
pub fn solve_mf_bsde(problem: &BsdeProblem, ens: &ForwardEnsemble) -> Result<BsdeSolution> {
    problem.validate()?;
    let prep = prepare(problem, ens, &ens.paths)?;
    mf_prepared(problem, ens, &prep)
}

pub(crate) fn mf_prepared(problem: &BsdeProblem, ens: &ForwardEnsemble, prep: &Prepared) -> Result<BsdeSolution> {
    if !problem.generator.reads_law() {
        return solve_prepared(problem, ens, prep, None);
    }
    let (m, n) = (problem.grid.steps(), ens.len());
    let mut nu: Vec<f64> = (0..=m).flat_map(|_| prep.terminal.iter().copied()).collect();
    let mut gaps = Vec::new();
    for it in 1..=problem.solver.max_iter {
        let mut sol = solve_prepared(problem, ens, prep, Some(&nu))?;
        let mut gap = 0.0f64;
        for k in ens.start..=m {
            gap = gap.max(w2_empirical_1d(sol.y_at(k), &nu[k * n..(k + 1) * n])?);
        }
        gaps.push(gap);
        nu.copy_from_slice(sol.y_flow());
        if gap < problem.solver.law_tol {
            sol.picard = PicardLog { iterations: it, gaps };
            return Ok(sol);
        }
    }
    Err(Error::NoConvergence { iterations: problem.solver.max_iter, gaps })
}

#[cfg(test)]
mod tests;
