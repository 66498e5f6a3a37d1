//! The decoupling field `u(t, γ, μ)` of the mean-field BSDE pair and the
//! master-equation checks built on it: derivative fields, the flow property,
//! comparison, Sobolev evaluation, mollified data, closed forms and the PDE
//! residual.

pub mod closed_form;
pub mod mollifier;
pub mod residual;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::regression::{chunked_sum, mean_stderr};
use crate::bsde::variation::canonical;
use crate::bsde::{simulate_forward, simulate_law, solve_pair, solve_variation_bsde, BsdeProblem, NoiseStream, SolvedPair, VariationKind, TAG_STATE};
use crate::error::{domain, shape, Error, Result};
use crate::funcalc::{Cut, FunctionalSpec, Leaf, Order};
use crate::ito::DiffusionCoeffs;
use crate::pathspace::{DiscretePath, ParticleMeasure, SnapMode};

pub use closed_form::{mollify_generator, mollify_measure_terminal, mollify_terminal, ClosedForm, ClosedFormCase};
pub use mollifier::Mollifier;
pub use residual::{pde_residual, DecouplingProvider, Evaluation, FieldProvider, Residual, ResidualTerms, SobolevProvider};

/// Which arguments the terminal value and the generator may read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    General,
    /// Current state `ω(t)` and current marginal of `μ` only.
    StateDependent,
    /// Path-dependent PDE: no `μ` and no `ν`.
    Ppde,
    /// No path argument.
    MeasureOnly,
    /// Whole path, but `μ` through its current marginal only.
    PathStateMixed,
}

fn all_leaves(spec: &FunctionalSpec, what: &str, ok: impl Fn(&Leaf) -> bool) -> Result<()> {
    match spec {
        FunctionalSpec::Dsl(c) if c.leaves.iter().all(ok) => Ok(()),
        FunctionalSpec::Dsl(_) => Err(Error::Invalid(format!("{what} reads an argument the preset excludes"))),
        FunctionalSpec::Opaque(o) => Err(Error::Invalid(format!("{what} is opaque ({}); the preset cannot be certified", o.name))),
    }
}

impl Preset {
    pub fn check(&self, p: &BsdeProblem) -> Result<()> {
        let specs = [(&p.terminal, "terminal value"), (&p.generator.source, "generator source")];
        for (spec, what) in specs {
            match self {
                Preset::General => {}
                Preset::StateDependent => all_leaves(spec, what, |l| matches!(l, Leaf::Time | Leaf::PathEval { .. } | Leaf::MeasureEval { .. }))?,
                Preset::Ppde => all_leaves(spec, what, |l| !l.reads_measure())?,
                Preset::MeasureOnly => all_leaves(spec, what, |l| !l.reads_path())?,
                Preset::PathStateMixed => all_leaves(spec, what, |l| !l.reads_measure() || matches!(l, Leaf::MeasureEval { .. }))?,
            }
        }
        if *self == Preset::Ppde && p.generator.reads_law() {
            return Err(Error::Invalid("a path-dependent PDE generator cannot read ν".into()));
        }
        Ok(())
    }
}

/// A BSDE problem read as a master equation; the forward coefficients
/// `(b_1, σ_1, b_2, σ_2)` live in `bsde.coeffs`.
#[derive(Clone, Debug)]
pub struct MasterProblem {
    pub bsde: BsdeProblem,
    pub preset: Preset,
}

impl MasterProblem {
    pub fn new(bsde: BsdeProblem, preset: Preset) -> Result<Self> {
        bsde.validate()?;
        preset.check(&bsde)?;
        Ok(Self { bsde, preset })
    }

    pub fn coeffs(&self) -> &DiffusionCoeffs {
        &self.bsde.coeffs
    }

    /// The same problem with another seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.bsde.seed = seed;
        out
    }
}

/// A Monte Carlo estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    /// `|value − target| ≤ max(k·stderr, floor)`.
    pub fn within(&self, target: f64, k: f64, floor: f64) -> bool {
        (self.value - target).abs() <= (k * self.stderr).max(floor)
    }
}

/// `u(t, γ, μ)` with whatever derivative fields were requested.
///
/// Inside a residual assembly the measure entries are averages over `μ`;
/// from [`derivative_fields`] they are kernels at the requested `x̃`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FieldEstimate {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    pub particles: usize,
    pub steps: usize,
    /// `∂_t u`.
    pub dt: Option<Estimate>,
    /// `∂_ω u` at `t` per component, from the `Z` identity or a path bump.
    pub dw: Option<Vec<Estimate>>,
    /// `∂_{ω_τ} u` per component.
    pub dw_tau: Option<Vec<Estimate>>,
    /// `∂²_{ω_τ} u` (scalar paths).
    pub dww: Option<Estimate>,
    /// `∂_{μ_τ} u(x̃)` per component.
    pub dmu: Option<Vec<Estimate>>,
    /// `∂_{ω̃_τ} ∂_{μ_τ} u(x̃)` (scalar paths).
    pub dwdmu: Option<Estimate>,
    pub residual: Option<Residual>,
}

impl FieldEstimate {
    fn plain(t: f64, value: f64, stderr: f64, particles: usize, steps: usize) -> Self {
        Self { t, value, stderr, particles, steps, ..Default::default() }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { value: self.value, stderr: self.stderr }
    }
}

fn check_args(problem: &BsdeProblem, gamma: &DiscretePath, mu: &ParticleMeasure) -> Result<()> {
    let (g, d) = (problem.grid, problem.dim());
    if gamma.grid() != g || mu.grid() != g || gamma.dim() != d || mu.dim() != d {
        return shape("γ and μ must live on the problem's grid and dimension");
    }
    Ok(())
}

/// Solves the pair behind `u(t, γ, μ)`; `η` is `μ` itself.
pub fn solve_field_pair(problem: &MasterProblem, t: f64, gamma: &DiscretePath, mu: &ParticleMeasure) -> Result<SolvedPair> {
    check_args(&problem.bsde, gamma, mu)?;
    solve_pair(&problem.bsde, t, gamma, mu)
}

/// `u(t, γ, μ) = Y^{γ_t, μ_t}(t)`. At `t = T` this is `Φ(γ_T, μ_T)` exactly.
pub fn decoupling_field(problem: &MasterProblem, t: f64, gamma: &DiscretePath, mu: &ParticleMeasure) -> Result<FieldEstimate> {
    let p = &problem.bsde;
    check_args(p, gamma, mu)?;
    let (grid, n) = (p.grid, p.particles);
    let k0 = grid.snap(t, SnapMode::Nearest)?;
    if k0 == grid.steps() {
        let v = p.terminal.eval(grid.horizon(), gamma, mu)?;
        return Ok(FieldEstimate::plain(grid.horizon(), v, 0.0, n, grid.steps()));
    }
    let pair = solve_pair(p, t, gamma, mu)?;
    Ok(FieldEstimate::plain(pair.t, pair.value(), field_stderr(&pair)?, n, grid.steps()))
}

/// Standard error of `u` including the noise of the law ensemble, which every
/// pathwise sample shares. When `Φ` reads the measure, the law part is the
/// batch-means variance of the terminal mean minus its path-only variance.
/// Law dependence entering through the generator is not included.
pub fn field_stderr(pair: &SolvedPair) -> Result<f64> {
    let se = pair.stderr();
    let phi = &pair.problem.terminal;
    let paths = pair.state_ensemble.paths.particles();
    let law = pair.law_ensemble.paths.particles();
    let n = paths.len().min(law.len());
    if !phi.reads_measure() || n < 2 * BATCHES {
        return Ok(se);
    }
    let m = pair.problem.grid.steps();
    let full = values_on(phi, paths, &pair.law_ensemble.paths, m)?;
    let path_only = mean_stderr(&full).1;
    let b = batch_len(n, pair.eta.len());
    let means: Vec<f64> = (0..BATCHES)
        .map(|i| {
            let r = i * b..(i + 1) * b;
            let sub = ParticleMeasure::new(law[r.clone()].to_vec())?;
            let v = values_on(phi, &paths[r], &sub, m)?;
            Ok(chunked_sum(b, 1, |j, a| a[0] += v[j])[0] / b as f64)
        })
        .collect::<Result<_>>()?;
    let batched = mean_stderr(&means).1;
    Ok((se * se + (batched * batched - path_only * path_only).max(0.0)).sqrt())
}

fn estimates(sols: &[crate::bsde::BsdeSolution]) -> Vec<Estimate> {
    sols.iter().map(|s| Estimate { value: s.value(), stderr: s.stderr() }).collect()
}

/// Derivative fields of `u` at `(t, γ, μ)`: `∂_ω u` from the `Z` identity and
/// the `τ`-variations from the variation BSDEs. Second order adds `∂²_{ω_τ}u`
/// and `∂_{ω̃_τ}∂_{μ_τ}u(x̃)` (scalar paths).
pub fn derivative_fields(
    problem: &MasterProblem,
    t: f64,
    tau: f64,
    gamma: &DiscretePath,
    mu: &ParticleMeasure,
    x_tilde: &DiscretePath,
    order: Order,
) -> Result<FieldEstimate> {
    let pair = solve_field_pair(problem, t, gamma, mu)?;
    let grid = problem.bsde.grid;
    let sol = &pair.conditioned;
    let mut out = FieldEstimate::plain(pair.t, pair.value(), field_stderr(&pair)?, problem.bsde.particles, grid.steps());
    let zm = sol.z_mean(pair.k0);
    let zs = sol.z_stderr(&pair.state_ensemble);
    out.dw = Some(zm.into_iter().zip(zs).map(|(value, stderr)| Estimate { value, stderr }).collect());
    out.dw_tau = Some(estimates(&solve_variation_bsde(&VariationKind::PathFirst { tau }, &pair)?));
    out.dmu = Some(estimates(&solve_variation_bsde(&VariationKind::MeasureKernel { tau, x_tilde: x_tilde.clone() }, &pair)?));
    if order == Order::Second {
        out.dww = estimates(&solve_variation_bsde(&VariationKind::PathSecond { tau }, &pair)?).pop();
        out.dwdmu = estimates(&solve_variation_bsde(&VariationKind::MeasureKernelSecond { tau, x_tilde: x_tilde.clone() }, &pair)?).pop();
    }
    Ok(out)
}

/// One row of the flow check at time `s`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowRow {
    pub s: f64,
    pub probes: usize,
    /// Mean of `u(s, X'_j, L_{X'_s}) − Y^{η_t}_j(s)` over the probes.
    pub discrepancy: f64,
    pub stderr: f64,
    pub max_abs: f64,
}

impl FlowRow {
    /// `|discrepancy| ≤ max(k·stderr, 1e-10)`; the floor absorbs roundoff on
    /// deterministic problems.
    pub fn passes(&self, k: f64) -> bool {
        self.discrepancy.abs() <= (k * self.stderr).max(1e-10)
    }
}

/// Re-evaluates the field at time `s` along the first `probes` particles of the
/// diagonal ensemble from `(t, γ, μ)` and compares with the stored `Y^{η_t}(s)`.
pub fn check_flow(problem: &MasterProblem, t: f64, s: f64, gamma: &DiscretePath, mu: &ParticleMeasure, probes: usize) -> Result<FlowRow> {
    let pair = solve_field_pair(problem, t, gamma, mu)?;
    flow_row(problem, &pair, s, probes)
}

/// [`check_flow`] on an already solved pair.
pub fn flow_row(problem: &MasterProblem, pair: &SolvedPair, s: f64, probes: usize) -> Result<FlowRow> {
    let grid = problem.bsde.grid;
    let ks = grid.snap(s, SnapMode::Nearest)?;
    if ks < pair.k0 {
        return domain(format!("flow time s={s} precedes t={}", pair.t));
    }
    let law = &pair.law_ensemble;
    let l = probes.clamp(1, law.len());
    let mu_s = law.paths.stop_index(ks);
    let rows: Vec<(f64, f64)> = (0..l)
        .map(|j| {
            let x = law.path(j).stop_index(ks);
            let u = decoupling_field(problem, grid.node(ks), &x, &mu_s)?;
            Ok((u.value - pair.diagonal.y(ks, j), u.stderr))
        })
        .collect::<Result<_>>()?;
    let d: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let (mean, se) = mean_stderr(&d);
    let se_u = (rows.iter().map(|r| r.1 * r.1).sum::<f64>() / l as f64).sqrt();
    Ok(FlowRow {
        s: grid.node(ks),
        probes: l,
        discrepancy: mean,
        stderr: (se * se + se_u * se_u).sqrt(),
        max_abs: d.iter().fold(0.0, |a, x| a.max(x.abs())),
    })
}

/// `u_1`, `u_2` and their margin under common random numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub u1: Estimate,
    pub u2: Estimate,
    /// `u_2 − u_1`.
    pub margin: f64,
    /// Standard error of the pathwise margin.
    pub margin_stderr: f64,
}

/// Solves both problems at `(t, γ, μ)` with the first problem's seed.
pub fn compare_fields(p1: &MasterProblem, p2: &MasterProblem, t: f64, gamma: &DiscretePath, mu: &ParticleMeasure) -> Result<CompareReport> {
    if p1.bsde.grid != p2.bsde.grid || p1.bsde.particles != p2.bsde.particles {
        return shape("compared problems must share grid and particle count");
    }
    let p2 = p2.reseeded(p1.bsde.seed);
    let a = solve_field_pair(p1, t, gamma, mu)?;
    let b = solve_field_pair(&p2, t, gamma, mu)?;
    let diff: Vec<f64> = a.conditioned.pathwise.iter().zip(&b.conditioned.pathwise).map(|(x, y)| y - x).collect();
    Ok(CompareReport {
        u1: Estimate { value: a.value(), stderr: a.stderr() },
        u2: Estimate { value: b.value(), stderr: b.stderr() },
        margin: b.value() - a.value(),
        margin_stderr: mean_stderr(&diff).1,
    })
}

/// Number of batches behind the standard error of law-dependent estimates.
pub const BATCHES: usize = 40;

/// `spec(t_k, ω_j, μ_k)` over a set of paths.
/// Batch length for batch means. Law particle `j` starts from particle
/// `j mod m` of `η`, so a multiple of `m` keeps every batch's initial law equal
/// to `η`.
fn batch_len(n: usize, m: usize) -> usize {
    let b = n / BATCHES;
    if b >= m {
        b / m * m
    } else {
        b
    }
}

fn values_on(spec: &FunctionalSpec, paths: &[DiscretePath], mu: &ParticleMeasure, k: usize) -> Result<Vec<f64>> {
    let grid = mu.grid();
    match spec {
        FunctionalSpec::Dsl(c) => {
            let ms = c.measure_state_at(Cut::node(grid, k), mu)?;
            Ok(paths.par_iter().map(|p| c.eval_with(p, &ms)).collect())
        }
        FunctionalSpec::Opaque(_) => {
            let mu_k = mu.stop_index(k);
            paths.par_iter().map(|p| spec.eval(grid.node(k), &p.stop_index(k), &mu_k)).collect()
        }
    }
}

/// `Φ(X_j, L_T) + Σ_{k ≥ k0} f(t_k, X_j, L_k) Δt` per path.
fn sobolev_samples(phi: &FunctionalSpec, f: &FunctionalSpec, paths: &[DiscretePath], law: &ParticleMeasure, k0: usize) -> Result<Vec<f64>> {
    let grid = law.grid();
    let dt = grid.dt();
    let mut acc = values_on(phi, paths, law, grid.steps())?;
    for k in k0..grid.steps() {
        for (a, v) in acc.iter_mut().zip(values_on(f, paths, law, k)?) {
            *a += dt * v;
        }
    }
    if let Some(j) = acc.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: j, context: "Sobolev sample".into() });
    }
    Ok(acc)
}

/// Plain Monte Carlo of `E[Φ(B^{ω_t}_T, L_{B^{η_t}_T}) + ∫_t^T f(r, B^{ω_t}_r, L_{B^{η_t}_r}) dr]`
/// under Brownian dynamics, with left-point time quadrature. The per-path
/// samples are returned alongside the estimate.
pub fn sobolev_evaluation(phi: &FunctionalSpec, f: &FunctionalSpec, t: f64, omega: &DiscretePath, mu: &ParticleMeasure, n: usize, seed: u64) -> Result<Evaluation> {
    let grid = omega.grid();
    let d = omega.dim();
    if mu.grid() != grid || mu.dim() != d {
        return shape("ω and μ must share grid and dimension");
    }
    phi.validate(d)?;
    f.validate(d)?;
    if n < 2 {
        return domain(format!("need at least two samples, got {n}"));
    }
    let k0 = grid.snap(t, SnapMode::Nearest)?;
    if k0 == grid.steps() {
        return Ok(Evaluation::exact(phi.eval(grid.horizon(), omega, mu)?));
    }
    let coeffs = DiffusionCoeffs::standard(d);
    let eta = canonical(mu, k0)?;
    let state = simulate_forward(&coeffs, omega, grid.node(k0), n, seed)?;
    let law = simulate_law(&coeffs, &eta, grid.node(k0), n, NoiseStream::new(seed, TAG_STATE))?;
    let samples = sobolev_samples(phi, f, state.paths.particles(), &law.paths, k0)?;
    let (value, se) = mean_stderr(&samples);
    let stderr = if (phi.reads_measure() || f.reads_measure()) && n >= 2 * BATCHES {
        let b = batch_len(n, eta.len());
        let means: Vec<f64> = (0..BATCHES)
            .map(|i| {
                let r = i * b..(i + 1) * b;
                let sub = ParticleMeasure::new(law.paths.particles()[r.clone()].to_vec())?;
                let s = sobolev_samples(phi, f, &state.paths.particles()[r], &sub, k0)?;
                Ok(chunked_sum(b, 1, |j, a| a[0] += s[j])[0] / b as f64)
            })
            .collect::<Result<_>>()?;
        mean_stderr(&means).1
    } else {
        se
    };
    Ok(Evaluation { value, stderr, samples })
}

/// The Sobolev representation of the inhomogeneous equation with terminal `Φ`
/// and source `f(t, ω, μ)`.
pub fn sobolev_eval(phi: &FunctionalSpec, f: &FunctionalSpec, t: f64, omega: &DiscretePath, mu: &ParticleMeasure, n: usize, seed: u64) -> Result<FieldEstimate> {
    let e = sobolev_evaluation(phi, f, t, omega, mu, n, seed)?;
    let grid = omega.grid();
    let k0 = grid.snap(t, SnapMode::Nearest)?;
    Ok(FieldEstimate::plain(grid.node(k0), e.value, e.stderr, n, grid.steps()))
}
