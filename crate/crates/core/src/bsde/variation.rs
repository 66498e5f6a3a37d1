//! The diagonal and conditioned solutions at `(t, γ, η)` and the linear
//! BSDEs satisfied by their path and measure derivatives.
//!
//! Every variation is a [`LinearMfBsde`] on one of the two base ensembles:
//! `α = φ_y` and `β = φ_z` along the base solution, terminal and source from
//! the strong vertical or measure derivatives of `Φ` and `s`, and, for the
//! measure kinds, a mean-field companion on the diagonal ensemble whose kernel
//! is `∂_ν f`.

use rayon::prelude::*;

use super::forward::{simulate, simulate_forward, simulate_law, ForwardEnsemble, NoiseStream, TAG_STATE, TAG_TILDE};
use super::linear::{solve_linear_on, weighted_means, Coef, LinearMfBsde};
use super::{mf_prepared, prepare, solve_prepared, BsdeProblem, BsdeSolution, Prepared};
use crate::error::{domain, shape, Result};
use crate::funcalc::{self, Cut, FdConfig, FunctionalSpec, LeafJet, Mode, Order};
use crate::pathspace::{DiscretePath, ParticleMeasure, SnapMode};

/// Which derivative of the decoupling solution to compute.
#[derive(Clone, Debug)]
pub enum VariationKind {
    /// `∂_{ω_τ}(Y, Z)` of the conditioned solution, one solve per component.
    PathFirst { tau: f64 },
    /// `∂_{μ_τ}(Y, Z)(x̃)`, one solve per component.
    MeasureKernel { tau: f64, x_tilde: DiscretePath },
    /// `∂²_{ω_τ}(Y, Z)`; scalar paths only.
    PathSecond { tau: f64 },
    /// `∂_{x̃_τ}∂_{μ_τ}(Y, Z)(x̃)`; scalar paths only.
    MeasureKernelSecond { tau: f64, x_tilde: DiscretePath },
}

/// The diagonal mean-field solution on `X'^η` and the conditioned one on `X^γ`.
pub struct SolvedPair {
    pub problem: BsdeProblem,
    pub t: f64,
    pub k0: usize,
    pub gamma: DiscretePath,
    /// `η` with its particles in canonical order.
    pub eta: ParticleMeasure,
    pub law_ensemble: ForwardEnsemble,
    pub diagonal: BsdeSolution,
    pub state_ensemble: ForwardEnsemble,
    pub conditioned: BsdeSolution,
    diag_prep: Prepared,
    cond_prep: Prepared,
}

impl SolvedPair {
    /// `u(t, γ, μ)`.
    pub fn value(&self) -> f64 {
        self.conditioned.value()
    }

    pub fn stderr(&self) -> f64 {
        self.conditioned.stderr()
    }
}

/// Sorts particles by their values on `[0, t_k]` so the solve depends on the
/// empirical law only, not on the order particles were listed in.
pub(crate) fn canonical(eta: &ParticleMeasure, k: usize) -> Result<ParticleMeasure> {
    let d = eta.dim();
    let mut idx: Vec<usize> = (0..eta.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (&eta.particle(a).values()[..(k + 1) * d], &eta.particle(b).values()[..(k + 1) * d]);
        pa.iter().zip(pb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    ParticleMeasure::new(idx.into_iter().map(|i| eta.particle(i).clone()).collect())
}

/// Solves the diagonal equation from `η` and the conditioned one from `γ_t`.
pub fn solve_pair(problem: &BsdeProblem, t: f64, gamma: &DiscretePath, eta: &ParticleMeasure) -> Result<SolvedPair> {
    problem.validate()?;
    let grid = problem.grid;
    if gamma.grid() != grid || eta.grid() != grid || gamma.dim() != problem.dim() || eta.dim() != problem.dim() {
        return shape("γ and η must live on the problem's grid and dimension");
    }
    let k0 = grid.snap(t, SnapMode::Nearest)?;
    let eta = canonical(eta, k0)?;
    let n = problem.particles;
    let law_ensemble = simulate_law(&problem.coeffs, &eta, grid.node(k0), n, NoiseStream::new(problem.seed, TAG_STATE))?;
    let mu = &law_ensemble.paths;
    let diag_prep = prepare(problem, &law_ensemble, mu)?;
    let diagonal = mf_prepared(problem, &law_ensemble, &diag_prep)?;
    let state_ensemble = simulate_forward(&problem.coeffs, gamma, grid.node(k0), n, problem.seed)?;
    let cond_prep = prepare(problem, &state_ensemble, mu)?;
    let conditioned = solve_prepared(problem, &state_ensemble, &cond_prep, Some(diagonal.y_flow()))?;
    Ok(SolvedPair {
        problem: problem.clone(),
        t: grid.node(k0),
        k0,
        gamma: gamma.stop_index(k0),
        eta,
        law_ensemble,
        diagonal,
        state_ensemble,
        conditioned,
        diag_prep,
        cond_prep,
    })
}

/// Per-particle `∂_{ω_τ}` jets of `spec` at node `k`.
fn path_jets(spec: &FunctionalSpec, ens: &ForwardEnsemble, mu: &ParticleMeasure, k_tau: usize, k: usize, second: bool) -> Result<Vec<LeafJet>> {
    let grid = ens.grid();
    match spec {
        FunctionalSpec::Dsl(c) => {
            if !c.reads_path() {
                let d = ens.dim();
                return Ok(vec![LeafJet { grad: vec![0.0; d], hess: vec![0.0; d * d] }; ens.len()]);
            }
            let ms = c.measure_state_at(Cut::node(grid, k), mu)?;
            Ok((0..ens.len()).into_par_iter().map(|j| c.svd_with(k_tau, ens.path(j), &ms, second)).collect())
        }
        FunctionalSpec::Opaque(_) => {
            let cfg = FdConfig::default();
            let (tau, t) = (grid.node(k_tau), grid.node(k));
            let mu_k = mu.stop_index(k);
            (0..ens.len())
                .into_par_iter()
                .map(|j| {
                    let p = ens.path(j).stop_index(k);
                    let grad = funcalc::strong_vertical_derivative(spec, tau, t, &p, &mu_k, Order::First, Mode::Fd, &cfg)?;
                    let hess = if second { funcalc::strong_vertical_derivative(spec, tau, t, &p, &mu_k, Order::Second, Mode::Fd, &cfg)? } else { Vec::new() };
                    Ok(LeafJet { grad, hess })
                })
                .collect()
        }
    }
}

/// `mean_i ∂_{μ_τ} spec(t_k, X_j, μ_k)(X̃_i)` per particle `j`, reduced to one
/// scalar entry of the gradient (`second = false`) or Hessian.
#[allow(clippy::too_many_arguments)]
fn measure_kernel_means(spec: &FunctionalSpec, ens: &ForwardEnsemble, tilde: &ForwardEnsemble, mu: &ParticleMeasure, k_tau: usize, k: usize, entry: usize, second: bool) -> Result<Vec<f64>> {
    let grid = ens.grid();
    let Some(c) = spec.as_dsl() else {
        return domain("measure-kernel variations need DSL functionals");
    };
    if !c.reads_measure() {
        return Ok(vec![0.0; ens.len()]);
    }
    let ms = c.measure_state_at(Cut::node(grid, k), mu)?;
    let leaves: Vec<usize> = (0..c.leaves.len()).filter(|&l| c.leaves[l].reads_measure()).collect();
    let kbar: Vec<f64> = leaves
        .iter()
        .map(|&l| {
            let v: Vec<f64> = (0..tilde.len())
                .into_par_iter()
                .map(|i| {
                    let jet = c.measure_leaf_kernel(l, k_tau, &ms, tilde.path(i), second);
                    if second {
                        jet.hess[entry]
                    } else {
                        jet.grad[entry]
                    }
                })
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    Ok((0..ens.len())
        .into_par_iter()
        .map(|j| {
            let (_, g, _) = c.combine(&c.leaf_values(ens.path(j), &ms));
            leaves.iter().zip(&kbar).map(|(&l, kb)| g[l] * kb).sum()
        })
        .collect())
}

/// `φ_y`, `φ_z` and, when `second`, `(φ_yy, φ_yz, φ_zz)` along a solution (scalar `Z` for the latter).
struct DriverCoefs {
    alpha: Coef,
    beta: Vec<Coef>,
    second: Option<[Vec<f64>; 3]>,
}

fn driver_coefs(problem: &BsdeProblem, sol: &BsdeSolution, second: bool) -> DriverCoefs {
    let gen = &problem.generator;
    let (n, d, nodes) = (sol.n, sol.dim, sol.grid.steps() + 1);
    if gen.driver.terms.is_empty() {
        return DriverCoefs {
            alpha: Coef::Const(0.0),
            beta: Vec::new(),
            second: second.then(|| [vec![0.0; nodes * n], vec![0.0; nodes * n], vec![0.0; nodes * n]]),
        };
    }
    let jets: Vec<(Vec<f64>, Vec<f64>)> = (0..nodes * n)
        .into_par_iter()
        .map(|c| {
            let (k, j) = (c / n, c % n);
            if k < sol.start {
                return (vec![0.0; 1 + d], vec![0.0; (1 + d) * (1 + d)]);
            }
            let (_, g, h) = gen.driver_jet(sol.y(k, j), sol.z(k, j));
            (g, h)
        })
        .collect();
    let alpha = Coef::Cells(jets.iter().map(|j| j.0[0]).collect());
    let beta = (0..d).map(|a| Coef::Cells(jets.iter().map(|j| j.0[1 + a]).collect())).collect();
    let second = second.then(|| {
        let w = 1 + d;
        [jets.iter().map(|j| j.1[0]).collect(), jets.iter().map(|j| j.1[1]).collect(), jets.iter().map(|j| j.1[w + 1]).collect()]
    });
    DriverCoefs { alpha, beta, second }
}

/// First and, when `second`, second path variation on one ensemble for component `a`.
#[allow(clippy::too_many_arguments)]
fn path_variation(
    problem: &BsdeProblem,
    ens: &ForwardEnsemble,
    prep: &Prepared,
    base: &BsdeSolution,
    mu: &ParticleMeasure,
    k_tau: usize,
    a: usize,
    second: bool,
) -> Result<(BsdeSolution, Option<BsdeSolution>)> {
    let grid = problem.grid;
    let (m, n, d) = (grid.steps(), ens.len(), ens.dim());
    let nodes = m + 1;
    let dc = driver_coefs(problem, base, second);
    let term = path_jets(&problem.terminal, ens, mu, k_tau, m, second)?;
    let mut src1 = vec![0.0; nodes * n];
    let mut src2 = vec![0.0; if second { nodes * n } else { 0 }];
    if problem.generator.source.reads_path() {
        for k in ens.start..=m {
            let jets = path_jets(&problem.generator.source, ens, mu, k_tau, k, second)?;
            for (j, jet) in jets.iter().enumerate() {
                src1[k * n + j] = jet.grad[a];
                if second {
                    src2[k * n + j] = jet.hess[a * d + a];
                }
            }
        }
    }
    let first = LinearMfBsde {
        terminal: term.iter().map(|j| j.grad[a]).collect(),
        alpha: dc.alpha.clone(),
        beta: dc.beta.clone(),
        kernel: None,
        source: Coef::Cells(src1),
        solver: problem.solver,
    };
    let v1 = solve_linear_on(ens, &prep.design, &first)?;
    if !second {
        return Ok((v1, None));
    }
    let [yy, yz, zz] = dc.second.expect("second-order driver coefficients");
    for k in ens.start..=m {
        for j in 0..n {
            let c = k * n + j;
            let (gy, gz) = (v1.y(k, j), v1.z(k, j)[0]);
            src2[c] += yy[c] * gy * gy + 2.0 * yz[c] * gy * gz + zz[c] * gz * gz;
        }
    }
    let sec = LinearMfBsde { terminal: term.iter().map(|j| j.hess[a * d + a]).collect(), source: Coef::Cells(src2), ..first };
    let v2 = solve_linear_on(ens, &prep.design, &sec)?;
    Ok((v1, Some(v2)))
}

/// Solves the requested variation; one solution per path component.
pub fn solve_variation_bsde(kind: &VariationKind, base: &SolvedPair) -> Result<Vec<BsdeSolution>> {
    let problem = &base.problem;
    let grid = problem.grid;
    let d = problem.dim();
    let (tau, x_tilde, second) = match kind {
        VariationKind::PathFirst { tau } => (*tau, None, false),
        VariationKind::PathSecond { tau } => (*tau, None, true),
        VariationKind::MeasureKernel { tau, x_tilde } => (*tau, Some(x_tilde), false),
        VariationKind::MeasureKernelSecond { tau, x_tilde } => (*tau, Some(x_tilde), true),
    };
    if second && d != 1 {
        return domain("second-order variations are implemented for scalar paths only");
    }
    let k_tau = grid.snap(tau, SnapMode::Nearest)?;
    if k_tau > base.k0 {
        return domain(format!("cut-off τ={tau} exceeds t={}", base.t));
    }
    if matches!(problem.terminal, FunctionalSpec::Opaque(_)) || matches!(problem.generator.source, FunctionalSpec::Opaque(_)) {
        log::warn!("variation BSDE: opaque functional, path derivatives from finite differences");
    }
    let mu = &base.law_ensemble.paths;
    let comps: Vec<usize> = if second { vec![0] } else { (0..d).collect() };
    let Some(x_tilde) = x_tilde else {
        return comps
            .into_iter()
            .map(|a| {
                let (v1, v2) = path_variation(problem, &base.state_ensemble, &base.cond_prep, &base.conditioned, mu, k_tau, a, second)?;
                Ok(v2.unwrap_or(v1))
            })
            .collect();
    };
    if x_tilde.grid() != grid || x_tilde.dim() != d {
        return shape("x̃ must live on the problem's grid and dimension");
    }
    let coeffs = &problem.coeffs;
    let k0 = base.k0;
    let tilde = if problem.solver.strict_copies {
        simulate(grid, d, &coeffs.b2, &coeffs.sigma2, k0, problem.particles, NoiseStream::new(problem.seed, TAG_TILDE), &|_| x_tilde.clone())?
    } else {
        base.law_ensemble.redrive(&coeffs.b2, &coeffs.sigma2, &|_| x_tilde.clone())?
    };
    let gen = &problem.generator;
    let nodes = grid.steps() + 1;
    let n = problem.particles;
    comps
        .into_iter()
        .map(|a| {
            let entry = if second { 0 } else { a };
            // Contribution of the copy started at x̃ through ν.
            let mut c = vec![0.0; nodes];
            if gen.reads_law() {
                let prep = prepare(problem, &tilde, mu)?;
                let ytil = solve_prepared(problem, &tilde, &prep, Some(base.diagonal.y_flow()))?;
                let (v1, v2) = path_variation(problem, &tilde, &prep, &ytil, mu, k_tau, a, second)?;
                for (k, ck) in c.iter_mut().enumerate().skip(k0) {
                    let mut s = 0.0;
                    for i in 0..n {
                        let (kap, dkap) = gen.law_kernel(ytil.y(k, i))?;
                        s += match &v2 {
                            None => kap * v1.y(k, i),
                            Some(v2) => dkap * v1.y(k, i).powi(2) + kap * v2.y(k, i),
                        };
                    }
                    *ck = s / n as f64;
                }
            }
            let assemble = |ens: &ForwardEnsemble, extra: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
                let xi = measure_kernel_means(&problem.terminal, ens, &tilde, mu, k_tau, grid.steps(), entry, second)?;
                let mut src = vec![0.0; nodes * n];
                for k in k0..nodes {
                    let s = measure_kernel_means(&gen.source, ens, &tilde, mu, k_tau, k, entry, second)?;
                    for j in 0..n {
                        src[k * n + j] = s[j] + c[k] + extra[k];
                    }
                }
                Ok((xi, src))
            };
            let mut mf_eta = vec![0.0; nodes];
            if gen.reads_law() {
                let kernel = Coef::Cells(
                    (0..nodes * n)
                        .map(|q| if q / n < k0 { Ok(0.0) } else { gen.law_kernel(base.diagonal.y_flow()[q]).map(|v| v.0) })
                        .collect::<Result<_>>()?,
                );
                let (xi, src) = assemble(&base.law_ensemble, &vec![0.0; nodes])?;
                let dc = driver_coefs(problem, &base.diagonal, false);
                let companion = LinearMfBsde { terminal: xi, alpha: dc.alpha, beta: dc.beta, kernel: Some(kernel.clone()), source: Coef::Cells(src), solver: problem.solver };
                let u_eta = solve_linear_on(&base.law_ensemble, &base.diag_prep.design, &companion)?;
                mf_eta = weighted_means(&kernel, u_eta.y_flow(), nodes, n);
            }
            let (xi, src) = assemble(&base.state_ensemble, &mf_eta)?;
            let dc = driver_coefs(problem, &base.conditioned, false);
            let spec = LinearMfBsde { terminal: xi, alpha: dc.alpha, beta: dc.beta, kernel: None, source: Coef::Cells(src), solver: problem.solver };
            solve_linear_on(&base.state_ensemble, &base.cond_prep.design, &spec)
        })
        .collect()
}
