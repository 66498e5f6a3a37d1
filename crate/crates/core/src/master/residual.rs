//! The master-equation residual
//!
//! ```text
//! ∂_t u + b_1·∂_ω u + ½σ_1²∂²_ω u + E^μ[b_2·∂_μ u(W̃) + ½σ_2²∂_{ω̃}∂_μ u(W̃)] + f(t, γ, μ, u, σ_1∂_ω u, ν)
//! ```
//!
//! assembled from finite differences of any field provider, or from its
//! analytic derivatives when it has them. Scalar paths only.

use serde::{Deserialize, Serialize};

use super::{sobolev_evaluation, solve_field_pair, Estimate, FieldEstimate, MasterProblem};
use crate::bsde::regression::mean_stderr;
use crate::error::{domain, Result};
use crate::funcalc::{FdConfig, FunctionalSpec, Mode, Order};
use crate::ito::DiffusionCoeffs;
use crate::pathspace::{DiscretePath, ParticleMeasure, SnapMode};

/// One evaluation of a field with its per-sample contributions, when the
/// provider is a Monte Carlo estimator.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub value: f64,
    pub stderr: f64,
    pub samples: Vec<f64>,
}

impl Evaluation {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0, samples: Vec::new() }
    }
}

/// Analytic derivatives of a field at one point; measure entries are
/// averaged over `μ`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AnalyticTerms {
    pub dt: f64,
    pub dw: f64,
    pub dww: f64,
    pub dmu: f64,
    pub dwdmu: f64,
}

/// Anything that evaluates `u(t, γ, μ)`.
pub trait FieldProvider: Sync {
    fn eval(&self, t: f64, gamma: &DiscretePath, mu: &ParticleMeasure) -> Result<Evaluation>;

    /// Times at which `u` is not differentiable.
    fn kinks(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Whether off-grid times are accepted.
    fn continuous_time(&self) -> bool {
        false
    }

    fn analytic(&self, _t: f64, _gamma: &DiscretePath, _mu: &ParticleMeasure) -> Option<Result<AnalyticTerms>> {
        None
    }
}

/// The decoupling field of a master problem.
pub struct DecouplingProvider<'a> {
    pub problem: &'a MasterProblem,
}

impl FieldProvider for DecouplingProvider<'_> {
    fn eval(&self, t: f64, gamma: &DiscretePath, mu: &ParticleMeasure) -> Result<Evaluation> {
        let grid = self.problem.bsde.grid;
        if grid.snap(t, SnapMode::Nearest)? == grid.steps() {
            return Ok(Evaluation::exact(self.problem.bsde.terminal.eval(grid.horizon(), gamma, mu)?));
        }
        let pair = solve_field_pair(self.problem, t, gamma, mu)?;
        Ok(Evaluation { value: pair.value(), stderr: pair.stderr(), samples: pair.conditioned.pathwise.clone() })
    }
}

/// Sobolev representation with terminal `Φ` and source `f(t, ω, μ)`.
#[derive(Clone, Debug)]
pub struct SobolevProvider {
    pub terminal: FunctionalSpec,
    pub source: FunctionalSpec,
    pub particles: usize,
    pub seed: u64,
}

impl FieldProvider for SobolevProvider {
    fn eval(&self, t: f64, gamma: &DiscretePath, mu: &ParticleMeasure) -> Result<Evaluation> {
        sobolev_evaluation(&self.terminal, &self.source, t, gamma, mu, self.particles, self.seed)
    }
}

/// Signed contributions of each term of the equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualTerms {
    pub time: f64,
    pub path_first: f64,
    pub path_second: f64,
    pub measure_first: f64,
    pub measure_second: f64,
    pub generator: f64,
}

impl ResidualTerms {
    pub fn sum(&self) -> f64 {
        self.time + self.path_first + self.path_second + self.measure_first + self.measure_second + self.generator
    }
}

/// The assembled residual and its error budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub terms: ResidualTerms,
    pub value: f64,
    /// `3·mc + fd + roundoff`.
    pub budget: f64,
    /// Monte Carlo standard error propagated through the stencils.
    pub mc: f64,
    /// Step-halving estimate of the truncation error.
    pub fd: f64,
    pub roundoff: f64,
}

impl Residual {
    pub fn passes(&self) -> bool {
        self.value.abs() <= self.budget
    }
}

impl FieldEstimate {
    /// Left-hand side of the equation from the recorded sub-estimates; absent
    /// entries count as zero.
    pub fn assemble(&self, coeffs: &DiffusionCoeffs, generator: f64) -> ResidualTerms {
        let t = self.t;
        let first = |v: &Option<Vec<Estimate>>| v.as_ref().and_then(|v| v.first()).map_or(0.0, |e| e.value);
        let second = |v: &Option<Estimate>| v.map_or(0.0, |e| e.value);
        ResidualTerms {
            time: second(&self.dt),
            path_first: coeffs.b1.at(t)[0] * first(&self.dw),
            path_second: 0.5 * coeffs.sigma1.gram(t, 1)[0] * second(&self.dww),
            measure_first: coeffs.b2.at(t)[0] * first(&self.dmu),
            measure_second: 0.5 * coeffs.sigma2.gram(t, 1)[0] * second(&self.dwdmu),
            generator,
        }
    }
}

/// A finite-difference combination `Σ c_i u_i` with its noise and round-off.
struct Stencil {
    value: f64,
    mc: f64,
    roundoff: f64,
}

fn stencil(parts: &[(f64, &Evaluation)]) -> Stencil {
    let value = parts.iter().map(|(c, e)| c * e.value).sum();
    let len = parts[0].1.samples.len();
    let paired = len >= 2 && parts.iter().all(|(_, e)| e.samples.len() == len);
    let mc = if paired {
        let comb: Vec<f64> = (0..len).map(|j| parts.iter().map(|(c, e)| c * e.samples[j]).sum()).collect();
        mean_stderr(&comb).1
    } else {
        parts.iter().map(|(c, e)| c.abs() * e.stderr).sum()
    };
    let roundoff = 1e-12 * parts.iter().map(|(c, e)| c.abs() * (1.0 + e.value.abs())).sum::<f64>();
    Stencil { value, mc, roundoff }
}

/// A term estimated at step `h` and `h/2` (or `2Δt` for grid-bound time steps).
struct Term {
    coarse: Stencil,
    fine: Stencil,
}

impl Term {
    fn estimate(&self) -> Estimate {
        Estimate { value: self.coarse.value, stderr: self.coarse.mc }
    }

    fn fd(&self) -> f64 {
        (self.coarse.value - self.fine.value).abs()
    }
}

fn shifted(mu: &ParticleMeasure, k: usize, h: f64, alternate: bool) -> Result<ParticleMeasure> {
    let ps = mu
        .particles()
        .iter()
        .enumerate()
        .map(|(i, p)| p.bump_index(k, &[if alternate && i % 2 == 1 { -h } else { h }]))
        .collect();
    ParticleMeasure::new(ps)
}

/// Residual of the master equation at `(t, γ, μ)` for the field `u`.
///
/// FD mode: forward time difference with stopped arguments (one grid step for
/// grid-bound providers), central path bumps at `t`, and particle lifts. The
/// first measure term shifts every particle; the second shifts particles by
/// alternating signs, which isolates `E^μ[∂_{ω̃}∂_μ u]` up to an `O(1/N)`
/// cross term. Terms whose coefficient vanishes are skipped. The law `ν` is
/// the empirical law of `u(t, η_i, μ)` over the particles of `μ`.
pub fn pde_residual(problem: &MasterProblem, u: &dyn FieldProvider, t: f64, gamma: &DiscretePath, mu: &ParticleMeasure, cfg: &FdConfig, mode: Mode) -> Result<FieldEstimate> {
    let p = &problem.bsde;
    let grid = p.grid;
    if p.dim() != 1 || gamma.dim() != 1 || mu.dim() != 1 {
        return domain("the residual is assembled for scalar paths");
    }
    if gamma.grid() != grid || mu.grid() != grid {
        return domain("γ and μ must live on the problem's grid");
    }
    if !grid.is_node(t) {
        return domain(format!("probe time t={t} is not a grid node"));
    }
    let k = grid.snap(t, SnapMode::Nearest)?;
    let m = grid.steps();
    if k == m {
        return domain("the residual needs t < T");
    }
    let t = grid.node(k);
    let guard = 2.0 * grid.dt() * (1.0 + 1e-9);
    if let Some(x) = u.kinks().into_iter().find(|x| (t - x).abs() <= guard) {
        return domain(format!("t={t} is within two grid steps of the non-smooth point {x}"));
    }
    cfg.validate(grid.dt())?;
    let coeffs = &p.coeffs;
    let (b1, s1) = (coeffs.b1.at(t)[0], coeffs.sigma1.gram(t, 1)[0]);
    let (b2, s2) = (coeffs.b2.at(t)[0], coeffs.sigma2.gram(t, 1)[0]);
    let vol1 = coeffs.sigma1.at(t)[0];
    let gs = gamma.stop_index(k);
    let ms = mu.stop_index(k);
    let u0 = u.eval(t, &gs, &ms)?;
    let mut out = FieldEstimate::plain(t, u0.value, u0.stderr, u0.samples.len(), m);

    let law = |u_of: &dyn Fn(&DiscretePath) -> Result<f64>| -> Result<f64> {
        if !p.generator.reads_law() {
            return Ok(0.0);
        }
        let vals = ms.particles().iter().map(u_of).collect::<Result<Vec<_>>>()?;
        Ok(p.generator.law_value(&vals))
    };
    let source = p.generator.source.eval(t, &gs, &ms)?;

    if mode == Mode::Analytic {
        let a = u.analytic(t, &gs, &ms).unwrap_or_else(|| domain("this field has no analytic derivatives"))?;
        out.dt = Some(Estimate::exact(a.dt));
        out.dw = Some(vec![Estimate::exact(a.dw)]);
        out.dww = Some(Estimate::exact(a.dww));
        out.dmu = Some(vec![Estimate::exact(a.dmu)]);
        out.dwdmu = Some(Estimate::exact(a.dwdmu));
        let nu = law(&|x| u.eval(t, x, &ms).map(|e| e.value))?;
        let g = source + p.generator.driver_value(u0.value, &[vol1 * a.dw]) + nu;
        let terms = out.assemble(coeffs, g);
        out.residual = Some(Residual { terms, value: terms.sum(), ..Default::default() });
        return Ok(out);
    }

    let at = |tt: f64, g: &DiscretePath, mu: &ParticleMeasure| u.eval(tt, g, mu);
    // ∂_t with stopped arguments.
    let time = if u.continuous_time() {
        let h = cfg.h_t;
        let (a, b) = (at(t + h, &gs, &ms)?, at(t + 0.5 * h, &gs, &ms)?);
        Term { coarse: stencil(&[(1.0 / h, &a), (-1.0 / h, &u0)]), fine: stencil(&[(2.0 / h, &b), (-2.0 / h, &u0)]) }
    } else {
        let h = grid.dt();
        let a = at(grid.node(k + 1), &gs, &ms)?;
        let coarse = stencil(&[(1.0 / h, &a), (-1.0 / h, &u0)]);
        let fine = if k + 2 <= m {
            let b = at(grid.node(k + 2), &gs, &ms)?;
            stencil(&[(0.5 / h, &b), (-0.5 / h, &u0)])
        } else {
            Stencil { value: coarse.value, mc: 0.0, roundoff: 0.0 }
        };
        Term { coarse, fine }
    };

    let x = gs.scalar_at(k).abs();
    let bump = |h: f64| -> Result<Evaluation> { at(t, &gs.bump_index(k, &[h]), &ms) };
    let first = |h: f64| -> Result<Stencil> {
        let (a, b) = (bump(h)?, bump(-h)?);
        Ok(stencil(&[(0.5 / h, &a), (-0.5 / h, &b)]))
    };
    let second = |h: f64, eval: &dyn Fn(f64) -> Result<Evaluation>| -> Result<Stencil> {
        let (a, b) = (eval(h)?, eval(-h)?);
        Ok(stencil(&[(1.0 / (h * h), &a), (-2.0 / (h * h), &u0), (1.0 / (h * h), &b)]))
    };
    let h1 = cfg.path_step(x, Order::First);
    let dw = Term { coarse: first(h1)?, fine: first(0.5 * h1)? };
    let dww = if s1 != 0.0 {
        let h2 = cfg.path_step(x, Order::Second);
        Some(Term { coarse: second(h2, &bump)?, fine: second(0.5 * h2, &bump)? })
    } else {
        None
    };
    let mm = ms.moment();
    let lift = |h: f64, alt: bool| -> Result<Evaluation> { at(t, &gs, &shifted(&ms, k, h, alt)?) };
    let dmu = if b2 != 0.0 {
        let one = |h: f64| -> Result<Stencil> {
            let (a, b) = (lift(h, false)?, lift(-h, false)?);
            Ok(stencil(&[(0.5 / h, &a), (-0.5 / h, &b)]))
        };
        let h = cfg.lift_step(mm, Order::First);
        Some(Term { coarse: one(h)?, fine: one(0.5 * h)? })
    } else {
        None
    };
    let dwdmu = if s2 != 0.0 {
        let alt = |h: f64| lift(h, true);
        let h = cfg.lift_step(mm, Order::Second);
        Some(Term { coarse: second(h, &alt)?, fine: second(0.5 * h, &alt)? })
    } else {
        None
    };

    out.dt = Some(time.estimate());
    out.dw = Some(vec![dw.estimate()]);
    out.dww = dww.as_ref().map(Term::estimate);
    out.dmu = dmu.as_ref().map(|d| vec![d.estimate()]);
    out.dwdmu = dwdmu.as_ref().map(Term::estimate);

    let z = vol1 * dw.coarse.value;
    let nu = law(&|x| at(t, x, &ms).map(|e| e.value))?;
    let g = source + p.generator.driver_value(u0.value, &[z]) + nu;
    let (_, grad, _) = p.generator.driver_jet(u0.value, &[z]);
    let terms = out.assemble(coeffs, g);

    let weighted: [(f64, Option<&Term>); 5] = [(1.0, Some(&time)), (b1, Some(&dw)), (0.5 * s1, dww.as_ref()), (b2, dmu.as_ref()), (0.5 * s2, dwdmu.as_ref())];
    let (mut mc, mut fd, mut roundoff) = (0.0, 0.0, 0.0);
    for (c, term) in weighted {
        if let Some(term) = term {
            mc += c.abs() * term.coarse.mc;
            fd += c.abs() * term.fd();
            roundoff += c.abs() * term.coarse.roundoff;
        }
    }
    mc += grad[0].abs() * u0.stderr + grad.get(1).map_or(0.0, |gz| gz.abs() * vol1.abs() * dw.coarse.mc);
    out.residual = Some(Residual { terms, value: terms.sum(), budget: 3.0 * mc + fd + roundoff, mc, fd, roundoff });
    Ok(out)
}
