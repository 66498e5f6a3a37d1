//! Mollified time-delayed data and the exact solutions they lead to.
//!
//! Paths are step functions, so every closed form here integrates the
//! mollifier cell by cell against the step values. That is the same
//! discretization the functionals use, which makes Monte Carlo and closed form
//! agree in expectation up to quadrature round-off.

use serde::{Deserialize, Serialize};

use super::mollifier::Mollifier;
use super::residual::{AnalyticTerms, Evaluation, FieldProvider};
use crate::error::{domain, Result};
use crate::funcalc::{Composite, FunctionalSpec, Leaf, SmoothMap, TimeWeight};
use crate::pathspace::{DiscretePath, ParticleMeasure, SnapMode, TimeGrid};

fn kernel(t0: f64, eps: f64, horizon: f64) -> Result<Mollifier> {
    if !(t0 > 0.0 && t0 < horizon) {
        return domain(format!("delay time t_0={t0} must lie in (0, {horizon})"));
    }
    Ok(Mollifier::new(t0, eps)?.renormalized_on(horizon))
}

/// `Φ_ε(T, ω) = ∫_0^T ρ_ε(t_0 − s) F(ω(s)) ds`.
pub fn mollify_terminal(f: SmoothMap, t0: f64, eps: f64, horizon: f64) -> Result<FunctionalSpec> {
    let w = TimeWeight::Mollified(kernel(t0, eps, horizon)?);
    Ok(Leaf::RunningIntegral { f, weight: w }.into())
}

/// `Φ_ε(T, μ) = ∫_0^T ρ_ε(t_0 − s) F(E^μ[W(s)]) ds`.
pub fn mollify_measure_terminal(f: SmoothMap, t0: f64, eps: f64, horizon: f64) -> Result<FunctionalSpec> {
    let w = TimeWeight::Mollified(kernel(t0, eps, horizon)?);
    Ok(Leaf::MeasureMeanIntegral { q: f, weight: w }.into())
}

/// `f_ε(t, ω, μ) = ∫_0^t ∫_0^t g(ω(r_1), E^μ[W(r_2)]) ρ_ε(t_0 − r_1) ρ_ε(t_0 − r_2) dr_1 dr_2`
/// for `g(x, y) = Σ_i g_i(x) h_i(y)`, given as pairs `(g_i, h_i)`.
pub fn mollify_generator(terms: &[(SmoothMap, SmoothMap)], t0: f64, eps: f64, horizon: f64) -> Result<FunctionalSpec> {
    if terms.is_empty() {
        return domain("a mollified generator needs at least one term");
    }
    let w = TimeWeight::Mollified(kernel(t0, eps, horizon)?);
    let n = 2 * terms.len();
    let mut leaves = Vec::with_capacity(n);
    let mut combiner = SmoothMap::constant(n, 0.0);
    for (i, (g, h)) in terms.iter().enumerate() {
        leaves.push(Leaf::RunningIntegral { f: g.clone(), weight: w });
        leaves.push(Leaf::MeasureMeanIntegral { q: h.clone(), weight: w });
        combiner = combiner.plus(SmoothMap::product(n, 2 * i, 2 * i + 1, 1.0));
    }
    Ok(Composite::new(leaves, Some(combiner)).into())
}

/// Closed-form solutions of delayed-data equations under Brownian dynamics.
/// `eps: None` selects the `ε → 0` limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "kebab-case")]
pub enum ClosedFormCase {
    /// Terminal `a·ω(t_0)`; `u = a·ω(t ∧ t_0)` in the limit.
    PathDelay { a: f64, t0: f64, eps: Option<f64> },
    /// Terminal `E^μ[a·W(t_0)]`; `u = E^μ[a·W(t ∧ t_0)]` in the limit.
    MeasureDelay { a: f64, t0: f64, eps: Option<f64> },
    /// Terminal `a·ω(t_1) + E^μ[b·W(t_2)]`.
    Mixed { a: f64, b: f64, t1: f64, t2: f64, eps: Option<f64> },
    /// Zero terminal and source `g(ω(t_0), E^μ[W(t_0)])·1_{[t_0, T]}(t)` with
    /// `g(x, y) = α x + β y + c`; grid times only.
    DelayedSource { alpha: f64, beta: f64, c: f64, t0: f64, eps: Option<f64> },
    /// Terminal `ω(T)²`; `u = ω(t)² + (T − t)`.
    Heat,
}

impl ClosedFormCase {
    /// Terminal value and source whose solution this case is.
    pub fn data(&self, horizon: f64) -> Result<(FunctionalSpec, FunctionalSpec)> {
        let lin = |a: f64| SmoothMap::affine(vec![a], 0.0);
        Ok(match *self {
            ClosedFormCase::PathDelay { a, t0, eps } => (path_delay_terminal(a, t0, eps, horizon)?, FunctionalSpec::zero()),
            ClosedFormCase::MeasureDelay { a, t0, eps } => (measure_delay_terminal(a, t0, eps, horizon)?, FunctionalSpec::zero()),
            ClosedFormCase::Mixed { a, b, t1, t2, eps } => {
                let terminal = match (path_delay_terminal(a, t1, eps, horizon)?, measure_delay_terminal(b, t2, eps, horizon)?) {
                    (FunctionalSpec::Dsl(p), FunctionalSpec::Dsl(m)) => Composite::new(p.leaves.into_iter().chain(m.leaves).collect(), None).into(),
                    (p, m) => FunctionalSpec::opaque("mixed-delay", move |t, w, mu| p.eval(t, w, mu).unwrap_or(f64::NAN) + m.eval(t, w, mu).unwrap_or(f64::NAN)),
                };
                (terminal, FunctionalSpec::zero())
            }
            ClosedFormCase::DelayedSource { alpha, beta, c, t0, eps } => {
                let one = || SmoothMap::constant(1, 1.0);
                let source = match eps {
                    Some(e) => mollify_generator(&[(lin(alpha), one()), (one(), lin(beta)), (SmoothMap::constant(1, c), one())], t0, e, horizon)?,
                    None => {
                        let g = move |t: f64, w: &DiscretePath, mu: &ParticleMeasure| {
                            if t < t0 {
                                return 0.0;
                            }
                            let k = w.grid().floor_index(t0).unwrap_or(0);
                            alpha * w.scalar_at(k) + beta * mean_at(mu, k) + c
                        };
                        FunctionalSpec::opaque("delayed-source", g)
                    }
                };
                (FunctionalSpec::zero(), source)
            }
            ClosedFormCase::Heat => (Leaf::PathEval { h: SmoothMap::square() }.into(), FunctionalSpec::zero()),
        })
    }

    /// Times at which `u` is not differentiable.
    pub fn kinks(&self) -> Vec<f64> {
        match *self {
            ClosedFormCase::PathDelay { t0, eps: None, .. } | ClosedFormCase::MeasureDelay { t0, eps: None, .. } | ClosedFormCase::DelayedSource { t0, eps: None, .. } => vec![t0],
            ClosedFormCase::Mixed { t1, t2, eps: None, .. } => vec![t1, t2],
            _ => Vec::new(),
        }
    }
}

fn path_delay_terminal(a: f64, t0: f64, eps: Option<f64>, horizon: f64) -> Result<FunctionalSpec> {
    match eps {
        Some(e) => mollify_terminal(SmoothMap::affine(vec![a], 0.0), t0, e, horizon),
        None => Ok(Leaf::FrozenEval { h: SmoothMap::affine(vec![a], 0.0), at: t0 }.into()),
    }
}

fn measure_delay_terminal(a: f64, t0: f64, eps: Option<f64>, horizon: f64) -> Result<FunctionalSpec> {
    match eps {
        Some(e) => mollify_measure_terminal(SmoothMap::affine(vec![a], 0.0), t0, e, horizon),
        None => {
            if !(t0 > 0.0 && t0 < horizon) {
                return domain(format!("delay time t_0={t0} must lie in (0, {horizon})"));
            }
            Ok(FunctionalSpec::opaque("measure-delay", move |_, _, mu: &ParticleMeasure| {
                let k = mu.grid().floor_index(t0).unwrap_or(0);
                a * mean_at(mu, k)
            }))
        }
    }
}

fn mean_at(mu: &ParticleMeasure, k: usize) -> f64 {
    mu.particles().iter().map(|p| p.scalar_at(k)).sum::<f64>() / mu.len() as f64
}

/// Value of the step path at time `t`.
fn step_value(w: &DiscretePath, t: f64) -> Result<f64> {
    let k = w.grid().floor_index(t)?.min(w.grid().steps());
    Ok(w.scalar_at(k))
}

/// `∫_0^t ρ(t_0 − s) ω(s) ds` over the step path.
fn running(m: &Mollifier, w: &DiscretePath, t: f64) -> f64 {
    let grid = w.grid();
    let mut acc = 0.0;
    for k in 0..grid.steps() {
        let lo = grid.node(k);
        if lo >= t {
            break;
        }
        acc += m.mass(lo, grid.node(k + 1).min(t)) * w.scalar_at(k);
    }
    acc
}

/// Closed-form field for one [`ClosedFormCase`].
#[derive(Clone, Debug)]
pub struct ClosedForm {
    pub case: ClosedFormCase,
    pub grid: TimeGrid,
}

impl ClosedForm {
    pub fn new(case: ClosedFormCase, grid: TimeGrid) -> Result<Self> {
        let t = grid.horizon();
        let delays = match case {
            ClosedFormCase::PathDelay { t0, .. } | ClosedFormCase::MeasureDelay { t0, .. } | ClosedFormCase::DelayedSource { t0, .. } => vec![t0],
            ClosedFormCase::Mixed { t1, t2, .. } => vec![t1, t2],
            ClosedFormCase::Heat => vec![],
        };
        for s in delays {
            if !(s > 0.0 && s < t) {
                return domain(format!("delay time {s} must lie in (0, {t})"));
            }
        }
        Ok(Self { case, grid })
    }

    fn moll(&self, t0: f64, eps: f64) -> Result<Mollifier> {
        kernel(t0, eps, self.grid.horizon())
    }

    /// `a·(∫_0^t ρ ω + ω(t)∫_t^T ρ)` or its limit `a·ω(t ∧ t_0)`.
    fn path_delay(&self, a: f64, t0: f64, eps: Option<f64>, t: f64, w: &DiscretePath) -> Result<f64> {
        match eps {
            Some(e) => {
                let m = self.moll(t0, e)?;
                Ok(a * (running(&m, w, t) + step_value(w, t)? * m.mass(t, self.grid.horizon())))
            }
            None => Ok(a * step_value(w, t.min(t0))?),
        }
    }

    fn measure_delay(&self, a: f64, t0: f64, eps: Option<f64>, t: f64, mu: &ParticleMeasure) -> Result<f64> {
        let mut acc = 0.0;
        for p in mu.particles() {
            acc += self.path_delay(a, t0, eps, t, p)?;
        }
        Ok(acc / mu.len() as f64)
    }

    fn delayed_source(&self, (alpha, beta, c, t0, eps): (f64, f64, f64, f64, Option<f64>), t: f64, w: &DiscretePath, mu: &ParticleMeasure) -> Result<f64> {
        let grid = self.grid;
        let horizon = grid.horizon();
        let Some(e) = eps else {
            let s = t.min(t0);
            let g = alpha * step_value(w, s)? + beta * self.measure_delay(1.0, t0, None, s, mu)? + c;
            return Ok(g * (horizon - t.max(t0)));
        };
        if !grid.is_node(t) {
            return domain(format!("the mollified source solution is defined on grid times only, got t={t}"));
        }
        let k0 = grid.snap(t, SnapMode::Nearest)?;
        let masses = self.moll(t0, e)?.cell_masses(grid);
        let mean: Vec<f64> = (0..=grid.steps()).map(|i| mean_at(mu, i.min(k0))).collect();
        let (mut mass, mut path, mut law, mut u) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..grid.steps() {
            if k >= k0 {
                u += grid.dt() * mass * (alpha * path + beta * law + c * mass);
            }
            mass += masses[k];
            path += masses[k] * w.scalar_at(k.min(k0));
            law += masses[k] * mean[k];
        }
        Ok(u)
    }

    /// `u(t, γ, μ)`.
    pub fn value(&self, t: f64, gamma: &DiscretePath, mu: &ParticleMeasure) -> Result<f64> {
        if gamma.dim() != 1 || mu.dim() != 1 {
            return domain("closed forms are scalar");
        }
        if !(0.0..=self.grid.horizon()).contains(&t) {
            return domain(format!("t={t} outside [0, T]"));
        }
        match self.case {
            ClosedFormCase::PathDelay { a, t0, eps } => self.path_delay(a, t0, eps, t, gamma),
            ClosedFormCase::MeasureDelay { a, t0, eps } => self.measure_delay(a, t0, eps, t, mu),
            ClosedFormCase::Mixed { a, b, t1, t2, eps } => Ok(self.path_delay(a, t1, eps, t, gamma)? + self.measure_delay(b, t2, eps, t, mu)?),
            ClosedFormCase::DelayedSource { alpha, beta, c, t0, eps } => self.delayed_source((alpha, beta, c, t0, eps), t, gamma, mu),
            ClosedFormCase::Heat => Ok(step_value(gamma, t)?.powi(2) + (self.grid.horizon() - t)),
        }
    }

    /// `a·∂_ω` of the delay solution: `a ∫_t^T ρ` or `a·1_{t < t_0}`.
    fn delay_slope(&self, a: f64, t0: f64, eps: Option<f64>, t: f64) -> Result<f64> {
        Ok(match eps {
            Some(e) => a * self.moll(t0, e)?.mass(t, self.grid.horizon()),
            None => {
                if t < t0 {
                    a
                } else {
                    0.0
                }
            }
        })
    }
}

impl FieldProvider for ClosedForm {
    fn eval(&self, t: f64, gamma: &DiscretePath, mu: &ParticleMeasure) -> Result<Evaluation> {
        Ok(Evaluation::exact(self.value(t, gamma, mu)?))
    }

    fn kinks(&self) -> Vec<f64> {
        self.case.kinks()
    }

    fn continuous_time(&self) -> bool {
        !matches!(self.case, ClosedFormCase::DelayedSource { eps: Some(_), .. })
    }

    fn analytic(&self, t: f64, gamma: &DiscretePath, _mu: &ParticleMeasure) -> Option<Result<AnalyticTerms>> {
        let zero = AnalyticTerms::default();
        let out = match self.case {
            ClosedFormCase::PathDelay { a, t0, eps } => self.delay_slope(a, t0, eps, t).map(|dw| AnalyticTerms { dw, ..zero }),
            ClosedFormCase::MeasureDelay { a, t0, eps } => self.delay_slope(a, t0, eps, t).map(|dmu| AnalyticTerms { dmu, ..zero }),
            ClosedFormCase::Mixed { a, b, t1, t2, eps } => (|| Ok(AnalyticTerms { dw: self.delay_slope(a, t1, eps, t)?, dmu: self.delay_slope(b, t2, eps, t)?, ..zero }))(),
            ClosedFormCase::DelayedSource { .. } => return None,
            ClosedFormCase::Heat => step_value(gamma, t).map(|x| AnalyticTerms { dt: -1.0, dw: 2.0 * x, dww: 2.0, ..zero }),
        };
        Some(out)
    }
}
