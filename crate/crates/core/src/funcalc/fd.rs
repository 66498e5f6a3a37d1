//! Finite-difference estimators for every derivative in the bundle.

use serde::{Deserialize, Serialize};

use super::{FunctionalSpec, Order};
use crate::error::{domain, Error, Result};
use crate::pathspace::{DiscretePath, ParticleMeasure};

/// Base steps; the state steps are scaled by `1 + |ω(t)|` or `1 + |||μ|||` at use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdConfig {
    pub h1: f64,
    pub h2: f64,
    pub h_t: f64,
    pub lift_eps: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { h1: 1e-4, h2: 1e-3, h_t: 1e-6, lift_eps: 1e-4 }
    }
}

impl FdConfig {
    pub fn validate(&self, dt: f64) -> Result<()> {
        for (name, v) in [("h1", self.h1), ("h2", self.h2), ("h_t", self.h_t), ("lift_eps", self.lift_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return domain(format!("fd.{name} must be positive, got {v}"));
            }
        }
        if self.h_t > dt * (1.0 + 1e-12) {
            return domain(format!("fd.h_t = {} exceeds the grid step {dt}", self.h_t));
        }
        Ok(())
    }

    /// First-order path step at a path whose current value has norm `x`.
    pub fn path_step(&self, x: f64, order: Order) -> f64 {
        match order {
            Order::First => self.h1 * (1.0 + x),
            Order::Second => self.h2 * (1.0 + x),
        }
    }

    /// Particle-lift step for a measure of moment `m`.
    pub fn lift_step(&self, m: f64, order: Order) -> f64 {
        match order {
            Order::First => self.lift_eps * (1.0 + m),
            Order::Second => self.lift_eps * (self.h2 / self.h1) * (1.0 + m),
        }
    }
}

/// A finite-difference estimate with a smoothness flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FdEstimate {
    pub value: Vec<f64>,
    pub flagged: bool,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { index: 0, context: what.to_string() })
    }
}

/// `[f(t+h, ω_t, μ_t) − f(t, ω_t, μ_t)] / h`.
pub fn horizontal(f: &FunctionalSpec, t: f64, omega: &DiscretePath, mu: &ParticleMeasure, cfg: &FdConfig) -> Result<f64> {
    let grid = omega.grid();
    if t + cfg.h_t > grid.horizon() + 1e-12 {
        return domain(format!("forward difference at t={t} leaves [0, {}]", grid.horizon()));
    }
    let k = grid.floor_index(t)?;
    let (w, m) = (omega.stop_index(k), mu.stop_index(k));
    let a = f.eval(t + cfg.h_t, &w, &m)?;
    let b = f.eval(t, &w, &m)?;
    finite((a - b) / cfg.h_t, "horizontal difference")
}

/// Central gradient (order 1) or Hessian (order 2) of `g` at `0 ∈ R^d`.
/// Returns the estimate and the largest gap `|D₊ − D₋|` between one-sided slopes.
fn stencil(d: usize, h: f64, order: Order, g: &mut dyn FnMut(&[f64]) -> Result<f64>) -> Result<(Vec<f64>, f64)> {
    let e = |i: usize, s: f64| {
        let mut x = vec![0.0; d];
        x[i] = s;
        x
    };
    let g0 = g(&vec![0.0; d])?;
    match order {
        Order::First => {
            let mut out = vec![0.0; d];
            let mut jump: f64 = 0.0;
            for (i, o) in out.iter_mut().enumerate() {
                let (p, m) = (g(&e(i, h))?, g(&e(i, -h))?);
                *o = (p - m) / (2.0 * h);
                // O(h) for a C² map, O(1) across a kink.
                jump = jump.max(((p - g0) - (g0 - m)).abs() / h);
            }
            Ok((out, jump))
        }
        Order::Second => {
            let mut out = vec![0.0; d * d];
            for i in 0..d {
                let (p, m) = (g(&e(i, h))?, g(&e(i, -h))?);
                out[i * d + i] = (p - 2.0 * g0 + m) / (h * h);
                for j in 0..i {
                    let mut x = vec![0.0; d];
                    let mut quad = [0.0; 4];
                    for (q, (si, sj)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].into_iter().enumerate() {
                        x.iter_mut().for_each(|v| *v = 0.0);
                        x[i] = si * h;
                        x[j] = sj * h;
                        quad[q] = g(&x)?;
                    }
                    let v = (quad[0] - quad[1] - quad[2] + quad[3]) / (4.0 * h * h);
                    out[i * d + j] = v;
                    out[j * d + i] = v;
                }
            }
            Ok((out, 0.0))
        }
    }
}

/// Relative one-sided slope gap above which a stencil is reported as non-smooth.
const FLAG_LEVEL: f64 = 0.1;

fn non_smooth(jump: f64, value: &[f64]) -> bool {
    let scale = value.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    jump > FLAG_LEVEL * (1.0 + scale)
}

/// Central differences of `x ↦ f(t, bump(ω, τ, x), μ)` at `x = 0`.
pub fn path_derivative(f: &FunctionalSpec, k_tau: usize, k_t: usize, omega: &DiscretePath, mu: &ParticleMeasure, order: Order, cfg: &FdConfig) -> Result<FdEstimate> {
    let grid = omega.grid();
    let t = grid.node(k_t);
    let x0 = omega.value(k_t).iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = cfg.path_step(x0, order);
    let ms = f.as_dsl().map(|c| c.measure_state(t, mu)).transpose()?;
    let mut g = |x: &[f64]| -> Result<f64> {
        let w = omega.bump_index(k_tau, x);
        match (&ms, f.as_dsl()) {
            (Some(ms), Some(c)) => Ok(c.eval_with(&w, ms)),
            _ => f.eval(t, &w, mu),
        }
    };
    let (value, jump) = stencil(omega.dim(), h, order, &mut g)?;
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: 0, context: "path stencil".into() });
    }
    let flagged = non_smooth(jump, &value);
    if flagged {
        log::warn!("path bump of size {h} at node {k_tau} crossed a non-smooth region");
    }
    Ok(FdEstimate { value, flagged })
}

/// Particle-lift estimator of the measure derivative at particle `i`.
///
/// First order: `N·[f(μ^{i,+ε}) − f(μ^{i,−ε})]/(2ε)`. Second order: the
/// lifted second difference carries an `O(1/N)` term from `∂²_μ f(x̃_i, x̃_i)`;
/// it is removed by Richardson extrapolation against the same law carried by
/// `2N` replicated particles.
#[allow(clippy::too_many_arguments)]
pub fn measure_derivative(
    f: &FunctionalSpec,
    k_tau: usize,
    k_t: usize,
    omega: &DiscretePath,
    mu: &ParticleMeasure,
    i: usize,
    order: Order,
    cfg: &FdConfig,
) -> Result<FdEstimate> {
    let t = omega.grid().node(k_t);
    let eps = cfg.lift_step(mu.moment(), order);
    let d = mu.dim();
    let lifted = |m: &ParticleMeasure, idx: usize| -> Result<(Vec<f64>, f64)> {
        let n = m.len() as f64;
        let mut g = |x: &[f64]| f.eval(t, omega, &m.bump_particle_index(idx, k_tau, x));
        let (v, jump) = stencil(d, eps, order, &mut g)?;
        Ok((v.into_iter().map(|x| n * x).collect(), n * jump))
    };
    let (value, jump) = match order {
        Order::First => lifted(mu, i)?,
        Order::Second => {
            let (coarse, _) = lifted(mu, i)?;
            let (fine, _) = lifted(&mu.replicate(2), i)?;
            (fine.iter().zip(&coarse).map(|(a, b)| 2.0 * a - b).collect(), 0.0)
        }
    };
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i, context: "particle-lift stencil".into() });
    }
    let flagged = non_smooth(jump, &value);
    if flagged {
        log::warn!("particle bump of size {eps} on particle {i} crossed a non-smooth region");
    }
    Ok(FdEstimate { value, flagged })
}
