//! The standard bump mollifier and exact per-cell masses on a grid.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::pathspace::TimeGrid;

const QUAD_TOL: f64 = 1e-13;

fn bump(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - x * x)).exp()
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Normalizing constant `c` with `∫ c·exp(−1/(1−x²)) dx = 1` over `(−1, 1)`.
pub fn bump_constant() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        // Integrate the two halves separately so the peak sits on a node.
        let half = adaptive_simpson(&bump, 0.0, 1.0, 1e-16);
        1.0 / (2.0 * half)
    })
}

/// `ρ_ε(t_0 − ·)` with the standard bump profile, optionally rescaled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mollifier {
    pub center: f64,
    pub width: f64,
    /// Multiplier applied to the density; differs from 1 only after renormalization.
    #[serde(default = "unit")]
    pub scale: f64,
}

fn unit() -> f64 {
    1.0
}

type CacheKey = (u64, u64, u64, u64, usize);

fn mass_cache() -> &'static Mutex<HashMap<CacheKey, Arc<Vec<f64>>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<Vec<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl Mollifier {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite() && center.is_finite()) {
            return domain(format!("mollifier needs a positive width, got {width}"));
        }
        Ok(Self { center, width, scale: 1.0 })
    }

    /// Same kernel rescaled to unit mass on `[0, T]`; warns when support leaks outside.
    pub fn renormalized_on(self, horizon: f64) -> Self {
        let inside = Self { scale: 1.0, ..self }.mass(0.0, horizon);
        if (inside - 1.0).abs() > 1e-12 {
            log::warn!(
                "mollifier support ({}, {}) leaks outside [0, {horizon}]; renormalizing mass {inside}",
                self.center - self.width,
                self.center + self.width
            );
            Self { scale: 1.0 / inside, ..self }
        } else {
            Self { scale: 1.0, ..self }
        }
    }

    /// `ρ_ε(t_0 − s)`.
    pub fn density(&self, s: f64) -> f64 {
        self.scale * bump_constant() * bump((self.center - s) / self.width) / self.width
    }

    /// `∫_a^b ρ_ε(t_0 − s) ds`.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        // Substitute x = (t_0 − s)/ε and clip to the support.
        let lo = ((self.center - b) / self.width).max(-1.0);
        let hi = ((self.center - a) / self.width).min(1.0);
        if hi <= lo {
            return 0.0;
        }
        let c = bump_constant();
        let f = |x: f64| c * bump(x);
        let v = if lo < 0.0 && hi > 0.0 {
            adaptive_simpson(&f, lo, 0.0, QUAD_TOL) + adaptive_simpson(&f, 0.0, hi, QUAD_TOL)
        } else {
            adaptive_simpson(&f, lo, hi, QUAD_TOL)
        };
        self.scale * v
    }

    /// Masses of the `M` grid cells `[t_k, t_{k+1})`, cached per grid.
    pub fn cell_masses(&self, grid: TimeGrid) -> Arc<Vec<f64>> {
        let key = (self.center.to_bits(), self.width.to_bits(), self.scale.to_bits(), grid.horizon().to_bits(), grid.steps());
        if let Some(v) = mass_cache().lock().expect("mass cache poisoned").get(&key) {
            return v.clone();
        }
        let v: Arc<Vec<f64>> = Arc::new((0..grid.steps()).map(|k| self.mass(grid.node(k), grid.node(k + 1))).collect());
        mass_cache().lock().expect("mass cache poisoned").insert(key, v.clone());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_matches_known_integral() {
        // ∫_{−1}^{1} exp(−1/(1−x²)) dx = 0.443993816168079...
        assert!((1.0 / bump_constant() - 0.443_993_816_168_079_4).abs() < 1e-12);
    }

    #[test]
    fn unit_mass_and_support() {
        for eps in [0.2, 0.1, 0.05, 0.025, 0.013] {
            let m = Mollifier::new(0.5, eps).unwrap();
            assert!((m.mass(0.0, 1.0) - 1.0).abs() < 1e-10, "eps={eps}");
            assert_eq!(m.density(0.5 + eps), 0.0);
            assert_eq!(m.mass(0.0, 0.5 - eps), 0.0);
            let g = TimeGrid::new(1.0, 100).unwrap();
            let total: f64 = m.cell_masses(g).iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn renormalization_restores_unit_mass() {
        let m = Mollifier::new(0.05, 0.1).unwrap().renormalized_on(1.0);
        assert!((m.mass(0.0, 1.0) - 1.0).abs() < 1e-10);
        assert!(m.scale > 1.0);
    }
}
