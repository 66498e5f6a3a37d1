//! Residual tests of the Itô-Dupire formula and its partial form.
//!
//! Each sample of `X` (started from `γ_t`) is paired with one shared law
//! ensemble `X'` (started from `η_t`). Along the grid the increment of
//! `f(·, X, L_{X'})` is compared with the sum of its Itô terms, evaluated
//! at the left point of every cell. The law ensemble also serves as the
//! independent copy in the measure terms, so the first-order measure
//! fluctuation cancels exactly and the second-order one is reported as a
//! separate, ensemble-level error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::forward::{self, ForwardEnsemble, NoiseStream, TAG_LAW, TAG_STATE};
use crate::error::{domain, shape, Error, Result};
use crate::funcalc::{self, Composite, Cut, FdConfig, FunctionalSpec};
use crate::pathspace::{DiscretePath, ParticleMeasure, SnapMode};

/// A deterministic coefficient `value + slope·t`, vector or row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffFn {
    pub value: Vec<f64>,
    #[serde(default)]
    pub slope: Vec<f64>,
}

impl CoeffFn {
    pub fn constant(value: Vec<f64>) -> Self {
        Self { value, slope: Vec::new() }
    }

    pub fn affine(value: Vec<f64>, slope: Vec<f64>) -> Self {
        Self { value, slope }
    }

    pub fn zeros(n: usize) -> Self {
        Self::constant(vec![0.0; n])
    }

    pub fn identity(d: usize) -> Self {
        let mut v = vec![0.0; d * d];
        (0..d).for_each(|i| v[i * d + i] = 1.0);
        Self::constant(v)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.value);
        for (o, s) in out.iter_mut().zip(&self.slope) {
            *o += s * t;
        }
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.value.len()];
        self.eval_into(t, &mut out);
        out
    }

    fn validate(&self, n: usize, name: &str) -> Result<()> {
        if self.value.len() != n || !(self.slope.is_empty() || self.slope.len() == n) {
            return shape(format!("{name} needs {n} entries"));
        }
        if self.value.iter().chain(&self.slope).any(|v| !v.is_finite()) {
            return domain(format!("{name} has non-finite entries"));
        }
        Ok(())
    }

    /// `σσᵀ` at `t` for a row-major `d × d` coefficient.
    pub fn gram(&self, t: f64, d: usize) -> Vec<f64> {
        let s = self.at(t);
        let mut g = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                g[a * d + b] = (0..d).map(|c| s[a * d + c] * s[b * d + c]).sum();
            }
        }
        g
    }
}

/// `(b_1, σ_1)` for the state and `(b_2, σ_2)` for the law ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionCoeffs {
    pub dim: usize,
    pub b1: CoeffFn,
    pub sigma1: CoeffFn,
    pub b2: CoeffFn,
    pub sigma2: CoeffFn,
}

impl DiffusionCoeffs {
    /// Standard Brownian motion in both slots.
    pub fn standard(d: usize) -> Self {
        Self { dim: d, b1: CoeffFn::zeros(d), sigma1: CoeffFn::identity(d), b2: CoeffFn::zeros(d), sigma2: CoeffFn::identity(d) }
    }

    /// No motion at all.
    pub fn zero(d: usize) -> Self {
        Self { dim: d, b1: CoeffFn::zeros(d), sigma1: CoeffFn::zeros(d * d), b2: CoeffFn::zeros(d), sigma2: CoeffFn::zeros(d * d) }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return domain("dimension must be positive");
        }
        self.b1.validate(d, "b1")?;
        self.sigma1.validate(d * d, "sigma1")?;
        self.b2.validate(d, "b2")?;
        self.sigma2.validate(d * d, "sigma2")
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        self.validate()?;
        if d != self.dim {
            return shape(format!("coefficients are {}-dimensional, paths {d}-dimensional", self.dim));
        }
        Ok(())
    }
}

/// Per-sample Itô terms, in the order of [`ItoTerms::NAMES`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ItoTerms {
    pub time: f64,
    pub path_first: f64,
    pub path_second: f64,
    pub measure_first: f64,
    pub measure_second: f64,
}

impl ItoTerms {
    pub const NAMES: [&'static str; 5] = ["time", "path_first", "path_second", "measure_first", "measure_second"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.time, self.path_first, self.path_second, self.measure_first, self.measure_second]
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }

    fn add(&mut self, o: &ItoTerms) {
        self.time += o.time;
        self.path_first += o.path_first;
        self.path_second += o.path_second;
        self.measure_first += o.measure_first;
        self.measure_second += o.measure_second;
    }
}

/// One sample: the increment of `f` and its decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ItoSample {
    pub lhs: f64,
    pub terms: ItoTerms,
    pub residual: f64,
}

/// Statistics of a decomposition run.
#[derive(Clone, Debug, Serialize)]
pub struct ItoReport {
    pub samples: Vec<ItoSample>,
    pub n: usize,
    pub steps: usize,
    pub term_means: ItoTerms,
    pub residual_mean: f64,
    /// Standard error of the mean residual, sample and ensemble parts combined.
    pub residual_stderr: f64,
    /// The ensemble-level part of `residual_stderr`.
    pub ensemble_stderr: f64,
    /// Noise tags of the state and law ensembles.
    pub streams: (u32, u32),
}

/// Where the formula evaluates `f` and cuts its derivatives.
#[derive(Clone, Copy)]
enum Variant {
    /// `f(r, ·)` with `∂_t`, derivatives at `τ = r`.
    Full,
    /// `f(v, ·_r)` without `∂_t`, derivatives at `τ = r`.
    Partial { kv: usize },
}

/// Itô-Dupire decomposition of `f(s, X, L_{X'}) − f(t, γ, L_η)`.
#[allow(clippy::too_many_arguments)]
pub fn ito_decomposition(
    f: &FunctionalSpec,
    coeffs: &DiffusionCoeffs,
    t: f64,
    s: f64,
    gamma: &DiscretePath,
    eta: &ParticleMeasure,
    n: usize,
    seed: u64,
) -> Result<ItoReport> {
    run(f, coeffs, t, s, gamma, eta, n, seed, Variant::Full)
}

/// Partial decomposition of `f(v, X_s, L_{X'_s}) − f(v, γ_t, L_{η_t})` for `t ≤ s ≤ v`.
#[allow(clippy::too_many_arguments)]
pub fn partial_ito_decomposition(
    f: &FunctionalSpec,
    coeffs: &DiffusionCoeffs,
    v: f64,
    t: f64,
    s: f64,
    gamma: &DiscretePath,
    eta: &ParticleMeasure,
    n: usize,
    seed: u64,
) -> Result<ItoReport> {
    let kv = gamma.grid().snap(v, SnapMode::Nearest)?;
    run(f, coeffs, t, s, gamma, eta, n, seed, Variant::Partial { kv })
}

#[allow(clippy::too_many_arguments)]
fn run(
    f: &FunctionalSpec,
    coeffs: &DiffusionCoeffs,
    t: f64,
    s: f64,
    gamma: &DiscretePath,
    eta: &ParticleMeasure,
    n: usize,
    seed: u64,
    variant: Variant,
) -> Result<ItoReport> {
    if n < 2 {
        return domain(format!("need at least two samples, got {n}"));
    }
    coeffs.check_dim(gamma.dim())?;
    if eta.grid() != gamma.grid() || eta.dim() != gamma.dim() {
        return shape("γ and η live on different grids or dimensions");
    }
    f.validate(gamma.dim())?;
    let grid = gamma.grid();
    let kt = grid.snap(t, SnapMode::Nearest)?;
    let ks = grid.snap(s, SnapMode::Nearest)?;
    if ks < kt {
        return domain(format!("s={s} precedes t={t}"));
    }
    if let Variant::Partial { kv } = variant {
        if kv < ks {
            return domain(format!("evaluation time precedes s={s}"));
        }
    }
    let x = forward::simulate(grid, gamma.dim(), &coeffs.b1, &coeffs.sigma1, kt, n, NoiseStream::new(seed, TAG_STATE), &|_| gamma.clone())?;
    let xl = forward::simulate_law(coeffs, eta, grid.node(kt), n, NoiseStream::new(seed, TAG_LAW))?;

    let eval_time = |k: usize| match variant {
        Variant::Full => grid.node(k),
        Variant::Partial { kv } => grid.node(kv),
    };
    let law_start = xl.paths.stop_index(kt);
    let base = f.eval(eval_time(kt), &gamma.stop_index(kt), &law_start)?;
    let law_end = xl.paths.stop_index(ks);
    let lhs: Vec<f64> = match f {
        FunctionalSpec::Dsl(c) => {
            let ms = c.measure_state(eval_time(ks), &law_end)?;
            (0..n).into_par_iter().map(|i| c.eval_with(&x.path(i).stop_index(ks), &ms) - base).collect()
        }
        FunctionalSpec::Opaque(_) => (0..n)
            .into_par_iter()
            .map(|i| f.eval(eval_time(ks), &x.path(i).stop_index(ks), &law_end).map(|v| v - base))
            .collect::<Result<_>>()?,
    };
    check_finite(&lhs, "left-hand side")?;

    let mut terms = vec![ItoTerms::default(); n];
    let mut ensemble_var = 0.0;
    for k in kt..ks {
        let law_k = xl.paths.stop_index(k);
        let step = match f {
            FunctionalSpec::Dsl(c) => dsl_step(c, coeffs, &x, &xl, &law_k, k, variant)?,
            FunctionalSpec::Opaque(_) => fd_step(f, coeffs, &x, &xl, &law_k, k, variant)?,
        };
        for (acc, st) in terms.iter_mut().zip(&step.terms) {
            acc.add(st);
        }
        ensemble_var += step.ensemble_var;
    }
    let samples: Vec<ItoSample> = lhs.iter().zip(&terms).map(|(l, tm)| ItoSample { lhs: *l, terms: *tm, residual: l - tm.sum() }).collect();
    if let Some(i) = samples.iter().position(|s| !s.residual.is_finite()) {
        return Err(Error::NonFinite { index: i, context: "Itô residual".into() });
    }
    let nf = n as f64;
    let mean = |g: &dyn Fn(&ItoSample) -> f64| samples.iter().map(g).sum::<f64>() / nf;
    let residual_mean = mean(&|s| s.residual);
    let var = samples.iter().map(|s| (s.residual - residual_mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let term_means = ItoTerms {
        time: mean(&|s| s.terms.time),
        path_first: mean(&|s| s.terms.path_first),
        path_second: mean(&|s| s.terms.path_second),
        measure_first: mean(&|s| s.terms.measure_first),
        measure_second: mean(&|s| s.terms.measure_second),
    };
    Ok(ItoReport {
        n,
        steps: grid.steps(),
        term_means,
        residual_mean,
        residual_stderr: (var / nf + ensemble_var).sqrt(),
        ensemble_stderr: ensemble_var.sqrt(),
        streams: (x.noise.tag, xl.noise.tag),
        samples,
    })
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite { index: i, context: what.into() }),
        None => Ok(()),
    }
}

struct Step {
    terms: Vec<ItoTerms>,
    /// Variance of the ensemble-level second-order fluctuation in this cell.
    ensemble_var: f64,
}

fn trace(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One cell `[t_k, t_{k+1})` in closed form. Measure kernels depend on the
/// sample only through the combiner gradient, so they are averaged over
/// the law ensemble once per leaf.
fn dsl_step(c: &Composite, coeffs: &DiffusionCoeffs, x: &ForwardEnsemble, xl: &ForwardEnsemble, law_k: &ParticleMeasure, k: usize, variant: Variant) -> Result<Step> {
    let grid = x.grid();
    let (d, dt, tk) = (x.dim(), grid.dt(), grid.node(k));
    let cut = match variant {
        Variant::Full => Cut::node(grid, k),
        Variant::Partial { kv } => Cut::node(grid, kv),
    };
    let ms = c.measure_state_at(cut, law_k)?;
    let ms_next = match variant {
        Variant::Full => Some(c.measure_state_at(Cut::node(grid, k + 1), law_k)?),
        Variant::Partial { .. } => None,
    };
    let a1 = coeffs.sigma1.gram(tk, d);
    let a2 = coeffs.sigma2.gram(tk, d);

    // Per measure leaf: mean first-order move, mean predicted second-order
    // move, and the per-particle realized-minus-predicted second-order term.
    let nl = xl.len();
    let leaves: Vec<usize> = (0..c.leaves.len()).filter(|&l| c.leaves[l].reads_measure()).collect();
    let mut first = vec![0.0; c.leaves.len()];
    let mut second = vec![0.0; c.leaves.len()];
    let mut wobble: Vec<Vec<f64>> = Vec::with_capacity(leaves.len());
    for &l in &leaves {
        let per: Vec<(f64, f64, f64)> = (0..nl)
            .into_par_iter()
            .map(|j| {
                let jet = c.measure_leaf_kernel(l, k, &ms, law_k.particle(j), true);
                let dxj = xl.dx(j, k);
                let pred = 0.5 * trace(&jet.hess, &a2) * dt;
                let mut real = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        real += 0.5 * jet.hess[a * d + b] * dxj[a] * dxj[b];
                    }
                }
                (dot(&jet.grad, &dxj), pred, real - pred)
            })
            .collect();
        first[l] = per.iter().map(|p| p.0).sum::<f64>() / nl as f64;
        second[l] = per.iter().map(|p| p.1).sum::<f64>() / nl as f64;
        wobble.push(per.into_iter().map(|p| p.2).collect());
    }

    let out: Vec<(ItoTerms, Vec<f64>)> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let path = x.path(i).stop_index(k);
            let vals = c.leaf_values(&path, &ms);
            let (_, g, _) = c.combine(&vals);
            let jet = c.svd_with(k, &path, &ms, true);
            let dxi = x.dx(i, k);
            let time = match &ms_next {
                Some(next) => 0.5 * (c.horizontal_with(&path, &ms) + c.horizontal_with(&path, next)) * dt,
                None => 0.0,
            };
            let terms = ItoTerms {
                time,
                path_first: dot(&jet.grad, &dxi),
                path_second: 0.5 * trace(&jet.hess, &a1) * dt,
                measure_first: leaves.iter().map(|&l| g[l] * first[l]).sum(),
                measure_second: leaves.iter().map(|&l| g[l] * second[l]).sum(),
            };
            (terms, leaves.iter().map(|&l| g[l]).collect())
        })
        .collect();

    let ensemble_var = if leaves.is_empty() {
        0.0
    } else {
        let nx = x.len() as f64;
        let gbar: Vec<f64> = (0..leaves.len()).map(|q| out.iter().map(|o| o.1[q]).sum::<f64>() / nx).collect();
        let comb: Vec<f64> = (0..nl).map(|j| (0..leaves.len()).map(|q| gbar[q] * wobble[q][j]).sum()).collect();
        let m = comb.iter().sum::<f64>() / nl as f64;
        comb.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ((nl as f64 - 1.0).max(1.0) * nl as f64)
    };
    Ok(Step { terms: out.into_iter().map(|o| o.0).collect(), ensemble_var })
}

/// One cell with every derivative from finite differences; cost grows with
/// the square of the law ensemble, so keep it small.
fn fd_step(f: &FunctionalSpec, coeffs: &DiffusionCoeffs, x: &ForwardEnsemble, xl: &ForwardEnsemble, law_k: &ParticleMeasure, k: usize, variant: Variant) -> Result<Step> {
    let grid = x.grid();
    let (d, dt, tk) = (x.dim(), grid.dt(), grid.node(k));
    let cfg = FdConfig { h_t: FdConfig::default().h_t.min(grid.dt()), ..FdConfig::default() };
    let te = match variant {
        Variant::Full => tk,
        Variant::Partial { kv } => grid.node(kv),
    };
    let a1 = coeffs.sigma1.gram(tk, d);
    let a2 = coeffs.sigma2.gram(tk, d);
    let nl = xl.len() as f64;
    let terms: Vec<ItoTerms> = (0..x.len())
        .into_par_iter()
        .map(|i| -> Result<ItoTerms> {
            let path = x.path(i).stop_index(k);
            let b = funcalc::derivative_bundle(f, tk, te, &path, law_k, &cfg)?;
            let time = match variant {
                Variant::Full => b.horizontal.unwrap_or(0.0) * dt,
                Variant::Partial { .. } => 0.0,
            };
            let (mut m1, mut m2) = (0.0, 0.0);
            for j in 0..xl.len() {
                m1 += dot(&b.measure_first[j], &xl.dx(j, k));
                m2 += 0.5 * trace(&b.measure_second[j], &a2) * dt;
            }
            Ok(ItoTerms {
                time,
                path_first: dot(&b.path_first, &x.dx(i, k)),
                path_second: 0.5 * trace(&b.path_second, &a1) * dt,
                measure_first: m1 / nl,
                measure_second: m2 / nl,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Step { terms, ensemble_var: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcalc::corpus;
    use crate::funcalc::{Leaf, SmoothMap, TimeWeight};
    use crate::pathspace::TimeGrid;

    fn setup(m: usize) -> (DiscretePath, ParticleMeasure) {
        let g = TimeGrid::new(1.0, m).unwrap();
        (DiscretePath::constant(g, &[0.3]), ParticleMeasure::dirac(DiscretePath::constant(g, &[-0.2])))
    }

    #[test]
    fn affine_path_functional_is_exact() {
        let (gamma, eta) = setup(40);
        let f: FunctionalSpec = Composite::new(vec![Leaf::PathEval { h: SmoothMap::affine(vec![2.0], 1.0) }], None).into();
        let r = ito_decomposition(&f, &DiffusionCoeffs::standard(1), 0.0, 1.0, &gamma, &eta, 50, 1).unwrap();
        for s in &r.samples {
            assert!(s.residual.abs() < 1e-12);
        }
    }

    #[test]
    fn square_residual_is_quadratic_variation_error() {
        let (gamma, eta) = setup(40);
        let r = ito_decomposition(&corpus::path_square(), &DiffusionCoeffs::standard(1), 0.0, 1.0, &gamma, &eta, 20, 2).unwrap();
        let g = gamma.grid();
        let x = forward::simulate_forward(&DiffusionCoeffs::standard(1), &gamma, 0.0, 20, 2).unwrap();
        for (i, s) in r.samples.iter().enumerate() {
            let qv: f64 = (0..40).map(|k| x.dx(i, k)[0].powi(2) - g.dt()).sum();
            assert!((s.residual - qv).abs() < 1e-12);
            assert!((s.lhs - s.terms.sum() - s.residual).abs() == 0.0);
        }
    }

    #[test]
    fn streams_are_independent() {
        let (gamma, eta) = setup(10);
        let r = ito_decomposition(&corpus::measure_square(), &DiffusionCoeffs::standard(1), 0.0, 1.0, &gamma, &eta, 10, 3).unwrap();
        assert_ne!(r.streams.0, r.streams.1);
    }

    #[test]
    fn measure_mean_residual_is_small() {
        let (gamma, eta) = setup(50);
        let f: FunctionalSpec = Leaf::MeasureEval { h: SmoothMap::identity() }.into();
        let r = ito_decomposition(&f, &DiffusionCoeffs::standard(1), 0.0, 1.0, &gamma, &eta, 2000, 4).unwrap();
        assert!(r.residual_mean.abs() <= 3.0 * r.residual_stderr + 1e-12);
    }

    #[test]
    fn partial_formula_is_exact_for_point_evaluation() {
        let (gamma, eta) = setup(40);
        let f: FunctionalSpec = Leaf::PathEval { h: SmoothMap::identity() }.into();
        let r = partial_ito_decomposition(&f, &DiffusionCoeffs::standard(1), 1.0, 0.0, 0.6, &gamma, &eta, 30, 5).unwrap();
        for s in &r.samples {
            assert!(s.residual.abs() < 1e-12);
            assert_eq!(s.terms.time, 0.0);
        }
    }

    #[test]
    fn opaque_matches_dsl_on_small_ensembles() {
        let (gamma, eta) = setup(10);
        let dsl: FunctionalSpec = Composite::new(
            vec![Leaf::PathEval { h: SmoothMap::square() }, Leaf::RunningIntegral { f: SmoothMap::identity(), weight: TimeWeight::Uniform }],
            None,
        )
        .into();
        let opaque = {
            let c = dsl.clone();
            FunctionalSpec::opaque("copy", move |t, w, mu| c.eval(t, w, mu).unwrap())
        };
        let coeffs = DiffusionCoeffs::standard(1);
        let a = partial_ito_decomposition(&dsl, &coeffs, 1.0, 0.0, 0.8, &gamma, &eta, 8, 6).unwrap();
        let b = partial_ito_decomposition(&opaque, &coeffs, 1.0, 0.0, 0.8, &gamma, &eta, 8, 6).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.lhs, y.lhs);
            assert!((x.residual - y.residual).abs() < 1e-5, "{} vs {}", x.residual, y.residual);
        }
    }

    #[test]
    fn rejects_single_sample() {
        let (gamma, eta) = setup(10);
        assert!(ito_decomposition(&corpus::path_square(), &DiffusionCoeffs::standard(1), 0.0, 1.0, &gamma, &eta, 1, 0).is_err());
    }
}
