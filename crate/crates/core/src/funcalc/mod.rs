//! Non-anticipative functionals `f(t, ω, μ)` and their derivatives.
//!
//! The DSL ([`Composite`]) is an outer smooth combiner `G` applied to leaf
//! blocks. Every leaf knows its horizontal derivative, its strong vertical
//! derivatives in the path slot and its measure kernel `∂_{μ_τ}` together with
//! `∂_{x̃_τ}∂_{μ_τ}`, so the chain rule over `G` gives the full
//! [`DerivativeBundle`] in closed form. Opaque functionals are evaluate-only
//! and get every derivative from finite differences.
//!
//! Evaluation accepts any `t ∈ [0, T]`, reading the step path at `t` and
//! integrating partial cells exactly; the derivative operations snap `τ` and
//! `t` to nodes.

pub mod corpus;
pub mod fd;
pub mod smooth;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::master::mollifier::Mollifier;
use crate::pathspace::{DiscretePath, ParticleMeasure, SnapMode, TimeGrid};

pub use fd::FdConfig;
pub use smooth::{Profile, RidgeTerm, SmoothMap};

/// Time weight `w(r)` multiplying a running-integral integrand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeWeight {
    /// `w ≡ 1`.
    #[default]
    Uniform,
    /// `w(r) = ρ_ε(t_0 − r)`.
    Mollified(Mollifier),
}

/// Per-cell integration weights `∫_{cell k} w(r) dr` on a grid.
#[derive(Clone, Debug)]
pub(crate) struct CellWeights {
    dt: f64,
    masses: Option<Arc<Vec<f64>>>,
}

impl CellWeights {
    #[inline]
    pub(crate) fn cell(&self, k: usize) -> f64 {
        match &self.masses {
            Some(m) => m[k],
            None => self.dt,
        }
    }
}

impl TimeWeight {
    pub fn density(&self, r: f64) -> f64 {
        match self {
            TimeWeight::Uniform => 1.0,
            TimeWeight::Mollified(m) => m.density(r),
        }
    }

    pub(crate) fn cells(&self, grid: TimeGrid) -> CellWeights {
        match self {
            TimeWeight::Uniform => CellWeights { dt: grid.dt(), masses: None },
            TimeWeight::Mollified(m) => CellWeights { dt: grid.dt(), masses: Some(m.cell_masses(grid)) },
        }
    }

    /// `∫_{t_k}^{t} w(r) dr` for the partial cell of `cut`.
    pub(crate) fn partial(&self, grid: TimeGrid, cut: Cut) -> f64 {
        if cut.frac <= 0.0 {
            return 0.0;
        }
        match self {
            TimeWeight::Uniform => cut.frac,
            TimeWeight::Mollified(m) => m.mass(grid.node(cut.k), cut.t),
        }
    }
}

/// A time `t` split into its node `t_k ≤ t` and the remainder `t − t_k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cut {
    pub t: f64,
    pub k: usize,
    pub frac: f64,
}

impl Cut {
    pub fn new(grid: TimeGrid, t: f64) -> Result<Self> {
        let k = grid.floor_index(t)?;
        let t = t.clamp(0.0, grid.horizon());
        let frac = if k == grid.steps() { 0.0 } else { (t - grid.node(k)).max(0.0) };
        // Remainders at rounding level are nodes.
        let frac = if frac <= 1e-9 * grid.dt() { 0.0 } else { frac };
        Ok(Self { t, k, frac })
    }

    pub fn node(grid: TimeGrid, k: usize) -> Self {
        Self { t: grid.node(k), k, frac: 0.0 }
    }
}

/// Visits `(k, weight)` for the cells covering `[t_from, t)`.
#[inline]
fn for_cells(cw: &CellWeights, partial: f64, from: usize, cut: Cut, mut visit: impl FnMut(usize, f64)) {
    for k in from..cut.k {
        visit(k, cw.cell(k));
    }
    if partial > 0.0 && from <= cut.k {
        visit(cut.k, partial);
    }
}

/// Leaf blocks of the DSL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Leaf {
    /// The running time `t`.
    Time,
    /// `h(ω(t))`.
    PathEval { h: SmoothMap },
    /// `∫_0^t w(r) F(ω(r)) dr`.
    RunningIntegral {
        f: SmoothMap,
        #[serde(default)]
        weight: TimeWeight,
    },
    /// `h(ω(t ∧ t_0))`; terminal-only, its SVD jumps at `τ = t_0`.
    FrozenEval { h: SmoothMap, at: f64 },
    /// `E^μ[h(W(t))]`.
    MeasureEval { h: SmoothMap },
    /// `E^μ[∫_0^t w(r) F(W(r)) dr]`.
    MeasureIntegral {
        f: SmoothMap,
        #[serde(default)]
        weight: TimeWeight,
    },
    /// `E^μ[f_4(W(t), ∫_0^t w(r) f_5(W(r)) dr)]`.
    MeasureComposite {
        outer: SmoothMap,
        inner: SmoothMap,
        #[serde(default)]
        weight: TimeWeight,
    },
    /// `∫_0^t w(r) q(E^μ[W(r)]) dr`.
    MeasureMeanIntegral {
        q: SmoothMap,
        #[serde(default)]
        weight: TimeWeight,
    },
}

impl Leaf {
    pub fn reads_path(&self) -> bool {
        matches!(self, Leaf::PathEval { .. } | Leaf::RunningIntegral { .. } | Leaf::FrozenEval { .. })
    }

    pub fn reads_measure(&self) -> bool {
        matches!(
            self,
            Leaf::MeasureEval { .. } | Leaf::MeasureIntegral { .. } | Leaf::MeasureComposite { .. } | Leaf::MeasureMeanIntegral { .. }
        )
    }

    /// Whether the leaf's derivatives are continuous in the cut-off `τ`.
    pub fn is_classical(&self) -> bool {
        !matches!(self, Leaf::FrozenEval { .. })
    }

    fn validate(&self, d: usize) -> Result<()> {
        let check = |m: &SmoothMap, n: usize, what: &str| {
            if m.arity() != n || !m.is_consistent() {
                return shape(format!("{what} has arity {} but needs {n}", m.arity()));
            }
            Ok(())
        };
        match self {
            Leaf::Time => Ok(()),
            Leaf::PathEval { h } | Leaf::MeasureEval { h } => check(h, d, "evaluation map"),
            Leaf::FrozenEval { h, at } => {
                if !at.is_finite() || *at < 0.0 {
                    return domain(format!("frozen time {at} must be nonnegative"));
                }
                check(h, d, "frozen evaluation map")
            }
            Leaf::RunningIntegral { f, .. } | Leaf::MeasureIntegral { f, .. } => check(f, d, "integrand"),
            Leaf::MeasureComposite { outer, inner, .. } => {
                check(outer, d + 1, "outer map")?;
                check(inner, d, "inner map")
            }
            Leaf::MeasureMeanIntegral { q, .. } => check(q, d, "mean map"),
        }
    }

    /// Value along a single path (for measure leaves: the integrand for one particle).
    fn path_value(&self, grid: TimeGrid, cut: Cut, w: &DiscretePath) -> f64 {
        match self {
            Leaf::Time => cut.t,
            Leaf::PathEval { h } | Leaf::MeasureEval { h } => h.value(w.value(cut.k)),
            Leaf::FrozenEval { h, at } => {
                let k0 = frozen_index(grid, *at, cut);
                h.value(w.value(k0))
            }
            Leaf::RunningIntegral { f, weight } | Leaf::MeasureIntegral { f, weight } => {
                let cw = weight.cells(grid);
                let mut s = 0.0;
                for_cells(&cw, weight.partial(grid, cut), 0, cut, |k, m| s += m * f.value(w.value(k)));
                s
            }
            Leaf::MeasureComposite { outer, inner, weight } => {
                let y = composite_arg(inner, weight, grid, cut, w);
                outer.value(&y)
            }
            Leaf::MeasureMeanIntegral { .. } => unreachable!("mean integral has no per-particle value"),
        }
    }
}

fn frozen_index(grid: TimeGrid, at: f64, cut: Cut) -> usize {
    let k0 = grid.floor_index(at.min(grid.horizon())).unwrap_or(grid.steps());
    k0.min(cut.k)
}

/// `(x̃(t), ∫_0^t w f_5(x̃(r)) dr)`.
fn composite_arg(inner: &SmoothMap, weight: &TimeWeight, grid: TimeGrid, cut: Cut, w: &DiscretePath) -> Vec<f64> {
    let cw = weight.cells(grid);
    let mut i5 = 0.0;
    for_cells(&cw, weight.partial(grid, cut), 0, cut, |k, m| i5 += m * inner.value(w.value(k)));
    let mut y = w.value(cut.k).to_vec();
    y.push(i5);
    y
}

/// Leaf values, horizontal derivatives and the per-node mean path shared by
/// all path arguments at a fixed `(t, μ)`.
#[derive(Clone, Debug)]
pub struct MeasureState {
    pub cut: Cut,
    values: Vec<f64>,
    dts: Vec<f64>,
    mean_path: Vec<Vec<f64>>,
}

impl MeasureState {
    /// Values of the measure leaves; path-leaf slots hold zero.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Outer combiner plus leaves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub leaves: Vec<Leaf>,
    /// `G`; when absent the leaf values are summed.
    #[serde(default)]
    pub combiner: Option<SmoothMap>,
}

/// Strong vertical derivative of one leaf in the path slot.
#[derive(Clone, Debug, Default)]
pub struct LeafJet {
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Composite {
    pub fn new(leaves: Vec<Leaf>, combiner: Option<SmoothMap>) -> Self {
        Self { leaves, combiner }
    }

    pub fn leaf(leaf: Leaf) -> Self {
        Self { leaves: vec![leaf], combiner: None }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.leaves.is_empty() {
            return shape("functional without leaves");
        }
        for l in &self.leaves {
            l.validate(d)?;
        }
        if let Some(g) = &self.combiner {
            if g.arity() != self.leaves.len() || !g.is_consistent() {
                return shape(format!("combiner arity {} differs from leaf count {}", g.arity(), self.leaves.len()));
            }
        }
        Ok(())
    }

    pub fn reads_path(&self) -> bool {
        self.leaves.iter().any(Leaf::reads_path)
    }

    pub fn reads_measure(&self) -> bool {
        self.leaves.iter().any(Leaf::reads_measure)
    }

    /// `G(L)` together with `∇G` and `∇²G`.
    pub fn combine(&self, leaf_values: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        match &self.combiner {
            Some(g) => g.jet(leaf_values),
            None => {
                let n = leaf_values.len();
                (leaf_values.iter().sum(), vec![1.0; n], vec![0.0; n * n])
            }
        }
    }

    pub fn combine_value(&self, leaf_values: &[f64]) -> f64 {
        match &self.combiner {
            Some(g) => g.value(leaf_values),
            None => leaf_values.iter().sum(),
        }
    }

    /// Shared measure-side quantities at `(t, μ)`.
    pub fn measure_state(&self, t: f64, mu: &ParticleMeasure) -> Result<MeasureState> {
        let grid = mu.grid();
        let cut = Cut::new(grid, t)?;
        self.measure_state_at(cut, mu)
    }

    pub fn measure_state_at(&self, cut: Cut, mu: &ParticleMeasure) -> Result<MeasureState> {
        let grid = mu.grid();
        let n = mu.len() as f64;
        let d = mu.dim();
        let needs_mean = self.leaves.iter().any(|l| matches!(l, Leaf::MeasureMeanIntegral { .. }));
        let mean_path: Vec<Vec<f64>> = if needs_mean {
            (0..=cut.k)
                .map(|k| {
                    let mut m = vec![0.0; d];
                    for p in mu.particles() {
                        for (mj, v) in m.iter_mut().zip(p.value(k)) {
                            *mj += v;
                        }
                    }
                    m.iter_mut().for_each(|x| *x /= n);
                    m
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut values = vec![0.0; self.leaves.len()];
        let mut dts = vec![0.0; self.leaves.len()];
        for (i, leaf) in self.leaves.iter().enumerate() {
            match leaf {
                Leaf::MeasureEval { .. } | Leaf::MeasureIntegral { .. } | Leaf::MeasureComposite { .. } => {
                    values[i] = mu.particles().iter().map(|p| leaf.path_value(grid, cut, p)).sum::<f64>() / n;
                    dts[i] = match leaf {
                        Leaf::MeasureIntegral { f, weight } => {
                            weight.density(cut.t) * mu.particles().iter().map(|p| f.value(p.value(cut.k))).sum::<f64>() / n
                        }
                        Leaf::MeasureComposite { outer, inner, weight } => {
                            let w = weight.density(cut.t);
                            mu.particles()
                                .iter()
                                .map(|p| {
                                    let y = composite_arg(inner, weight, grid, cut, p);
                                    outer.gradient(&y)[d] * w * inner.value(p.value(cut.k))
                                })
                                .sum::<f64>()
                                / n
                        }
                        _ => 0.0,
                    };
                }
                Leaf::MeasureMeanIntegral { q, weight } => {
                    let cw = weight.cells(grid);
                    let mut s = 0.0;
                    for_cells(&cw, weight.partial(grid, cut), 0, cut, |k, m| s += m * q.value(&mean_path[k]));
                    values[i] = s;
                    dts[i] = weight.density(cut.t) * q.value(&mean_path[cut.k]);
                }
                _ => {}
            }
        }
        Ok(MeasureState { cut, values, dts, mean_path })
    }

    /// All leaf values at `(t, ω, μ)` given the measure state.
    pub fn leaf_values(&self, omega: &DiscretePath, ms: &MeasureState) -> Vec<f64> {
        let grid = omega.grid();
        self.leaves
            .iter()
            .enumerate()
            .map(|(i, l)| if l.reads_measure() { ms.values[i] } else { l.path_value(grid, ms.cut, omega) })
            .collect()
    }

    /// Values at `cut` of the leaves that remember more than the current state
    /// (running integrals and frozen evaluations), in leaf order.
    pub fn history_leaf_values(&self, cut: Cut, omega: &DiscretePath) -> Vec<f64> {
        let grid = omega.grid();
        self.leaves
            .iter()
            .filter(|l| matches!(l, Leaf::RunningIntegral { .. } | Leaf::FrozenEval { .. }))
            .map(|l| l.path_value(grid, cut, omega))
            .collect()
    }

    pub fn eval_with(&self, omega: &DiscretePath, ms: &MeasureState) -> f64 {
        self.combine_value(&self.leaf_values(omega, ms))
    }

    pub fn eval(&self, t: f64, omega: &DiscretePath, mu: &ParticleMeasure) -> Result<f64> {
        check_args(omega, mu)?;
        let ms = self.measure_state(t, mu)?;
        Ok(self.eval_with(omega, &ms))
    }

    /// Analytic `∂_t` of each leaf.
    pub fn leaf_dts(&self, omega: &DiscretePath, ms: &MeasureState) -> Vec<f64> {
        let cut = ms.cut;
        self.leaves
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Leaf::Time => 1.0,
                Leaf::RunningIntegral { f, weight } => weight.density(cut.t) * f.value(omega.value(cut.k)),
                l if l.reads_measure() => ms.dts[i],
                _ => 0.0,
            })
            .collect()
    }

    pub fn horizontal_with(&self, omega: &DiscretePath, ms: &MeasureState) -> f64 {
        let (_, g, _) = self.combine(&self.leaf_values(omega, ms));
        g.iter().zip(self.leaf_dts(omega, ms)).map(|(a, b)| a * b).sum()
    }

    /// Path-slot strong vertical derivative of leaf `i` for a bump at node `k_tau`.
    pub fn path_leaf_jet(&self, i: usize, k_tau: usize, cut: Cut, omega: &DiscretePath, second: bool) -> LeafJet {
        let grid = omega.grid();
        let d = omega.dim();
        let mut jet = LeafJet { grad: vec![0.0; d], hess: if second { vec![0.0; d * d] } else { Vec::new() } };
        if k_tau > cut.k {
            return jet;
        }
        let add = |m: &SmoothMap, x: &[f64], c: f64, jet: &mut LeafJet| {
            if second {
                let (_, g, h) = m.jet(x);
                axpy(&mut jet.grad, c, &g);
                axpy(&mut jet.hess, c, &h);
            } else {
                axpy(&mut jet.grad, c, &m.gradient(x));
            }
        };
        match &self.leaves[i] {
            Leaf::PathEval { h } => add(h, omega.value(cut.k), 1.0, &mut jet),
            Leaf::FrozenEval { h, at } => {
                let k0 = frozen_index(grid, *at, cut);
                if k_tau <= k0 {
                    add(h, omega.value(k0), 1.0, &mut jet);
                }
            }
            Leaf::RunningIntegral { f, weight } => {
                let cw = weight.cells(grid);
                for_cells(&cw, weight.partial(grid, cut), k_tau, cut, |k, m| add(f, omega.value(k), m, &mut jet));
            }
            _ => {}
        }
        jet
    }

    /// Measure kernel `∂_{μ_τ}` (and `∂_{x̃_τ}∂_{μ_τ}` when `second`) of leaf `i` at sample path `x̃`.
    pub fn measure_leaf_kernel(&self, i: usize, k_tau: usize, ms: &MeasureState, xt: &DiscretePath, second: bool) -> LeafJet {
        let grid = xt.grid();
        let cut = ms.cut;
        let d = xt.dim();
        let mut jet = LeafJet { grad: vec![0.0; d], hess: if second { vec![0.0; d * d] } else { Vec::new() } };
        if k_tau > cut.k {
            return jet;
        }
        match &self.leaves[i] {
            Leaf::MeasureEval { h } => {
                let x = xt.value(cut.k);
                axpy(&mut jet.grad, 1.0, &h.gradient(x));
                if second {
                    axpy(&mut jet.hess, 1.0, &h.hessian(x));
                }
            }
            Leaf::MeasureIntegral { f, weight } => {
                let cw = weight.cells(grid);
                for_cells(&cw, weight.partial(grid, cut), k_tau, cut, |k, m| {
                    let x = xt.value(k);
                    if second {
                        let (_, g, h) = f.jet(x);
                        axpy(&mut jet.grad, m, &g);
                        axpy(&mut jet.hess, m, &h);
                    } else {
                        axpy(&mut jet.grad, m, &f.gradient(x));
                    }
                });
            }
            Leaf::MeasureComposite { outer, inner, weight } => {
                let y = composite_arg(inner, weight, grid, cut, xt);
                let cw = weight.cells(grid);
                let mut j5 = vec![0.0; d];
                let mut h5 = vec![0.0; d * d];
                for_cells(&cw, weight.partial(grid, cut), k_tau, cut, |k, m| {
                    let x = xt.value(k);
                    if second {
                        let (_, g, h) = inner.jet(x);
                        axpy(&mut j5, m, &g);
                        axpy(&mut h5, m, &h);
                    } else {
                        axpy(&mut j5, m, &inner.gradient(x));
                    }
                });
                let (_, g4, h4) = outer.jet(&y);
                let n4 = d + 1;
                for a in 0..d {
                    jet.grad[a] = g4[a] + g4[d] * j5[a];
                }
                if second {
                    for a in 0..d {
                        for b in 0..d {
                            jet.hess[a * d + b] = h4[a * n4 + b]
                                + h4[a * n4 + d] * j5[b]
                                + j5[a] * h4[d * n4 + b]
                                + h4[d * n4 + d] * j5[a] * j5[b]
                                + g4[d] * h5[a * d + b];
                        }
                    }
                }
            }
            Leaf::MeasureMeanIntegral { q, weight } => {
                let cw = weight.cells(grid);
                for_cells(&cw, weight.partial(grid, cut), k_tau, cut, |k, m| axpy(&mut jet.grad, m, &q.gradient(&ms.mean_path[k])));
            }
            _ => {}
        }
        jet
    }

    /// `∂_{ω_τ} f` and, when `second`, `∂²_{ω_τ} f`.
    pub fn svd_with(&self, k_tau: usize, omega: &DiscretePath, ms: &MeasureState, second: bool) -> LeafJet {
        let d = omega.dim();
        let vals = self.leaf_values(omega, ms);
        let (_, g, h) = self.combine(&vals);
        let n = self.leaves.len();
        let jets: Vec<Option<LeafJet>> = (0..n)
            .map(|i| self.leaves[i].reads_path().then(|| self.path_leaf_jet(i, k_tau, ms.cut, omega, second)))
            .collect();
        let mut out = LeafJet { grad: vec![0.0; d], hess: if second { vec![0.0; d * d] } else { Vec::new() } };
        for (i, ji) in jets.iter().enumerate() {
            let Some(ji) = ji else { continue };
            axpy(&mut out.grad, g[i], &ji.grad);
            if second {
                axpy(&mut out.hess, g[i], &ji.hess);
                for (l, jl) in jets.iter().enumerate() {
                    let Some(jl) = jl else { continue };
                    let c = h[i * n + l];
                    if c != 0.0 {
                        for a in 0..d {
                            for b in 0..d {
                                out.hess[a * d + b] += c * ji.grad[a] * jl.grad[b];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// `∂_{μ_τ} f(·, x̃)` and, when `second`, `∂_{x̃_τ}∂_{μ_τ} f(·, x̃)`.
    pub fn measure_kernel_with(&self, k_tau: usize, omega: &DiscretePath, ms: &MeasureState, xt: &DiscretePath, second: bool) -> LeafJet {
        let d = xt.dim();
        let (_, g, _) = self.combine(&self.leaf_values(omega, ms));
        let mut out = LeafJet { grad: vec![0.0; d], hess: if second { vec![0.0; d * d] } else { Vec::new() } };
        for (i, leaf) in self.leaves.iter().enumerate() {
            if !leaf.reads_measure() || g[i] == 0.0 {
                continue;
            }
            let j = self.measure_leaf_kernel(i, k_tau, ms, xt, second);
            axpy(&mut out.grad, g[i], &j.grad);
            if second {
                axpy(&mut out.hess, g[i], &j.hess);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn check_args(omega: &DiscretePath, mu: &ParticleMeasure) -> Result<()> {
    if omega.grid() != mu.grid() || omega.dim() != mu.dim() {
        return shape("path and measure live on different grids or dimensions");
    }
    Ok(())
}

type OpaqueFn = dyn Fn(f64, &DiscretePath, &ParticleMeasure) -> f64 + Send + Sync;

/// Evaluate-only functional; it receives arguments already stopped at `t`.
#[derive(Clone)]
pub struct Opaque {
    pub name: String,
    f: Arc<OpaqueFn>,
}

impl Opaque {
    pub fn new(name: impl Into<String>, f: impl Fn(f64, &DiscretePath, &ParticleMeasure) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }
}

impl fmt::Debug for Opaque {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Opaque").field("name", &self.name).finish()
    }
}

/// A functional of `(t, ω, μ)`.
#[derive(Clone, Debug)]
pub enum FunctionalSpec {
    Dsl(Composite),
    Opaque(Opaque),
}

impl From<Composite> for FunctionalSpec {
    fn from(c: Composite) -> Self {
        FunctionalSpec::Dsl(c)
    }
}

impl From<Leaf> for FunctionalSpec {
    fn from(l: Leaf) -> Self {
        FunctionalSpec::Dsl(Composite::leaf(l))
    }
}

impl FunctionalSpec {
    pub fn opaque(name: impl Into<String>, f: impl Fn(f64, &DiscretePath, &ParticleMeasure) -> f64 + Send + Sync + 'static) -> Self {
        FunctionalSpec::Opaque(Opaque::new(name, f))
    }

    /// The zero functional.
    pub fn zero() -> Self {
        Composite::new(vec![Leaf::Time], Some(SmoothMap::constant(1, 0.0))).into()
    }

    /// The constant functional `c`.
    pub fn constant(c: f64) -> Self {
        Composite::new(vec![Leaf::Time], Some(SmoothMap::constant(1, c))).into()
    }

    pub fn as_dsl(&self) -> Option<&Composite> {
        match self {
            FunctionalSpec::Dsl(c) => Some(c),
            FunctionalSpec::Opaque(_) => None,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            FunctionalSpec::Dsl(c) => c.validate(d),
            FunctionalSpec::Opaque(_) => Ok(()),
        }
    }

    /// Conservative: opaque functionals are assumed to read both slots.
    pub fn reads_path(&self) -> bool {
        self.as_dsl().map_or(true, Composite::reads_path)
    }

    pub fn reads_measure(&self) -> bool {
        self.as_dsl().map_or(true, Composite::reads_measure)
    }

    pub fn eval(&self, t: f64, omega: &DiscretePath, mu: &ParticleMeasure) -> Result<f64> {
        check_args(omega, mu)?;
        match self {
            FunctionalSpec::Dsl(c) => c.eval(t, omega, mu),
            FunctionalSpec::Opaque(o) => {
                let k = omega.grid().floor_index(t)?;
                Ok((o.f)(t, &omega.stop_index(k), &mu.stop_index(k)))
            }
        }
    }
}

/// Free-function form of [`FunctionalSpec::eval`].
pub fn eval_functional(f: &FunctionalSpec, t: f64, omega: &DiscretePath, mu: &ParticleMeasure) -> Result<f64> {
    f.eval(t, omega, mu)
}

/// Analytic chain rule or finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Analytic,
    Fd,
}

/// First or second order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    First,
    Second,
}

fn cut_pair(grid: TimeGrid, tau: f64, t: f64) -> Result<(usize, usize)> {
    let kt = grid.snap(t, SnapMode::Nearest)?;
    let ktau = grid.snap(tau, SnapMode::Nearest)?;
    if ktau > kt {
        return domain(format!("cut-off τ={tau} exceeds t={t}"));
    }
    Ok((ktau, kt))
}

fn no_analytic<T>(f: &FunctionalSpec) -> Result<T> {
    match f {
        FunctionalSpec::Opaque(o) => domain(format!("opaque functional '{}' has no analytic derivatives", o.name)),
        FunctionalSpec::Dsl(_) => unreachable!(),
    }
}

/// `∂_t f` at `(t, ω, μ)`: the chain rule in analytic mode, a forward difference of the stopped arguments otherwise.
pub fn horizontal_derivative(f: &FunctionalSpec, t: f64, omega: &DiscretePath, mu: &ParticleMeasure, cfg: &FdConfig, mode: Mode) -> Result<f64> {
    check_args(omega, mu)?;
    match (mode, f) {
        (Mode::Analytic, FunctionalSpec::Dsl(c)) => {
            let ms = c.measure_state(t, mu)?;
            Ok(c.horizontal_with(omega, &ms))
        }
        (Mode::Analytic, _) => no_analytic(f),
        (Mode::Fd, _) => fd::horizontal(f, t, omega, mu, cfg),
    }
}

/// `∂_{ω_τ} f` (length `d`) or `∂²_{ω_τ} f` (row-major `d × d`).
#[allow(clippy::too_many_arguments)]
pub fn strong_vertical_derivative(
    f: &FunctionalSpec,
    tau: f64,
    t: f64,
    omega: &DiscretePath,
    mu: &ParticleMeasure,
    order: Order,
    mode: Mode,
    cfg: &FdConfig,
) -> Result<Vec<f64>> {
    check_args(omega, mu)?;
    let grid = omega.grid();
    let (ktau, kt) = cut_pair(grid, tau, t)?;
    match (mode, f) {
        (Mode::Analytic, FunctionalSpec::Dsl(c)) => {
            let ms = c.measure_state_at(Cut::node(grid, kt), mu)?;
            let jet = c.svd_with(ktau, omega, &ms, order == Order::Second);
            Ok(if order == Order::First { jet.grad } else { jet.hess })
        }
        (Mode::Analytic, _) => no_analytic(f),
        (Mode::Fd, _) => Ok(fd::path_derivative(f, ktau, kt, omega, mu, order, cfg)?.value),
    }
}

/// `∂_{μ_τ} f(·, x̃_i)` or `∂_{x̃_τ}∂_{μ_τ} f(·, x̃_i)` at particle `i` of `μ`.
#[allow(clippy::too_many_arguments)]
pub fn measure_derivative(
    f: &FunctionalSpec,
    tau: f64,
    t: f64,
    omega: &DiscretePath,
    mu: &ParticleMeasure,
    particle: usize,
    order: Order,
    mode: Mode,
    cfg: &FdConfig,
) -> Result<Vec<f64>> {
    check_args(omega, mu)?;
    if particle >= mu.len() {
        return domain(format!("particle {particle} out of range for N={}", mu.len()));
    }
    let grid = omega.grid();
    let (ktau, kt) = cut_pair(grid, tau, t)?;
    match (mode, f) {
        (Mode::Analytic, FunctionalSpec::Dsl(c)) => {
            let ms = c.measure_state_at(Cut::node(grid, kt), mu)?;
            let jet = c.measure_kernel_with(ktau, omega, &ms, mu.particle(particle), order == Order::Second);
            Ok(if order == Order::First { jet.grad } else { jet.hess })
        }
        (Mode::Analytic, _) => no_analytic(f),
        (Mode::Fd, _) => Ok(fd::measure_derivative(f, ktau, kt, omega, mu, particle, order, cfg)?.value),
    }
}

/// How each field of a bundle was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BundleModes {
    pub horizontal: Mode,
    pub path: Mode,
    pub measure: Mode,
}

/// Every derivative the Itô formula consumes at one `(τ, t, ω, μ)`.
#[derive(Clone, Debug)]
pub struct DerivativeBundle {
    pub tau: f64,
    pub t: f64,
    pub dim: usize,
    /// `∂_t f`; `None` at `t = T` in FD mode.
    pub horizontal: Option<f64>,
    pub path_first: Vec<f64>,
    pub path_second: Vec<f64>,
    /// `∂_{μ_τ} f(·, x̃_i)` for every particle `i` of `μ`.
    pub measure_first: Vec<Vec<f64>>,
    /// `∂_{x̃_τ}∂_{μ_τ} f(·, x̃_i)` for every particle `i` of `μ`.
    pub measure_second: Vec<Vec<f64>>,
    pub modes: BundleModes,
    /// Set when a finite-difference stencil looked non-smooth.
    pub flagged: bool,
}

/// Assembles the full bundle, analytic for the DSL and by finite differences otherwise.
pub fn derivative_bundle(f: &FunctionalSpec, tau: f64, t: f64, omega: &DiscretePath, mu: &ParticleMeasure, cfg: &FdConfig) -> Result<DerivativeBundle> {
    check_args(omega, mu)?;
    let grid = omega.grid();
    let (ktau, kt) = cut_pair(grid, tau, t)?;
    let d = omega.dim();
    match f {
        FunctionalSpec::Dsl(c) => {
            let ms = c.measure_state_at(Cut::node(grid, kt), mu)?;
            let path = c.svd_with(ktau, omega, &ms, true);
            let (mut m1, mut m2) = (Vec::with_capacity(mu.len()), Vec::with_capacity(mu.len()));
            if c.reads_measure() {
                for p in mu.particles() {
                    let j = c.measure_kernel_with(ktau, omega, &ms, p, true);
                    m1.push(j.grad);
                    m2.push(j.hess);
                }
            } else {
                m1 = vec![vec![0.0; d]; mu.len()];
                m2 = vec![vec![0.0; d * d]; mu.len()];
            }
            Ok(DerivativeBundle {
                tau: grid.node(ktau),
                t: grid.node(kt),
                dim: d,
                horizontal: Some(c.horizontal_with(omega, &ms)),
                path_first: path.grad,
                path_second: path.hess,
                measure_first: m1,
                measure_second: m2,
                modes: BundleModes { horizontal: Mode::Analytic, path: Mode::Analytic, measure: Mode::Analytic },
                flagged: false,
            })
        }
        FunctionalSpec::Opaque(_) => {
            let tt = grid.node(kt);
            let horizontal = if kt < grid.steps() { Some(fd::horizontal(f, tt, omega, mu, cfg)?) } else { None };
            let p1 = fd::path_derivative(f, ktau, kt, omega, mu, Order::First, cfg)?;
            let p2 = fd::path_derivative(f, ktau, kt, omega, mu, Order::Second, cfg)?;
            let mut flagged = p1.flagged || p2.flagged;
            let (mut m1, mut m2) = (Vec::with_capacity(mu.len()), Vec::with_capacity(mu.len()));
            for i in 0..mu.len() {
                let a = fd::measure_derivative(f, ktau, kt, omega, mu, i, Order::First, cfg)?;
                let b = fd::measure_derivative(f, ktau, kt, omega, mu, i, Order::Second, cfg)?;
                flagged |= a.flagged || b.flagged;
                m1.push(a.value);
                m2.push(b.value);
            }
            Ok(DerivativeBundle {
                tau: grid.node(ktau),
                t: tt,
                dim: d,
                horizontal,
                path_first: p1.value,
                path_second: p2.value,
                measure_first: m1,
                measure_second: m2,
                modes: BundleModes { horizontal: Mode::Fd, path: Mode::Fd, measure: Mode::Fd },
                flagged,
            })
        }
    }
}

#[cfg(test)]
mod tests;
