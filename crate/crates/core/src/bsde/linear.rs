//! The linear mean-field BSDE
//!
//! ```text
//! dY = −(α Y + β·Z + Ẽ[g Ỹ] + h) dr + Z dB
//! ```
//!
//! solved by Picard iteration on the mean-field term.

use rayon::prelude::*;

use super::forward::{simulate, ForwardEnsemble, NoiseStream, TAG_STATE};
use super::regression::{chunked_sum, Design};
use super::{backward, design_for, BsdeSolution, Driver, PicardLog, SolverConfig};
use crate::error::{domain, shape, Error, Result};
use crate::ito::CoeffFn;
use crate::pathspace::{DiscretePath, TimeGrid};

/// A coefficient process on the grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Coef {
    Const(f64),
    /// One value per node.
    Steps(Vec<f64>),
    /// One value per node and particle, node-major.
    Cells(Vec<f64>),
}

impl Coef {
    #[inline]
    pub fn at(&self, k: usize, j: usize, n: usize) -> f64 {
        match self {
            Coef::Const(c) => *c,
            Coef::Steps(v) => v[k],
            Coef::Cells(v) => v[k * n + j],
        }
    }

    fn check(&self, nodes: usize, n: usize, what: &str) -> Result<()> {
        let ok = match self {
            Coef::Const(c) => c.is_finite(),
            Coef::Steps(v) => v.len() == nodes && v.iter().all(|x| x.is_finite()),
            Coef::Cells(v) => v.len() == nodes * n && v.iter().all(|x| x.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            shape(format!("{what} must be finite and cover {nodes} nodes"))
        }
    }
}

/// Coefficients of the linear mean-field BSDE on a fixed ensemble.
#[derive(Clone, Debug)]
pub struct LinearMfBsde {
    /// `ξ` per particle.
    pub terminal: Vec<f64>,
    pub alpha: Coef,
    /// One coefficient per `Z` component; empty means `β = 0`.
    pub beta: Vec<Coef>,
    /// Mean-field weights `g(t_k, c̃_j(t_k))`; the term is `mean_j g_{k,j} Y_j(t_k)`.
    pub kernel: Option<Coef>,
    /// Inhomogeneity `h`.
    pub source: Coef,
    pub solver: SolverConfig,
}

impl LinearMfBsde {
    /// Constant coefficients `α`, `g`, deterministic `ξ` and no `β`, `h`.
    pub fn constant(alpha: f64, g: f64, xi: f64, n: usize) -> Self {
        Self { terminal: vec![xi; n], alpha: Coef::Const(alpha), beta: Vec::new(), kernel: Some(Coef::Const(g)), source: Coef::Const(0.0), solver: SolverConfig::default() }
    }
}

struct LinDriver<'a> {
    spec: &'a LinearMfBsde,
    n: usize,
    mf: &'a [f64],
}

impl LinDriver<'_> {
    fn affine(&self, k: usize, j: usize, z: &[f64]) -> f64 {
        let bz: f64 = self.spec.beta.iter().zip(z).map(|(b, zi)| b.at(k, j, self.n) * zi).sum();
        bz + self.mf[k] + self.spec.source.at(k, j, self.n)
    }
}

impl Driver for LinDriver<'_> {
    fn eval(&self, k: usize, j: usize, y: f64, z: &[f64]) -> f64 {
        self.spec.alpha.at(k, j, self.n) * y + self.affine(k, j, z)
    }

    fn implicit(&self, k: usize, j: usize, a: f64, c: f64, z: &[f64]) -> f64 {
        (a + c * self.affine(k, j, z)) / (1.0 - c * self.spec.alpha.at(k, j, self.n))
    }
}

/// Solves on a prepared ensemble; `ens.dim()` must match `beta`.
pub(crate) fn solve_linear_on(ens: &ForwardEnsemble, design: &Design, spec: &LinearMfBsde) -> Result<BsdeSolution> {
    let grid = ens.grid();
    let (nodes, n) = (grid.steps() + 1, ens.len());
    if spec.terminal.len() != n {
        return shape(format!("terminal has {} entries for {n} particles", spec.terminal.len()));
    }
    if !spec.beta.is_empty() && spec.beta.len() != ens.dim() {
        return shape(format!("β has {} components for a {}-dimensional noise", spec.beta.len(), ens.dim()));
    }
    spec.alpha.check(nodes, n, "α")?;
    spec.source.check(nodes, n, "h")?;
    for b in &spec.beta {
        b.check(nodes, n, "β")?;
    }
    let mut mf = vec![0.0; nodes];
    let Some(kernel) = &spec.kernel else {
        return backward(ens, design, &spec.terminal, &LinDriver { spec, n, mf: &mf });
    };
    kernel.check(nodes, n, "kernel")?;
    let cfg = &spec.solver;
    let mut prev = vec![0.0; nodes * n];
    let mut gaps = Vec::new();
    for it in 1..=cfg.max_iter {
        let mut sol = backward(ens, design, &spec.terminal, &LinDriver { spec, n, mf: &mf })?;
        let y = sol.y_flow();
        let mut gap = 0.0f64;
        for k in ens.start..nodes {
            let s = chunked_sum(n, 1, |j, a| a[0] += (y[k * n + j] - prev[k * n + j]).powi(2))[0];
            gap = gap.max((s / n as f64).sqrt());
            mf[k] = chunked_sum(n, 1, |j, a| a[0] += kernel.at(k, j, n) * y[k * n + j])[0] / n as f64;
        }
        gaps.push(gap);
        if gap < cfg.picard_tol {
            sol.picard = PicardLog { iterations: it, gaps };
            return Ok(sol);
        }
        prev.copy_from_slice(y);
    }
    Err(Error::NoConvergence { iterations: cfg.max_iter, gaps })
}

/// Solves on a standard Brownian ensemble of `n` particles started at zero.
pub fn solve_linear_mf_bsde(spec: &LinearMfBsde, grid: TimeGrid, n: usize, seed: u64) -> Result<BsdeSolution> {
    if n < 2 {
        return domain(format!("need at least two particles, got {n}"));
    }
    let d = spec.beta.len().max(1);
    let zero = DiscretePath::zeros(grid, d);
    let ens = simulate(grid, d, &CoeffFn::zeros(d), &CoeffFn::identity(d), 0, n, NoiseStream::new(seed, TAG_STATE), &|_| zero.clone())?;
    let design = design_for(&ens, &[]);
    solve_linear_on(&ens, &design, spec)
}

/// `mean_j w_j v_j` at every node, for assembling kernels from solved flows.
pub(crate) fn weighted_means(w: &Coef, flow: &[f64], nodes: usize, n: usize) -> Vec<f64> {
    (0..nodes).into_par_iter().map(|k| (0..n).map(|j| w.at(k, j, n) * flow[k * n + j]).sum::<f64>() / n as f64).collect()
}
