//! Least-squares conditional expectations on a per-step polynomial basis.
//!
//! At every node the raw state statistics are standardized, constant and
//! collinear columns are dropped, and the basis is every monomial of degree
//! one and two in what remains. The intercept is handled by centering, so a
//! constant shift of the target passes through the fit exactly even when the
//! ridge fallback is active.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

/// Particles per accumulation chunk; fixing it makes sums independent of the thread count.
pub(crate) const CHUNK: usize = 512;

/// `Σ_j g(j)` over `0..n` into a vector of length `len`, chunk by chunk in a fixed order.
pub(crate) fn chunked_sum(n: usize, len: usize, g: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            for j in c * CHUNK..((c + 1) * CHUNK).min(n) {
                g(j, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; len];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    chunked_sum(v.len(), 1, |j, a| a[0] += v[j])[0] / v.len() as f64
}

/// Mean and standard error of the mean.
pub(crate) fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let ss = chunked_sum(v.len(), 1, |j, a| a[0] += (v[j] - m).powi(2))[0];
    (m, (ss / (n - 1.0) / n).sqrt())
}

struct Basis {
    /// Standardized kept variables, particle-major.
    vars: Vec<f64>,
    nv: usize,
    fmean: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl Basis {
    fn p(&self) -> usize {
        self.nv + self.nv * (self.nv + 1) / 2
    }

    fn features(&self, j: usize, out: &mut [f64]) {
        let v = &self.vars[j * self.nv..(j + 1) * self.nv];
        out[..self.nv].copy_from_slice(v);
        let mut q = self.nv;
        for a in 0..self.nv {
            for b in a..self.nv {
                out[q] = v[a] * v[b];
                q += 1;
            }
        }
        for (o, m) in out.iter_mut().zip(&self.fmean) {
            *o -= m;
        }
    }
}

/// The regression bases of one forward ensemble, one per node.
pub(crate) struct Design {
    n: usize,
    steps: Vec<Basis>,
    /// Nodes where the normal equations needed the ridge fallback.
    pub fallbacks: usize,
}

impl Design {
    /// `raw(k, j, out)` writes the `nraw` statistics of particle `j` at node `k`.
    pub fn build(n: usize, nodes: usize, start: usize, nraw: usize, raw: impl Fn(usize, usize, &mut [f64]) + Sync) -> Self {
        let bases: Vec<(Basis, bool)> = (0..nodes)
            .map(|k| if k < start { (Basis { vars: Vec::new(), nv: 0, fmean: Vec::new(), chol: None }, false) } else { Self::basis(n, nraw, |j, o| raw(k, j, o)) })
            .collect();
        let fallbacks = bases.iter().filter(|b| b.1).count();
        if fallbacks > 0 {
            log::warn!("regression: ridge fallback at {fallbacks} of {nodes} nodes");
        }
        Self { n, steps: bases.into_iter().map(|b| b.0).collect(), fallbacks }
    }

    fn basis(n: usize, nraw: usize, raw: impl Fn(usize, &mut [f64]) + Sync) -> (Basis, bool) {
        let mut x = vec![0.0; n * nraw];
        x.par_chunks_mut(nraw.max(1)).enumerate().for_each(|(j, row)| {
            if nraw > 0 {
                raw(j, row)
            }
        });
        let nf = n as f64;
        let m = chunked_sum(n, nraw, |j, a| {
            for (ai, v) in a.iter_mut().zip(&x[j * nraw..(j + 1) * nraw]) {
                *ai += v;
            }
        });
        let m: Vec<f64> = m.iter().map(|s| s / nf).collect();
        let cov = chunked_sum(n, nraw * nraw, |j, a| {
            let r = &x[j * nraw..(j + 1) * nraw];
            for p in 0..nraw {
                for q in 0..nraw {
                    a[p * nraw + q] += (r[p] - m[p]) * (r[q] - m[q]);
                }
            }
        });
        let cov: Vec<f64> = cov.iter().map(|s| s / nf).collect();
        let mut keep: Vec<usize> = Vec::new();
        for p in 0..nraw {
            let vp = cov[p * nraw + p];
            if vp.is_nan() || vp <= 1e-20 * (1.0 + m[p] * m[p]) {
                continue;
            }
            let dup = keep.iter().any(|&q| {
                let c = cov[p * nraw + q] / (vp * cov[q * nraw + q]).sqrt();
                c.abs() > 1.0 - 1e-10
            });
            if !dup {
                keep.push(p);
            }
        }
        let nv = keep.len();
        let scale: Vec<f64> = keep.iter().map(|&p| cov[p * nraw + p].sqrt()).collect();
        let mut vars = vec![0.0; n * nv];
        if nv > 0 {
            vars.par_chunks_mut(nv).enumerate().for_each(|(j, row)| {
                for (a, &p) in keep.iter().enumerate() {
                    row[a] = (x[j * nraw + p] - m[p]) / scale[a];
                }
            });
        }
        let mut b = Basis { vars, nv, fmean: Vec::new(), chol: None };
        let p = b.p();
        if p == 0 {
            return (b, false);
        }
        b.fmean = vec![0.0; p];
        let fm = chunked_sum(n, p, |j, a| {
            let mut f = vec![0.0; p];
            b.features(j, &mut f);
            for (ai, v) in a.iter_mut().zip(&f) {
                *ai += v;
            }
        });
        b.fmean = fm.iter().map(|s| s / nf).collect();
        let g = chunked_sum(n, p * p, |j, a| {
            let mut f = vec![0.0; p];
            b.features(j, &mut f);
            for r in 0..p {
                for c in 0..p {
                    a[r * p + c] += f[r] * f[c];
                }
            }
        });
        let mut g = DMatrix::from_row_slice(p, p, &g) / nf;
        let eig = SymmetricEigen::new(g.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        let ridge = lo.partial_cmp(&(1e-12 * hi)).map_or(true, |o| o.is_lt());
        if ridge {
            let lambda = 1e-8 * g.trace() / p as f64;
            for i in 0..p {
                g[(i, i)] += lambda.max(1e-300);
            }
        }
        b.chol = Cholesky::new(g);
        (b, ridge)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    /// Fitted values `Ê_k[y]` for each target.
    pub fn project(&self, k: usize, targets: &[&[f64]]) -> Vec<Vec<f64>> {
        let b = &self.steps[k];
        let n = self.n;
        let nt = targets.len();
        let means: Vec<f64> = chunked_sum(n, nt, |j, a| {
            for (ai, t) in a.iter_mut().zip(targets) {
                *ai += t[j];
            }
        })
        .into_iter()
        .map(|s| s / n as f64)
        .collect();
        let (p, Some(chol)) = (b.p(), b.chol.as_ref()) else {
            return means.iter().map(|&m| vec![m; n]).collect();
        };
        let rhs = chunked_sum(n, p * nt, |j, a| {
            let mut f = vec![0.0; p];
            b.features(j, &mut f);
            for (t, tv) in targets.iter().enumerate() {
                let y = tv[j] - means[t];
                for r in 0..p {
                    a[t * p + r] += f[r] * y;
                }
            }
        });
        let coefs: Vec<DVector<f64>> = (0..nt).map(|t| chol.solve(&(DVector::from_column_slice(&rhs[t * p..(t + 1) * p]) / n as f64))).collect();
        let mut out = vec![vec![0.0; n]; nt];
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut f = vec![0.0; p];
                b.features(j, &mut f);
                coefs.iter().zip(&means).map(|(c, m)| m + c.iter().zip(&f).map(|(a, x)| a * x).sum::<f64>()).collect()
            })
            .collect();
        for (j, r) in rows.into_iter().enumerate() {
            for (t, v) in r.into_iter().enumerate() {
                out[t][j] = v;
            }
        }
        out
    }
}
