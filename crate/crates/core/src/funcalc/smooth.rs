//! Smooth maps `R^n → R` with exact gradient and Hessian.
//!
//! Every map is a constant plus a sum of ridge terms `φ(w·x + b)` whose scalar
//! profile `φ` comes from a small registry (polynomial, exp-scalar, sin,
//! affine). Ridge sums are closed under addition and can express products
//! through the polarization identity, which is all the combiners need.

use serde::{Deserialize, Serialize};

/// Scalar profile of a ridge term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Profile {
    /// `Σ_j c_j s^j`.
    Polynomial { coeffs: Vec<f64> },
    /// `scale · exp(rate · s)`.
    ExpScalar { scale: f64, rate: f64 },
    /// `amplitude · sin(frequency · s + phase)`.
    Sin {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `slope · s + intercept`.
    Affine {
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
}

impl Profile {
    /// Value, first and second derivative at `s`.
    pub fn jet(&self, s: f64) -> (f64, f64, f64) {
        match self {
            Profile::Polynomial { coeffs } => {
                let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
                for &c in coeffs.iter().rev() {
                    d2 = d2 * s + 2.0 * d1;
                    d1 = d1 * s + v;
                    v = v * s + c;
                }
                (v, d1, d2)
            }
            Profile::ExpScalar { scale, rate } => {
                let e = scale * (rate * s).exp();
                (e, rate * e, rate * rate * e)
            }
            Profile::Sin { amplitude, frequency, phase } => {
                let a = frequency * s + phase;
                let (sn, cs) = a.sin_cos();
                (amplitude * sn, amplitude * frequency * cs, -amplitude * frequency * frequency * sn)
            }
            Profile::Affine { slope, intercept } => (slope * s + intercept, *slope, 0.0),
        }
    }
}

/// One term `φ(w·x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeTerm {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub shift: f64,
    pub profile: Profile,
}

/// `c + Σ_j φ_j(w_j·x + b_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothMap {
    /// Input dimension; `0` in a config file means "infer from the terms".
    #[serde(default)]
    pub arity: usize,
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub terms: Vec<RidgeTerm>,
}

impl SmoothMap {
    pub fn constant(arity: usize, c: f64) -> Self {
        Self { arity, constant: c, terms: Vec::new() }
    }

    /// Single ridge term.
    pub fn ridge(weights: Vec<f64>, shift: f64, profile: Profile) -> Self {
        Self { arity: weights.len(), constant: 0.0, terms: vec![RidgeTerm { weights, shift, profile }] }
    }

    /// Unit vector along coordinate `i` of `R^n`.
    fn axis(n: usize, i: usize) -> Vec<f64> {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        w
    }

    /// `x ↦ x_i` on `R^n`.
    pub fn coordinate(n: usize, i: usize) -> Self {
        Self::ridge(Self::axis(n, i), 0.0, Profile::Affine { slope: 1.0, intercept: 0.0 })
    }

    /// Identity on the reals.
    pub fn identity() -> Self {
        Self::coordinate(1, 0)
    }

    /// Univariate polynomial `Σ c_j x^j`.
    pub fn poly(coeffs: Vec<f64>) -> Self {
        Self::ridge(vec![1.0], 0.0, Profile::Polynomial { coeffs })
    }

    /// `x ↦ x²` on the reals.
    pub fn square() -> Self {
        Self::poly(vec![0.0, 0.0, 1.0])
    }

    /// `a·sin(k x + p)` on the reals.
    pub fn sin(amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self::ridge(vec![1.0], 0.0, Profile::Sin { amplitude, frequency, phase })
    }

    /// `s·exp(r x)` on the reals.
    pub fn exp(scale: f64, rate: f64) -> Self {
        Self::ridge(vec![1.0], 0.0, Profile::ExpScalar { scale, rate })
    }

    /// `w·x + b`.
    pub fn affine(weights: Vec<f64>, bias: f64) -> Self {
        let n = weights.len();
        Self { arity: n, constant: bias, terms: vec![RidgeTerm { weights, shift: 0.0, profile: Profile::Affine { slope: 1.0, intercept: 0.0 } }] }
    }

    /// `c · x_i · x_j` on `R^n` via `xy = ((x+y)² − (x−y)²)/4`.
    pub fn product(n: usize, i: usize, j: usize, c: f64) -> Self {
        if i == j {
            return Self::ridge(Self::axis(n, i), 0.0, Profile::Polynomial { coeffs: vec![0.0, 0.0, c] });
        }
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        plus[i] = 1.0;
        plus[j] = 1.0;
        minus[i] = 1.0;
        minus[j] = -1.0;
        Self {
            arity: n,
            constant: 0.0,
            terms: vec![
                RidgeTerm { weights: plus, shift: 0.0, profile: Profile::Polynomial { coeffs: vec![0.0, 0.0, 0.25 * c] } },
                RidgeTerm { weights: minus, shift: 0.0, profile: Profile::Polynomial { coeffs: vec![0.0, 0.0, -0.25 * c] } },
            ],
        }
    }

    /// Pointwise sum; arities must agree.
    pub fn plus(mut self, other: SmoothMap) -> Self {
        let n = self.arity().max(other.arity());
        self.arity = n;
        self.constant += other.constant;
        self.terms.extend(other.terms);
        self
    }

    /// `c · self`.
    pub fn scaled(mut self, c: f64) -> Self {
        self.constant *= c;
        self.terms = self
            .terms
            .into_iter()
            .map(|t| RidgeTerm { profile: scale_profile(t.profile, c), ..t })
            .collect();
        self
    }

    pub fn arity(&self) -> usize {
        if self.arity > 0 {
            self.arity
        } else {
            self.terms.first().map_or(0, |t| t.weights.len())
        }
    }

    /// Every term has the declared arity.
    pub fn is_consistent(&self) -> bool {
        let n = self.arity();
        self.terms.iter().all(|t| t.weights.len() == n)
    }

    fn arg(t: &RidgeTerm, x: &[f64]) -> f64 {
        t.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + t.shift
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|t| t.profile.jet(Self::arg(t, x)).0).sum::<f64>()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for t in &self.terms {
            let d1 = t.profile.jet(Self::arg(t, x)).1;
            for (gi, w) in g.iter_mut().zip(&t.weights) {
                *gi += d1 * w;
            }
        }
        g
    }

    /// Row-major `n × n` Hessian.
    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut h = vec![0.0; n * n];
        for t in &self.terms {
            let d2 = t.profile.jet(Self::arg(t, x)).2;
            if d2 == 0.0 {
                continue;
            }
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += d2 * t.weights[i] * t.weights[j];
                }
            }
        }
        h
    }

    /// Value, gradient and Hessian in one pass.
    pub fn jet(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = x.len();
        let mut v = self.constant;
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        for t in &self.terms {
            let (p0, p1, p2) = t.profile.jet(Self::arg(t, x));
            v += p0;
            for i in 0..n {
                g[i] += p1 * t.weights[i];
                if p2 != 0.0 {
                    for j in 0..n {
                        h[i * n + j] += p2 * t.weights[i] * t.weights[j];
                    }
                }
            }
        }
        (v, g, h)
    }

    /// Scalar-input convenience: `(φ, φ', φ'')` at `x`.
    pub fn jet1(&self, x: f64) -> (f64, f64, f64) {
        let mut out = (self.constant, 0.0, 0.0);
        for t in &self.terms {
            let w = t.weights[0];
            let (p0, p1, p2) = t.profile.jet(w * x + t.shift);
            out.0 += p0;
            out.1 += p1 * w;
            out.2 += p2 * w * w;
        }
        out
    }
}

fn scale_profile(p: Profile, c: f64) -> Profile {
    match p {
        Profile::Polynomial { coeffs } => Profile::Polynomial { coeffs: coeffs.into_iter().map(|a| a * c).collect() },
        Profile::ExpScalar { scale, rate } => Profile::ExpScalar { scale: scale * c, rate },
        Profile::Sin { amplitude, frequency, phase } => Profile::Sin { amplitude: amplitude * c, frequency, phase },
        Profile::Affine { slope, intercept } => Profile::Affine { slope: slope * c, intercept: intercept * c },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn polynomial_jet() {
        // 1 + 2x + 3x² at x = 2
        let (v, d1, d2) = Profile::Polynomial { coeffs: vec![1.0, 2.0, 3.0] }.jet(2.0);
        assert_eq!((v, d1, d2), (17.0, 14.0, 6.0));
        let (v, d1, d2) = Profile::Polynomial { coeffs: vec![0.0, 0.0, 0.0, 1.0] }.jet(-1.5);
        assert_eq!((v, d1, d2), (-3.375, 6.75, -9.0));
    }

    #[test]
    fn product_is_exact() {
        let p = SmoothMap::product(3, 0, 2, 2.0);
        let x = [1.5, -4.0, 0.25];
        assert!((p.value(&x) - 0.75).abs() < 1e-15);
        let g = p.gradient(&x);
        assert!((g[0] - 0.5).abs() < 1e-15 && g[1] == 0.0 && (g[2] - 3.0).abs() < 1e-15);
        let h = p.hessian(&x);
        assert!((h[2] - 2.0).abs() < 1e-15 && (h[6] - 2.0).abs() < 1e-15 && h[0].abs() < 1e-15);
    }

    fn arb_map() -> impl Strategy<Value = SmoothMap> {
        (
            proptest::collection::vec(-1.0f64..1.0, 2),
            proptest::collection::vec(-1.0f64..1.0, 2),
            -1.0f64..1.0,
            -2.0f64..2.0,
        )
            .prop_map(|(w1, w2, b, c)| {
                SmoothMap::ridge(w1, b, Profile::Sin { amplitude: c, frequency: 1.3, phase: 0.2 })
                    .plus(SmoothMap::ridge(w2, -b, Profile::ExpScalar { scale: 0.3, rate: 0.7 }))
                    .plus(SmoothMap::product(2, 0, 1, c))
            })
    }

    proptest! {
        #[test]
        fn gradient_matches_central_difference(m in arb_map(), x in proptest::collection::vec(-2.0f64..2.0, 2)) {
            let (v, g, h) = m.jet(&x);
            prop_assert!((v - m.value(&x)).abs() < 1e-13);
            let step = 1e-5;
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                let fd = (m.value(&xp) - m.value(&xm)) / (2.0 * step);
                prop_assert!((fd - g[i]).abs() < 1e-7);
                let gp = m.gradient(&xp);
                let gm = m.gradient(&xm);
                for j in 0..2 {
                    prop_assert!(((gp[j] - gm[j]) / (2.0 * step) - h[j * 2 + i]).abs() < 1e-6);
                }
            }
            prop_assert!((h[1] - h[2]).abs() < 1e-14);
        }
    }
}
