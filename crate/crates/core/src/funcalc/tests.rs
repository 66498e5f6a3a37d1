use super::corpus::{self, RandomComposite};
use super::*;
use crate::pathspace::{DiscretePath, ParticleMeasure, TimeGrid};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn g4() -> TimeGrid {
    TimeGrid::new(1.0, 4).unwrap()
}

fn dirac(g: TimeGrid, x: f64) -> ParticleMeasure {
    ParticleMeasure::dirac(DiscretePath::constant(g, &[x]))
}

#[test]
fn eval_examples() {
    let g = g4();
    let ramp = DiscretePath::scalar(g, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let id: FunctionalSpec = Leaf::PathEval { h: SmoothMap::identity() }.into();
    assert_eq!(id.eval(0.5, &ramp, &dirac(g, 0.0)).unwrap(), 2.0);
    let ri: FunctionalSpec = Leaf::RunningIntegral { f: SmoothMap::identity(), weight: TimeWeight::Uniform }.into();
    assert_eq!(ri.eval(1.0, &DiscretePath::constant(g, &[1.0]), &dirac(g, 0.0)).unwrap(), 1.0);
    let two = ParticleMeasure::new(vec![DiscretePath::constant(g, &[1.0]), DiscretePath::constant(g, &[3.0])]).unwrap();
    assert_eq!(corpus::measure_square().eval(0.25, &ramp, &two).unwrap(), 5.0);
}

#[test]
fn off_grid_running_integral_is_exact() {
    let g = g4();
    let ramp = DiscretePath::scalar(g, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let ri: FunctionalSpec = Leaf::RunningIntegral { f: SmoothMap::identity(), weight: TimeWeight::Uniform }.into();
    // 0·0.25 + 1·0.25 + 2·0.1
    assert!((ri.eval(0.6, &ramp, &dirac(g, 0.0)).unwrap() - 0.45).abs() < 1e-15);
}

#[test]
fn horizontal_examples() {
    let g = TimeGrid::new(1.0, 10).unwrap();
    let cfg = FdConfig::default();
    let two = DiscretePath::constant(g, &[2.0]);
    let mu = dirac(g, 3.0);
    for t in [0.0, 0.3, 0.9] {
        let a = horizontal_derivative(&corpus::running_square(), t, &two, &mu, &cfg, Mode::Analytic).unwrap();
        assert_eq!(a, 4.0);
        let f = horizontal_derivative(&corpus::running_square(), t, &two, &mu, &cfg, Mode::Fd).unwrap();
        assert!((f - 4.0).abs() < 1e-8);
        assert_eq!(horizontal_derivative(&corpus::path_square(), t, &two, &mu, &cfg, Mode::Analytic).unwrap(), 0.0);
    }
    let mi: FunctionalSpec = Leaf::MeasureIntegral { f: SmoothMap::identity(), weight: TimeWeight::Uniform }.into();
    assert_eq!(horizontal_derivative(&mi, 0.4, &two, &mu, &cfg, Mode::Analytic).unwrap(), 3.0);
    assert!(horizontal_derivative(&mi, 1.0, &two, &mu, &cfg, Mode::Fd).is_err());
}

#[test]
fn svd_examples() {
    let g = TimeGrid::new(1.0, 10).unwrap();
    let cfg = FdConfig::default();
    let mu = dirac(g, 0.0);
    let three = DiscretePath::constant(g, &[3.0]);
    for tau in [0.0, 0.3, 0.7] {
        let v = strong_vertical_derivative(&corpus::path_square(), tau, 0.7, &three, &mu, Order::First, Mode::Analytic, &cfg).unwrap();
        assert_eq!(v, vec![6.0]);
    }
    let one = DiscretePath::constant(g, &[1.0]);
    let v = strong_vertical_derivative(&corpus::running_square(), 0.5, 1.0, &one, &mu, Order::First, Mode::Analytic, &cfg).unwrap();
    assert!((v[0] - 1.0).abs() < 1e-14);
    let v = strong_vertical_derivative(&corpus::running_square(), 1.0, 1.0, &one, &mu, Order::First, Mode::Analytic, &cfg).unwrap();
    assert_eq!(v[0], 0.0);
    assert!(strong_vertical_derivative(&corpus::running_square(), 0.8, 0.5, &one, &mu, Order::First, Mode::Analytic, &cfg).is_err());
}

#[test]
fn measure_derivative_examples() {
    let g = TimeGrid::new(1.0, 10).unwrap();
    let cfg = FdConfig::default();
    let mu = ParticleMeasure::new(vec![DiscretePath::constant(g, &[2.0]), DiscretePath::constant(g, &[-1.0])]).unwrap();
    let w = DiscretePath::zeros(g, 1);
    let f = corpus::measure_square();
    let a = measure_derivative(&f, 0.2, 0.6, &w, &mu, 0, Order::First, Mode::Analytic, &cfg).unwrap();
    assert_eq!(a, vec![4.0]);
    // Quadratic leaf: the paired lift estimator is exact up to rounding.
    let fd = measure_derivative(&f, 0.2, 0.6, &w, &mu, 0, Order::First, Mode::Fd, &cfg).unwrap();
    assert!((fd[0] - 4.0).abs() < 1e-9, "{fd:?}");
    let a2 = measure_derivative(&f, 0.2, 0.6, &w, &mu, 0, Order::Second, Mode::Fd, &cfg).unwrap();
    assert!((a2[0] - 2.0).abs() < 1e-6);
    let none = measure_derivative(&corpus::path_square(), 0.2, 0.6, &w, &mu, 1, Order::First, Mode::Analytic, &cfg).unwrap();
    assert_eq!(none, vec![0.0]);
}

#[test]
fn one_sided_lift_has_epsilon_bias() {
    // N·[f(μ^{i,ε}) − f(μ)]/ε = 2x̃_i(t) + ε for f = E^μ[W(t)²].
    let g = TimeGrid::new(1.0, 10).unwrap();
    let mu = ParticleMeasure::new(vec![DiscretePath::constant(g, &[2.0]), DiscretePath::constant(g, &[-1.0])]).unwrap();
    let w = DiscretePath::zeros(g, 1);
    let f = corpus::measure_square();
    let eps = 1e-3;
    let base = f.eval(0.5, &w, &mu).unwrap();
    let up = f.eval(0.5, &w, &mu.bump_particle_index(0, 2, &[eps])).unwrap();
    assert!((2.0 * (up - base) / eps - (4.0 + eps)).abs() < 1e-9);
}

#[test]
fn constant_functional_has_zero_bundle() {
    let g = TimeGrid::new(1.0, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = corpus::random_path(g, 0.3, 1.0, &mut rng);
    let mu = corpus::random_measure(g, 4, &mut rng);
    let b = derivative_bundle(&FunctionalSpec::constant(2.5), 0.25, 0.75, &w, &mu, &FdConfig::default()).unwrap();
    assert_eq!(b.horizontal, Some(0.0));
    assert!(b.path_first.iter().chain(&b.path_second).all(|v| *v == 0.0));
    assert!(b.measure_first.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn frozen_eval_svd_switches_off_after_t0() {
    let g = TimeGrid::new(1.0, 10).unwrap();
    let cfg = FdConfig::default();
    let w = DiscretePath::from_fn(g, |s| s);
    let f: FunctionalSpec = Leaf::FrozenEval { h: SmoothMap::square(), at: 0.5 }.into();
    let mu = dirac(g, 0.0);
    assert!((f.eval(1.0, &w, &mu).unwrap() - 0.25).abs() < 1e-15);
    let before = strong_vertical_derivative(&f, 0.4, 1.0, &w, &mu, Order::First, Mode::Analytic, &cfg).unwrap();
    let after = strong_vertical_derivative(&f, 0.6, 1.0, &w, &mu, Order::First, Mode::Analytic, &cfg).unwrap();
    assert!((before[0] - 1.0).abs() < 1e-15);
    assert_eq!(after[0], 0.0);
}

#[test]
fn opaque_functional_uses_fd() {
    let g = TimeGrid::new(1.0, 10).unwrap();
    let cfg = FdConfig::default();
    let f = FunctionalSpec::opaque("cube-mean", |t, w, mu| {
        let k = w.grid().floor_index(t).unwrap();
        w.scalar_at(k).powi(3) + mu.marginal(k).iter().sum::<f64>()
    });
    let w = DiscretePath::constant(g, &[1.5]);
    let mu = dirac(g, 0.0);
    assert!(strong_vertical_derivative(&f, 0.3, 0.5, &w, &mu, Order::First, Mode::Analytic, &cfg).is_err());
    let b = derivative_bundle(&f, 0.3, 0.5, &w, &mu, &cfg).unwrap();
    assert!((b.path_first[0] - 6.75).abs() < 1e-6);
    assert!((b.path_second[0] - 9.0).abs() < 1e-4);
    assert!((b.measure_first[0][0] - 1.0).abs() < 1e-8);
    assert_eq!(b.modes.path, Mode::Fd);
}

#[test]
fn dsl_round_trips_through_toml() {
    let c = RandomComposite::random(&mut ChaCha8Rng::seed_from_u64(5)).composite();
    let text = toml::to_string(&c).unwrap();
    let back: Composite = toml::from_str(&text).unwrap();
    assert_eq!(back, c);
}

#[test]
fn mollified_weight_integrates_cells_exactly() {
    let g = TimeGrid::new(1.0, 100).unwrap();
    let m = Mollifier::new(0.5, 0.1).unwrap();
    let f: FunctionalSpec = Leaf::RunningIntegral { f: SmoothMap::constant(1, 1.0), weight: TimeWeight::Mollified(m) }.into();
    let w = DiscretePath::zeros(g, 1);
    let mu = dirac(g, 0.0);
    assert!((f.eval(1.0, &w, &mu).unwrap() - 1.0).abs() < 1e-10);
    let half = f.eval(0.5, &w, &mu).unwrap();
    assert!((half - 0.5).abs() < 1e-10);
    // Partial cell: matches the direct mass.
    let v = f.eval(0.503, &w, &mu).unwrap();
    assert!((v - m.mass(0.0, 0.503)).abs() < 1e-12);
}

fn composite_probe(seed: u64) -> (Composite, DiscretePath, ParticleMeasure, usize, usize) {
    let g = TimeGrid::new(1.0, 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = RandomComposite::random(&mut rng).composite();
    let p = corpus::probes(g, 1, 5, seed ^ 0x5eed).remove(0);
    (c, p.omega, p.mu, p.k_tau, p.k_t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn non_anticipative(seed in 0u64..1000, x in -2.0f64..2.0) {
        let (c, w, mu, _, kt) = composite_probe(seed);
        let g = w.grid();
        let t = g.node(kt);
        let f = FunctionalSpec::Dsl(c);
        let base = f.eval(t, &w, &mu).unwrap();
        for later in kt + 1..=g.steps() {
            prop_assert_eq!(f.eval(t, &w.bump_index(later, &[x]), &mu).unwrap(), base);
            prop_assert_eq!(f.eval(t, &w, &mu.bump_particle_index(0, later, &[x])).unwrap(), base);
        }
        prop_assert_eq!(f.eval(t, &w.stop_index(kt), &mu.stop_index(kt)).unwrap(), base);
    }

    #[test]
    fn second_order_svd_is_symmetric_and_dupire_consistent(seed in 0u64..1000) {
        let (c, w, mu, _, kt) = composite_probe(seed);
        let f = FunctionalSpec::Dsl(c);
        let cfg = FdConfig::default();
        let g = w.grid();
        let t = g.node(kt);
        // Dupire: bump at t only, same stencil.
        let fd_dupire = fd::path_derivative(&f, kt, kt, &w, &mu, Order::First, &cfg).unwrap().value[0];
        let svd = strong_vertical_derivative(&f, t, t, &w, &mu, Order::First, Mode::Analytic, &cfg).unwrap()[0];
        prop_assert!((fd_dupire - svd).abs() < 10.0 * cfg.path_step(w.scalar_at(kt).abs(), Order::First).powi(2));
        let h = strong_vertical_derivative(&f, t, t, &w, &mu, Order::Second, Mode::Analytic, &cfg).unwrap();
        prop_assert_eq!(h.len(), 1);
    }

    #[test]
    fn lipschitz_bound_on_svd(seed in 0u64..1000, lip in 0.1f64..3.0) {
        // f = lip·sin(ω(t)) + ∫_0^t cos(ω(r))dr/… is Lipschitz with constant lip·(1 + T).
        let g = TimeGrid::new(1.0, 20).unwrap();
        let f: FunctionalSpec = Composite::new(
            vec![Leaf::PathEval { h: SmoothMap::sin(lip, 1.0, 0.0) }, Leaf::RunningIntegral { f: SmoothMap::sin(lip, 1.0, 0.3), weight: TimeWeight::Uniform }],
            None,
        ).into();
        let p = corpus::probes(g, 1, 3, seed).remove(0);
        let v = strong_vertical_derivative(&f, g.node(p.k_tau), g.node(p.k_t), &p.omega, &p.mu, Order::First, Mode::Analytic, &FdConfig::default()).unwrap();
        prop_assert!(v[0].abs() <= lip * (1.0 + g.horizon()) + 1e-12);
    }
}

/// Closed forms for the composite, written directly from the chain rule over
/// `x = (t, ω(t), ∫f₁(ω), E^μ[f₂(W(t))], E^μ[∫f₃(W)], E^μ[f₄(W(t), ∫f₅(W))])`.
struct RandomCompositeOracle<'a> {
    e: &'a RandomComposite,
}

impl RandomCompositeOracle<'_> {
    fn integral(f: &SmoothMap, w: &DiscretePath, from: usize, to: usize, pick: usize) -> f64 {
        let dt = w.grid().dt();
        (from..to)
            .map(|k| {
                let (v, d1, d2) = f.jet1(w.scalar_at(k));
                dt * [v, d1, d2][pick]
            })
            .sum()
    }

    fn x(&self, w: &DiscretePath, mu: &ParticleMeasure, kt: usize) -> Vec<f64> {
        let n = mu.len() as f64;
        let t = w.grid().node(kt);
        let avg = |g: &dyn Fn(&DiscretePath) -> f64| mu.particles().iter().map(g).sum::<f64>() / n;
        vec![
            t,
            w.scalar_at(kt),
            Self::integral(&self.e.f1, w, 0, kt, 0),
            avg(&|p| self.e.f2.jet1(p.scalar_at(kt)).0),
            avg(&|p| Self::integral(&self.e.f3, p, 0, kt, 0)),
            avg(&|p| self.e.f4.value(&[p.scalar_at(kt), Self::integral(&self.e.f5, p, 0, kt, 0)])),
        ]
    }

    fn path(&self, w: &DiscretePath, mu: &ParticleMeasure, ktau: usize, kt: usize) -> (f64, f64) {
        let x = self.x(w, mu, kt);
        let (_, g, h) = self.e.outer.jet(&x);
        let j1 = Self::integral(&self.e.f1, w, ktau, kt, 1);
        let j2 = Self::integral(&self.e.f1, w, ktau, kt, 2);
        let first = g[1] + g[2] * j1;
        let second = h[7] + 2.0 * h[8] * j1 + h[14] * j1 * j1 + g[2] * j2;
        (first, second)
    }

    fn measure(&self, w: &DiscretePath, mu: &ParticleMeasure, xt: &DiscretePath, ktau: usize, kt: usize) -> (f64, f64) {
        let x = self.x(w, mu, kt);
        let (_, g, _) = self.e.outer.jet(&x);
        let xv = xt.scalar_at(kt);
        let (_, f2d, f2dd) = self.e.f2.jet1(xv);
        let y = [xv, Self::integral(&self.e.f5, xt, 0, kt, 0)];
        let (_, g4, h4) = self.e.f4.jet(&y);
        let j5 = Self::integral(&self.e.f5, xt, ktau, kt, 1);
        let j5b = Self::integral(&self.e.f5, xt, ktau, kt, 2);
        let first = g[3] * f2d + g[4] * Self::integral(&self.e.f3, xt, ktau, kt, 1) + g[5] * (g4[0] + g4[1] * j5);
        let second = g[3] * f2dd
            + g[4] * Self::integral(&self.e.f3, xt, ktau, kt, 2)
            + g[5] * (h4[0] + 2.0 * h4[1] * j5 + h4[3] * j5 * j5 + g4[1] * j5b);
        (first, second)
    }

    fn horizontal(&self, w: &DiscretePath, mu: &ParticleMeasure, kt: usize) -> f64 {
        let x = self.x(w, mu, kt);
        let (_, g, _) = self.e.outer.jet(&x);
        let n = mu.len() as f64;
        let e3 = mu.particles().iter().map(|p| self.e.f3.jet1(p.scalar_at(kt)).0).sum::<f64>() / n;
        let e5 = mu
            .particles()
            .iter()
            .map(|p| {
                let y = [p.scalar_at(kt), Self::integral(&self.e.f5, p, 0, kt, 0)];
                self.e.f4.gradient(&y)[1] * self.e.f5.jet1(p.scalar_at(kt)).0
            })
            .sum::<f64>()
            / n;
        g[0] + g[2] * self.e.f1.jet1(w.scalar_at(kt)).0 + g[4] * e3 + g[5] * e5
    }
}

#[test]
fn composite_bundle_matches_direct_closed_forms() {
    let cfg = FdConfig::default();
    for seed in 0..20u64 {
        let (c, w, mu, ktau, kt) = composite_probe(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = RandomComposite::random(&mut rng);
        assert_eq!(e.composite(), c);
        let oracle = RandomCompositeOracle { e: &e };
        let g = w.grid();
        let f = FunctionalSpec::Dsl(c);
        let b = derivative_bundle(&f, g.node(ktau), g.node(kt), &w, &mu, &cfg).unwrap();
        let (p1, p2) = oracle.path(&w, &mu, ktau, kt);
        assert!((b.path_first[0] - p1).abs() < 1e-12, "seed {seed}");
        assert!((b.path_second[0] - p2).abs() < 1e-12, "seed {seed}");
        for (i, xt) in mu.particles().iter().enumerate() {
            let (m1, m2) = oracle.measure(&w, &mu, xt, ktau, kt);
            assert!((b.measure_first[i][0] - m1).abs() < 1e-12);
            assert!((b.measure_second[i][0] - m2).abs() < 1e-12);
        }
        assert!((b.horizontal.unwrap() - oracle.horizontal(&w, &mu, kt)).abs() < 1e-12);
    }
}
