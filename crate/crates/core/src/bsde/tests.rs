use super::*;
use crate::funcalc::{Composite, Leaf, SmoothMap, TimeWeight};
use crate::pathspace::DiscretePath;

fn grid(m: usize) -> TimeGrid {
    TimeGrid::new(1.0, m).unwrap()
}

fn problem(terminal: FunctionalSpec, generator: Generator, m: usize, n: usize) -> BsdeProblem {
    BsdeProblem::new(terminal, generator, DiffusionCoeffs::standard(1), grid(m), n, 17)
}

fn point() -> FunctionalSpec {
    Leaf::PathEval { h: SmoothMap::identity() }.into()
}

fn law_mean() -> FunctionalSpec {
    Leaf::MeasureEval { h: SmoothMap::identity() }.into()
}

fn brownian(m: usize, n: usize, x0: f64) -> ForwardEnsemble {
    simulate_forward(&DiffusionCoeffs::standard(1), &DiscretePath::constant(grid(m), &[x0]), 0.0, n, 17).unwrap()
}

#[test]
fn constant_terminal_is_exact() {
    let p = problem(FunctionalSpec::constant(2.5), Generator::zero(1), 20, 500);
    let ens = brownian(20, 500, 0.0);
    let s = solve_bsde_regression(&p, &ens, None).unwrap();
    for k in 0..=20 {
        assert!(s.y_at(k).iter().all(|y| *y == 2.5));
        for j in 0..500 {
            assert_eq!(s.z(k, j), &[0.0]);
        }
    }
}

#[test]
fn terminal_is_bit_exact() {
    let phi: FunctionalSpec = Composite::new(
        vec![Leaf::PathEval { h: SmoothMap::sin(1.0, 2.0, 0.1) }, Leaf::RunningIntegral { f: SmoothMap::square(), weight: TimeWeight::Uniform }],
        None,
    )
    .into();
    let p = problem(phi.clone(), Generator::linear(0.3, 1), 30, 400);
    let ens = brownian(30, 400, 0.2);
    let s = solve_bsde_regression(&p, &ens, None).unwrap();
    for j in 0..400 {
        assert_eq!(s.y(30, j), phi.eval(1.0, ens.path(j), &ens.paths).unwrap());
    }
}

#[test]
fn brownian_martingale_representation() {
    let (m, n) = (50, 5000);
    let p = problem(point(), Generator::zero(1), m, n);
    let ens = brownian(m, n, 0.4);
    let s = solve_bsde_regression(&p, &ens, None).unwrap();
    let mut zbar = 0.0;
    for k in 0..m {
        let dev: f64 = (0..n).map(|j| (s.y(k, j) - ens.path(j).scalar_at(k)).abs()).sum::<f64>() / n as f64;
        assert!(dev < 0.03, "node {k}: {dev}");
        zbar += s.z_mean(k)[0] / m as f64;
    }
    assert!((zbar - 1.0).abs() < 0.02, "{zbar}");
    for (k, (mean, se)) in s.martingale.iter().enumerate() {
        assert!(mean.abs() <= 3.0 * se + 1e-12, "cell {k}: {mean} ± {se}");
    }
}

#[test]
fn exponential_decay_oracle() {
    let p = problem(FunctionalSpec::constant(1.0), Generator::linear(-1.0, 1), 100, 2000);
    let s = solve_bsde_regression(&p, &brownian(100, 2000, 0.0), None).unwrap();
    assert!((s.value() / (-1.0f64).exp() - 1.0).abs() < 0.01);
}

#[test]
fn linear_mean_field_closed_forms() {
    let g = grid(100);
    let s = solve_linear_mf_bsde(&LinearMfBsde::constant(0.5, 1.0, 1.0, 1000), g, 1000, 3).unwrap();
    assert!((s.value() / 1.5f64.exp() - 1.0).abs() < 1e-3);
    assert!(s.picard.is_contracting(3), "{:?}", s.picard.gaps);
    let s = solve_linear_mf_bsde(&LinearMfBsde::constant(-1.0, 1.0, 1.0, 1000), g, 1000, 3).unwrap();
    assert!((s.value() - 1.0).abs() < 1e-5, "{}", s.value());
    let s = solve_linear_mf_bsde(&LinearMfBsde::constant(0.7, 0.0, 2.0, 1000), g, 1000, 3).unwrap();
    assert!((s.value() / (2.0 * 0.7f64.exp()) - 1.0).abs() < 1e-3);
}

#[test]
fn linear_mean_field_reports_nonconvergence() {
    let mut spec = LinearMfBsde::constant(0.5, 1.0, 1.0, 100);
    spec.solver.max_iter = 2;
    match solve_linear_mf_bsde(&spec, grid(20), 100, 1) {
        Err(Error::NoConvergence { iterations, gaps }) => {
            assert_eq!(iterations, 2);
            assert_eq!(gaps.len(), 2);
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn law_picard_mean_oracle() {
    let p = problem(FunctionalSpec::constant(1.0), Generator::law_mean(1.0, 1), 100, 1000);
    let s = solve_mf_bsde(&p, &brownian(100, 1000, 0.0)).unwrap();
    assert!((s.value() / 1f64.exp() - 1.0).abs() < 0.01);
    assert!(s.picard.iterations <= 10, "{:?}", s.picard);
}

#[test]
fn law_free_generator_takes_one_pass() {
    let p = problem(point(), Generator::linear(0.5, 1), 40, 800);
    let ens = brownian(40, 800, 0.1);
    let a = solve_mf_bsde(&p, &ens).unwrap();
    let b = solve_bsde_regression(&p, &ens, None).unwrap();
    assert_eq!(a.picard.iterations, 1);
    assert_eq!(a.y_flow(), b.y_flow());
}

#[test]
fn law_reading_generator_needs_frozen_flow() {
    let p = problem(point(), Generator::law_mean(1.0, 1), 10, 50);
    assert!(solve_bsde_regression(&p, &brownian(10, 50, 0.0), None).is_err());
}

#[test]
fn comparison_with_constant_generators() {
    let ens = brownian(50, 1000, 0.3);
    let lo = solve_bsde_regression(&problem(point(), Generator::zero(1), 50, 1000), &ens, None).unwrap();
    let hi = solve_bsde_regression(&problem(point(), Generator::constant(1.0, 1), 50, 1000), &ens, None).unwrap();
    assert!((hi.value() - lo.value() - 1.0).abs() < 1e-10);
}

#[test]
fn quantile_statistic() {
    let s = [3.0, 1.0, 2.0, 4.0];
    assert_eq!(LawStat::Quantile { p: 0.5 }.eval(&s), 2.5);
    assert_eq!(LawStat::Quantile { p: 1.0 }.eval(&s), 4.0);
    assert_eq!(LawStat::SecondMoment.eval(&s), 7.5);
    let g = Generator::zero(1).with_law(LawTerm { coeff: 1.0, stat: LawStat::Quantile { p: 0.3 } });
    assert!(g.law_kernel(1.0).is_err());
}

fn eta(m: usize) -> ParticleMeasure {
    let g = grid(m);
    ParticleMeasure::new((0..10).map(|i| DiscretePath::constant(g, &[0.1 * i as f64 - 0.3])).collect()).unwrap()
}

#[test]
fn pair_is_order_invariant() {
    let m = 20;
    let p = problem(Composite::new(vec![Leaf::PathEval { h: SmoothMap::identity() }, Leaf::MeasureEval { h: SmoothMap::square() }], None).into(), Generator::law_mean(0.5, 1), m, 600);
    let gamma = DiscretePath::constant(grid(m), &[0.2]);
    let e = eta(m);
    let mut rev = e.particles().to_vec();
    rev.reverse();
    let a = solve_pair(&p, 0.25, &gamma, &e).unwrap();
    let b = solve_pair(&p, 0.25, &gamma, &ParticleMeasure::new(rev).unwrap()).unwrap();
    assert_eq!(a.diagonal.y_flow(), b.diagonal.y_flow());
    assert_eq!(a.value(), b.value());
}

#[test]
fn path_variation_of_point_evaluation() {
    let m = 20;
    let p = problem(point(), Generator::zero(1), m, 500);
    let pair = solve_pair(&p, 0.5, &DiscretePath::constant(grid(m), &[0.0]), &eta(m)).unwrap();
    let v = solve_variation_bsde(&VariationKind::PathFirst { tau: 0.3 }, &pair).unwrap();
    for k in pair.k0..=m {
        assert!(v[0].y_at(k).iter().all(|y| (y - 1.0).abs() < 1e-12));
        assert!((0..500).all(|j| v[0].z(k, j)[0].abs() < 1e-12));
    }
    let v2 = solve_variation_bsde(&VariationKind::PathSecond { tau: 0.3 }, &pair).unwrap();
    assert!(v2[0].value().abs() < 1e-12);
}

#[test]
fn measure_variation_of_law_mean() {
    let m = 20;
    let p = problem(law_mean(), Generator::zero(1), m, 500);
    let pair = solve_pair(&p, 0.5, &DiscretePath::constant(grid(m), &[0.0]), &eta(m)).unwrap();
    let xt = eta(m).particle(3).clone();
    let v = solve_variation_bsde(&VariationKind::MeasureKernel { tau: 0.5, x_tilde: xt.clone() }, &pair).unwrap();
    assert!((v[0].value() - 1.0).abs() < 1e-12);
    let v2 = solve_variation_bsde(&VariationKind::MeasureKernelSecond { tau: 0.5, x_tilde: xt }, &pair).unwrap();
    assert!(v2[0].value().abs() < 1e-12);
}

#[test]
fn measure_variation_through_the_law_of_y() {
    let m = 50;
    let p = problem(law_mean(), Generator::law_mean(1.0, 1), m, 1000);
    let pair = solve_pair(&p, 0.5, &DiscretePath::constant(grid(m), &[0.0]), &eta(m)).unwrap();
    let v = solve_variation_bsde(&VariationKind::MeasureKernel { tau: 0.2, x_tilde: eta(m).particle(0).clone() }, &pair).unwrap();
    assert!((v[0].value() / 0.5f64.exp() - 1.0).abs() < 1e-3, "{}", v[0].value());
}

#[test]
fn variation_rejects_late_cutoff() {
    let m = 10;
    let p = problem(point(), Generator::zero(1), m, 50);
    let pair = solve_pair(&p, 0.3, &DiscretePath::constant(grid(m), &[0.0]), &eta(m)).unwrap();
    assert!(solve_variation_bsde(&VariationKind::PathFirst { tau: 0.8 }, &pair).is_err());
}

#[test]
fn thread_count_invariance() {
    let m = 20;
    let p = problem(point(), Generator::law_mean(0.5, 1).with_driver(SmoothMap::coordinate(2, 0).scaled(0.2)), m, 700);
    let run = |t| {
        rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| {
            let s = solve_pair(&p, 0.0, &DiscretePath::constant(grid(m), &[0.1]), &eta(m)).unwrap();
            (s.value(), s.diagonal.y_flow().to_vec())
        })
    };
    assert_eq!(run(1), run(8));
}

