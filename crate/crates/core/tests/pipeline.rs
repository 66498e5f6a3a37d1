use pathfield::bsde::{BsdeProblem, Generator};
use pathfield::funcalc::corpus::{self, RandomComposite};
use pathfield::ito::DiffusionCoeffs;
use pathfield::master::{decoupling_field, sobolev_eval, ClosedForm, ClosedFormCase, MasterProblem, Preset};
use pathfield::{Composite, DiscretePath, FunctionalSpec, ParticleMeasure, TimeGrid};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, 40).unwrap()
}

fn args(seed: u64) -> (DiscretePath, ParticleMeasure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (corpus::random_path(grid(), 0.2, 1.0, &mut rng), corpus::random_measure(grid(), 6, &mut rng))
}

#[test]
fn composite_from_toml_matches_the_built_one() {
    let text = r#"
        leaves = [
            { kind = "path-eval", h = { terms = [{ weights = [1.0], profile = { kind = "polynomial", coeffs = [0.0, 0.0, 1.0] } }] } },
            { kind = "measure-eval", h = { terms = [{ weights = [1.0], profile = { kind = "sin", amplitude = 1.0, frequency = 2.0 } }] } },
        ]
    "#;
    let parsed: Composite = toml::from_str(text).unwrap();
    let f = FunctionalSpec::from(parsed);
    let (omega, mu) = args(1);
    let x = omega.scalar_at(20);
    let mean_sin = (0..mu.len()).map(|j| (2.0 * mu.particle(j).scalar_at(20)).sin()).sum::<f64>() / mu.len() as f64;
    let v = f.eval(0.5, &omega, &mu).unwrap();
    assert!((v - (x * x + mean_sin)).abs() < 1e-12, "{v}");
}

#[test]
fn field_matches_the_heat_closed_form() {
    let g = grid();
    let (phi, _) = ClosedFormCase::Heat.data(1.0).unwrap();
    let bsde = BsdeProblem::new(phi, Generator::zero(1), DiffusionCoeffs::standard(1), g, 4000, 3);
    let p = MasterProblem::new(bsde, Preset::General).unwrap();
    let (omega, mu) = args(2);
    let cf = ClosedForm::new(ClosedFormCase::Heat, g).unwrap();
    for t in [0.0, 0.5] {
        let u = decoupling_field(&p, t, &omega, &mu).unwrap();
        let k = g.floor_index(t).unwrap();
        let exact = cf.value(t, &omega.stop_index(k), &mu.stop_index(k)).unwrap();
        assert!((u.value - exact).abs() <= 3.0 * u.stderr, "t={t}: {} vs {exact} (se {})", u.value, u.stderr);
    }
}

#[test]
fn bsde_and_sobolev_routes_agree() {
    let g = grid();
    let phi = corpus::measure_square();
    let source = FunctionalSpec::constant(0.5);
    let bsde = BsdeProblem::new(phi.clone(), Generator::zero(1).with_source(source.clone()), DiffusionCoeffs::standard(1), g, 3000, 4);
    let p = MasterProblem::new(bsde, Preset::General).unwrap();
    let (omega, mu) = args(3);
    let a = decoupling_field(&p, 0.25, &omega, &mu).unwrap();
    let b = sobolev_eval(&phi, &source, 0.25, &omega, &mu, 3000, 5).unwrap();
    let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    assert!((a.value - b.value).abs() <= 3.0 * se, "{} vs {} (se {se})", a.value, b.value);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composites_ignore_the_future(seed in 0u64..1000, k in 1usize..39, shift in -2.0f64..2.0) {
        let f = RandomComposite::random(&mut ChaCha8Rng::seed_from_u64(seed)).functional();
        let (omega, mu) = args(seed + 1);
        let t = grid().node(k);
        let later = omega.bump_index(k + 1, &[shift]);
        let v = f.eval(t, &omega, &mu).unwrap();
        prop_assert_eq!(v, f.eval(t, &later, &mu).unwrap());
        prop_assert_eq!(v, f.eval(t, &omega.stop_index(k), &mu.stop_index(k)).unwrap());
    }
}
