use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pathfield(args: &[&str], config: &str, out: &Path) -> Output {
    let dir = out.parent().unwrap();
    let cfg = dir.join(format!("{}.toml", out.file_name().unwrap().to_string_lossy()));
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_pathfield"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .env_remove("PATHFIELD_OUT")
        .output()
        .unwrap()
}

fn small(experiment: &str, body: &str) -> String {
    format!("experiment = \"{experiment}\"\n\n[grid]\nT = 1.0\nM = 20\n\n[mc]\nN = 400\nseed = 1\n\n{body}")
}

const CONSTANT_ONE: &str = "[problem.terminal]\nleaves = [{ kind = \"time\" }]\ncombiner = { arity = 1, constant = 1.0 }\n";
const DRIVER_Y: &str = "[problem.driver]\narity = 2\nterms = [{ weights = [1.0, 0.0], profile = { kind = \"affine\", slope = 1.0 } }]\n";

fn cases() -> Vec<(&'static str, String, Vec<&'static str>)> {
    vec![
        ("derivcheck", small("derivcheck", "[params]\nprobes = 4\nprobe_particles = 3\n"), vec!["derivcheck.csv"]),
        ("ito-check", small("ito-check", "[problem.case]\ncase = \"heat\"\n\n[sweep]\nM = [10, 20]\n"), vec!["ito_check.csv"]),
        ("solve-bsde", small("solve-bsde", &format!("{CONSTANT_ONE}\n[[problem.law]]\ncoeff = 0.5\nstat = {{ kind = \"mean\" }}\n")), vec!["bsde_nodes.csv", "bsde_picard.csv"]),
        (
            "master-eval",
            small("master-eval", "[problem.case]\ncase = \"path-delay\"\na = 1.0\nt0 = 0.5\neps = 0.2\n\n[params]\ntimes = [0.1, 0.8]\nresidual = true\ngamma = { kind = \"linear\", intercept = 0.0, slope = 1.0 }\n"),
            vec!["master_eval.csv"],
        ),
        (
            "mollify-sweep",
            small("mollify-sweep", "[problem.case]\ncase = \"path-delay\"\na = 1.0\nt0 = 0.5\n\n[params]\ngamma = { kind = \"linear\", intercept = 0.0, slope = 1.0 }\n\n[sweep]\neps = [0.2, 0.1]\n"),
            vec!["mollify_sweep.csv"],
        ),
        ("convergence", small("convergence", "[problem.case]\ncase = \"heat\"\n\n[params]\nquantity = \"field\"\nreference = 1.0\n\n[sweep]\nN = [200, 800]\n"), vec!["convergence.csv"]),
        (
            "compare",
            small("compare", &format!("{CONSTANT_ONE}\n[params]\nexpected_margin = 1.0\n\n[params.other.terminal]\nleaves = [{{ kind = \"time\" }}]\ncombiner = {{ arity = 1, constant = 2.0 }}\n")),
            vec!["compare.csv"],
        ),
        ("flow-check", small("flow-check", &format!("{CONSTANT_ONE}\n{DRIVER_Y}\n[params]\nprobes = 3\n")), vec!["flow_check.csv"]),
    ]
}

#[test]
fn every_subcommand_writes_its_tables_and_manifest() {
    let tmp = TempDir::new().unwrap();
    for (name, cfg, files) in cases() {
        let out = tmp.path().join(name);
        let o = pathfield(&[name], &cfg, &out);
        assert!(o.status.code() == Some(0) || o.status.code() == Some(1), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files {
            let text = std::fs::read_to_string(out.join(f)).unwrap_or_else(|_| panic!("{name}: missing {f}"));
            assert!(text.lines().count() >= 2, "{name}: {f} has no rows");
        }
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["experiment"], name);
        assert_eq!(manifest["pass"].as_bool(), Some(o.status.code() == Some(0)));
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = small("master-eval", "[problem.case]\ncase = \"mixed\"\na = 1.0\nb = 1.0\nt1 = 0.5\nt2 = 0.5\neps = 0.2\n\n[params]\ntimes = [0.2]\nmu = { kind = \"constants\", values = [-0.5, 0.5] }\n");
    let runs: Vec<String> = [("a", "1"), ("b", "8"), ("c", "1")]
        .iter()
        .map(|(tag, threads)| {
            let out = tmp.path().join(tag);
            let o = pathfield(&["master-eval", "--threads", threads], &cfg, &out);
            assert!(o.status.code().is_some_and(|c| c < 2), "{}", String::from_utf8_lossy(&o.stderr));
            std::fs::read_to_string(out.join("master_eval.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = small("ito-check", "[problem.case]\ncase = \"heat\"\n");
    let read = |tag: &str, args: &[&str]| {
        let out = tmp.path().join(tag);
        pathfield(args, &cfg, &out);
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        (m["config"]["mc"]["seed"].as_u64(), std::fs::read_to_string(out.join("ito_check.csv")).unwrap())
    };
    let (s1, a) = read("a", &["ito-check"]);
    let (s2, b) = read("b", &["ito-check", "--seed", "99"]);
    assert_eq!((s1, s2), (Some(1), Some(99)));
    assert_ne!(a, b);
}

#[test]
fn unknown_keys_are_reported_by_name() {
    let tmp = TempDir::new().unwrap();
    let cfg = small("derivcheck", "[params]\nprobez = 4\n");
    let o = pathfield(&["derivcheck"], &cfg, &tmp.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("probez"));
}

#[test]
fn oversized_sweeps_are_refused() {
    let tmp = TempDir::new().unwrap();
    let cfg = small("convergence", "[sweep]\nM = [10, 20, 40]\nN = [100, 200, 400]\n\n[output]\ncell_budget = 8\n");
    let o = pathfield(&["convergence"], &cfg, &tmp.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cell_budget"));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn missing_seed_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = "experiment = \"derivcheck\"\n[grid]\nM = 10\n[mc]\nN = 10\n";
    let o = pathfield(&["derivcheck"], cfg, &tmp.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}
