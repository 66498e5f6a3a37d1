//! The TOML run configuration.

use anyhow::{bail, Context, Result};
use pathfield::bsde::{BsdeProblem, Generator, LawTerm, SolverConfig};
use pathfield::funcalc::corpus;
use pathfield::ito::DiffusionCoeffs;
use pathfield::master::{ClosedFormCase, MasterProblem, Preset};
use pathfield::{Composite, DiscretePath, FdConfig, FunctionalSpec, Order, ParticleMeasure, SmoothMap, TimeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The experiments the runner knows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Derivcheck,
    ItoCheck,
    SolveBsde,
    MasterEval,
    MollifySweep,
    Convergence,
    Compare,
    FlowCheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Derivcheck => "derivcheck",
            Experiment::ItoCheck => "ito-check",
            Experiment::SolveBsde => "solve-bsde",
            Experiment::MasterEval => "master-eval",
            Experiment::MollifySweep => "mollify-sweep",
            Experiment::Convergence => "convergence",
            Experiment::Compare => "compare",
            Experiment::FlowCheck => "flow-check",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "T", alias = "horizon", default = "one")]
    pub horizon: f64,
    #[serde(rename = "M", alias = "steps")]
    pub steps: usize,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(rename = "N", alias = "particles")]
    pub particles: usize,
    pub seed: u64,
    #[serde(default = "one_thread")]
    pub threads: usize,
}

fn one_thread() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    #[serde(default = "picard_tol")]
    pub tol: f64,
    #[serde(default = "law_tol")]
    pub law_tol: f64,
    #[serde(default = "max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub strict_copies: bool,
}

fn picard_tol() -> f64 {
    SolverConfig::default().picard_tol
}

fn law_tol() -> f64 {
    SolverConfig::default().law_tol
}

fn max_iter() -> usize {
    SolverConfig::default().max_iter
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { tol: picard_tol(), law_tol: law_tol(), max_iter: max_iter(), strict_copies: false }
    }
}

impl PicardConfig {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig { picard_tol: self.tol, law_tol: self.law_tol, max_iter: self.max_iter, strict_copies: self.strict_copies }
    }
}

/// A scalar path on the run grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PathSpec {
    Constant { value: f64 },
    /// `intercept + slope·s`.
    Linear { intercept: f64, slope: f64 },
    /// `amplitude·sin(frequency·s) + offset`.
    Sin {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        offset: f64,
    },
    /// One value per node.
    Values { values: Vec<f64> },
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec::Constant { value: 0.0 }
    }
}

impl PathSpec {
    pub fn build(&self, grid: TimeGrid) -> Result<DiscretePath> {
        Ok(match self {
            PathSpec::Constant { value } => DiscretePath::constant(grid, &[*value]),
            PathSpec::Linear { intercept, slope } => {
                let (a, b) = (*intercept, *slope);
                DiscretePath::from_fn(grid, move |s| a + b * s)
            }
            PathSpec::Sin { amplitude, frequency, offset } => {
                let (a, f, c) = (*amplitude, *frequency, *offset);
                DiscretePath::from_fn(grid, move |s| a * (f * s).sin() + c)
            }
            PathSpec::Values { values } => DiscretePath::scalar(grid, values.clone()).context("path values must have M+1 entries")?,
        })
    }
}

/// A particle measure on the run grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// Constant particles.
    Constants { values: Vec<f64> },
    Paths { paths: Vec<PathSpec> },
    /// Random-walk particles from a fixed seed.
    Random { particles: usize, seed: u64 },
}

impl Default for MeasureSpec {
    fn default() -> Self {
        MeasureSpec::Constants { values: vec![0.0] }
    }
}

impl MeasureSpec {
    pub fn build(&self, grid: TimeGrid) -> Result<ParticleMeasure> {
        let ps = match self {
            MeasureSpec::Constants { values } => values.iter().map(|v| DiscretePath::constant(grid, &[*v])).collect(),
            MeasureSpec::Paths { paths } => paths.iter().map(|p| p.build(grid)).collect::<Result<_>>()?,
            MeasureSpec::Random { particles, seed } => return Ok(corpus::random_measure(grid, *particles, &mut ChaCha8Rng::seed_from_u64(*seed))),
        };
        Ok(ParticleMeasure::new(ps)?)
    }
}

/// Terminal value, generator and forward coefficients.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default)]
    pub preset: Preset,
    /// Take `Φ` and the source from a closed-form case.
    #[serde(default)]
    pub case: Option<ClosedFormCase>,
    #[serde(default)]
    pub terminal: Option<Composite>,
    #[serde(default)]
    pub source: Option<Composite>,
    /// `φ(y, z)`.
    #[serde(default)]
    pub driver: Option<SmoothMap>,
    #[serde(default)]
    pub law: Vec<LawTerm>,
    #[serde(default)]
    pub coefficients: Option<DiffusionCoeffs>,
}

impl ProblemSpec {
    /// `(Φ, source)`.
    pub fn data(&self, horizon: f64) -> Result<(FunctionalSpec, FunctionalSpec)> {
        let from_case = self.case.as_ref().map(|c| c.data(horizon)).transpose()?;
        if from_case.is_some() && (self.terminal.is_some() || self.source.is_some()) {
            bail!("problem.case cannot be combined with problem.terminal or problem.source");
        }
        Ok(match from_case {
            Some(d) => d,
            None => (
                self.terminal.clone().map_or_else(FunctionalSpec::zero, FunctionalSpec::from),
                self.source.clone().map_or_else(FunctionalSpec::zero, FunctionalSpec::from),
            ),
        })
    }

    pub fn coeffs(&self) -> DiffusionCoeffs {
        self.coefficients.clone().unwrap_or_else(|| DiffusionCoeffs::standard(1))
    }

    pub fn generator(&self, source: FunctionalSpec) -> Generator {
        let mut g = Generator::zero(1).with_source(source);
        if let Some(d) = &self.driver {
            g = g.with_driver(d.clone());
        }
        g.law = self.law.clone();
        g
    }

    pub fn master(&self, grid: TimeGrid, mc: &McConfig, picard: &PicardConfig) -> Result<MasterProblem> {
        let (phi, f) = self.data(grid.horizon())?;
        let mut bsde = BsdeProblem::new(phi, self.generator(f), self.coeffs(), grid, mc.particles, mc.seed);
        bsde.solver = picard.solver();
        MasterProblem::new(bsde, self.preset).context("problem")
    }
}

/// Parameters of the individual experiments; each reads the keys it needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Start time `t`.
    #[serde(default)]
    pub t: f64,
    /// Evaluation times (master-eval, mollify-sweep) or flow times (flow-check).
    #[serde(default)]
    pub times: Vec<f64>,
    /// End time `s` of an Itô check.
    #[serde(default = "one")]
    pub s: f64,
    /// Freezing time `v` of the partial Itô formula; absent means the full formula.
    #[serde(default)]
    pub v: Option<f64>,
    /// Cut-off `τ` for variations.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub gamma: PathSpec,
    #[serde(default)]
    pub mu: MeasureSpec,
    /// Probe count (derivcheck, flow-check).
    #[serde(default = "probes")]
    pub probes: usize,
    /// Particles per random probe measure (derivcheck).
    #[serde(default = "probe_particles")]
    pub probe_particles: usize,
    /// Derivative order for master-eval.
    #[serde(default)]
    pub order: Option<Order>,
    /// Also assemble the PDE residual in master-eval.
    #[serde(default)]
    pub residual: bool,
    /// The second problem of a comparison.
    #[serde(default)]
    pub other: Option<ProblemSpec>,
    /// Expected `u_2 − u_1` of a comparison, checked at 1e-10 plus three standard errors.
    #[serde(default)]
    pub expected_margin: Option<f64>,
    /// Quantity swept by `convergence`: `ito-residual`, `bsde` or `field`.
    #[serde(default)]
    pub quantity: Option<String>,
    /// Reference value for swept errors.
    #[serde(default)]
    pub reference: Option<f64>,
}

fn probes() -> usize {
    20
}

fn probe_particles() -> usize {
    10
}

impl Default for Params {
    fn default() -> Self {
        toml::from_str("").expect("all parameters have defaults")
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, rename = "M", alias = "steps")]
    pub steps: Vec<usize>,
    #[serde(default, rename = "N", alias = "particles")]
    pub particles: Vec<usize>,
    #[serde(default)]
    pub eps: Vec<f64>,
}

impl SweepConfig {
    pub fn cells(&self) -> usize {
        self.steps.len().max(1) * self.particles.len().max(1) * self.eps.len().max(1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<String>,
    /// Largest sweep the runner accepts.
    #[serde(default = "cell_budget")]
    pub cell_budget: usize,
}

fn cell_budget() -> usize {
    256
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, cell_budget: cell_budget() }
    }
}

/// A whole run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub grid: GridConfig,
    pub mc: McConfig,
    #[serde(default)]
    pub fd: FdConfig,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default)]
    pub problem: ProblemSpec,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        Ok(TimeGrid::new(self.grid.horizon, self.grid.steps)?)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(g.horizon > 0.0 && g.horizon.is_finite()) {
            bail!("grid.T must be positive, got {}", g.horizon);
        }
        if g.steps == 0 {
            bail!("grid.M must be at least 1");
        }
        if self.mc.particles < 2 {
            bail!("mc.N must be at least 2, got {}", self.mc.particles);
        }
        if !(1..=256).contains(&self.mc.threads) {
            bail!("mc.threads must lie in [1, 256], got {}", self.mc.threads);
        }
        self.fd.validate(g.horizon / g.steps as f64).context("fd")?;
        if !(self.picard.tol > 0.0 && self.picard.law_tol > 0.0 && self.picard.max_iter > 0) {
            bail!("picard.tol, picard.law_tol and picard.max_iter must be positive");
        }
        for (i, &m) in self.sweep.steps.iter().enumerate() {
            if m == 0 {
                bail!("sweep.M[{i}] must be at least 1");
            }
        }
        for (i, &n) in self.sweep.particles.iter().enumerate() {
            if n < 2 {
                bail!("sweep.N[{i}] must be at least 2");
            }
        }
        for (i, &e) in self.sweep.eps.iter().enumerate() {
            if e.is_nan() || e <= 0.0 {
                bail!("sweep.eps[{i}] must be positive");
            }
        }
        let p = &self.params;
        if !(0.0..=g.horizon).contains(&p.t) || !(p.t..=g.horizon).contains(&p.s) {
            bail!("params.t and params.s must satisfy 0 ≤ t ≤ s ≤ T");
        }
        if p.times.iter().any(|s| !(0.0..=g.horizon).contains(s)) {
            bail!("params.times must lie in [0, T]");
        }
        let cells = self.sweep.cells();
        if cells > self.output.cell_budget {
            bail!("sweep has {cells} cells, above output.cell_budget = {}", self.output.cell_budget);
        }
        Ok(())
    }
}
