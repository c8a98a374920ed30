//! Declarative experiment runner: presets, seeded multi-run orchestration
//! and trace/report export.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    bad_direction_instance, check_assumptions, joint_step_bound, gd_counterexample, gen_dm, gen_orthogonal, init_params, small_init_sigma0,
    AssumptionReport, DmCheckConfig, DmGenConfig, InitMode, OrthoGenConfig, DEFAULT_C_PRIME,
};
use crate::error::{Error, Result};
use crate::metrics::{
    bound_curve, property_checks, read_diag_csv, read_trace_csv, ngd_rate_start, joint_alignment_start, write_bounds_csv, write_diag_csv, write_trace_csv,
    BoundSetting, CheckConfig, CheckReport, References, TraceRecord, TrainMode, BOUND_NAMES,
};
use crate::model::{ModelParams, TokenDataset};
use crate::numerics::Matrix;
use crate::optim::{train_with_mode, StepSizeRule, Termination, Trace, TrainConfig, TrainError};
use crate::svm::{derived_constants, solve_u_svm, solve_w_svm, w_svm_norm, DerivedConstants, SvmOptions};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ATTN_IB_OUT";
pub const DEFAULT_OUT: &str = "runs";

pub const TRACE_FILE: &str = "trace.csv";
pub const DIAG_FILE: &str = "diag.csv";
pub const BOUNDS_FILE: &str = "bounds.csv";
pub const CHECKS_FILE: &str = "checks.json";
pub const CHECK_CONFIG_FILE: &str = "check_config.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Keeps the initialization stream apart from the data stream of a seed.
const INIT_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Near-orthogonal tokens; the run seed replaces `seed`.
    Orthogonal(OrthoGenConfig),
    /// Gaussian data model; the run seed replaces `seed`.
    Dm(DmGenConfig),
    File { path: PathBuf },
    Counterexample,
    BadDirection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    #[default]
    Zero,
    Gaussian { sigma0: f64 },
    /// Gaussian with the largest scale keeping every optimal score above
    /// `1/(kT)` for base rate `eta`.
    SmallGaussian {
        k: f64,
        eta: f64,
        #[serde(default = "default_c_prime")]
        c_prime: f64,
    },
    Explicit { w: Matrix },
    /// The initialization shipped with the data source.
    Instance,
}

fn default_c_prime() -> f64 {
    DEFAULT_C_PRIME
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckKind {
    /// Invariants along each trace.
    Properties,
    /// Per seed, final NGD alignment error below the GD one.
    NgdFaster,
    /// Near-orthogonality and equal-score assumptions.
    Assumptions,
    /// Final optimal softmax and alignment above thresholds.
    Recovery { min_opt_softmax: f64, alignment: f64 },
}

impl CheckKind {
    pub fn name(&self) -> &'static str {
        match self {
            CheckKind::Properties => "properties",
            CheckKind::NgdFaster => "ngd_faster",
            CheckKind::Assumptions => "assumptions",
            CheckKind::Recovery { .. } => "recovery",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub data: DataSource,
    #[serde(default)]
    pub init: InitSpec,
    pub mode: TrainMode,
    pub rules: Vec<StepSizeRule>,
    pub steps: u64,
    #[serde(default = "one")]
    pub stride: u64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub checks: Vec<CheckKind>,
    #[serde(default)]
    pub bounds: Vec<String>,
    /// Overrides the generator dimension, one group of runs per value.
    #[serde(default)]
    pub d_grid: Vec<usize>,
    /// `ε` of the cone and joint alignment bounds.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Evaluate data assumptions only; no reference matrix, no training.
    #[serde(default)]
    pub assumptions_only: bool,
}

fn one() -> u64 {
    1
}

fn default_epsilon() -> f64 {
    0.25
}

impl ExperimentSpec {
    /// Lists every invalid field at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bad.push("name: must be a nonempty path component".to_string());
        }
        if self.rules.is_empty() {
            bad.push("rules: at least one rule is required".into());
        }
        for (i, r) in self.rules.iter().enumerate() {
            if let Err(e) = r.validate() {
                bad.push(format!("rules[{i}]: {e}"));
            }
        }
        if self.seeds.is_empty() {
            bad.push("seeds: at least one seed is required".into());
        }
        if self.stride == 0 {
            bad.push("stride: must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            bad.push("epsilon: must lie in (0, 1)".into());
        }
        for b in &self.bounds {
            if !BOUND_NAMES.contains(&b.as_str()) {
                bad.push(format!("bounds: unknown bound `{b}`"));
            }
        }
        if !self.d_grid.is_empty() && !matches!(self.data, DataSource::Orthogonal(_) | DataSource::Dm(_)) {
            bad.push("d_grid: needs a generated data source".into());
        }
        if self.d_grid.contains(&0) {
            bad.push("d_grid: dimensions must be positive".into());
        }
        if matches!(self.init, InitSpec::Instance) && !matches!(self.data, DataSource::BadDirection) {
            bad.push("init: `instance` needs a source that ships an initialization".into());
        }
        if self.checks.contains(&CheckKind::NgdFaster) {
            let has = |f: fn(&StepSizeRule) -> bool| self.rules.iter().any(f);
            if !has(|r| matches!(r, StepSizeRule::Gd { .. })) || !has(|r| matches!(r, StepSizeRule::Ngd { .. })) {
                bad.push("checks: `ngd_faster` needs a gd and an ngd rule".into());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn dims(&self) -> Vec<Option<usize>> {
        if self.d_grid.is_empty() {
            vec![None]
        } else {
            self.d_grid.iter().copied().map(Some).collect()
        }
    }

    /// Output root: the spec's directory, else `$ATTN_IB_OUT`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

/// Named experiment specs.
pub fn presets() -> Vec<ExperimentSpec> {
    let fig2_data = DataSource::Orthogonal(OrthoGenConfig { n: 20, t: 6, d: 100, signal: 1.0, sigma: 0.0, rho: 0.05, seed: 0 });
    let fig3_data = DataSource::Dm(DmGenConfig { n: 10, t: 2, d: 100, alpha: 3.0, rho: 0.1, seed: 0, u_star: None });
    vec![
        ExperimentSpec {
            name: "fig2".into(),
            data: fig2_data.clone(),
            init: InitSpec::Zero,
            mode: TrainMode::WOnly,
            rules: vec![
                StepSizeRule::Gd { eta: 0.25 },
                StepSizeRule::Ngd { eta: 0.025, eta_max: Some(100.0) },
                StepSizeRule::NgdMomentum { eta: 0.025, beta: 0.9, eta_max: Some(100.0) },
                StepSizeRule::Polyak { eta_scale: 1.0, eta_max: 10.0 },
            ],
            steps: 10_000,
            stride: 10,
            seeds: vec![0],
            output_dir: None,
            checks: vec![],
            bounds: ["softmax_saturation", "norm_lower", "norm_upper", "ngd_alignment"].map(String::from).to_vec(),
            d_grid: vec![],
            epsilon: default_epsilon(),
            assumptions_only: false,
        },
        ExperimentSpec {
            name: "fig3".into(),
            data: fig3_data,
            init: InitSpec::Zero,
            mode: TrainMode::Joint,
            rules: vec![
                StepSizeRule::Gd { eta: 0.02 },
                StepSizeRule::Ngd { eta: 0.002, eta_max: None },
                StepSizeRule::Polyak { eta_scale: 1.0, eta_max: 10.0 },
                StepSizeRule::NgdDecayed { eta: 0.002, p_u: 2.0 / 3.0, p_w: 1.0 },
            ],
            steps: 10_000,
            stride: 10,
            seeds: vec![0],
            output_dir: None,
            checks: vec![],
            bounds: ["joint_loss", "joint_margin", "u_norm_upper", "token_gap_lower"].map(String::from).to_vec(),
            d_grid: vec![],
            epsilon: default_epsilon(),
            assumptions_only: false,
        },
        ExperimentSpec {
            name: "counterexample".into(),
            data: DataSource::Counterexample,
            init: InitSpec::SmallGaussian { k: 2.0, eta: 0.025, c_prime: DEFAULT_C_PRIME },
            mode: TrainMode::WOnly,
            rules: vec![StepSizeRule::Gd { eta: 0.25 }, StepSizeRule::Ngd { eta: 0.025, eta_max: None }],
            steps: 10_000,
            stride: 1,
            seeds: vec![0],
            output_dir: None,
            checks: vec![CheckKind::NgdFaster],
            bounds: ["gd_counterexample_alignment", "norm_lower", "norm_upper"].map(String::from).to_vec(),
            d_grid: vec![],
            epsilon: default_epsilon(),
            assumptions_only: false,
        },
        ExperimentSpec {
            name: "bad_init".into(),
            data: DataSource::BadDirection,
            init: InitSpec::Instance,
            mode: TrainMode::WOnly,
            rules: vec![StepSizeRule::Gd { eta: 1.0 }],
            steps: 10_000,
            stride: 1,
            seeds: vec![0],
            output_dir: None,
            checks: vec![CheckKind::Recovery { min_opt_softmax: 0.9, alignment: 0.95 }],
            bounds: vec![],
            d_grid: vec![],
            epsilon: default_epsilon(),
            assumptions_only: false,
        },
        ExperimentSpec {
            name: "assumption_sweep".into(),
            data: DataSource::Orthogonal(OrthoGenConfig { n: 2, t: 2, d: 100, signal: 1.0, sigma: 0.0, rho: 0.001, seed: 0 }),
            init: InitSpec::Zero,
            mode: TrainMode::WOnly,
            rules: vec![StepSizeRule::Ngd { eta: 0.025, eta_max: None }],
            steps: 0,
            stride: 1,
            seeds: (0..20).collect(),
            output_dir: None,
            checks: vec![],
            bounds: vec![],
            d_grid: vec![256, 1024, 4096, 16384, 65536],
            epsilon: default_epsilon(),
            assumptions_only: true,
        },
    ]
}

pub fn preset(name: &str) -> Result<ExperimentSpec> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
}

/// Dataset plus the initialization it ships with, if any.
pub fn load_data(source: &DataSource, seed: u64, d: Option<usize>) -> Result<(TokenDataset, Option<Matrix>)> {
    Ok(match source {
        DataSource::Orthogonal(cfg) => {
            let cfg = OrthoGenConfig { seed, d: d.unwrap_or(cfg.d), ..cfg.clone() };
            (gen_orthogonal(&cfg)?, None)
        }
        DataSource::Dm(cfg) => {
            let cfg = DmGenConfig { seed, d: d.unwrap_or(cfg.d), ..cfg.clone() };
            (gen_dm(&cfg)?.0, None)
        }
        DataSource::File { path } => (read_json(path)?, None),
        DataSource::Counterexample => (gd_counterexample(), None),
        DataSource::BadDirection => {
            let (ds, w) = bad_direction_instance();
            (ds, Some(w))
        }
    })
}

fn init_for(spec: &InitSpec, ds: &TokenDataset, c: Option<&DerivedConstants>, shipped: Option<Matrix>, seed: u64) -> Result<ModelParams> {
    let mode = match spec {
        InitSpec::Zero => InitMode::Zero,
        InitSpec::Gaussian { sigma0 } => InitMode::Gaussian { sigma0: *sigma0 },
        InitSpec::SmallGaussian { k, eta, c_prime } => {
            let c = c.ok_or(Error::MissingConstant("Lambda"))?;
            let sigma0 = small_init_sigma0(c.b, ds.dim(), ds.seq_len(), *k, *eta, c.lambda, *c_prime);
            InitMode::Gaussian { sigma0 }
        }
        InitSpec::Explicit { w } => InitMode::Explicit { w: w.clone() },
        InitSpec::Instance => InitMode::Explicit { w: shipped.ok_or_else(|| Error::Config("data source ships no initialization".into()))? },
    };
    init_params(ds.dim(), &mode, seed ^ INIT_SEED_MIX)
}

/// Check configuration implied by a rule and data source.
pub fn check_config(spec: &ExperimentSpec, rule: &StepSizeRule, ass: Option<&AssumptionReport>) -> CheckConfig {
    let mut cfg = CheckConfig::new(spec.mode, rule.eta());
    cfg.ngd = matches!(rule, StepSizeRule::Ngd { eta_max: None, .. });
    cfg.decayed = matches!(rule, StepSizeRule::NgdDecayed { .. });
    cfg.epsilon = spec.epsilon;
    cfg.equal_scores = ass.is_some_and(|a| a.equal_scores_pass);
    if let DataSource::Dm(g) = &spec.data {
        cfg.dm = Some(DmCheckConfig::new(g.alpha, g.rho, rule.eta()));
    }
    cfg
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub rule_index: usize,
    pub rule: StepSizeRule,
    pub seed: u64,
    pub d: usize,
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub termination: Option<Termination>,
    pub error: Option<String>,
    pub wall_clock_secs: f64,
    pub lambda: Option<f64>,
    pub gamma_bar: Option<f64>,
    pub assumptions: Option<AssumptionReport>,
    pub checks: Option<CheckReport>,
    /// Bounds whose constants were unavailable, with the reason.
    pub bounds_missing: Vec<(String, String)>,
    pub final_align_err: Option<f64>,
    pub final_min_opt_softmax: Option<f64>,
    pub final_align_w: Option<f64>,
}

impl RunSummary {
    fn failed(&self) -> bool {
        self.error.is_some() || matches!(self.termination, Some(Termination::Diverged { .. }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub d: usize,
    pub runs: usize,
    pub orth_pass: usize,
    pub equal_scores_pass: usize,
    pub orth_rate: f64,
    #[serde(with = "crate::numerics::json_f64")]
    pub min_clause1_ratio: f64,
    #[serde(with = "crate::numerics::json_f64")]
    pub min_clause2_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: ExperimentSpec,
    pub crate_version: String,
    pub trace_format: String,
    pub output_dir: PathBuf,
    pub runs: Vec<RunSummary>,
    pub checks: Vec<ExperimentCheck>,
    pub sweep: Vec<SweepPoint>,
    pub wall_clock_secs: f64,
    pub pass: bool,
}

impl RunManifest {
    /// Process exit code: nonzero iff a requested check failed or a run errored.
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

/// Runs every `(d, rule, seed)` combination and writes the manifest.
/// `threads = None` uses the available parallelism.
pub fn run(spec: &ExperimentSpec, threads: Option<usize>) -> Result<RunManifest> {
    spec.validate()?;
    let start = Instant::now();
    let root = spec.output_root().join(&spec.name);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;

    let mut jobs = Vec::new();
    for d in spec.dims() {
        for (ri, rule) in spec.rules.iter().enumerate() {
            for &seed in &spec.seeds {
                jobs.push((d, ri, rule, seed));
            }
        }
    }
    let exec = |jobs: &[(Option<usize>, usize, &StepSizeRule, u64)]| -> Vec<RunSummary> {
        jobs.par_iter().map(|&(d, ri, rule, seed)| run_one(spec, &root, d, ri, rule, seed)).collect()
    };
    let runs = match threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| exec(&jobs)),
        None => exec(&jobs),
    };

    let checks = experiment_checks(spec, &runs);
    let sweep = sweep_summary(spec, &runs);
    let pass = runs.iter().all(|r| !r.failed()) && checks.iter().all(|c| c.pass);
    let manifest = RunManifest {
        spec: spec.clone(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        trace_format: "csv-v1".into(),
        output_dir: root.clone(),
        runs,
        checks,
        sweep,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        pass,
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn run_id(d: Option<usize>, ri: usize, rule: &StepSizeRule, seed: u64) -> String {
    match d {
        Some(d) => format!("d{d}_r{ri}_{}_s{seed}", rule.label()),
        None => format!("r{ri}_{}_s{seed}", rule.label()),
    }
}

fn run_one(spec: &ExperimentSpec, root: &Path, d: Option<usize>, ri: usize, rule: &StepSizeRule, seed: u64) -> RunSummary {
    let id = run_id(d, ri, rule, seed);
    let dir = root.join(&id);
    let start = Instant::now();
    let mut s = RunSummary {
        id,
        rule_index: ri,
        rule: rule.clone(),
        seed,
        d: d.unwrap_or(0),
        dir: dir.clone(),
        files: vec![],
        termination: None,
        error: None,
        wall_clock_secs: 0.0,
        lambda: None,
        gamma_bar: None,
        assumptions: None,
        checks: None,
        bounds_missing: vec![],
        final_align_err: None,
        final_min_opt_softmax: None,
        final_align_w: None,
    };
    if let Err(e) = execute(spec, &dir, d, rule, seed, &mut s) {
        s.error = Some(e.to_string());
    }
    s.wall_clock_secs = start.elapsed().as_secs_f64();
    s
}

fn execute(spec: &ExperimentSpec, dir: &Path, d: Option<usize>, rule: &StepSizeRule, seed: u64, s: &mut RunSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (ds, shipped) = load_data(&spec.data, seed, d)?;
    s.d = ds.dim();
    write_json(&dir.join(DATASET_FILE), &ds)?;
    s.files.push(dir.join(DATASET_FILE));
    if spec.assumptions_only {
        let opts = SvmOptions { seed, ..SvmOptions::default() };
        if let Some(lambda) = w_svm_norm(&ds, &opts)? {
            let c = derived_constants(&ds, lambda)?;
            s.lambda = Some(lambda);
            s.assumptions = Some(check_assumptions(&ds, &c, dm_config(spec, &ds).as_ref()));
        }
        return Ok(());
    }
    let opts = SvmOptions { seed, ..SvmOptions::default() };
    let wsol = solve_w_svm(&ds, &opts)?;
    let consts = if wsol.feasible { Some(derived_constants(&ds, wsol.norm)?) } else { None };
    s.lambda = consts.as_ref().map(|c| c.lambda);
    let usol = solve_u_svm(&ds, &opts)?;
    s.gamma_bar = usol.feasible.then_some(usol.margin);
    s.assumptions = consts.as_ref().map(|c| check_assumptions(&ds, c, dm_config(spec, &ds).as_ref()));

    let refs = References {
        w_mm: wsol.matrix(),
        u_mm: if spec.mode == TrainMode::Joint { usol.vector().map(<[f64]>::to_vec) } else { None },
    };
    let init = init_for(&spec.init, &ds, consts.as_ref(), shipped, seed)?;
    let cfg = TrainConfig::new(rule.clone(), spec.steps, spec.mode).stride(spec.stride);
    let trace = match train_with_mode(&ds, &init, &cfg, &refs) {
        Ok(t) => t,
        Err(TrainError::Setup(e)) => return Err(e),
        Err(TrainError::Diverged { trace, .. }) => *trace,
    };
    s.termination = Some(trace.termination.clone());
    if let Some(last) = trace.records.last() {
        s.final_align_err = last.diag.align_err;
        s.final_align_w = last.align_w;
        s.final_min_opt_softmax = Some(last.min_opt_softmax);
    }

    export_trace(&trace.records, ds.n(), dir)?;
    s.files.extend([dir.join(TRACE_FILE), dir.join(DIAG_FILE)]);

    if let Some(c) = &consts {
        if !spec.bounds.is_empty() {
            let setting = bound_setting(spec, &ds, c, rule.eta(), &trace, &init, usol.feasible.then_some(usol.margin));
            let mut curves = Vec::new();
            for name in &spec.bounds {
                match bound_curve(name, c, rule.eta(), &setting) {
                    Ok(cv) => curves.push(cv),
                    Err(e) => s.bounds_missing.push((name.clone(), e.to_string())),
                }
            }
            let steps: Vec<u64> = trace.records.iter().map(|r| r.t).collect();
            let path = dir.join(BOUNDS_FILE);
            write_bounds_csv(&curves, &steps, create(&path)?)?;
            s.files.push(path);
        }
        if spec.checks.contains(&CheckKind::Properties) {
            let cc = check_config(spec, rule, s.assumptions.as_ref());
            let report = property_checks(&trace.records, &ds, c, &cc);
            write_json(&dir.join(CHECK_CONFIG_FILE), &cc)?;
            write_json(&dir.join(CHECKS_FILE), &report.checks)?;
            s.files.extend([dir.join(CHECK_CONFIG_FILE), dir.join(CHECKS_FILE)]);
            s.checks = Some(report);
        }
    }
    Ok(())
}

/// Joint-training condition at its largest admissible step size.
fn dm_config(spec: &ExperimentSpec, ds: &TokenDataset) -> Option<DmCheckConfig> {
    match &spec.data {
        DataSource::Dm(g) => Some(DmCheckConfig::new(g.alpha, g.rho, joint_step_bound(g.alpha, g.rho, ds.n(), ds.dim()))),
        _ => None,
    }
}

fn bound_setting(
    spec: &ExperimentSpec,
    ds: &TokenDataset,
    c: &DerivedConstants,
    eta: f64,
    trace: &Trace,
    init: &ModelParams,
    gamma_bar: Option<f64>,
) -> BoundSetting {
    let at = |t0: f64| trace.records.iter().find(|r| r.t as f64 >= t0);
    let w_at_t0 = ngd_rate_start(c, eta, ds.n(), ds.seq_len()).ok().and_then(at).and_then(|r| r.align_w.map(|a| (r.w_norm, a * r.w_norm)));
    let dm = match &spec.data {
        DataSource::Dm(g) => Some(DmCheckConfig::new(g.alpha, g.rho, eta)),
        _ => None,
    };
    let mut s = BoundSetting {
        n: ds.n(),
        t: ds.seq_len(),
        d: ds.dim(),
        w_at_t0,
        w_at_teps: None,
        epsilon: Some(spec.epsilon),
        gamma_bar,
        dm,
        w0_offdiag_sq: matches!(spec.data, DataSource::Counterexample).then(|| {
            let w = &init.w;
            w.frob_norm().powi(2) - w.get(0, 0).powi(2)
        }),
        joint_c: None,
    };
    s.w_at_teps = joint_alignment_start(c, eta, spec.epsilon, &s).ok().and_then(at).and_then(|r| r.align_w.map(|a| (r.w_norm, a, r.loss)));
    s
}

fn experiment_checks(spec: &ExperimentSpec, runs: &[RunSummary]) -> Vec<ExperimentCheck> {
    let mut out = Vec::new();
    for kind in &spec.checks {
        let (pass, detail) = match kind {
            CheckKind::Properties => {
                let failing: Vec<String> = runs
                    .iter()
                    .filter_map(|r| match &r.checks {
                        Some(c) if c.pass() => None,
                        Some(c) => Some(format!(
                            "{}: {}",
                            r.id,
                            c.checks.iter().filter(|k| !k.pass).map(|k| k.check_name.as_str()).collect::<Vec<_>>().join(",")
                        )),
                        None => Some(format!("{}: not evaluated", r.id)),
                    })
                    .collect();
                (failing.is_empty(), failing.join("; "))
            }
            CheckKind::NgdFaster => {
                let mut notes = Vec::new();
                let mut pass = true;
                for d in spec.dims() {
                    for &seed in &spec.seeds {
                        let err = |gd: bool| {
                            runs.iter()
                                .filter(|r| r.seed == seed && d.is_none_or(|d| r.d == d))
                                .filter(|r| matches!(r.rule, StepSizeRule::Gd { .. }) == gd && matches!(r.rule, StepSizeRule::Ngd { .. }) != gd)
                                .filter_map(|r| r.final_align_err)
                                .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| if gd { m.min(e) } else { m.max(e) })))
                        };
                        match (err(true), err(false)) {
                            (Some(g), Some(n)) => {
                                pass &= n < g;
                                notes.push(format!("seed {seed}: gd {g:.3e} ngd {n:.3e}"));
                            }
                            _ => {
                                pass = false;
                                notes.push(format!("seed {seed}: alignment unavailable"));
                            }
                        }
                    }
                }
                (pass, notes.join("; "))
            }
            CheckKind::Assumptions => {
                let failing: Vec<&str> = runs
                    .iter()
                    .filter(|r| !r.assumptions.as_ref().is_some_and(|a| a.orth_pass() && a.equal_scores_pass))
                    .map(|r| r.id.as_str())
                    .collect();
                (failing.is_empty(), failing.join(","))
            }
            CheckKind::Recovery { min_opt_softmax, alignment } => {
                let failing: Vec<String> = runs
                    .iter()
                    .filter(|r| !(r.final_min_opt_softmax.is_some_and(|s| s > *min_opt_softmax) && r.final_align_w.is_some_and(|a| a > *alignment)))
                    .map(|r| format!("{}: softmax {:?} alignment {:?}", r.id, r.final_min_opt_softmax, r.final_align_w))
                    .collect();
                (failing.is_empty(), failing.join("; "))
            }
        };
        out.push(ExperimentCheck { name: kind.name().into(), pass, detail });
    }
    out
}

fn sweep_summary(spec: &ExperimentSpec, runs: &[RunSummary]) -> Vec<SweepPoint> {
    if spec.d_grid.is_empty() {
        return vec![];
    }
    // rules share the data, so one report per (d, seed)
    spec.d_grid
        .iter()
        .map(|&d| {
            let reps: Vec<&AssumptionReport> = runs
                .iter()
                .filter(|r| r.d == d && r.rule_index == 0)
                .filter_map(|r| r.assumptions.as_ref())
                .collect();
            let orth = reps.iter().filter(|a| a.orth_pass()).count();
            let min_ratio = |f: fn(&AssumptionReport) -> f64| reps.iter().map(|a| f(a)).fold(f64::INFINITY, f64::min);
            SweepPoint {
                d,
                runs: reps.len(),
                orth_pass: orth,
                equal_scores_pass: reps.iter().filter(|a| a.equal_scores_pass).count(),
                orth_rate: if reps.is_empty() { 0.0 } else { orth as f64 / reps.len() as f64 },
                min_clause1_ratio: min_ratio(|a| a.orth_clause1.min_ratio),
                min_clause2_ratio: min_ratio(|a| a.orth_clause2.min_ratio),
            }
        })
        .collect()
}

/// Trace and diagnostics CSVs into `dir`.
pub fn export_trace(records: &[TraceRecord], n: usize, dir: &Path) -> Result<()> {
    write_trace_csv(records, create(&dir.join(TRACE_FILE))?)?;
    write_diag_csv(records, n, create(&dir.join(DIAG_FILE))?)
}

/// Reads a run directory's trace with its diagnostics attached.
pub fn load_trace(dir: &Path) -> Result<Vec<TraceRecord>> {
    let mut records = read_trace_csv(open(&dir.join(TRACE_FILE))?)?;
    let diag = dir.join(DIAG_FILE);
    if diag.exists() {
        read_diag_csv(open(&diag)?, &mut records)?;
    }
    Ok(records)
}

/// Recomputes a run's property checks from its exported files.
pub fn recheck(dir: &Path) -> Result<CheckReport> {
    let ds: TokenDataset = read_json(&dir.join(DATASET_FILE))?;
    let cfg: CheckConfig = read_json(&dir.join(CHECK_CONFIG_FILE))?;
    let records = load_trace(dir)?;
    let sol = solve_w_svm(&ds, &SvmOptions::default())?;
    if !sol.feasible {
        return Err(Error::InvalidInput("reference SVM is infeasible".into()));
    }
    let c = derived_constants(&ds, sol.norm)?;
    Ok(property_checks(&records, &ds, &c, &cfg))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}
