use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use attn_ib::datagen::{bad_direction_instance, gd_counterexample, gen_dm, gen_orthogonal, init_params, DmGenConfig, InitMode, OrthoGenConfig};
use attn_ib::harness::{self, CheckKind, ExperimentSpec};
use attn_ib::metrics::{References, TrainMode};
use attn_ib::model::TokenDataset;
use attn_ib::optim::{train_with_mode, StepSizeRule, TrainConfig, TrainError};
use attn_ib::svm::{solve_u_svm, solve_w_svm, SvmOptions};
use attn_ib::{Error, Result};

#[derive(Parser)]
#[command(name = "attn-ib", version, about = "Implicit-bias experiments for single-layer self-attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset as JSON.
    Generate(GenerateArgs),
    /// Solve the W or u max-margin problem for a dataset.
    SolveSvm(SolveArgs),
    /// Train one rule on one dataset and export the trace.
    Train(TrainArgs),
    /// Recompute the property checks of an exported run.
    Check(CheckArgs),
    /// Run a preset or spec file end to end.
    Run(RunArgs),
    /// List presets, or print one as JSON.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Orthogonal,
    Dm,
    Counterexample,
    BadDirection,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    source: Source,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long = "T", default_value_t = 6)]
    t: usize,
    #[arg(long, default_value_t = 100)]
    d: usize,
    /// Signal strength `U` of the near-orthogonal model.
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Problem {
    W,
    U,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Problem::W)]
    problem: Problem,
    #[arg(long, default_value_t = 1e-8)]
    kkt_tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleKind {
    Gd,
    Ngd,
    NgdDecayed,
    Polyak,
    NgdMomentum,
}

#[derive(Args)]
struct RuleArgs {
    #[arg(long, value_enum, default_value_t = RuleKind::Ngd)]
    rule: RuleKind,
    #[arg(long, default_value_t = 0.025)]
    eta: f64,
    #[arg(long)]
    eta_max: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    p_u: f64,
    #[arg(long, default_value_t = 1.0)]
    p_w: f64,
    #[arg(long, default_value_t = 1.0)]
    eta_scale: f64,
}

impl RuleArgs {
    fn rule(&self) -> StepSizeRule {
        match self.rule {
            RuleKind::Gd => StepSizeRule::Gd { eta: self.eta },
            RuleKind::Ngd => StepSizeRule::Ngd { eta: self.eta, eta_max: self.eta_max },
            RuleKind::NgdDecayed => StepSizeRule::NgdDecayed { eta: self.eta, p_u: self.p_u, p_w: self.p_w },
            RuleKind::Polyak => StepSizeRule::Polyak { eta_scale: self.eta_scale, eta_max: self.eta_max.unwrap_or(self.eta) },
            RuleKind::NgdMomentum => StepSizeRule::NgdMomentum { eta: self.eta, beta: self.beta, eta_max: self.eta_max },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    WOnly,
    Joint,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::WOnly => TrainMode::WOnly,
            Mode::Joint => TrainMode::Joint,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    rule: RuleArgs,
    #[arg(long, value_enum, default_value_t = Mode::WOnly)]
    mode: Mode,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 1)]
    stride: u64,
    /// Gaussian initialization scale; zero initialization when absent.
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving trace.csv and diag.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// A run directory written by `run`.
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "fig2")]
    preset: String,
    /// JSON spec; takes precedence over the preset and every flag below.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    stride: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    d_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    bounds: Option<Vec<String>>,
    /// Adds the per-step property checks.
    #[arg(long)]
    properties: bool,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Output root; defaults to $ATTN_IB_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent runs; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        if let Some(path) = &self.spec {
            return harness::read_json(path);
        }
        let mut s = harness::preset(&self.preset)?;
        if let Some(v) = &self.name {
            s.name = v.clone();
        }
        if let Some(v) = self.steps {
            s.steps = v;
        }
        if let Some(v) = self.stride {
            s.stride = v;
        }
        if let Some(v) = &self.seeds {
            s.seeds = v.clone();
        }
        if let Some(v) = &self.d_grid {
            s.d_grid = v.clone();
        }
        if let Some(v) = &self.bounds {
            s.bounds = v.clone();
        }
        if self.properties && !s.checks.contains(&CheckKind::Properties) {
            s.checks.push(CheckKind::Properties);
        }
        if let Some(v) = self.epsilon {
            s.epsilon = v;
        }
        if let Some(v) = &self.out {
            s.output_dir = Some(v.clone());
        }
        Ok(s)
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let ds = match a.source {
        Source::Orthogonal => gen_orthogonal(&OrthoGenConfig { n: a.n, t: a.t, d: a.d, signal: a.signal, sigma: a.sigma, rho: a.rho, seed: a.seed })?,
        Source::Dm => {
            let (ds, bad) = gen_dm(&DmGenConfig { n: a.n, t: a.t, d: a.d, alpha: a.alpha, rho: a.rho, seed: a.seed, u_star: None })?;
            if !bad.is_empty() {
                eprintln!("warning: samples {bad:?} violate the optimal-token definition");
            }
            ds
        }
        Source::Counterexample => gd_counterexample(),
        Source::BadDirection => bad_direction_instance().0,
    };
    match &a.out {
        Some(p) => harness::write_json(p, &ds),
        None => print_json(&ds),
    }
}

fn solve(a: &SolveArgs) -> Result<()> {
    let ds: TokenDataset = harness::read_json(&a.data)?;
    let opts = SvmOptions { kkt_tol: a.kkt_tol, ..SvmOptions::default() };
    let sol = match a.problem {
        Problem::W => solve_w_svm(&ds, &opts)?,
        Problem::U => solve_u_svm(&ds, &opts)?,
    };
    print_json(&sol)
}

fn train(a: &TrainArgs) -> Result<()> {
    let ds: TokenDataset = harness::read_json(&a.data)?;
    let rule = a.rule.rule();
    rule.validate()?;
    let sol = solve_w_svm(&ds, &SvmOptions::default())?;
    let mode: TrainMode = a.mode.into();
    let refs = References {
        w_mm: sol.matrix(),
        u_mm: if mode == TrainMode::Joint { solve_u_svm(&ds, &SvmOptions::default())?.vector().map(<[f64]>::to_vec) } else { None },
    };
    let init_mode = match a.sigma0 {
        Some(sigma0) => InitMode::Gaussian { sigma0 },
        None => InitMode::Zero,
    };
    let init = init_params(ds.dim(), &init_mode, a.seed)?;
    let cfg = TrainConfig::new(rule, a.steps, mode).stride(a.stride);
    let trace = match train_with_mode(&ds, &init, &cfg, &refs) {
        Ok(t) => t,
        Err(TrainError::Setup(e)) => return Err(e),
        Err(TrainError::Diverged { trace, t, reason }) => {
            eprintln!("diverged at step {t}: {reason}");
            *trace
        }
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    harness::export_trace(&trace.records, ds.n(), &a.out)?;
    eprintln!("{:?} after {:.2}s, {} records", trace.termination, trace.wall_clock_secs, trace.records.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Generate(a) => generate(a).map(|_| true),
        Cmd::SolveSvm(a) => solve(a).map(|_| true),
        Cmd::Train(a) => train(a).map(|_| true),
        Cmd::Check(a) => harness::recheck(&a.run_dir).and_then(|r| print_json(&r.checks).map(|_| r.pass())),
        Cmd::Run(a) => a.spec().and_then(|s| harness::run(&s, a.threads)).map(|m| {
            for r in &m.runs {
                let status = match (&r.error, &r.checks) {
                    (Some(e), _) => format!("error: {e}"),
                    (None, Some(c)) if !c.pass() => "checks failed".into(),
                    _ => "ok".into(),
                };
                println!("{:<32} {:>8.2}s  {status}", r.id, r.wall_clock_secs);
            }
            for c in &m.checks {
                println!("check {:<12} {}  {}", c.name, if c.pass { "pass" } else { "FAIL" }, c.detail);
            }
            for p in &m.sweep {
                println!("d={:<6} near-orthogonality pass rate {:.2} ({}/{})", p.d, p.orth_rate, p.orth_pass, p.runs);
            }
            println!("manifest: {}", m.output_dir.join(harness::MANIFEST_FILE).display());
            m.pass
        }),
        Cmd::Presets { show: Some(name) } => harness::preset(name).and_then(|p| print_json(&p)).map(|_| true),
        Cmd::Presets { show: None } => {
            for p in harness::presets() {
                println!("{:<18} {} rule(s), {} seed(s), {} steps", p.name, p.rules.len(), p.seeds.len(), p.steps);
            }
            Ok(true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
