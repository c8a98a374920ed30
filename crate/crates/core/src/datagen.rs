//! Synthetic instances, assumption validators and parameter initializers.
//!
//! Every generator draws from a `ChaCha20Rng` seeded by its config.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, TokenDataset};
use crate::numerics::{dot, norm, Matrix};
use crate::svm::DerivedConstants;

pub type Rng64 = ChaCha20Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha20Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut Rng64, out: &mut [f64], scale: f64) {
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
}

/// Near-orthogonal tokens: `x_opt = μ_y + ν`, other tokens pure noise, with
/// `μ₊ = U e₁`, `μ₋ = U e₂` and all noise confined to the complement of
/// span(e₁, e₂).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoGenConfig {
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    #[serde(rename = "U")]
    pub signal: f64,
    pub sigma: f64,
    pub rho: f64,
    pub seed: u64,
}

pub fn gen_orthogonal(cfg: &OrthoGenConfig) -> Result<TokenDataset> {
    if cfg.d < 2 || cfg.n == 0 || cfg.t == 0 {
        return Err(Error::Config("orthogonal generator needs n, T ≥ 1 and d ≥ 2".into()));
    }
    if !(cfg.signal > 0.0) || !(cfg.sigma >= 0.0) || !(cfg.rho >= 0.0) {
        return Err(Error::Config("need U > 0 and sigma, rho ≥ 0".into()));
    }
    let mut r = rng(cfg.seed);
    for attempt in 0..2 {
        let (n, t, d) = (cfg.n, cfg.t, cfg.d);
        let mut tokens = vec![0.0; n * t * d];
        let mut labels = Vec::with_capacity(n);
        let mut opt = Vec::with_capacity(n);
        for block in tokens.chunks_mut(t * d) {
            let y = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            let o = r.random_range(0..t);
            for (tau, tok) in block.chunks_mut(d).enumerate() {
                gaussian(&mut r, tok, if tau == o { cfg.sigma } else { cfg.rho });
                tok[0] = 0.0;
                tok[1] = 0.0;
                if tau == o {
                    tok[if y > 0.0 { 0 } else { 1 }] = cfg.signal;
                }
            }
            labels.push(y);
            opt.push(o);
        }
        let mut u_star = vec![0.0; d];
        u_star[0] = 1.0 / cfg.signal;
        u_star[1] = -1.0 / cfg.signal;
        let ds = TokenDataset::new(t, d, tokens, labels, u_star, opt)?;
        match ds.opt_violations().first() {
            None => return Ok(ds),
            Some(&i) if attempt == 1 => {
                return Err(Error::NonUniqueOpt { sample: i, gap: 0.0 });
            }
            Some(_) => {}
        }
    }
    unreachable!()
}

/// Gaussian model: one optimal token with scale `αρ`, the rest with scale
/// `ρ`, label `sign(u★ᵀ x_opt)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmGenConfig {
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub alpha: f64,
    pub rho: f64,
    pub seed: u64,
    /// Defaults to `e₁`.
    #[serde(default)]
    pub u_star: Option<Vec<f64>>,
}

/// Returns the dataset and the samples whose sampled optimal token is not
/// the strict argmax of `y X u★`.
pub fn gen_dm(cfg: &DmGenConfig) -> Result<(TokenDataset, Vec<usize>)> {
    if cfg.n == 0 || cfg.t == 0 || cfg.d == 0 {
        return Err(Error::Config("n, T and d must be positive".into()));
    }
    if !(cfg.alpha > 1.0) || !(cfg.rho > 0.0) {
        return Err(Error::Config("need alpha > 1 and rho > 0".into()));
    }
    let (n, t, d) = (cfg.n, cfg.t, cfg.d);
    let u_star = match &cfg.u_star {
        Some(u) if u.len() == d && norm(u) > 0.0 => u.clone(),
        Some(_) => return Err(Error::Config("u_star must be a nonzero vector of length d".into())),
        None => {
            let mut e = vec![0.0; d];
            e[0] = 1.0;
            e
        }
    };
    let mut r = rng(cfg.seed);
    let mut tokens = vec![0.0; n * t * d];
    let mut labels = Vec::with_capacity(n);
    let mut opt = Vec::with_capacity(n);
    for block in tokens.chunks_mut(t * d) {
        let o = r.random_range(0..t);
        for (tau, tok) in block.chunks_mut(d).enumerate() {
            if tau == o {
                loop {
                    gaussian(&mut r, tok, cfg.alpha * cfg.rho);
                    if dot(tok, &u_star) != 0.0 {
                        break;
                    }
                }
            } else {
                gaussian(&mut r, tok, cfg.rho);
            }
        }
        labels.push(dot(&block[o * d..(o + 1) * d], &u_star).signum());
        opt.push(o);
    }
    let ds = TokenDataset::new(t, d, tokens, labels, u_star, opt)?;
    let bad = ds.opt_violations();
    Ok((ds, bad))
}

/// One sample, two tokens `[1,0]` and `[0,0]`, label +1, `u★ = [1,0]`.
pub fn gd_counterexample() -> TokenDataset {
    TokenDataset::new(2, 2, vec![1.0, 0.0, 0.0, 0.0], vec![1.0], vec![1.0, 0.0], vec![0]).expect("fixed instance")
}

/// Scale of the bad initialization `−c I`.
pub const BAD_INIT_SCALE: f64 = 0.1;

/// Two samples whose second sample starts with its optimal token
/// suppressed. `W_init = −c I` satisfies the first sample's constraint and
/// violates the second's; along this direction the gradient vanishes while
/// the second sample's optimal score tends to zero.
pub fn bad_direction_instance() -> (TokenDataset, Matrix) {
    let tokens = vec![1.0, 0.2, -1.0, -0.2, -2.5, 0.5, 2.5, -0.5];
    let ds = TokenDataset::with_scored_opt(2, 2, tokens, vec![-1.0, 1.0], vec![0.0, 1.0]).expect("fixed instance");
    (ds, Matrix::identity(2).scaled(-BAD_INIT_SCALE))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitMode {
    Zero,
    Gaussian { sigma0: f64 },
    Explicit { w: Matrix },
}

pub fn init_params(d: usize, mode: &InitMode, seed: u64) -> Result<ModelParams> {
    let w = match mode {
        InitMode::Zero => Matrix::zeros(d, d),
        InitMode::Gaussian { sigma0 } => {
            if !(*sigma0 >= 0.0) {
                return Err(Error::InvalidInput("sigma0 must be nonnegative".into()));
            }
            let mut w = Matrix::zeros(d, d);
            gaussian(&mut rng(seed), w.as_mut_slice(), *sigma0);
            w
        }
        InitMode::Explicit { w } => w.clone(),
    };
    ModelParams::new(vec![0.0; d], w)
}

/// Largest `σ₀` for a small initialization: every optimal
/// softmax score starts at least `1/(kT)`.
pub fn small_init_sigma0(b: f64, d: usize, t: usize, k: f64, eta: f64, lambda: f64, c_prime: f64) -> f64 {
    let d = d as f64;
    let t = t as f64;
    let a = ((k * t - 1.0) / (t - 1.0)).ln() / c_prime;
    let c = eta / d.sqrt() / (8.0 * lambda);
    a.min(c) / (b * b * d.sqrt())
}

pub const DEFAULT_C_PRIME: f64 = 6.0;

/// Constants of the joint-training condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmCheckConfig {
    pub alpha: f64,
    pub rho: f64,
    pub eta: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
}

fn default_delta() -> f64 {
    0.1
}

fn default_c0() -> f64 {
    6.0
}

fn default_c1() -> f64 {
    1.0
}

impl DmCheckConfig {
    pub fn new(alpha: f64, rho: f64, eta: f64) -> Self {
        DmCheckConfig { alpha, rho, eta, delta: default_delta(), c0: default_c0(), c1: default_c1() }
    }

    /// `B = αρ√(1.5d)`.
    pub fn b(&self, d: usize) -> f64 {
        self.alpha * self.rho * (1.5 * d as f64).sqrt()
    }

    pub fn log_term(&self, n: usize) -> f64 {
        (10.0 * (n * n) as f64 / self.delta).ln()
    }
}

/// Largest step size allowed by the joint-training condition.
pub fn joint_step_bound(alpha: f64, rho: f64, n: usize, d: usize) -> f64 {
    let df = d as f64;
    let nf = n as f64;
    let b = alpha * rho * (1.5 * df).sqrt();
    let omega0 = 13.0 * b.max(1.0).powi(5) * b.max(df);
    let a = 1.0 / (18.0 * alpha * alpha * rho * rho * df);
    let c = alpha * rho / (160.0 * nf);
    let e = 2f64.ln() / (3.0 * b);
    let f = b / (128.0 * omega0 * (1.5 * nf).sqrt());
    a.min(c).min(e).min(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClauseReport {
    pub pass: bool,
    /// Number of inequalities evaluated.
    pub checked: usize,
    /// `min (lhs − rhs)`; `+∞` when nothing was checked.
    #[serde(with = "crate::numerics::json_f64")]
    pub min_slack: f64,
    /// `min lhs/rhs`, with `+∞` for pairs whose right-hand side is zero.
    #[serde(with = "crate::numerics::json_f64")]
    pub min_ratio: f64,
}

impl ClauseReport {
    fn new() -> Self {
        ClauseReport { pass: true, checked: 0, min_slack: f64::INFINITY, min_ratio: f64::INFINITY }
    }

    fn push(&mut self, lhs: f64, rhs: f64) {
        self.checked += 1;
        self.min_slack = self.min_slack.min(lhs - rhs);
        let ratio = if rhs == 0.0 { if lhs >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY } } else { lhs / rhs };
        self.min_ratio = self.min_ratio.min(ratio);
        self.pass &= lhs >= rhs;
    }

    fn failed() -> Self {
        ClauseReport { pass: false, checked: 0, min_slack: f64::NAN, min_ratio: f64::NAN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConditionReport {
    pub alpha_ok: bool,
    pub overparam_ok: bool,
    pub d_required: f64,
    pub step_ok: bool,
    #[serde(with = "crate::numerics::json_f64")]
    pub eta_max: f64,
    pub b_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub e1: bool,
    pub e2: bool,
    pub e3: bool,
    pub e4: bool,
    pub e5: bool,
}

impl EventReport {
    pub fn all(&self) -> bool {
        self.e1 && self.e2 && self.e3 && self.e4 && self.e5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub orth_clause1: ClauseReport,
    pub orth_clause2: ClauseReport,
    pub equal_scores_deviation: f64,
    pub equal_scores_pass: bool,
    pub w_svm_feasible: bool,
    pub joint_condition: Option<JointConditionReport>,
    pub events: Option<EventReport>,
}

impl AssumptionReport {
    pub fn orth_pass(&self) -> bool {
        self.orth_clause1.pass && self.orth_clause2.pass
    }
}

pub const EQUAL_SCORES_TOL: f64 = 1e-12;

/// Evaluates the near-orthogonality inequalities (with their `4nΥT`
/// factor), equal non-optimal scores, reference feasibility and, when `dm`
/// is given, the joint-training condition and concentration events.
pub fn check_assumptions(ds: &TokenDataset, c: &DerivedConstants, dm: Option<&DmCheckConfig>) -> AssumptionReport {
    let (n, t) = (ds.n(), ds.seq_len());
    let (clause1, clause2) = match c.upsilon {
        Some(ups) => {
            let f = 4.0 * n as f64 * ups * t as f64;
            let mut c1 = ClauseReport::new();
            for i in 0..n {
                for tau in 0..t {
                    let xi = ds.token(i, tau);
                    let lhs = dot(xi, xi);
                    for j in (0..n).filter(|&j| j != i) {
                        for tp in (0..t).filter(|&tp| tp != ds.opt(j)) {
                            c1.push(lhs, f * dot(xi, ds.token(j, tp)).abs());
                        }
                    }
                }
            }
            let mut c2 = ClauseReport::new();
            for i in 0..n {
                for j in (0..n).filter(|&j| ds.label(j) == ds.label(i)) {
                    let lhs = dot(ds.opt_token(i), ds.opt_token(j));
                    for k in (0..n).filter(|&k| ds.label(k) != ds.label(i)) {
                        for tau in 0..t {
                            for tp in 0..t {
                                c2.push(lhs, f * dot(ds.token(i, tau), ds.token(k, tp)).abs());
                            }
                        }
                    }
                }
            }
            (c1, c2)
        }
        None => (ClauseReport::failed(), ClauseReport::failed()),
    };
    let mut dev: f64 = 0.0;
    for i in 0..n {
        let g = ds.scores_with(i, ds.u_star());
        for (tau, &v) in g.iter().enumerate() {
            if tau != ds.opt(i) {
                dev = dev.max((v - c.gamma[i]).abs());
            }
        }
    }
    AssumptionReport {
        orth_clause1: clause1,
        orth_clause2: clause2,
        equal_scores_deviation: dev,
        equal_scores_pass: dev <= EQUAL_SCORES_TOL,
        w_svm_feasible: c.lambda.is_finite(),
        joint_condition: dm.map(|cfg| joint_condition(ds, cfg)),
        events: dm.map(|cfg| events(ds, cfg)),
    }
}

fn joint_condition(ds: &TokenDataset, cfg: &DmCheckConfig) -> JointConditionReport {
    let n = ds.n() as f64;
    let d_required = cfg.c1 * cfg.alpha.powi(4) * n.powi(4) * cfg.log_term(ds.n());
    let eta_max = joint_step_bound(cfg.alpha, cfg.rho, ds.n(), ds.dim());
    JointConditionReport {
        alpha_ok: cfg.alpha >= cfg.c0,
        overparam_ok: ds.dim() as f64 >= d_required,
        d_required,
        step_ok: cfg.eta <= eta_max,
        eta_max,
        b_ok: cfg.b(ds.dim()) >= 1.0,
    }
}

fn events(ds: &TokenDataset, cfg: &DmCheckConfig) -> EventReport {
    let (n, t) = (ds.n(), ds.seq_len());
    let df = ds.dim() as f64;
    let (a2, r2) = (cfg.alpha * cfg.alpha, cfg.rho * cfg.rho);
    let root = (df * cfg.log_term(n)).sqrt();
    let mut e = EventReport { e1: true, e2: true, e3: true, e4: true, e5: true };
    for i in 0..n {
        let o = ds.opt_token(i);
        let q = dot(o, o);
        e.e1 &= a2 * r2 * df / 2.0 <= q && q <= 1.5 * a2 * r2 * df;
        for tau in (0..t).filter(|&tau| tau != ds.opt(i)) {
            let x = ds.token(i, tau);
            let q = dot(x, x);
            e.e2 &= r2 * df / 2.0 <= q && q <= 1.5 * r2 * df;
        }
        for j in (0..n).filter(|&j| j != i) {
            e.e3 &= dot(o, ds.opt_token(j)).abs() <= 2.0 * a2 * r2 * root;
            for tau in (0..t).filter(|&tau| tau != ds.opt(j)) {
                let xj = ds.token(j, tau);
                e.e5 &= dot(o, xj).abs() <= 2.0 * cfg.alpha * r2 * root;
                for tp in (0..t).filter(|&tp| tp != ds.opt(i)) {
                    e.e4 &= dot(ds.token(i, tp), xj).abs() <= 2.0 * r2 * root;
                }
            }
        }
    }
    e
}
