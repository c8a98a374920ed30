//! Step-size rules and the W-only and joint training loops.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{record_from_eval, References, TraceRecord, TrainMode};
use crate::model::{evaluate, loss_star, Evaluation, ExpLoss, ModelParams, TokenDataset};
use crate::numerics::{axpy, Matrix};

pub const STATIONARY_TOL: f64 = 1e-14;
pub const DIVERGED_LOSS: f64 = 1e300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSizeRule {
    Gd {
        eta: f64,
    },
    /// `η/‖∇‖`, optionally capped at `eta_max`. In joint mode each
    /// parameter group is normalized by its own gradient.
    Ngd {
        eta: f64,
        #[serde(default)]
        eta_max: Option<f64>,
    },
    /// `η (t+1)^{−p}/‖∇‖` per group.
    NgdDecayed {
        eta: f64,
        #[serde(default = "default_p_u")]
        p_u: f64,
        #[serde(default = "default_p_w")]
        p_w: f64,
    },
    /// `min(s (L̂ − L̂*)/(2‖∇‖²), η_max)` on the full gradient.
    Polyak {
        #[serde(default = "default_scale")]
        eta_scale: f64,
        eta_max: f64,
    },
    /// Heavy ball on the normalized direction: `v ← βv + ∇̄`, `θ ← θ − ηv`.
    NgdMomentum {
        eta: f64,
        beta: f64,
        #[serde(default)]
        eta_max: Option<f64>,
    },
}

fn default_p_u() -> f64 {
    2.0 / 3.0
}

fn default_p_w() -> f64 {
    1.0
}

fn default_scale() -> f64 {
    1.0
}

impl StepSizeRule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        match *self {
            StepSizeRule::Gd { eta } | StepSizeRule::Ngd { eta, eta_max: None } if !(eta > 0.0) => bad("eta must be positive"),
            StepSizeRule::Ngd { eta, eta_max: Some(m) } if !(eta > 0.0 && m > 0.0) => bad("eta and eta_max must be positive"),
            StepSizeRule::NgdDecayed { eta, p_u, p_w } if !(eta > 0.0 && (2.0 / 3.0..1.0).contains(&p_u) && p_w > 0.0) => {
                bad("need eta > 0, p_u in [2/3, 1) and p_w > 0")
            }
            StepSizeRule::Polyak { eta_scale, eta_max } if !(eta_scale > 0.0 && eta_max > 0.0) => bad("eta_scale and eta_max must be positive"),
            StepSizeRule::NgdMomentum { eta, beta, eta_max } if !(eta > 0.0 && (0.0..1.0).contains(&beta) && eta_max.is_none_or(|m| m > 0.0)) => {
                bad("need eta > 0, beta in [0, 1), eta_max > 0")
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            StepSizeRule::Gd { .. } => "gd",
            StepSizeRule::Ngd { .. } => "ngd",
            StepSizeRule::NgdDecayed { .. } => "ngd_decayed",
            StepSizeRule::Polyak { .. } => "polyak",
            StepSizeRule::NgdMomentum { .. } => "ngd_momentum",
        }
    }

    /// Base rate `η` (the cap for Polyak).
    pub fn eta(&self) -> f64 {
        match *self {
            StepSizeRule::Gd { eta } | StepSizeRule::Ngd { eta, .. } | StepSizeRule::NgdDecayed { eta, .. } | StepSizeRule::NgdMomentum { eta, .. } => eta,
            StepSizeRule::Polyak { eta_max, .. } => eta_max,
        }
    }

    fn normalized(&self) -> bool {
        !matches!(self, StepSizeRule::Gd { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    U,
    W,
}

/// Raised when a normalized rule meets a vanishing gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stationary;

/// Multiplier applied to the raw gradient of `group` at step `t`. For
/// Polyak, `grad_norm` is the norm of the full gradient.
pub fn step_size(rule: &StepSizeRule, group: Group, t: u64, grad_norm: f64, loss: f64, loss_star: f64) -> std::result::Result<f64, Stationary> {
    if rule.normalized() && !(grad_norm >= STATIONARY_TOL) {
        return Err(Stationary);
    }
    let tp = (t + 1) as f64;
    Ok(match *rule {
        StepSizeRule::Gd { eta } => eta,
        StepSizeRule::Ngd { eta, eta_max } | StepSizeRule::NgdMomentum { eta, eta_max, .. } => {
            let s = eta / grad_norm;
            eta_max.map_or(s, |m| s.min(m))
        }
        StepSizeRule::NgdDecayed { eta, p_u, p_w } => {
            let p = if group == Group::U { p_u } else { p_w };
            eta * tp.powf(-p) / grad_norm
        }
        StepSizeRule::Polyak { eta_scale, eta_max } => (eta_scale * (loss - loss_star).max(0.0) / (2.0 * grad_norm * grad_norm)).min(eta_max),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rule: StepSizeRule,
    pub steps: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    pub mode: TrainMode,
    #[serde(default = "default_tol")]
    pub stationary_tol: f64,
}

fn default_stride() -> u64 {
    1
}

fn default_tol() -> f64 {
    STATIONARY_TOL
}

impl TrainConfig {
    pub fn new(rule: StepSizeRule, steps: u64, mode: TrainMode) -> Self {
        TrainConfig { rule, steps, stride: 1, mode, stationary_tol: STATIONARY_TOL }
    }

    pub fn stride(mut self, stride: u64) -> Self {
        self.stride = stride;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Stationary { t: u64 },
    Diverged { t: u64, reason: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub final_params: ModelParams,
    pub config: TrainConfig,
    pub termination: Termination,
    pub wall_clock_secs: f64,
    pub secs_per_step: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("diverged at step {t}: {reason}")]
    Diverged { t: u64, reason: String, trace: Box<Trace> },
}

/// Trains `W` with `u` pinned to `u★`.
pub fn train_w_only(ds: &TokenDataset, init: &ModelParams, cfg: &TrainConfig, refs: &References) -> std::result::Result<Trace, TrainError> {
    let mut p = init.clone();
    p.u = ds.u_star().to_vec();
    let mut cfg = cfg.clone();
    cfg.mode = TrainMode::WOnly;
    train(ds, p, &cfg, refs)
}

/// Trains `(u, W)` simultaneously from `θ_t`.
pub fn train_joint(ds: &TokenDataset, init: &ModelParams, cfg: &TrainConfig, refs: &References) -> std::result::Result<Trace, TrainError> {
    let mut cfg = cfg.clone();
    cfg.mode = TrainMode::Joint;
    train(ds, init.clone(), &cfg, refs)
}

pub fn train_with_mode(ds: &TokenDataset, init: &ModelParams, cfg: &TrainConfig, refs: &References) -> std::result::Result<Trace, TrainError> {
    match cfg.mode {
        TrainMode::WOnly => train_w_only(ds, init, cfg, refs),
        TrainMode::Joint => train_joint(ds, init, cfg, refs),
    }
}

struct Steps {
    w: f64,
    u: f64,
}

fn plan(rule: &StepSizeRule, mode: TrainMode, t: u64, ev: &Evaluation, l_star: f64, tol: f64) -> Option<Steps> {
    let gw = ev.grad_w.frob_norm();
    let loss = ev.report.mean_loss;
    let take = |g: Group, n: f64| if n < tol && rule.normalized() { Err(Stationary) } else { step_size(rule, g, t, n, loss, l_star) };
    match mode {
        TrainMode::WOnly => take(Group::W, gw).ok().map(|w| Steps { w, u: 0.0 }),
        TrainMode::Joint => {
            let gu = crate::numerics::norm(&ev.grad_u);
            if let StepSizeRule::Polyak { .. } = rule {
                let full = gw.hypot(gu);
                return take(Group::W, full).ok().map(|s| Steps { w: s, u: s });
            }
            // a vanishing group (e.g. W at u = 0) is held still
            match (take(Group::W, gw), take(Group::U, gu)) {
                (Err(_), Err(_)) => None,
                (w, u) => Some(Steps { w: w.unwrap_or(0.0), u: u.unwrap_or(0.0) }),
            }
        }
    }
}

fn train(ds: &TokenDataset, mut p: ModelParams, cfg: &TrainConfig, refs: &References) -> std::result::Result<Trace, TrainError> {
    cfg.rule.validate()?;
    if cfg.stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()).into());
    }
    let d = ds.dim();
    if p.u.len() != d || p.w.rows() != d || p.w.cols() != d {
        return Err(Error::DimensionMismatch { expected: format!("parameters for d={d}"), got: format!("u: {}", p.u.len()) }.into());
    }
    let joint = cfg.mode == TrainMode::Joint;
    let start = Instant::now();
    p.t = 0;
    let mut records = Vec::new();
    let mut l_star = loss_star(ds, &p.u);
    let mut vel_w = Matrix::zeros(d, d);
    let mut vel_u = vec![0.0; d];
    let momentum = match cfg.rule {
        StepSizeRule::NgdMomentum { beta, eta, .. } => Some((beta, eta)),
        _ => None,
    };
    let mut ev = evaluate(&ExpLoss, &p, ds)?;
    let finish = |records, p: ModelParams, termination, start: Instant| {
        let secs = start.elapsed().as_secs_f64();
        let steps = p.t.max(1) as f64;
        Trace { records, final_params: p, config: cfg.clone(), termination, wall_clock_secs: secs, secs_per_step: secs / steps }
    };
    loop {
        let t = p.t;
        if let Some(reason) = bad_state(&ev) {
            let trace = finish(records, p, Termination::Diverged { t, reason: reason.clone() }, start);
            return Err(TrainError::Diverged { t, reason, trace: Box::new(trace) });
        }
        if joint {
            l_star = loss_star(ds, &p.u);
        }
        let steps = plan(&cfg.rule, cfg.mode, t, &ev, l_star, cfg.stationary_tol);
        let keep = t.is_multiple_of(cfg.stride) || t == cfg.steps || steps.is_none();
        if keep {
            let (ew, eu) = match &steps {
                Some(s) => (Some(s.w), joint.then_some(s.u)),
                None => (None, None),
            };
            records.push(record_from_eval(&p, ds, refs, &ev, ew, eu));
        }
        let Some(s) = steps else {
            return Ok(finish(records, p, Termination::Stationary { t }, start));
        };
        if t >= cfg.steps {
            return Ok(finish(records, p, Termination::Completed, start));
        }
        match momentum {
            Some((beta, eta)) => {
                // s.w = η_t = η/‖∇‖ (capped), so s.w/η scales ∇ to the unit direction
                vel_w.scale(beta);
                vel_w.add_scaled(s.w / eta, &ev.grad_w);
                p.w.add_scaled(-eta, &vel_w);
                if joint {
                    vel_u.iter_mut().for_each(|v| *v *= beta);
                    axpy(s.u / eta, &ev.grad_u, &mut vel_u);
                    axpy(-eta, &vel_u, &mut p.u);
                }
            }
            None => {
                p.w.add_scaled(-s.w, &ev.grad_w);
                if joint {
                    axpy(-s.u, &ev.grad_u, &mut p.u);
                }
            }
        }
        p.t += 1;
        ev = match evaluate(&ExpLoss, &p, ds) {
            Ok(e) => e,
            Err(e) => {
                let t = p.t;
                let reason = e.to_string();
                let trace = finish(records, p, Termination::Diverged { t, reason: reason.clone() }, start);
                return Err(TrainError::Diverged { t, reason, trace: Box::new(trace) });
            }
        };
    }
}

fn bad_state(ev: &Evaluation) -> Option<String> {
    let r = &ev.report;
    if !r.log_mean_loss.is_finite() || r.mean_loss > DIVERGED_LOSS {
        return Some(format!("loss {}", r.mean_loss));
    }
    if !ev.grad_w.is_finite() || ev.grad_u.iter().any(|g| !g.is_finite()) {
        return Some("non-finite gradient".into());
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_formulas() {
        let ngd = StepSizeRule::Ngd { eta: 0.1, eta_max: None };
        assert_eq!(step_size(&ngd, Group::W, 5, 2.0, 1.0, 0.0), Ok(0.05));
        let dec = StepSizeRule::NgdDecayed { eta: 0.3, p_u: 2.0 / 3.0, p_w: 1.0 };
        for g in [Group::U, Group::W] {
            assert!((step_size(&dec, g, 0, 3.0, 1.0, 0.0).unwrap() - 0.1).abs() < 1e-16);
        }
        let ps = StepSizeRule::Polyak { eta_scale: 1.0, eta_max: 10.0 };
        assert_eq!(step_size(&ps, Group::W, 0, 1.0, 1.0, 0.0), Ok(0.5));
        assert_eq!(step_size(&ps, Group::W, 0, 1e-3, 1.0, 0.0), Ok(10.0));
        assert_eq!(step_size(&ngd, Group::W, 0, 0.0, 1.0, 0.0), Err(Stationary));
        assert_eq!(step_size(&StepSizeRule::Gd { eta: 0.2 }, Group::W, 0, 0.0, 1.0, 0.0), Ok(0.2));
    }

    #[test]
    fn validation() {
        assert!(StepSizeRule::Gd { eta: 0.0 }.validate().is_err());
        assert!(StepSizeRule::NgdDecayed { eta: 1.0, p_u: 0.5, p_w: 1.0 }.validate().is_err());
        assert!(StepSizeRule::NgdMomentum { eta: 1.0, beta: 1.0, eta_max: None }.validate().is_err());
        assert!(StepSizeRule::Polyak { eta_scale: 1.0, eta_max: 10.0 }.validate().is_ok());
    }

    #[test]
    fn zero_steps_keep_initial_record() {
        let ds = crate::datagen::gd_counterexample();
        let cfg = TrainConfig::new(StepSizeRule::Ngd { eta: 0.1, eta_max: None }, 0, TrainMode::WOnly);
        let tr = train_w_only(&ds, &ModelParams::zeros(2), &cfg, &References::default()).unwrap();
        assert_eq!(tr.records.len(), 1);
        assert_eq!(tr.records[0].t, 0);
        assert_eq!(tr.termination, Termination::Completed);
    }

    #[test]
    fn joint_moves_u_first() {
        let ds = crate::datagen::gd_counterexample();
        let cfg = TrainConfig::new(StepSizeRule::NgdDecayed { eta: 0.1, p_u: 2.0 / 3.0, p_w: 1.0 }, 3, TrainMode::Joint);
        let tr = train_joint(&ds, &ModelParams::zeros(2), &cfg, &References::default()).unwrap();
        assert_eq!(tr.records[0].eta_w, Some(0.0));
        assert!(tr.records[1].u_norm > 0.0);
        assert_eq!(tr.records.len(), 4);
    }
}
