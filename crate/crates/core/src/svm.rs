//! Hard-margin references `W_mm`, `u_mm`, the constants derived from them,
//! and per-sample SVM-gap diagnostics.
//!
//! Both problems have the form `min ½‖w‖² s.t. ⟨a_k, w⟩ ≥ 1`; they are solved
//! on the dual `max Σλ − ½ λᵀGλ, λ ≥ 0` with `G_kl = ⟨a_k, a_l⟩`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenDataset;
use crate::numerics::{dot, solve_dense, sub, Matrix};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SvmOptions {
    pub kkt_tol: f64,
    pub gap_tol: f64,
    /// Constraints with slack below this are listed as active.
    pub active_tol: f64,
    /// Dual objective beyond which the problem is declared infeasible.
    pub infeasible_dual: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        SvmOptions {
            kkt_tol: 1e-8,
            gap_tol: 1e-10,
            active_tol: 1e-6,
            infeasible_dual: 1e12,
            max_sweeps: 2_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualResult {
    pub lambda: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Nonnegative weights summing to one whose combination of constraint
    /// vectors is (numerically) zero, proving infeasibility.
    pub certificate: Option<Vec<f64>>,
}

/// Dual coordinate ascent for `max Σλ − ½λᵀGλ, λ ≥ 0`, followed by an
/// active-set polish.
pub fn solve_dual(g: &Matrix, opts: &SvmOptions) -> DualResult {
    let k = g.rows();
    for c in 0..k {
        if g.get(c, c) <= 1e-300 {
            let mut cert = vec![0.0; k];
            cert[c] = 1.0;
            return DualResult { lambda: vec![0.0; k], sweeps: 0, converged: false, certificate: Some(cert) };
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut lambda = vec![0.0; k];
    let mut gl = vec![0.0; k];
    let mut order: Vec<usize> = (0..k).collect();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        order.shuffle(&mut rng);
        for &c in &order {
            let step = ((1.0 - gl[c]) / g.get(c, c)).max(-lambda[c]);
            if step != 0.0 {
                lambda[c] += step;
                for (r, v) in gl.iter_mut().enumerate() {
                    *v += step * g.get(r, c);
                }
            }
        }
        let sum: f64 = lambda.iter().sum();
        let quad = dot(&lambda, &gl);
        // best dual value along the current direction: (Σλ)² / (2 λᵀGλ)
        if sum - 0.5 * quad > opts.infeasible_dual || (sum > 0.0 && sum * sum > 2.0 * opts.infeasible_dual * quad) {
            let cert = lambda.iter().map(|l| l / sum).collect();
            return DualResult { lambda, sweeps, converged: false, certificate: Some(cert) };
        }
        let viol = projected_violation(&lambda, &gl);
        if viol <= 1e-2 * opts.kkt_tol && (quad - sum).abs() <= opts.gap_tol * sum.max(1.0) {
            converged = true;
            break;
        }
    }
    if let Some(p) = polish(g, &lambda) {
        let gp = g.matvec(&p);
        if projected_violation(&p, &gp) <= projected_violation(&lambda, &gl) {
            lambda = p;
        }
    }
    DualResult { lambda, sweeps, converged, certificate: None }
}

fn projected_violation(lambda: &[f64], gl: &[f64]) -> f64 {
    lambda
        .iter()
        .zip(gl)
        .map(|(&l, &m)| if l > 0.0 { (1.0 - m).abs() } else { (1.0 - m).max(0.0) })
        .fold(0.0, f64::max)
}

/// Solves `G_AA λ_A = 1` on the support of `lambda`, dropping indices that
/// turn negative.
fn polish(g: &Matrix, lambda: &[f64]) -> Option<Vec<f64>> {
    let mut active: Vec<usize> = (0..lambda.len()).filter(|&c| lambda[c] > 0.0).collect();
    while !active.is_empty() {
        let m = active.len();
        let mut sub_g = Matrix::zeros(m, m);
        for (a, &r) in active.iter().enumerate() {
            for (b, &c) in active.iter().enumerate() {
                sub_g.set(a, b, g.get(r, c));
            }
        }
        let x = solve_dense(&sub_g, &vec![1.0; m], 1e-13 * g.get(active[0], active[0]))?;
        if x.iter().all(|&v| v > 0.0) {
            let mut out = vec![0.0; lambda.len()];
            for (&c, v) in active.iter().zip(x) {
                out[c] = v;
            }
            return Some(out);
        }
        active = active.into_iter().zip(&x).filter(|&(_, &v)| v > 0.0).map(|(c, _)| c).collect();
    }
    None
}

/// The reference solution itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SvmVariable {
    Matrix(Vec<Vec<f64>>),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SvmSolution {
    pub solution: Option<SvmVariable>,
    #[serde(with = "crate::numerics::json_f64")]
    pub norm: f64,
    #[serde(with = "crate::numerics::json_f64")]
    pub margin: f64,
    /// `(sample, token)` pairs; the token is the optimal one for `u_mm`.
    pub active_constraints: Vec<(usize, usize)>,
    #[serde(with = "crate::numerics::json_f64")]
    pub kkt_residual: f64,
    pub feasible: bool,
    pub iterations: usize,
    pub dual: Vec<f64>,
    /// `‖w‖² − (2Σλ − λᵀGλ)`; zero under strong duality.
    #[serde(with = "crate::numerics::json_f64")]
    pub duality_gap: f64,
    pub certificate: Option<Vec<f64>>,
}

impl SvmSolution {
    pub fn matrix(&self) -> Option<Matrix> {
        match &self.solution {
            Some(SvmVariable::Matrix(rows)) => Matrix::from_rows(rows).ok(),
            _ => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match &self.solution {
            Some(SvmVariable::Vector(v)) => Some(v),
            _ => None,
        }
    }

    fn infeasible(iterations: usize, certificate: Option<Vec<f64>>, dual: Vec<f64>) -> Self {
        SvmSolution {
            solution: None,
            norm: f64::INFINITY,
            margin: 0.0,
            active_constraints: Vec::new(),
            kkt_residual: f64::INFINITY,
            feasible: false,
            iterations,
            dual,
            duality_gap: f64::NAN,
            certificate,
        }
    }
}

/// `(i, τ)` for every `τ ≠ opt_i`.
pub fn w_constraints(ds: &TokenDataset) -> Vec<(usize, usize)> {
    (0..ds.n())
        .flat_map(|i| (0..ds.seq_len()).filter(move |&tau| tau != ds.opt(i)).map(move |tau| (i, tau)))
        .collect()
}

/// Gram matrix of the constraint matrices `(x_opt − x_τ) x₁ᵀ`.
pub fn w_gram(ds: &TokenDataset, cons: &[(usize, usize)]) -> Matrix {
    let diffs: Vec<Vec<f64>> = cons.iter().map(|&(i, tau)| sub(ds.opt_token(i), ds.token(i, tau))).collect();
    let k = cons.len();
    let mut g = Matrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v = dot(&diffs[a], &diffs[b]) * dot(ds.query(cons[a].0), ds.query(cons[b].0));
            g.set(a, b, v);
            g.set(b, a, v);
        }
    }
    g
}

fn kkt_residual(lambda: &[f64], values: &[f64]) -> f64 {
    projected_violation(lambda, values)
}

pub fn solve_w_svm(ds: &TokenDataset, opts: &SvmOptions) -> Result<SvmSolution> {
    if ds.seq_len() < 2 {
        return Err(Error::InvalidInput("W-SVM needs at least two tokens".into()));
    }
    let cons = w_constraints(ds);
    let g = w_gram(ds, &cons);
    let res = solve_dual(&g, opts);
    if res.certificate.is_some() {
        return Ok(SvmSolution::infeasible(res.sweeps, res.certificate, res.lambda));
    }
    let d = ds.dim();
    let mut w = Matrix::zeros(d, d);
    for (&(i, tau), &l) in cons.iter().zip(&res.lambda) {
        if l > 0.0 {
            w.add_outer(l, &sub(ds.opt_token(i), ds.token(i, tau)), ds.query(i));
        }
    }
    let values: Vec<f64> = cons
        .iter()
        .map(|&(i, tau)| w.bilinear(ds.opt_token(i), ds.query(i)) - w.bilinear(ds.token(i, tau), ds.query(i)))
        .collect();
    let norm = w.frob_norm();
    let dual_obj = 2.0 * res.lambda.iter().sum::<f64>() - dot(&res.lambda, &g.matvec(&res.lambda));
    Ok(SvmSolution {
        norm,
        margin: 1.0 / norm,
        active_constraints: cons.iter().zip(&values).filter(|(_, &v)| v - 1.0 < opts.active_tol).map(|(&c, _)| c).collect(),
        kkt_residual: kkt_residual(&res.lambda, &values),
        feasible: true,
        iterations: res.sweeps,
        duality_gap: norm * norm - dual_obj,
        dual: res.lambda,
        certificate: None,
        solution: Some(SvmVariable::Matrix(w.to_rows())),
    })
}

/// `Λ = ‖W_mm‖ = √(λᵀGλ)` from the dual alone, without forming the
/// `d × d` solution. `None` when the problem is infeasible.
pub fn w_svm_norm(ds: &TokenDataset, opts: &SvmOptions) -> Result<Option<f64>> {
    if ds.seq_len() < 2 {
        return Err(Error::InvalidInput("W-SVM needs at least two tokens".into()));
    }
    let g = w_gram(ds, &w_constraints(ds));
    let res = solve_dual(&g, opts);
    Ok(res.certificate.is_none().then(|| dot(&res.lambda, &g.matvec(&res.lambda)).sqrt()))
}

pub fn solve_u_svm(ds: &TokenDataset, opts: &SvmOptions) -> Result<SvmSolution> {
    let n = ds.n();
    let a: Vec<Vec<f64>> = (0..n).map(|i| ds.opt_token(i).iter().map(|x| ds.label(i) * x).collect()).collect();
    let mut g = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            g.set(r, c, dot(&a[r], &a[c]));
        }
    }
    let res = solve_dual(&g, opts);
    if res.certificate.is_some() {
        return Ok(SvmSolution::infeasible(res.sweeps, res.certificate, res.lambda));
    }
    let mut u = vec![0.0; ds.dim()];
    for (ai, &l) in a.iter().zip(&res.lambda) {
        crate::numerics::axpy(l, ai, &mut u);
    }
    let values: Vec<f64> = a.iter().map(|ai| dot(ai, &u)).collect();
    let norm = crate::numerics::norm(&u);
    let dual_obj = 2.0 * res.lambda.iter().sum::<f64>() - dot(&res.lambda, &g.matvec(&res.lambda));
    Ok(SvmSolution {
        norm,
        margin: 1.0 / norm,
        active_constraints: (0..n).filter(|&i| values[i] - 1.0 < opts.active_tol).map(|i| (i, ds.opt(i))).collect(),
        kkt_residual: kkt_residual(&res.lambda, &values),
        feasible: true,
        iterations: res.sweeps,
        duality_gap: norm * norm - dual_obj,
        dual: res.lambda,
        certificate: None,
        solution: Some(SvmVariable::Vector(u)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// `‖W_mm‖`.
    pub lambda: f64,
    /// Largest token norm.
    pub b: f64,
    pub gamma_opt: Vec<f64>,
    /// `γ_i = min_{τ≠opt} γ_{i,τ}`.
    pub gamma: Vec<f64>,
    #[serde(with = "crate::numerics::json_f64")]
    pub kappa_plus: f64,
    #[serde(with = "crate::numerics::json_f64")]
    pub kappa_minus: f64,
    /// `κ₊ log κ₊ / log κ₋`; `None` when `κ₋ = 1`.
    pub upsilon: Option<f64>,
    #[serde(with = "crate::numerics::json_f64")]
    pub zeta: f64,
}

impl DerivedConstants {
    pub fn score_gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.gamma_opt.iter().zip(&self.gamma).map(|(o, g)| o - g)
    }

    pub fn upsilon(&self) -> Result<f64> {
        self.upsilon.ok_or(Error::MissingConstant("Upsilon"))
    }
}

pub fn derived_constants(ds: &TokenDataset, lambda: f64) -> Result<DerivedConstants> {
    if ds.seq_len() < 2 {
        return Err(Error::InvalidInput("constants need at least two tokens".into()));
    }
    let mut b: f64 = 0.0;
    let mut gamma_opt = Vec::new();
    let mut gamma = Vec::new();
    for i in 0..ds.n() {
        for tau in 0..ds.seq_len() {
            b = b.max(crate::numerics::norm(ds.token(i, tau)));
        }
        let g = ds.scores_with(i, ds.u_star());
        let o = ds.opt(i);
        gamma_opt.push(g[o]);
        gamma.push(g.iter().enumerate().filter(|&(k, _)| k != o).map(|(_, &v)| v).fold(f64::INFINITY, f64::min));
    }
    let gaps: Vec<f64> = gamma_opt.iter().zip(&gamma).map(|(o, g)| o - g).collect();
    let log_kp = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_km = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let kappa_plus = log_kp.exp();
    let upsilon = (log_km != 0.0).then(|| kappa_plus * log_kp / log_km);
    let max_exp_gamma = gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
    Ok(DerivedConstants {
        lambda,
        b,
        gamma_opt,
        gamma,
        kappa_plus,
        kappa_minus: log_km.exp(),
        upsilon,
        zeta: log_kp / max_exp_gamma,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapSet {
    I1,
    I2,
    I3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapDiagnostics {
    pub nu: f64,
    pub delta_min: Vec<f64>,
    pub delta_max: Vec<f64>,
    pub sets: Vec<GapSet>,
}

impl GapDiagnostics {
    pub fn members(&self, set: GapSet) -> Vec<usize> {
        self.sets.iter().enumerate().filter(|(_, &s)| s == set).map(|(i, _)| i).collect()
    }
}

pub const DEFAULT_NU: f64 = 0.25;

/// Logit gaps minus one under `W̃ = Λ W/‖W‖`, and the partition by `δ_min`.
pub fn svm_gap_diagnostics(w: &Matrix, ds: &TokenDataset, lambda: f64, nu: f64) -> Result<GapDiagnostics> {
    let wn = w.frob_norm();
    if wn == 0.0 {
        return Err(Error::UndefinedDirection("W"));
    }
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidInput("Lambda must be positive".into()));
    }
    let wt = w.scaled(lambda / wn);
    let mut delta_min = Vec::new();
    let mut delta_max = Vec::new();
    let mut sets = Vec::new();
    for i in 0..ds.n() {
        let a = crate::model::logits(&wt, ds.sample(i), ds.seq_len(), ds.dim());
        let o = ds.opt(i);
        let deltas = a.iter().enumerate().filter(|&(k, _)| k != o).map(|(_, &v)| a[o] - v - 1.0);
        let (lo, hi) = deltas.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        sets.push(if lo <= 0.3 * nu {
            GapSet::I1
        } else if lo <= 0.8 * nu {
            GapSet::I2
        } else {
            GapSet::I3
        });
        delta_min.push(lo);
        delta_max.push(hi);
    }
    Ok(GapDiagnostics { nu, delta_min, delta_max, sets })
}
