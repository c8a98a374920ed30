//! Single-layer attention classifier `Φ(X; u, W) = uᵀ Xᵀ softmax(X W x₁)`
//! trained with the exponential loss.
//!
//! Token and sample indices are 0-based; the query token is index 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, log_sum_exp, softmax_into, softmax_jvp, Matrix};

/// Two top scores closer than this make the optimal token ambiguous.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset", into = "RawDataset")]
pub struct TokenDataset {
    n: usize,
    t: usize,
    d: usize,
    tokens: Vec<f64>,
    labels: Vec<f64>,
    u_star: Vec<f64>,
    opt: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    n: usize,
    #[serde(rename = "T")]
    t: usize,
    d: usize,
    tokens: Vec<Vec<f64>>,
    labels: Vec<i8>,
    u_star: Vec<f64>,
    opt_indices: Vec<usize>,
}

impl TryFrom<RawDataset> for TokenDataset {
    type Error = Error;

    fn try_from(r: RawDataset) -> Result<Self> {
        if r.tokens.len() != r.n || r.tokens.iter().any(|x| x.len() != r.t * r.d) {
            return Err(Error::DimensionMismatch {
                expected: format!("{} samples of {} values", r.n, r.t * r.d),
                got: "ragged token array".into(),
            });
        }
        let labels = r.labels.iter().map(|&y| f64::from(y)).collect();
        TokenDataset::new(r.t, r.d, r.tokens.concat(), labels, r.u_star, r.opt_indices)
    }
}

impl From<TokenDataset> for RawDataset {
    fn from(ds: TokenDataset) -> Self {
        let block = ds.t * ds.d;
        RawDataset {
            n: ds.n,
            t: ds.t,
            d: ds.d,
            tokens: ds.tokens.chunks(block).map(<[f64]>::to_vec).collect(),
            labels: ds.labels.iter().map(|&y| y as i8).collect(),
            u_star: ds.u_star,
            opt_indices: ds.opt,
        }
    }
}

impl TokenDataset {
    /// `tokens` holds n blocks of T×d row-major values. Declared optimal
    /// indices are checked for range only; see [`TokenDataset::opt_violations`].
    pub fn new(
        t: usize,
        d: usize,
        tokens: Vec<f64>,
        labels: Vec<f64>,
        u_star: Vec<f64>,
        opt: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 || t == 0 || d == 0 {
            return Err(Error::InvalidInput("n, T and d must be positive".into()));
        }
        if tokens.len() != n * t * d {
            return Err(Error::DimensionMismatch {
                expected: format!("{} token values", n * t * d),
                got: tokens.len().to_string(),
            });
        }
        if u_star.len() != d {
            return Err(Error::DimensionMismatch { expected: format!("u_star of length {d}"), got: u_star.len().to_string() });
        }
        if opt.len() != n {
            return Err(Error::DimensionMismatch { expected: format!("{n} opt indices"), got: opt.len().to_string() });
        }
        if let Some(&o) = opt.iter().find(|&&o| o >= t) {
            return Err(Error::InvalidInput(format!("opt index {o} out of range for T={t}")));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidInput("labels must be +1 or -1".into()));
        }
        if tokens.iter().chain(&u_star).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite token or score vector".into()));
        }
        Ok(TokenDataset { n, t, d, tokens, labels, u_star, opt })
    }

    /// Builds a dataset whose optimal indices are read off `u_star`.
    pub fn with_scored_opt(t: usize, d: usize, tokens: Vec<f64>, labels: Vec<f64>, u_star: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        let mut ds = Self::new(t, d, tokens, labels, u_star, vec![0; n])?;
        for i in 0..n {
            ds.opt[i] = ds.token_scores(i)?.1;
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seq_len(&self) -> usize {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn u_star(&self) -> &[f64] {
        &self.u_star
    }

    pub fn opt(&self, i: usize) -> usize {
        self.opt[i]
    }

    pub fn opt_indices(&self) -> &[usize] {
        &self.opt
    }

    /// T×d block of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        let b = self.t * self.d;
        &self.tokens[i * b..(i + 1) * b]
    }

    pub fn sample_matrix(&self, i: usize) -> Matrix {
        Matrix::from_vec(self.t, self.d, self.sample(i).to_vec()).expect("validated shape")
    }

    pub fn token(&self, i: usize, tau: usize) -> &[f64] {
        let s = self.sample(i);
        &s[tau * self.d..(tau + 1) * self.d]
    }

    pub fn query(&self, i: usize) -> &[f64] {
        self.token(i, 0)
    }

    pub fn opt_token(&self, i: usize) -> &[f64] {
        self.token(i, self.opt[i])
    }

    /// All tokens multiplied by `s`.
    pub fn scaled_tokens(&self, s: f64) -> TokenDataset {
        let mut ds = self.clone();
        ds.tokens.iter_mut().for_each(|x| *x *= s);
        ds
    }

    /// Replaces the score vector and relabels optimal tokens accordingly.
    pub fn with_u_star(&self, u_star: Vec<f64>) -> Result<TokenDataset> {
        TokenDataset::with_scored_opt(self.t, self.d, self.tokens.clone(), self.labels.clone(), u_star)
    }

    /// `γ = y X u` for an arbitrary score vector `u`.
    pub fn scores_with(&self, i: usize, u: &[f64]) -> Vec<f64> {
        let y = self.labels[i];
        (0..self.t).map(|tau| y * dot(self.token(i, tau), u)).collect()
    }

    /// Token scores under `u★` and the unique argmax.
    pub fn token_scores(&self, i: usize) -> Result<(Vec<f64>, usize)> {
        if i >= self.n {
            return Err(Error::InvalidInput(format!("sample {i} out of range")));
        }
        let g = self.scores_with(i, &self.u_star);
        let best = argmax(&g);
        let runner = g
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != best)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if g[best] - runner <= TIE_TOL {
            return Err(Error::NonUniqueOpt { sample: i, gap: g[best] - runner });
        }
        Ok((g, best))
    }

    /// Samples whose declared optimal token is not the unique argmax of the
    /// token scores.
    pub fn opt_violations(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| !matches!(self.token_scores(i), Ok((_, o)) if o == self.opt[i]))
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub u: Vec<f64>,
    pub w: Matrix,
    pub t: u64,
}

impl ModelParams {
    pub fn zeros(d: usize) -> Self {
        ModelParams { u: vec![0.0; d], w: Matrix::zeros(d, d), t: 0 }
    }

    pub fn new(u: Vec<f64>, w: Matrix) -> Result<Self> {
        if w.rows() != u.len() || w.cols() != u.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("W of shape {0}x{0}", u.len()),
                got: format!("{}x{}", w.rows(), w.cols()),
            });
        }
        if !w.is_finite() || u.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameters".into()));
        }
        Ok(ModelParams { u, w, t: 0 })
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.u.len() != d || self.w.rows() != d || self.w.cols() != d {
            return Err(Error::DimensionMismatch {
                expected: format!("parameters for d={d}"),
                got: format!("u: {}, W: {}x{}", self.u.len(), self.w.rows(), self.w.cols()),
            });
        }
        Ok(())
    }
}

/// Margin-based loss `ℓ(z)`.
pub trait Loss {
    fn log_value(&self, z: f64) -> f64;

    fn value(&self, z: f64) -> f64 {
        self.log_value(z).exp()
    }

    /// `−ℓ′(z)`.
    fn neg_derivative(&self, z: f64) -> f64;
}

/// `ℓ(z) = e^{−z}`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpLoss;

impl Loss for ExpLoss {
    fn log_value(&self, z: f64) -> f64 {
        -z
    }

    fn neg_derivative(&self, z: f64) -> f64 {
        (-z).exp()
    }
}

/// Softmax logits `X W x₁` of one sample.
pub fn logits(w: &Matrix, x: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut wq = vec![0.0; d];
    w.matvec_into(&x[..d], &mut wq);
    x.chunks(d).take(t).map(|tok| dot(tok, &wq)).collect()
}

/// `Φ(X; θ)` for a T×d token matrix.
pub fn predict(params: &ModelParams, x: &Matrix) -> Result<f64> {
    let d = x.cols();
    params.check(d)?;
    let a = logits(&params.w, x.as_slice(), x.rows(), d);
    let s = crate::numerics::stable_softmax(&a)?;
    Ok(dot(&params.u, &x.tmatvec(&s)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mean_loss: f64,
    pub log_mean_loss: f64,
    pub losses: Vec<f64>,
    pub log_losses: Vec<f64>,
    pub margins: Vec<f64>,
    pub opt_softmax: Vec<f64>,
    /// Full attention distribution of every sample.
    pub softmax: Vec<Vec<f64>>,
}

impl LossReport {
    /// `max_i ℓ_i / min_j ℓ_j`, evaluated in the log domain.
    pub fn loss_ratio(&self) -> f64 {
        let hi = self.log_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.log_losses.iter().copied().fold(f64::INFINITY, f64::min);
        (hi - lo).exp()
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: LossReport,
    pub grad_u: Vec<f64>,
    pub grad_w: Matrix,
}

/// Loss, per-sample diagnostics and both gradients in one pass.
pub fn evaluate<L: Loss>(loss: &L, params: &ModelParams, ds: &TokenDataset) -> Result<Evaluation> {
    let (n, t, d) = (ds.n, ds.t, ds.d);
    params.check(d)?;
    let mut log_losses = Vec::with_capacity(n);
    let mut margins = Vec::with_capacity(n);
    let mut opt_softmax = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let mut grad_u = vec![0.0; d];
    let mut grad_w = Matrix::zeros(d, d);
    let mut wq = vec![0.0; d];
    let mut a = vec![0.0; t];
    let mut s = vec![0.0; t];
    let mut xu = vec![0.0; t];
    let mut jxu = vec![0.0; t];
    let mut g = vec![0.0; d];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let x = ds.sample(i);
        let q = &x[..d];
        params.w.matvec_into(q, &mut wq);
        for (tau, tok) in x.chunks(d).enumerate() {
            a[tau] = dot(tok, &wq);
            xu[tau] = dot(tok, &params.u);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite attention logits".into()));
        }
        softmax_into(&a, &mut s);
        let phi = dot(&s, &xu);
        let y = ds.labels[i];
        let z = y * phi;
        log_losses.push(loss.log_value(z));
        margins.push(z);
        opt_softmax.push(s[ds.opt[i]]);
        let c = -inv_n * loss.neg_derivative(z) * y;
        // ∇_u Φ = Xᵀ s
        for (tok, &st) in x.chunks(d).zip(&s) {
            axpy(c * st, tok, &mut grad_u);
        }
        // ∇_W Φ = Xᵀ J (X u) x₁ᵀ
        softmax_jvp(&s, &xu, &mut jxu);
        g.iter_mut().for_each(|v| *v = 0.0);
        for (tok, &jt) in x.chunks(d).zip(&jxu) {
            axpy(jt, tok, &mut g);
        }
        grad_w.add_outer(c, &g, q);
        probs.push(s.clone());
    }
    let log_mean_loss = log_sum_exp(&log_losses) - (n as f64).ln();
    let report = LossReport {
        mean_loss: log_mean_loss.exp(),
        log_mean_loss,
        losses: log_losses.iter().map(|l| l.exp()).collect(),
        log_losses,
        margins,
        opt_softmax,
        softmax: probs,
    };
    Ok(Evaluation { report, grad_u, grad_w })
}

/// Empirical risk `(1/n) Σ exp(−y_i Φ_i)` with per-sample detail.
pub fn empirical_loss(params: &ModelParams, ds: &TokenDataset) -> Result<LossReport> {
    Ok(evaluate(&ExpLoss, params, ds)?.report)
}

pub fn grad_u(params: &ModelParams, ds: &TokenDataset) -> Result<Vec<f64>> {
    Ok(evaluate(&ExpLoss, params, ds)?.grad_u)
}

pub fn grad_w(params: &ModelParams, ds: &TokenDataset) -> Result<Matrix> {
    Ok(evaluate(&ExpLoss, params, ds)?.grad_w)
}

/// `(1/n) Σ exp(−γ_{i,opt})`: the loss with all attention on optimal tokens.
pub fn loss_star(ds: &TokenDataset, u: &[f64]) -> f64 {
    let logs: Vec<f64> = (0..ds.n).map(|i| -ds.labels[i] * dot(ds.opt_token(i), u)).collect();
    (log_sum_exp(&logs) - (ds.n as f64).ln()).exp()
}
