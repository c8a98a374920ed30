//! Per-step metrics, theoretical bound curves, rate fits and property
//! checks over recorded traces.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::datagen::DmCheckConfig;
use crate::error::{Error, Result};
use crate::model::{evaluate, Evaluation, ExpLoss, ModelParams, TokenDataset};
use crate::numerics::{cosine, cosine_gap, dot, norm, Matrix};
use crate::svm::DerivedConstants;

/// Reference directions used for alignment metrics.
#[derive(Clone, Debug, Default)]
pub struct References {
    pub w_mm: Option<Matrix>,
    pub u_mm: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub loss: f64,
    pub log_loss: f64,
    pub w_norm: f64,
    pub u_norm: f64,
    pub align_w: Option<f64>,
    pub align_u_margin: Option<f64>,
    pub mean_opt_softmax: f64,
    pub min_opt_softmax: f64,
    pub token_gap: Option<f64>,
    pub loss_ratio: f64,
    pub grad_w_norm: f64,
    pub grad_u_norm: f64,
    pub eta_w: Option<f64>,
    pub eta_u: Option<f64>,
    #[serde(default)]
    pub diag: RecordDiagnostics,
}

/// Quantities outside the trace CSV schema; exported to a sidecar file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordDiagnostics {
    /// `1 − align_w`, computed without cancellation.
    pub align_err: Option<f64>,
    /// `⟨−∇̄_W, W̄_mm⟩`.
    pub grad_align_mm: Option<f64>,
    /// `⟨−∇_W, W̄_mm⟩`.
    pub cone_mm: Option<f64>,
    /// `⟨−∇_W, W̄_t⟩`.
    pub cone_w: Option<f64>,
    pub opt_softmax: Vec<f64>,
}

/// Metrics of `params` with step sizes left absent.
pub fn record(params: &ModelParams, ds: &TokenDataset, refs: &References) -> Result<TraceRecord> {
    let ev = evaluate(&ExpLoss, params, ds)?;
    Ok(record_from_eval(params, ds, refs, &ev, None, None))
}

pub(crate) fn record_from_eval(
    params: &ModelParams,
    ds: &TokenDataset,
    refs: &References,
    ev: &Evaluation,
    eta_w: Option<f64>,
    eta_u: Option<f64>,
) -> TraceRecord {
    let r = &ev.report;
    let n = ds.n() as f64;
    let u_norm = norm(&params.u);
    let align_u_margin = (u_norm > 0.0).then(|| {
        (0..ds.n())
            .map(|i| ds.label(i) * dot(&params.u, ds.opt_token(i)) / u_norm)
            .fold(f64::INFINITY, f64::min)
    });
    let token_gap = (ds.seq_len() > 1).then(|| {
        (0..ds.n())
            .map(|i| {
                let g = ds.scores_with(i, &params.u);
                let o = ds.opt(i);
                let rest = g.iter().enumerate().filter(|&(k, _)| k != o).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
                g[o] - rest
            })
            .fold(f64::INFINITY, f64::min)
    });
    let w = params.w.as_slice();
    let g = ev.grad_w.as_slice();
    let wmm = refs.w_mm.as_ref().map(Matrix::as_slice);
    let diag = RecordDiagnostics {
        align_err: wmm.and_then(|m| cosine_gap(w, m)),
        grad_align_mm: wmm.and_then(|m| cosine(g, m)).map(|c| -c),
        cone_mm: wmm.and_then(|m| (norm(m) > 0.0).then(|| -dot(g, m) / norm(m))),
        cone_w: (norm(w) > 0.0).then(|| -dot(g, w) / norm(w)),
        opt_softmax: r.opt_softmax.clone(),
    };
    TraceRecord {
        t: params.t,
        loss: r.mean_loss,
        log_loss: r.log_mean_loss,
        w_norm: params.w.frob_norm(),
        u_norm,
        align_w: wmm.and_then(|m| cosine(w, m)),
        align_u_margin,
        mean_opt_softmax: r.opt_softmax.iter().sum::<f64>() / n,
        min_opt_softmax: r.opt_softmax.iter().copied().fold(f64::INFINITY, f64::min),
        token_gap,
        loss_ratio: r.loss_ratio(),
        grad_w_norm: ev.grad_w.frob_norm(),
        grad_u_norm: norm(&ev.grad_u),
        eta_w,
        eta_u,
        diag,
    }
}

pub const TRACE_HEADER: [&str; 15] = [
    "t",
    "loss",
    "log_loss",
    "w_norm",
    "u_norm",
    "align_w",
    "align_u_margin",
    "mean_opt_softmax",
    "min_opt_softmax",
    "token_gap",
    "loss_ratio",
    "grad_w_norm",
    "grad_u_norm",
    "eta_w",
    "eta_u",
];

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::InvalidInput(format!("bad number `{s}`")))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

pub fn write_trace_csv<W: Write>(records: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in records {
        w.write_record([
            r.t.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.log_loss),
            fmt_f64(r.w_norm),
            fmt_f64(r.u_norm),
            fmt_opt(r.align_w),
            fmt_opt(r.align_u_margin),
            fmt_f64(r.mean_opt_softmax),
            fmt_f64(r.min_opt_softmax),
            fmt_opt(r.token_gap),
            fmt_f64(r.loss_ratio),
            fmt_f64(r.grad_w_norm),
            fmt_f64(r.grad_u_norm),
            fmt_opt(r.eta_w),
            fmt_opt(r.eta_u),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trace csv>", e))
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(Error::InvalidInput(format!("unexpected trace header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let f = |k: usize| parse_f64(&row[k]);
        let o = |k: usize| parse_opt(&row[k]);
        out.push(TraceRecord {
            t: row[0].parse().map_err(|_| Error::InvalidInput(format!("bad step `{}`", &row[0])))?,
            loss: f(1)?,
            log_loss: f(2)?,
            w_norm: f(3)?,
            u_norm: f(4)?,
            align_w: o(5)?,
            align_u_margin: o(6)?,
            mean_opt_softmax: f(7)?,
            min_opt_softmax: f(8)?,
            token_gap: o(9)?,
            loss_ratio: f(10)?,
            grad_w_norm: f(11)?,
            grad_u_norm: f(12)?,
            eta_w: o(13)?,
            eta_u: o(14)?,
            diag: RecordDiagnostics::default(),
        });
    }
    Ok(out)
}

/// Sidecar CSV: `t, align_err, grad_align_mm, cone_mm, cone_w, s_0, …, s_{n−1}`.
pub fn write_diag_csv<W: Write>(records: &[TraceRecord], n: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["t", "align_err", "grad_align_mm", "cone_mm", "cone_w"].map(String::from).to_vec();
    header.extend((0..n).map(|i| format!("s_{i}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.t.to_string(),
            fmt_opt(r.diag.align_err),
            fmt_opt(r.diag.grad_align_mm),
            fmt_opt(r.diag.cone_mm),
            fmt_opt(r.diag.cone_w),
        ];
        row.extend(r.diag.opt_softmax.iter().map(|&s| fmt_f64(s)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<diag csv>", e))
}

/// Attaches sidecar diagnostics to records read from the trace CSV.
pub fn read_diag_csv<R: Read>(input: R, records: &mut [TraceRecord]) -> Result<()> {
    let mut rd = csv::Reader::from_reader(input);
    for (row, rec) in rd.records().zip(records.iter_mut()) {
        let row = row?;
        let t: u64 = row[0].parse().map_err(|_| Error::InvalidInput("bad diag step".into()))?;
        if t != rec.t {
            return Err(Error::InvalidInput(format!("diag step {t} does not match trace step {}", rec.t)));
        }
        rec.diag = RecordDiagnostics {
            align_err: parse_opt(&row[1])?,
            grad_align_mm: parse_opt(&row[2])?,
            cone_mm: parse_opt(&row[3])?,
            cone_w: parse_opt(&row[4])?,
            opt_softmax: row.iter().skip(5).map(parse_f64).collect::<Result<_>>()?,
        };
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Bound curves

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum BoundForm {
    /// `1 − c (log t)²/t`
    LogSquaredOverT { c: f64 },
    /// `(1 + (T−1) e^{−r t})⁻¹`
    SoftmaxSaturation { t_count: f64, rate: f64 },
    /// `k t`
    Linear { k: f64 },
    /// `1 − c/(log t)²`
    InverseLogSquared { c: f64 },
    /// `exp(−r (t+1)^{1/3})`
    StretchedExp { rate: f64 },
    /// `1 − ε − c/log t`
    InverseLog { eps: f64, c: f64 },
    /// `g/4 − (1 + exp(r log t))⁻¹`
    MarginLog { gamma_bar: f64, rate: f64 },
    /// `k t^{1/3}`
    CubeRoot { k: f64 },
    /// `k Σ_{s<t} (s+1)^{−2/3}`
    DecayedSum { k: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCurve {
    pub name: String,
    /// Bounded trace field.
    pub field: String,
    pub side: Side,
    /// First step at which the bound is asserted.
    pub t0: f64,
    pub constants: BTreeMap<String, f64>,
    pub form: BoundForm,
}

impl BoundCurve {
    pub fn eval(&self, t: f64) -> f64 {
        match self.form {
            BoundForm::LogSquaredOverT { c } => 1.0 - c * t.ln().powi(2) / t,
            BoundForm::SoftmaxSaturation { t_count, rate } => 1.0 / (1.0 + (t_count - 1.0) * (-rate * t).exp()),
            BoundForm::Linear { k } => k * t,
            BoundForm::InverseLogSquared { c } => 1.0 - c / t.ln().powi(2),
            BoundForm::StretchedExp { rate } => (-rate * (t + 1.0).cbrt()).exp(),
            BoundForm::InverseLog { eps, c } => 1.0 - eps - c / t.ln(),
            BoundForm::MarginLog { gamma_bar, rate } => gamma_bar / 4.0 - 1.0 / (1.0 + (rate * t.ln()).exp()),
            BoundForm::CubeRoot { k } => k * t.cbrt(),
            BoundForm::DecayedSum { k } => k * decayed_sum(t as u64),
        }
    }

    /// Whether `value` respects the bound at `t` (always true before `t0`).
    pub fn holds(&self, t: f64, value: f64, slack: f64) -> bool {
        if t < self.t0 {
            return true;
        }
        let b = self.eval(t);
        match self.side {
            Side::Lower => value >= b - slack,
            Side::Upper => value <= b + slack,
        }
    }
}

/// `Σ_{s<t} (s+1)^{−2/3}`.
pub fn decayed_sum(t: u64) -> f64 {
    (1..=t).map(|s| (s as f64).powf(-2.0 / 3.0)).sum()
}

/// Quantities a bound may need beyond the dataset constants.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BoundSetting {
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    /// `(‖W_{t₀}‖, ⟨W_{t₀}, W̄_mm⟩)` read off a trace.
    pub w_at_t0: Option<(f64, f64)>,
    /// `(‖W_{tε}‖, ⟨W̄_{tε}, W̄_mm⟩, L̂(θ_{tε}))`.
    pub w_at_teps: Option<(f64, f64, f64)>,
    pub epsilon: Option<f64>,
    pub gamma_bar: Option<f64>,
    pub dm: Option<DmCheckConfig>,
    /// `‖W₀‖² − (W₀)₁₁²` for the two-token instance.
    pub w0_offdiag_sq: Option<f64>,
    /// Absolute constant of the joint-training bounds (`C ≥ 24`).
    pub joint_c: Option<f64>,
}

/// Start of the alignment-rate regime for normalized GD.
pub fn ngd_rate_start(c: &DerivedConstants, eta: f64, n: usize, t: usize) -> Result<f64> {
    let (b, l) = (c.b, c.lambda);
    let ups = c.upsilon()?;
    let tf = t as f64;
    let inner = (n as f64 * ups * (b * b * l).powi(-2) * tf * tf).max(5.0);
    Ok((10.0 * b * l / eta.sqrt()).powi(3).max((eta * tf * inner / (20.0 * l)).ln()))
}

/// `C(η, B, Λ, t₀)` of the normalized-GD alignment rate.
pub fn ngd_rate_constant(c: &DerivedConstants, eta: f64, w_norm: f64, w_inner: f64) -> f64 {
    let (b2, l) = (c.b * c.b, c.lambda);
    4.0 / eta * b2 * l * (w_norm - w_inner + 2.0 * b2 * l * (40.0 * l + eta))
}

/// Norm beyond which every normalized-GD step stays in the `ε`-cone.
pub fn r_epsilon(c: &DerivedConstants, n: usize, t: usize, eps: f64) -> Result<f64> {
    let (b2l, l) = (c.b * c.b * c.lambda, c.lambda);
    let tf = t as f64;
    let a = (4.0 * n as f64 / b2l * c.upsilon()? * tf.powi(3) / eps).ln();
    let b = 5.0 * (20.0 * tf * b2l / eps).ln();
    Ok(2.0 * l / eps * a.max(b))
}

/// `γ₁ = (αρ/8)√(d/n)`.
pub fn gamma1(dm: &DmCheckConfig, n: usize, d: usize) -> f64 {
    dm.alpha * dm.rho / 8.0 * (d as f64 / n as f64).sqrt()
}

/// `ω₂ = (αρ/n)√log(10n²/δ)`.
pub fn omega2(dm: &DmCheckConfig, n: usize) -> f64 {
    dm.alpha * dm.rho / n as f64 * dm.log_term(n).sqrt()
}

pub const BOUND_NAMES: [&str; 10] = [
    "ngd_alignment",
    "softmax_saturation",
    "norm_lower",
    "norm_upper",
    "gd_counterexample_alignment",
    "joint_loss",
    "joint_alignment",
    "joint_margin",
    "u_norm_upper",
    "token_gap_lower",
];

fn consts(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

/// One named bound curve.
pub fn bound_curve(name: &str, c: &DerivedConstants, eta: f64, s: &BoundSetting) -> Result<BoundCurve> {
    let (b, l) = (c.b, c.lambda);
    let b2l = b * b * l;
    let curve = |field: &str, side, t0, constants, form| BoundCurve { name: name.to_string(), field: field.into(), side, t0, constants, form };
    Ok(match name {
        "ngd_alignment" | "softmax_saturation" => {
            let t0 = ngd_rate_start(c, eta, s.n, s.t)?;
            let (wn, wi) = s.w_at_t0.ok_or(Error::MissingConstant("W_t0"))?;
            let cc = ngd_rate_constant(c, eta, wn, wi);
            if name == "ngd_alignment" {
                curve("align_w", Side::Lower, t0, consts(&[("B", b), ("Lambda", l), ("eta", eta), ("C", cc)]), BoundForm::LogSquaredOverT { c: cc })
            } else {
                let rate = eta / (8.0 * b * b * l * l);
                let start = (2f64.powi(11) * b2l * b2l * cc).max(t0);
                curve(
                    "mean_opt_softmax",
                    Side::Lower,
                    start,
                    consts(&[("B", b), ("Lambda", l), ("eta", eta), ("C", cc)]),
                    BoundForm::SoftmaxSaturation { t_count: s.t as f64, rate },
                )
            }
        }
        "norm_lower" => curve("w_norm", Side::Lower, 1.0, consts(&[("B", b), ("Lambda", l), ("eta", eta)]), BoundForm::Linear { k: eta / (4.0 * b2l) }),
        "norm_upper" => curve(
            "w_norm",
            Side::Upper,
            1.0,
            consts(&[("B", b), ("Lambda", l), ("eta", eta)]),
            BoundForm::Linear { k: 2.0 * eta * (1.0 / (4.0 * b2l)).max(1.0) },
        ),
        "gd_counterexample_alignment" => {
            let q = s.w0_offdiag_sq.ok_or(Error::MissingConstant("W0_offdiag"))?;
            curve("align_w", Side::Upper, 2.0, consts(&[("W0_offdiag_sq", q)]), BoundForm::InverseLogSquared { c: q / 2.0 })
        }
        "joint_loss" => {
            let dm = s.dm.as_ref().ok_or(Error::MissingConstant("alpha, rho"))?;
            let g1 = gamma1(dm, s.n, s.d);
            curve("loss", Side::Upper, 1.0, consts(&[("gamma1", g1), ("eta", eta)]), BoundForm::StretchedExp { rate: eta * g1 / 2.0 })
        }
        "joint_alignment" => {
            let eps = s.epsilon.ok_or(Error::MissingConstant("epsilon"))?;
            let (wn, wa, loss) = s.w_at_teps.ok_or(Error::MissingConstant("W_t_eps"))?;
            let cc = 2.0 * b2l / eta * (1.0 - eps) * wn * (1.0 - wa / (1.0 - eps) - 2.0 * eta * loss / wn);
            let t_eps = joint_alignment_start(c, eta, eps, s)?;
            curve("align_w", Side::Lower, t_eps, consts(&[("C", cc), ("epsilon", eps), ("eta", eta)]), BoundForm::InverseLog { eps, c: cc })
        }
        "joint_margin" => {
            let g = s.gamma_bar.ok_or(Error::MissingConstant("gamma_bar"))?;
            let rate = eta / (8.0 * b * b * l * l);
            curve("align_u_margin", Side::Lower, 2.0, consts(&[("gamma_bar", g), ("eta", eta)]), BoundForm::MarginLog { gamma_bar: g, rate })
        }
        "u_norm_upper" => curve("u_norm", Side::Upper, 1.0, consts(&[("eta", eta)]), BoundForm::CubeRoot { k: 3.0 * eta }),
        "token_gap_lower" => {
            let dm = s.dm.as_ref().ok_or(Error::MissingConstant("alpha, rho"))?;
            let w2 = omega2(dm, s.n);
            curve("token_gap", Side::Lower, 0.0, consts(&[("omega2", w2), ("eta", eta)]), BoundForm::DecayedSum { k: eta * w2 })
        }
        other => return Err(Error::Config(format!("unknown bound `{other}`"))),
    })
}

/// Start of the joint-training alignment regime.
pub fn joint_alignment_start(c: &DerivedConstants, eta: f64, eps: f64, s: &BoundSetting) -> Result<f64> {
    let dm = s.dm.as_ref().ok_or(Error::MissingConstant("alpha, rho"))?;
    let (b, l) = (c.b, c.lambda);
    let cc = s.joint_c.unwrap_or(24.0);
    let n = s.n as f64;
    let inner = (cc * n * n * (2.0 * s.d as f64).sqrt() / (250.0 * dm.log_term(s.n))).max(10.0 * b * b * l);
    let e1 = (10.0 * b * l).powi(2) / eta * inner.cbrt() * eps.powf(-4.0 / 3.0);
    Ok(e1.exp().max((b * b * l / eta).exp()))
}

/// Every curve whose constants are available, plus the names that were not.
pub fn bound_curves(c: &DerivedConstants, eta: f64, s: &BoundSetting) -> (Vec<BoundCurve>, Vec<(String, Error)>) {
    let mut ok = Vec::new();
    let mut missing = Vec::new();
    for name in BOUND_NAMES {
        match bound_curve(name, c, eta, s) {
            Ok(cv) => ok.push(cv),
            Err(e) => missing.push((name.to_string(), e)),
        }
    }
    (ok, missing)
}

/// Bound curves sampled at the trace's steps.
pub fn write_bounds_csv<W: Write>(curves: &[BoundCurve], steps: &[u64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(curves.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for &t in steps {
        let mut row = vec![t.to_string()];
        row.extend(curves.iter().map(|c| fmt_f64(c.eval(t as f64))));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<bounds csv>", e))
}

// ---------------------------------------------------------------------------
// Rate fits

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// `log y = a + p log t`
    Power,
    /// `log y = a + p log log t`
    LogInverse,
    /// `log(−log y) = a + p log t`
    StretchedExp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitField {
    /// `1 − ⟨W̄_t, W̄_mm⟩`
    AlignmentError,
    Loss,
    /// `1 − mean opt-softmax`
    SoftmaxError,
    WNorm,
}

impl FitField {
    pub fn value(&self, r: &TraceRecord) -> Option<f64> {
        match self {
            FitField::AlignmentError => r.diag.align_err.or(r.align_w.map(|a| 1.0 - a)),
            FitField::Loss => Some(r.loss),
            FitField::SoftmaxError => Some(1.0 - r.mean_opt_softmax),
            FitField::WNorm => Some(r.w_norm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_points: usize,
    /// First and last step used.
    pub range: (f64, f64),
    /// Points dropped because the transform was undefined.
    pub dropped: usize,
}

pub const MIN_FIT_POINTS: usize = 20;

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Fits `model` to `(t, y)` pairs, after dividing `y` by `(log t)^log_power`.
pub fn fit_series(ts: &[f64], ys: &[f64], model: RateModel, log_power: f64) -> Result<FitResult> {
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut used_t = Vec::new();
    for (&t, &y) in ts.iter().zip(ys) {
        let y = if log_power != 0.0 { y / t.ln().powf(log_power) } else { y };
        let (x, z) = match model {
            RateModel::Power => (t.ln(), y.ln()),
            RateModel::LogInverse => (t.ln().ln(), y.ln()),
            RateModel::StretchedExp => (t.ln(), (-y.ln()).ln()),
        };
        if x.is_finite() && z.is_finite() {
            xs.push(x);
            zs.push(z);
            used_t.push(t);
        }
    }
    let dropped = ts.len() - xs.len();
    if xs.len() < MIN_FIT_POINTS {
        let range = match (used_t.first(), used_t.last()) {
            (Some(a), Some(b)) => format!("[{a}, {b}]"),
            _ => "none".into(),
        };
        return Err(Error::InvalidInput(format!(
            "{} usable points (need {MIN_FIT_POINTS}); usable range {range}, {dropped} dropped",
            xs.len()
        )));
    }
    let (slope, intercept, r2) = linear_fit(&xs, &zs);
    Ok(FitResult { exponent: slope, intercept, r2, n_points: xs.len(), range: (used_t[0], *used_t.last().unwrap()), dropped })
}

/// Fits a trace field over records with `t ≥ burn_in` (default: first 10%
/// of the run).
pub fn fit_rate(records: &[TraceRecord], field: FitField, model: RateModel, burn_in: Option<f64>, log_power: f64) -> Result<FitResult> {
    let last = records.last().map_or(0.0, |r| r.t as f64);
    let start = burn_in.unwrap_or(0.1 * last).max(1.0);
    let (ts, ys): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter(|r| r.t as f64 >= start)
        .filter_map(|r| field.value(r).map(|v| (r.t as f64, v)))
        .unzip();
    fit_series(&ts, &ys, model, log_power)
}

// ---------------------------------------------------------------------------
// Property checks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    WOnly,
    Joint,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckConfig {
    pub mode: TrainMode,
    pub eta: f64,
    /// Unscheduled normalized GD on W (enables the norm sandwich and cone).
    #[serde(default)]
    pub ngd: bool,
    /// Decayed joint schedule (enables the `u` norm and token-gap bounds).
    #[serde(default)]
    pub decayed: bool,
    #[serde(default)]
    pub dm: Option<DmCheckConfig>,
    #[serde(default = "default_ratio_c")]
    pub loss_ratio_c: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_slack")]
    pub slack: f64,
    /// Whether the equal-score assumption holds for the dataset.
    #[serde(default = "yes")]
    pub equal_scores: bool,
}

fn default_ratio_c() -> f64 {
    24.0
}

fn default_eps() -> f64 {
    0.25
}

fn default_slack() -> f64 {
    1e-12
}

fn yes() -> bool {
    true
}

impl CheckConfig {
    pub fn new(mode: TrainMode, eta: f64) -> Self {
        CheckConfig {
            mode,
            eta,
            ngd: false,
            decayed: false,
            dm: None,
            loss_ratio_c: default_ratio_c(),
            epsilon: default_eps(),
            slack: default_slack(),
            equal_scores: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_name: String,
    pub pass: bool,
    pub first_violation_t: Option<u64>,
    /// Smallest bound-respecting margin seen; negative means violated.
    /// `None` when no finite margin was evaluated.
    pub worst_slack: Option<f64>,
    pub evaluated: usize,
}

struct Tally {
    name: &'static str,
    slack: f64,
    first: Option<u64>,
    worst: f64,
    evaluated: usize,
}

impl Tally {
    fn new(name: &'static str, slack: f64) -> Self {
        Tally { name, slack, first: None, worst: f64::INFINITY, evaluated: 0 }
    }

    /// Records `margin = (allowed side) − (observed)`; nonnegative is good.
    fn push(&mut self, t: u64, margin: f64) {
        self.evaluated += 1;
        self.worst = self.worst.min(margin);
        if (margin < -self.slack || margin.is_nan()) && self.first.is_none() {
            self.first = Some(t);
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult { check_name: self.name.into(), pass: self.first.is_none(), first_violation_t: self.first, worst_slack: self.worst.is_finite().then_some(self.worst), evaluated: self.evaluated }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.check_name == name)
    }
}

/// Invariants along a trace. Checks needing per-sample scores
/// or gradient alignments use the diagnostics when present.
pub fn property_checks(records: &[TraceRecord], ds: &TokenDataset, c: &DerivedConstants, cfg: &CheckConfig) -> CheckReport {
    let mut out = Vec::new();
    let s = cfg.slack;
    let tf = ds.seq_len() as f64;
    let Some(first) = records.first() else {
        return CheckReport { checks: out };
    };
    let per_sample = records.iter().all(|r| r.diag.opt_softmax.len() == ds.n());

    // (a) optimal softmax lower bound
    let mut a = Tally::new("softmax_lower", s);
    for r in records {
        match cfg.mode {
            TrainMode::WOnly if per_sample => {
                for (s0, st) in first.diag.opt_softmax.iter().zip(&r.diag.opt_softmax) {
                    a.push(r.t, st - s0.min(1.0 / tf));
                }
            }
            TrainMode::WOnly => a.push(r.t, r.min_opt_softmax - first.min_opt_softmax.min(1.0 / tf)),
            TrainMode::Joint => a.push(r.t, r.min_opt_softmax - 0.5),
        }
    }
    out.push(a.finish());

    if cfg.mode == TrainMode::WOnly {
        let mut m = Tally::new("softmax_monotone", s);
        for w in records.windows(2) {
            if per_sample {
                for (p, q) in w[0].diag.opt_softmax.iter().zip(&w[1].diag.opt_softmax) {
                    m.push(w[1].t, q - p);
                }
            } else {
                m.push(w[1].t, w[1].min_opt_softmax - w[0].min_opt_softmax);
                m.push(w[1].t, w[1].mean_opt_softmax - w[0].mean_opt_softmax);
            }
        }
        out.push(m.finish());
    }

    // (b) gradient correlation with W_mm
    if cfg.equal_scores && records.iter().any(|r| r.diag.grad_align_mm.is_some()) {
        let bound = 1.0 / (2.0 * c.b * c.b * c.lambda);
        let mut b = Tally::new("grad_correlation", s);
        for r in records {
            if let Some(g) = r.diag.grad_align_mm {
                b.push(r.t, g - bound);
            }
        }
        out.push(b.finish());
    }

    if cfg.mode == TrainMode::WOnly && cfg.ngd {
        let lo = cfg.eta / (4.0 * c.b * c.b * c.lambda);
        let hi = 2.0 * cfg.eta * (1.0 / (4.0 * c.b * c.b * c.lambda)).max(1.0);
        let mut n = Tally::new("norm_sandwich", s);
        for r in records.iter().filter(|r| r.t > 0) {
            let t = r.t as f64;
            n.push(r.t, (r.w_norm - lo * t).min(hi * t - r.w_norm) / t.max(1.0));
        }
        out.push(n.finish());

        if let Ok(radius) = r_epsilon(c, ds.n(), ds.seq_len(), cfg.epsilon) {
            let mut k = Tally::new("cone", s);
            for r in records.iter().filter(|r| r.w_norm >= radius) {
                if let (Some(mm), Some(w)) = (r.diag.cone_mm, r.diag.cone_w) {
                    k.push(r.t, mm - (1.0 - cfg.epsilon) * w);
                }
            }
            out.push(k.finish());
        }
    }

    if cfg.mode == TrainMode::Joint {
        if let Some(dm) = &cfg.dm {
            let g1 = gamma1(dm, ds.n(), ds.dim());
            let mut p = Tally::new("pl_inequality", s);
            for r in records {
                // relative to L̂ so tiny losses stay comparable
                p.push(r.t, if r.loss > 0.0 { r.grad_u_norm / r.loss - g1 } else { f64::INFINITY });
            }
            out.push(p.finish());
        }
        let mut d = Tally::new("loss_ratio", s);
        for r in records {
            d.push(r.t, cfg.loss_ratio_c - r.loss_ratio);
        }
        out.push(d.finish());

        let mut e = Tally::new("token_gap", s);
        let w2 = cfg.dm.as_ref().filter(|_| cfg.decayed).map(|dm| omega2(dm, ds.n()));
        for (i, r) in records.iter().enumerate() {
            let Some(g) = r.token_gap else { continue };
            if i > 0 {
                if let Some(prev) = records[i - 1].token_gap {
                    e.push(r.t, g - prev);
                }
            }
            if let Some(w2) = w2 {
                e.push(r.t, g - cfg.eta * w2 * decayed_sum(r.t));
            }
        }
        out.push(e.finish());

        let mut f = Tally::new("loss_segment", s);
        for w in records.windows(2).filter(|w| w[1].t == w[0].t + 1) {
            f.push(w[1].t, (8f64).ln() + w[0].log_loss - w[1].log_loss);
        }
        out.push(f.finish());

        if cfg.decayed {
            let mut u = Tally::new("u_norm", s);
            for r in records {
                u.push(r.t, 3.0 * cfg.eta * (r.t as f64).cbrt() - r.u_norm);
            }
            out.push(u.finish());
        }
    }
    CheckReport { checks: out }
}

/// `⟨−∇, W̄_mm⟩ ≥ (1−ε)⟨−∇, W̄⟩`, with both inner products.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeCheck {
    pub holds: bool,
    pub toward_mm: f64,
    pub toward_w: f64,
}

pub fn cone_check(grad_w: &Matrix, w: &Matrix, w_mm: &Matrix, eps: f64) -> Result<ConeCheck> {
    let (nw, nm) = (w.frob_norm(), w_mm.frob_norm());
    if nw == 0.0 {
        return Err(Error::UndefinedDirection("W"));
    }
    if nm == 0.0 {
        return Err(Error::UndefinedDirection("W_mm"));
    }
    if grad_w.frob_norm() == 0.0 {
        return Err(Error::UndefinedDirection("gradient"));
    }
    let toward_mm = -grad_w.frob_dot(w_mm) / nm;
    let toward_w = -grad_w.frob_dot(w) / nw;
    Ok(ConeCheck { holds: toward_mm >= (1.0 - eps) * toward_w, toward_mm, toward_w })
}
