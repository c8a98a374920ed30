//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use attn_ib::model::TokenDataset;
use attn_ib::numerics::{dot, sub, Matrix};
use attn_ib::svm::{w_constraints, w_gram};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

/// Gaussian tokens, random labels and `u★`; optimal tokens by score.
pub fn random_instance(r: &mut ChaCha8Rng, n: usize, t: usize, d: usize) -> TokenDataset {
    loop {
        let tokens = gaussian(r, n * t * d, 1.0);
        let labels = (0..n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let u = gaussian(r, d, 1.0);
        if let Ok(ds) = TokenDataset::with_scored_opt(t, d, tokens, labels, u) {
            return ds;
        }
    }
}

// ---------------------------------------------------------------------------
// Double-double arithmetic

#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd { hi: s, lo: (a - (s - bb)) + (b - bb) }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: a.mul_add(b, -p) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

    pub fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let s = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(s.hi, s.lo + t.lo)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = two_prod(self.hi, o.hi);
        quick_two_sum(p.hi, p.lo + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn mul_f(self, x: f64) -> Dd {
        self.mul(Dd::from(x))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f(q2));
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2).add(Dd::from(q3))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// `exp` by range reduction, Taylor series and repeated squaring.
    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self.sub(Dd::LN2.mul_f(k)).mul_f(1.0 / 1024.0);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for i in 1..30 {
            term = term.mul(r).div(Dd::from(i as f64));
            sum = sum.add(term);
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        let scale = 2f64.powi(k as i32);
        Dd { hi: sum.hi * scale, lo: sum.lo * scale }
    }
}

pub fn dd_dot(a: &[f64], b: &[f64]) -> Dd {
    a.iter().zip(b).fold(Dd::ZERO, |acc, (&x, &y)| acc.add(two_prod(x, y)))
}

/// Softmax with every operation in double-double.
pub fn dd_softmax(v: &[f64]) -> Vec<Dd> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<Dd> = v.iter().map(|&x| Dd::from(x).sub(Dd::from(m)).exp()).collect();
    let z = e.iter().fold(Dd::ZERO, |a, &x| a.add(x));
    e.into_iter().map(|x| x.div(z)).collect()
}

// ---------------------------------------------------------------------------
// Max-margin oracles

/// Constraint matrices `(x_opt − x_τ) x₁ᵀ`, flattened.
pub fn constraint_mats(ds: &TokenDataset) -> Vec<Vec<f64>> {
    w_constraints(ds)
        .iter()
        .map(|&(i, tau)| Matrix::outer(&sub(ds.opt_token(i), ds.token(i, tau)), ds.query(i)).into_vec())
        .collect()
}

fn combine(mats: &[Vec<f64>], lambda: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; mats[0].len()];
    for (m, &l) in mats.iter().zip(lambda) {
        for (a, b) in w.iter_mut().zip(m) {
            *a += l * b;
        }
    }
    w
}

/// Dual projected gradient with Nesterov momentum and gradient restarts,
/// returning the primal matrix.
pub fn pg_w_svm(ds: &TokenDataset) -> Vec<f64> {
    let mats = constraint_mats(ds);
    let g = w_gram(ds, &w_constraints(ds));
    let k = g.rows();
    let gm = DMatrix::from_row_slice(k, k, g.as_slice());
    let lip = gm.symmetric_eigenvalues().max();
    let step = 1.0 / lip;
    let grad = |l: &DVector<f64>| &gm * l - DVector::from_element(k, 1.0);
    let mut x = DVector::zeros(k);
    let mut y = x.clone();
    let mut theta = 1.0f64;
    for _ in 0..2_000_000 {
        let gy = grad(&y);
        let xn = (&y - step * &gy).map(|v| v.max(0.0));
        // projected-gradient residual at the new point
        let gx = grad(&xn);
        let res = xn.iter().zip(gx.iter()).map(|(&l, &gi)| if l > 0.0 { gi.abs() } else { (-gi).max(0.0) }).fold(0.0, f64::max);
        if res < 1e-13 {
            x = xn;
            break;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        if (&xn - &x).dot(&gy) > 0.0 {
            theta = 1.0;
            y = xn.clone();
        } else {
            y = &xn + ((theta - 1.0) / tn) * (&xn - &x);
            theta = tn;
        }
        x = xn;
    }
    combine(&mats, x.as_slice())
}

/// Exact solution by enumerating supports: `G_SS λ_S = 1`, `λ_S ≥ 0`, and
/// every other constraint satisfied.
pub fn active_set_min_norm(vecs: &[Vec<f64>]) -> Option<Vec<f64>> {
    let k = vecs.len();
    assert!(k <= 12, "enumeration is exponential");
    let g = DMatrix::from_fn(k, k, |a, b| dot(&vecs[a], &vecs[b]));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let s: Vec<usize> = (0..k).filter(|&j| mask >> j & 1 == 1).collect();
        let gss = DMatrix::from_fn(s.len(), s.len(), |a, b| g[(s[a], s[b])]);
        let Some(ls) = gss.lu().solve(&DVector::from_element(s.len(), 1.0)) else { continue };
        if ls.iter().any(|&l| l < -1e-12) {
            continue;
        }
        let mut lambda = vec![0.0; k];
        for (a, &j) in s.iter().enumerate() {
            lambda[j] = ls[a].max(0.0);
        }
        let w = combine(vecs, &lambda);
        if vecs.iter().all(|m| dot(m, &w) >= 1.0 - 1e-9) {
            let nrm = dot(&w, &w);
            if best.as_ref().is_none_or(|(b, _)| nrm < *b) {
                best = Some((nrm, w));
            }
        }
    }
    best.map(|(_, w)| w)
}

pub fn active_set_w_svm(ds: &TokenDataset) -> Option<Vec<f64>> {
    active_set_min_norm(&constraint_mats(ds))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
