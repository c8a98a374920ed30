mod common;

use attn_ib::model::{empirical_loss, evaluate, grad_u, grad_w, ExpLoss, ModelParams};
use attn_ib::numerics::{log_sum_exp, norm, softmax_jacobian, softmax_jvp, stable_softmax, Matrix};
use common::{dd_dot, dd_softmax, gaussian, random_instance, rng, Dd};
use rand::Rng;

fn loss_at(ds: &attn_ib::model::TokenDataset, u: &[f64], w: &[f64]) -> f64 {
    let d = u.len();
    let p = ModelParams::new(u.to_vec(), Matrix::from_vec(d, d, w.to_vec()).unwrap()).unwrap();
    empirical_loss(&p, ds).unwrap().mean_loss
}

/// Fourth-order central stencil.
fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|k| {
            let x0 = x[k];
            let mut at = |dx: f64| {
                x[k] = x0 + dx;
                f(&x)
            };
            let v = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            x[k] = x0;
            v
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1e-300)
}

#[test]
fn gradients_match_central_differences() {
    let mut r = rng(11);
    for _ in 0..60 {
        let (n, t, d) = (r.random_range(1..=5), r.random_range(2..=4), r.random_range(1..=8));
        let ds = random_instance(&mut r, n, t, d);
        let u = gaussian(&mut r, d, 1.0);
        // unit-variance logits keep the gradient well above rounding noise
        let w = gaussian(&mut r, d * d, 1.0 / d as f64);
        let p = ModelParams::new(u.clone(), Matrix::from_vec(d, d, w.clone()).unwrap()).unwrap();
        let gu = grad_u(&p, &ds).unwrap();
        let gw = grad_w(&p, &ds).unwrap();
        let fu = central_diff(|x| loss_at(&ds, x, &w), &u, 1e-3);
        let fw = central_diff(|x| loss_at(&ds, &u, x), &w, 1e-3);
        assert!(rel_err(&fu, &gu) < 1e-6, "grad_u: {:?} vs {:?}", fu, gu);
        assert!(rel_err(&fw, gw.as_slice()) < 1e-6, "grad_w rel err {}", rel_err(&fw, gw.as_slice()));
    }
}

#[test]
fn loss_report_is_consistent() {
    let mut r = rng(3);
    let ds = random_instance(&mut r, 4, 3, 5);
    let p = ModelParams::new(gaussian(&mut r, 5, 1.0), Matrix::from_vec(5, 5, gaussian(&mut r, 25, 1.0)).unwrap()).unwrap();
    let ev = evaluate(&ExpLoss, &p, &ds).unwrap();
    let rep = &ev.report;
    let mean: f64 = rep.losses.iter().sum::<f64>() / 4.0;
    assert!((rep.mean_loss - mean).abs() <= 1e-15 * mean);
    assert!((rep.log_mean_loss - mean.ln()).abs() < 1e-14);
    for i in 0..4 {
        assert!((rep.losses[i] - (-rep.margins[i]).exp()).abs() <= 1e-15 * rep.losses[i]);
        assert!((rep.softmax[i].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(rep.opt_softmax[i], rep.softmax[i][ds.opt(i)]);
    }
}

#[test]
fn softmax_agrees_with_double_double() {
    let mut r = rng(5);
    for case in 0..300 {
        let len = r.random_range(1..=12);
        let spread = [1.0, 30.0, 300.0, 700.0][case % 4];
        let v = gaussian(&mut r, len, spread);
        let s = stable_softmax(&v).unwrap();
        let oracle = dd_softmax(&v);
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for k in 0..len {
            let o = oracle[k].to_f64();
            // the f64 shift `v − max` is exact to one rounding; its error scales with the gap
            let tol = 8.0 * f64::EPSILON * (1.0 + (v[k] - m).abs()) * o + f64::MIN_POSITIVE;
            assert!((s[k] - o).abs() <= tol, "case {case} k {k}: {} vs {}", s[k], o);
        }
    }
}

#[test]
fn log_sum_exp_agrees_with_double_double() {
    let mut r = rng(6);
    for _ in 0..200 {
        let len = r.random_range(1..=10);
        let v = gaussian(&mut r, len, 50.0);
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = v.iter().fold(Dd::ZERO, |a, &x| a.add(Dd::from(x).sub(Dd::from(m)).exp()));
        let oracle = m + z.to_f64().ln();
        assert!((log_sum_exp(&v) - oracle).abs() <= 4.0 * f64::EPSILON * oracle.abs().max(1.0));
    }
}

#[test]
fn jvp_keeps_precision_under_saturation() {
    let mut r = rng(7);
    for case in 0..200 {
        let len = r.random_range(2..=8);
        let logits = gaussian(&mut r, len, if case % 2 == 0 { 5.0 } else { 60.0 });
        let v = gaussian(&mut r, len, 1.0);
        let s = stable_softmax(&logits).unwrap();
        let mut out = vec![0.0; len];
        softmax_jvp(&s, &v, &mut out);
        let sd = dd_softmax(&logits);
        for k in 0..len {
            // (Jv)_k = s_k Σ_τ s_τ (v_k − v_τ)
            let inner = (0..len).fold(Dd::ZERO, |a, tau| a.add(sd[tau].mul_f(v[k] - v[tau])));
            let o = sd[k].mul(inner).to_f64();
            let scale: f64 = s[k] * (0..len).map(|tau| s[tau] * (v[k] - v[tau]).abs()).sum::<f64>();
            assert!((out[k] - o).abs() <= 1e-13 * scale + f64::MIN_POSITIVE, "case {case}: {} vs {o}", out[k]);
        }
        // the dense Jacobian agrees on moderate logits
        if case % 2 == 0 {
            let j = softmax_jacobian(&logits).unwrap();
            let dense = j.matvec(&v);
            for k in 0..len {
                assert!((dense[k] - out[k]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn double_double_dot_beats_naive_sum() {
    // cancellation the f64 sum loses entirely
    let a = [1e16, 1.0, -1e16];
    let b = [1.0, 1.0, 1.0];
    assert_eq!(dd_dot(&a, &b).to_f64(), 1.0);
}
