mod common;

use attn_ib::datagen::gd_counterexample;
use attn_ib::model::TokenDataset;
use attn_ib::numerics::{dot, norm, Matrix};
use attn_ib::svm::{solve_u_svm, solve_w_svm, w_svm_norm, SvmOptions};
use common::*;
use nalgebra::DMatrix;
use rand::Rng;

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    max_abs_diff(a, b) / norm(b).max(1.0)
}

#[test]
fn counterexample_solution_is_the_unit_corner() {
    let sol = solve_w_svm(&gd_counterexample(), &SvmOptions::default()).unwrap();
    assert!(sol.feasible);
    let w = sol.matrix().unwrap();
    assert!(max_abs_diff(w.as_slice(), &[1.0, 0.0, 0.0, 0.0]) < 1e-12);
    assert!((sol.norm - 1.0).abs() < 1e-12);
    assert_eq!(sol.active_constraints, vec![(0, 1)]);
}

#[test]
fn w_svm_agrees_with_projected_gradient_and_active_set() {
    let mut r = rng(11);
    let opts = SvmOptions::default();
    for _ in 0..50 {
        let (n, t, d) = (r.random_range(1..=4), r.random_range(2..=3), r.random_range(6..=8));
        let ds = random_instance(&mut r, n, t, d);
        let sol = solve_w_svm(&ds, &opts).unwrap();
        assert!(sol.feasible);
        assert!(sol.kkt_residual < 1e-8, "kkt {}", sol.kkt_residual);
        assert!(sol.duality_gap.abs() < 1e-8 * sol.norm.powi(2).max(1.0));
        let w = sol.matrix().unwrap().into_vec();
        let pg = pg_w_svm(&ds);
        let exact = active_set_w_svm(&ds).expect("generic instance is feasible");
        assert!(rel_diff(&w, &pg) < 1e-6, "vs projected gradient {}", rel_diff(&w, &pg));
        assert!(rel_diff(&w, &exact) < 1e-6, "vs active set {}", rel_diff(&w, &exact));
        for m in constraint_mats(&ds) {
            assert!(dot(&m, &w) >= 1.0 - 1e-8);
        }
        let lam = w_svm_norm(&ds, &opts).unwrap().unwrap();
        assert!((lam - sol.norm).abs() < 1e-8 * sol.norm);
    }
}

#[test]
fn u_svm_agrees_with_active_set() {
    let mut r = rng(12);
    for _ in 0..30 {
        let (n, t, d) = (r.random_range(1..=5), r.random_range(2..=3), r.random_range(6..=8));
        let ds = random_instance(&mut r, n, t, d);
        let sol = solve_u_svm(&ds, &SvmOptions::default()).unwrap();
        let vecs: Vec<Vec<f64>> =
            (0..n).map(|i| ds.opt_token(i).iter().map(|x| ds.label(i) * x).collect()).collect();
        let exact = active_set_min_norm(&vecs).unwrap();
        let u = sol.vector().unwrap();
        assert!(sol.kkt_residual < 1e-8);
        assert!(rel_diff(u, &exact) < 1e-6);
    }
}

#[test]
fn conflicting_samples_yield_a_certificate() {
    // same tokens, optimal indices swapped: the constraints cancel
    let x = vec![1.0, 0.5, 0.3, -0.2, -0.7, 0.9];
    let tokens = [x.clone(), x].concat();
    let ds = TokenDataset::new(3, 2, tokens, vec![1.0, 1.0], vec![0.0, 1.0], vec![1, 2]).unwrap();
    let sol = solve_w_svm(&ds, &SvmOptions::default()).unwrap();
    assert!(!sol.feasible);
    assert!(sol.solution.is_none());
    let cert = sol.certificate.unwrap();
    assert!(cert.iter().all(|&c| c >= 0.0));
    assert!((cert.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mats = constraint_mats(&ds);
    let mut combo = vec![0.0; 4];
    for (m, c) in mats.iter().zip(&cert) {
        for (a, b) in combo.iter_mut().zip(m) {
            *a += c * b;
        }
    }
    let scale = mats.iter().map(|m| norm(m)).fold(0.0, f64::max);
    assert!(norm(&combo) < 1e-6 * scale, "certificate residual {}", norm(&combo));
    assert_eq!(w_svm_norm(&ds, &SvmOptions::default()).unwrap(), None);
}

#[test]
fn norm_scales_inversely_with_squared_token_scale() {
    let mut r = rng(13);
    let opts = SvmOptions::default();
    for _ in 0..10 {
        let ds = random_instance(&mut r, 3, 3, 6);
        let base = solve_w_svm(&ds, &opts).unwrap().norm;
        for c in [0.1, 3.0] {
            let scaled = solve_w_svm(&ds.scaled_tokens(c), &opts).unwrap().norm;
            assert!((scaled * c * c / base - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn solution_is_rotation_equivariant() {
    let mut r = rng(14);
    let opts = SvmOptions::default();
    for _ in 0..10 {
        let (n, t, d) = (3, 3, 6);
        let ds = random_instance(&mut r, n, t, d);
        let q = DMatrix::from_row_slice(d, d, &gaussian(&mut r, d * d, 1.0)).qr().q();
        let rot = |v: &[f64]| -> Vec<f64> { (0..d).map(|a| (0..d).map(|b| q[(a, b)] * v[b]).sum()).collect() };
        let tokens: Vec<f64> = (0..n).flat_map(|i| (0..t).flat_map(|tau| rot(ds.token(i, tau))).collect::<Vec<_>>()).collect();
        let rds = TokenDataset::new(t, d, tokens, ds.labels().to_vec(), rot(ds.u_star()), ds.opt_indices().to_vec()).unwrap();
        let w = solve_w_svm(&ds, &opts).unwrap().matrix().unwrap();
        let rw = solve_w_svm(&rds, &opts).unwrap().matrix().unwrap();
        // Q W Qᵀ
        let qm = Matrix::from_vec(d, d, (0..d * d).map(|k| q[(k / d, k % d)]).collect()).unwrap();
        let mut expect = Matrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let mut v = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        v += qm.get(a, k) * w.get(k, l) * qm.get(b, l);
                    }
                }
                expect.set(a, b, v);
            }
        }
        assert!(rel_diff(rw.as_slice(), expect.as_slice()) < 1e-7);
    }
}
