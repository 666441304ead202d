mod common;

use common::dense::{dense_sr1, dense_tr_oracle, random_spd, random_symmetric, random_vec, seeded_memory};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmtr_core::objective::{Iterate, Objective, Quadratic};
use rmtr_core::tr::{
    cauchy_point, init_gamma, model_decrease, obs_solve, tr_iterate, HessianApprox, HessianMode, SecantMemory,
    TrConstants, TrustRegionState, UpdateOutcome,
};

#[test]
fn cauchy_point_matches_line_scan_on_indefinite_model() {
    let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
    let g = DVector::from_vec(vec![0.3, 0.8]);
    assert!(g.dot(&(&b * &g)) < 0.0);
    let delta = 0.7;
    let s = cauchy_point(&g, &b, delta);
    let model = |s: &DVector<f64>| g.dot(s) + 0.5 * s.dot(&(&b * s));
    let t_max = delta / g.norm();
    let best = (0..=200_000)
        .map(|i| t_max * i as f64 / 200_000.0)
        .map(|t| model(&(&g * -t)))
        .fold(f64::INFINITY, f64::min);
    assert!((model(&s) - best).abs() < 1e-8);
    assert!((s.norm() - delta).abs() < 1e-14);
}

#[test]
fn cauchy_decrease_bound_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let b = random_symmetric(&mut rng, 4) * 3.0;
        let g = random_vec(&mut rng, 4);
        let delta = rng.random_range(0.05..2.0);
        let s = cauchy_point(&g, &b, delta);
        let bnorm = SymmetricEigen::new(b.clone()).eigenvalues.amax();
        let bound = 0.5 * g.norm() * delta.min(g.norm() / bnorm);
        assert!(model_decrease(&g, &b, &s) >= bound * (1.0 - 1e-12));
    }
}

#[test]
fn sr1_recovers_quadratic_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random_symmetric(&mut rng, 3) + DMatrix::identity(3, 3);
    let mut mem = SecantMemory::new(3, 3);
    for i in 0..3 {
        let mut s = DVector::zeros(3);
        s[i] = 1.0;
        s += random_vec(&mut rng, 3) * 0.3;
        let z = &a * &s;
        assert!(matches!(mem.update(s, z), UpdateOutcome::Stored { .. }));
    }
    assert_eq!(mem.len(), 3);
    for i in 0..3 {
        let mut e = DVector::zeros(3);
        e[i] = 1.0;
        assert!((mem.apply(&e) - &a * &e).norm() < 1e-8);
    }
}

#[test]
fn secant_equations_hold_for_stored_pairs() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_symmetric(&mut rng, 6) * 2.0;
        let mut mem = SecantMemory::new(6, 3);
        for _ in 0..5 {
            let s = random_vec(&mut rng, 6);
            let z = &a * &s;
            mem.update(s, z);
        }
        for (s, z) in mem.pairs() {
            assert!((mem.apply(s) - z).amax() < 1e-10, "seed {seed}");
        }
    }
}

#[test]
fn compact_form_matches_dense_recursion() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mem = seeded_memory(&mut rng, 5, 3);
        let dense = dense_sr1(&mem);
        assert!((mem.to_dense() - dense).amax() < 1e-9, "seed {seed}");
    }
}

#[test]
fn gamma_matches_dense_pencil_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let a = random_spd(&mut rng, 5);
    let mut mem = SecantMemory::new(5, 2);
    let s1 = random_vec(&mut rng, 5);
    let s2 = random_vec(&mut rng, 5);
    mem.update(s1.clone(), &a * &s1);
    mem.update(s2.clone(), &a * &s2);
    assert_eq!(mem.len(), 2);

    let s = DMatrix::from_columns(&[s1, s2]);
    let z = &a * &s;
    let sz = s.transpose() * &z;
    let mid = DMatrix::from_fn(2, 2, |i, j| if i >= j { sz[(i, j)] } else { sz[(j, i)] });
    let gram = SymmetricEigen::new(s.transpose() * &s);
    let inv_sqrt = &gram.eigenvectors
        * DMatrix::from_diagonal(&gram.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * gram.eigenvectors.transpose();
    let pencil = SymmetricEigen::new(&inv_sqrt * mid * &inv_sqrt);
    let lmin = pencil.eigenvalues.min();
    assert!(lmin > 0.0);
    let expected = (0.9 * lmin).clamp(1e-6, 1e6);
    assert!((mem.gamma() - expected).abs() < 1e-10);
    assert!((init_gamma(&mem) - expected).abs() < 1e-10);
}

#[test]
fn obs_matches_dense_oracle_and_kkt() {
    let mut worst_model: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let m = 1 + (seed % 3) as usize;
        let mem = seeded_memory(&mut rng, 5, m);
        let g = random_vec(&mut rng, 5) * rng.random_range(0.1..3.0);
        let delta = rng.random_range(0.05..3.0);
        let b = dense_sr1(&mem);
        let sol = obs_solve(&g, &mem, delta);
        let s = &sol.step;
        assert!(s.norm() <= delta * (1.0 + 1e-10), "seed {seed}: step outside region");
        let oracle = dense_tr_oracle(&b, &g, delta);
        let model = |s: &DVector<f64>| g.dot(s) + 0.5 * s.dot(&(&b * s));
        worst_model = worst_model.max((model(s) - model(&oracle)).abs());

        let scale = 1.0 + g.norm();
        let resid = (&b * s + s * sol.sigma + &g).norm() / scale;
        let comp = sol.sigma * (s.norm() - delta).abs() / (scale * delta.max(1.0));
        let shifted = SymmetricEigen::new(&b + DMatrix::identity(5, 5) * sol.sigma)
            .eigenvalues
            .min();
        assert!(sol.sigma >= 0.0);
        worst_kkt = worst_kkt.max(resid).max(comp).max((-shifted).max(0.0) / scale);
    }
    assert!(worst_model < 1e-6, "model gap {worst_model:e}");
    assert!(worst_kkt < 1e-8, "KKT residual {worst_kkt:e}");
}

#[test]
fn obs_hard_case() {
    // B = diag(-1, 2, 2) realized by one pair; g orthogonal to the negative direction.
    let mut mem = SecantMemory::new(3, 1);
    let s = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let z = DVector::from_vec(vec![-1.0, 0.0, 0.0]);
    mem.update(s, z);
    let b = dense_sr1(&mem);
    let g = DVector::from_vec(vec![0.0, 0.1, 0.0]);
    let sol = obs_solve(&g, &mem, 2.0);
    assert!((sol.step.norm() - 2.0).abs() < 1e-10);
    let oracle = dense_tr_oracle(&b, &g, 2.0);
    let model = |s: &DVector<f64>| g.dot(s) + 0.5 * s.dot(&(&b * s));
    assert!((model(&sol.step) - model(&oracle)).abs() < 1e-10);
}

#[test]
fn obs_zero_gradient_with_positive_definite_model() {
    let mut mem = SecantMemory::new(4, 2);
    mem.update(
        DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
        DVector::from_vec(vec![3.0, 0.0, 0.0, 0.0]),
    );
    let sol = obs_solve(&DVector::zeros(4), &mem, 1.0);
    assert_eq!(sol.step, DVector::zeros(4));
}

fn convex_quadratic(seed: u64) -> Quadratic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_spd(&mut rng, 5);
    let b = random_vec(&mut rng, 5);
    Quadratic::new(a, b).unwrap()
}

#[test]
fn zero_iterations_is_a_no_op() {
    let q = convex_quadratic(1);
    let mut it = Iterate::new(DVector::from_element(5, 1.0));
    let mut st = TrustRegionState::new(1.0, TrConstants::default()).unwrap();
    let mut mem = SecantMemory::new(5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = tr_iterate(&q, &mut it, &mut st, &mut mem, 0, HessianMode::CauchyPoint, &mut rng).unwrap();
    assert_eq!(out.reduction, 0.0);
    assert_eq!(out.iterations, 0);
    assert_eq!(it.theta, DVector::from_element(5, 1.0));
    assert_eq!(st.delta, 1.0);
}

fn run_to_tolerance(mode: HessianMode, seed: u64, max_iter: usize) -> usize {
    let q = convex_quadratic(seed);
    let mut it = Iterate::new(DVector::from_element(5, 2.0));
    let mut st = TrustRegionState::new(1.0, TrConstants::default()).unwrap();
    let mut mem = SecantMemory::new(5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..max_iter {
        let before = it.value(&q).unwrap();
        if it.gradient(&q).unwrap().norm() < 1e-6 {
            return k;
        }
        let out = tr_iterate(&q, &mut it, &mut st, &mut mem, 1, mode, &mut rng).unwrap();
        let after = it.value(&q).unwrap();
        if out.accepted > 0 {
            assert!(after < before, "accepted step must decrease");
        } else {
            assert_eq!(after, before);
        }
    }
    panic!("{mode:?} did not converge in {max_iter} iterations");
}

#[test]
fn cauchy_point_iterations_converge_on_convex_quadratic() {
    for seed in 0..5 {
        run_to_tolerance(HessianMode::CauchyPoint, seed, 50_000);
    }
}

#[test]
fn lsr1_iterations_converge_faster() {
    for seed in 0..5 {
        let lsr1 = run_to_tolerance(HessianMode::Lsr1Overlap, seed, 500);
        let cp = run_to_tolerance(HessianMode::CauchyPoint, seed, 50_000);
        assert!(lsr1 < cp, "seed {seed}: {lsr1} vs {cp}");
    }
}

#[test]
fn sampled_pairs_reproduce_quadratic_hessian_action() {
    let q = convex_quadratic(9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let theta = DVector::zeros(5);
    let pairs = rmtr_core::tr::sample_pairs(&q, &theta, 3, &mut rng).unwrap();
    for (s, z) in &pairs {
        assert!(s.iter().all(|v| (0.0..1.0).contains(v)));
        assert!((q.matrix() * s - z).amax() < 1e-12);
    }
    let s = DMatrix::from_columns(&pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
    assert_eq!(s.rank(1e-10), 3);
    let mut rng2 = ChaCha8Rng::seed_from_u64(4);
    let again = rmtr_core::tr::sample_pairs(&q, &theta, 3, &mut rng2).unwrap();
    assert_eq!(pairs, again);
    assert_eq!(q.tally().get().hvp_calls, 6);
}

proptest! {
    #[test]
    fn radius_rule_is_three_branch(rho in -5.0f64..5.0, delta in 1e-3f64..100.0) {
        let c = TrConstants::default();
        let st = TrustRegionState::new(delta, c).unwrap();
        let next = st.updated_radius(rho);
        let expected = if rho < c.eta1 { c.gamma1 * delta } else if rho <= c.eta2 { delta } else { (c.gamma2 * delta).min(c.delta_max) };
        prop_assert_eq!(next, expected);
        let mut st2 = st;
        prop_assert_eq!(st2.control(rho), rho > c.eta1);
    }

    #[test]
    fn steps_stay_inside_region(seed in 0u64..1000, delta in 1e-3f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 1 + (seed % 3) as usize;
        let mem = seeded_memory(&mut rng, 6, m);
        let g = random_vec(&mut rng, 6) * 4.0;
        let s = obs_solve(&g, &mem, delta).step;
        prop_assert!(s.norm() <= delta * (1.0 + 1e-10));
        let c = cauchy_point(&g, &mem, delta);
        prop_assert!(c.norm() <= delta * (1.0 + 1e-10));
    }
}
