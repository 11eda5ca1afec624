mod common;

use dncs::linalg::{expm, min_sym_eigenvalue};
use dncs::sampled::oracle::{quadrature_cost_oracle, HeldInputs};
use dncs::sampled::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn lifted_model_matches_continuous_oracles() {
    let (traj, cost) = common::discretization_errors(11, 50).unwrap();
    assert!(traj <= 1e-8, "trajectory error {traj:e}");
    assert!(cost <= 1e-8, "cost error {cost:e}");
}

#[test]
fn scalar_phi_gamma_closed_form() {
    let (a, t) = (-1.3, 0.37);
    let (phi, gamma) = phi_gamma(&DMatrix::from_element(1, 1, a), t);
    assert!((phi[(0, 0)] - (a * t).exp()).abs() <= 1e-15);
    assert!((gamma[(0, 0)] - ((a * t).exp() - 1.0) / a).abs() <= 1e-15);
}

#[test]
fn scalar_pmu_closed_form() {
    // 1 = 2 P a with a = -0.5 gives P = -1
    let sys = CtsSystem::state_only(DMatrix::from_element(1, 1, -0.5), DMatrix::from_element(1, 1, 2.0));
    let cost = CtsCost {
        q: DMatrix::from_element(1, 1, 1.0),
        n: DMatrix::from_element(1, 1, 0.0),
        r: DMatrix::from_element(1, 1, 1.0),
    };
    let pmu = solve_pmu(&sys, &cost).unwrap();
    assert!((pmu.p[(0, 0)] + 1.0).abs() <= 1e-14);
    // 0 = a M + P b gives M = -4, then U = R - 2 b M = 17
    assert!((pmu.m[(0, 0)] + 4.0).abs() <= 1e-13);
    assert!((pmu.u[(0, 0)] - 17.0).abs() <= 1e-12);
    assert!(pmu.residual(&sys, &cost) <= 1e-14);
}

#[test]
fn psi_matches_single_interval_quadrature() {
    let mut rng = common::rng(4);
    for _ in 0..10 {
        let sys = common::random_system(&mut rng);
        let cost = common::random_cost(&mut rng, sys.n_x(), sys.n_u());
        let pmu = solve_pmu(&sys, &cost).unwrap();
        assert!(pmu.residual(&sys, &cost) <= 1e-10);
        let h = 0.15;
        let x0 = common::random_vector(&mut rng, sys.n_x(), 1.0);
        let u = common::random_vector(&mut rng, sys.n_u(), 1.0);
        let inputs = HeldInputs {
            history: vec![],
            inputs: vec![u.clone()],
            disturbances: vec![],
        };
        let quad = quadrature_cost_oracle(&sys, &cost, h, 0.0, &inputs, &x0, h);
        let v = DVector::from_iterator(x0.len() + u.len(), x0.iter().chain(u.iter()).copied());
        let exact = v.dot(&(psi_blocks(&pmu, &sys, h) * &v));
        assert!(common::rel_gap(exact, quad) <= 1e-8);
        let zero = psi_blocks(&pmu, &sys, 0.0);
        assert!(zero.amax() <= 1e-14 * pmu.p.amax().max(pmu.u.amax()));
        let split = psi_blocks(&pmu, &sys, 0.06);
        let (phi, gamma) = phi_gamma(&sys.a, 0.06);
        let n = sys.n_x();
        let m = sys.n_u();
        // advance [x; u] over 0.06 s and accumulate the rest of the interval
        let mut t = DMatrix::<f64>::identity(n + m, n + m);
        t.view_mut((0, 0), (n, n)).copy_from(&phi);
        t.view_mut((0, n), (n, m)).copy_from(&(&gamma * &sys.b_u));
        let rest = psi_blocks(&pmu, &sys, h - 0.06);
        let additive = &split + t.transpose() * rest * &t;
        let whole = psi_blocks(&pmu, &sys, h);
        assert!((additive - &whole).amax() <= 1e-10 * whole.amax());
    }
}

#[test]
fn zero_delay_and_full_period_delay() {
    let mut rng = common::rng(6);
    let sys = common::random_system(&mut rng);
    let cost = common::random_cost(&mut rng, sys.n_x(), sys.n_u());
    let h = 0.1;
    let d0 = discretize(&sys, &cost, h, 0.0).unwrap();
    assert_eq!(d0.n_z(), sys.n_x());
    assert!((&d0.a2 - expm(&(&sys.a * h))).amax() <= 1e-13);
    let d1 = discretize(&sys, &cost, h, h).unwrap();
    assert_eq!((d1.q, d1.r), (0, h));
    let n = sys.n_x();
    assert!((d1.a2.view((0, 0), (n, n)) - &d0.a2).amax() <= 1e-13);
    // with d = h the command of the previous period drives the plant
    let slot = d1.a2.view((0, n), (n, sys.n_u())).into_owned();
    assert!((slot - &d0.b2u).amax() <= 1e-13);
    assert!(d1.b2u.view((0, 0), (n, sys.n_u())).amax() == 0.0);
}

#[test]
fn memory_shifts_one_hot_inputs() {
    let mut rng = common::rng(7);
    let sys = common::random_system(&mut rng);
    let cost = common::random_cost(&mut rng, sys.n_x(), sys.n_u());
    let disc = discretize(&sys, &cost, 0.1, 0.27).unwrap();
    let (n, m) = (sys.n_x(), sys.n_u());
    let slots = disc.memory_slots();
    assert_eq!(slots, disc.q + 1);
    for j in 0..slots * m {
        let mut history = vec![DVector::zeros(m); slots];
        history[j / m][j % m] = 1.0;
        let z = disc.lifted_state(&DVector::zeros(n), &history);
        let next = &disc.a2 * z;
        let mut shifted = history[1..].to_vec();
        shifted.push(DVector::zeros(m));
        let memory = next.rows(n, slots * m).into_owned();
        let want = disc.lifted_state(&DVector::zeros(n), &shifted).rows(n, slots * m).into_owned();
        assert_eq!(memory, want);
    }
    let u = DVector::from_element(m, 1.0);
    let fresh = &disc.b2u * &u;
    assert_eq!(fresh.rows(n + (slots - 1) * m, m).into_owned(), u);
}

#[test]
fn lifted_cost_is_positive_semidefinite() {
    let mut rng = common::rng(8);
    for _ in 0..20 {
        let sys = common::random_system(&mut rng);
        let cost = common::random_cost(&mut rng, sys.n_x(), sys.n_u());
        for ratio in common::DELAY_RATIOS {
            let disc = discretize(&sys, &cost, 0.1, 0.1 * ratio).unwrap();
            let s = disc.cost_matrix();
            assert!(min_sym_eigenvalue(&s) >= -1e-10 * s.amax());
        }
    }
}

#[test]
fn invalid_sampling_is_rejected() {
    let sys = CtsSystem::state_only(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0));
    let cost = CtsCost {
        q: DMatrix::from_element(1, 1, 1.0),
        n: DMatrix::zeros(1, 1),
        r: DMatrix::from_element(1, 1, 1.0),
    };
    assert!(discretize(&sys, &cost, 0.0, 0.0).is_err());
    assert!(discretize(&sys, &cost, 0.1, -0.01).is_err());
    assert!(discretize(&sys, &cost, f64::NAN, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn phi_is_identity_plus_a_gamma(seed in any::<u64>(), t in 0.0f64..1.0) {
        let mut rng = common::rng(seed);
        let n = 1 + (seed % 4) as usize;
        let a = common::random_matrix(&mut rng, n, n, 2.0);
        let (phi, gamma) = phi_gamma(&a, t);
        let rhs = DMatrix::identity(n, n) + &a * &gamma;
        prop_assert!((&phi - rhs).amax() <= 1e-12 * phi.amax().max(1.0));
    }

    #[test]
    fn delay_split_reconstructs_delay(h in 0.01f64..1.0, ratio in 1e-3f64..6.0) {
        let d = h * ratio;
        let (q, r) = delay_split(h, d).unwrap();
        prop_assert!(r > 0.0 && r <= h);
        prop_assert!((q as f64 * h + r - d).abs() <= 1e-9 * h.max(d));
    }
}
