mod common;

use dncs::sampled::{discretize, CtsSystem, DiscretizedSystem};
use dncs::sim_eval::closed_loop_norm;
use dncs::synthesis::*;
use nalgebra::{Complex, DMatrix, DVector};
use proptest::prelude::*;

fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn random_disc(seed: u64, d: f64) -> DiscretizedSystem {
    let mut rng = common::rng(seed);
    let sys = common::random_system(&mut rng);
    let cost = common::random_cost(&mut rng, sys.n_x(), sys.n_u());
    discretize(&sys, &cost, 0.1, d).unwrap()
}

/// Random system whose output stacks the state and the input, so the
/// output-energy cost is positive definite.
fn full_output_disc(seed: u64, d: f64) -> DiscretizedSystem {
    let mut rng = common::rng(seed);
    let base = common::random_system(&mut rng);
    let (n, m) = (base.n_x(), base.n_u());
    let mut c = DMatrix::zeros(n + m, n);
    c.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut d_u = DMatrix::zeros(n + m, m);
    d_u.view_mut((n, 0), (m, m)).fill_with_identity();
    let b_w = common::random_matrix(&mut rng, n, 1, 1.0);
    let sys = CtsSystem {
        c,
        d_u,
        d_w: DMatrix::zeros(n + m, 1),
        b_w,
        ..base
    };
    let cost = common::random_cost(&mut rng, n, m);
    discretize(&sys, &cost, 0.1, d).unwrap()
}

/// Cost of `u = F z` from `z0`, summed until the state has decayed.
fn summed_cost(disc: &DiscretizedSystem, f: &DMatrix<f64>, z0: &DVector<f64>) -> f64 {
    let acl = &disc.a2 + &disc.b2u * f;
    let mut z = z0.clone();
    let mut total = 0.0;
    for _ in 0..20_000 {
        let u = f * &z;
        total += z.dot(&(&disc.q2 * &z)) + 2.0 * z.dot(&(&disc.n2 * &u)) + u.dot(&(&disc.r2 * &u));
        z = &acl * z;
        if z.norm() <= 1e-14 * z0.norm() {
            break;
        }
    }
    total
}

/// Peak gain over a dense grid of the unit circle.
fn gridded_norm(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>, points: usize) -> f64 {
    let n = a.nrows();
    let ac = a.map(|v| Complex::new(v, 0.0));
    let bc = b.map(|v| Complex::new(v, 0.0));
    let cc = c.map(|v| Complex::new(v, 0.0));
    let dc = d.map(|v| Complex::new(v, 0.0));
    (0..points)
        .map(|k| {
            let th = std::f64::consts::PI * k as f64 / (points - 1) as f64;
            let z = Complex::from_polar(1.0, th);
            let res = (DMatrix::identity(n, n) * z - &ac).lu().solve(&bc).unwrap();
            (&cc * res + &dc).singular_values().max()
        })
        .fold(0.0, f64::max)
}

#[test]
fn scalar_dare_matches_quadratic_root() {
    let (a, b, q, r) = (1.2, 0.7, 2.0, 0.5);
    let p = dare_solve(&m1(a), &m1(b), &m1(q), &m1(0.0), &m1(r)).unwrap()[(0, 0)];
    let lin = r * (1.0 - a * a) - q * b * b;
    let want = (-lin + (lin * lin + 4.0 * b * b * q * r).sqrt()) / (2.0 * b * b);
    assert!(common::rel_gap(p, want) <= 1e-12);
}

#[test]
fn zero_input_reduces_to_stein() {
    let p = dare_solve(&m1(0.5), &m1(0.0), &m1(1.0), &m1(0.0), &m1(1.0)).unwrap()[(0, 0)];
    assert!((p - 4.0 / 3.0).abs() <= 1e-14);
}

#[test]
fn zero_state_weight_gives_zero_value() {
    let disc = random_disc(30, 0.0);
    let a = &disc.a2;
    let n = a.nrows();
    let m = disc.n_u();
    let res = lqr_core(a, &disc.b2u, &DMatrix::zeros(n, n), &DMatrix::zeros(n, m), &DMatrix::identity(m, m)).unwrap();
    assert!(res.p.amax() <= 1e-14);
    assert!(res.f.amax() <= 1e-14);
}

#[test]
fn lqr_certificate_matches_summed_cost() {
    let mut rng = common::rng(31);
    for seed in 0..4 {
        let disc = random_disc(100 + seed, 0.17);
        let lqr = lqr_design(&disc).unwrap();
        assert!(lqr.closed_loop_radius < 1.0);
        for _ in 0..5 {
            let z0 = common::random_vector(&mut rng, disc.n_z(), 1.0);
            let summed = summed_cost(&disc, &lqr.f, &z0);
            assert!(common::rel_gap(lqr.cost(&z0), summed) <= 1e-8);
        }
    }
}

#[test]
fn perturbed_gain_costs_more() {
    let disc = random_disc(32, 0.23);
    let lqr = lqr_design(&disc).unwrap();
    let z0 = common::random_vector(&mut common::rng(33), disc.n_z(), 1.0);
    let best = summed_cost(&disc, &lqr.f, &z0);
    for j in 0..lqr.f.len() {
        let mut f = lqr.f.clone();
        f[j] += 0.01;
        assert!(summed_cost(&disc, &f, &z0) > best, "entry {j}");
    }
}

#[test]
fn hinf_feasibility_and_certificates() {
    for seed in 40..46 {
        let disc = full_output_disc(seed, 0.07);
        let search = gamma_min(&disc, 1e-4).unwrap();
        let star = search.gamma_star;
        let large = hinf_design(&disc, 1e3 * star).unwrap();
        assert!(large.certified_norm < 1e3 * star);
        let relaxed = hinf_design(&disc, 1.2 * star).unwrap();
        let norm = closed_loop_norm(&disc, &relaxed.f).unwrap();
        assert!(norm < 1.2 * star);
        assert!((norm - relaxed.certified_norm).abs() <= 1e-9 * norm);
        assert!(search.gamma_infeasible <= star && star <= search.gamma_infeasible * (1.0 + 2e-4));
        assert!(common::hinf_certificate_on(&disc, "random").unwrap() > 0);
    }
}

#[test]
fn gamma_below_direct_feedthrough_is_infeasible() {
    let mut disc = full_output_disc(50, 0.0);
    disc.d2w = DMatrix::from_fn(disc.d2w.nrows(), 1, |i, _| if i == 0 { 3.0 } else { 0.0 });
    assert!(matches!(hinf_design(&disc, 2.9), Err(SynthesisError::GammaInfeasible { .. })));
    assert!(gamma_min(&disc, 1e-4).unwrap().gamma_star >= 3.0);
}

#[test]
fn static_gamma_search_finds_feedthrough() {
    let z = DMatrix::zeros(1, 1);
    let tol = 1e-5;
    let res = gamma_min_core(&z, &z, &z, &z, &z, &m1(2.0), tol).unwrap();
    assert!((res.gamma_star / 2.0 - 1.0).abs() <= 2.0 * tol);
}

#[test]
fn brackets_overlap_across_tolerances() {
    let disc = full_output_disc(51, 0.12);
    let coarse = gamma_min(&disc, 1e-2).unwrap();
    let fine = gamma_min(&disc, 1e-6).unwrap();
    assert!(coarse.gamma_infeasible <= fine.gamma_star);
    assert!(fine.gamma_infeasible <= coarse.gamma_star);
    assert!(fine.gamma_star <= coarse.gamma_star * (1.0 + 1e-6));
}

#[test]
fn feasible_set_is_an_up_set() {
    let disc = full_output_disc(52, 0.05);
    let star = gamma_min(&disc, 1e-4).unwrap().gamma_star;
    for k in 0..20 {
        let gamma = star * (1.0 + 0.05 * k as f64).powi(2);
        assert!(hinf_design(&disc, gamma).is_ok(), "gamma = {gamma:e}");
    }
}

#[test]
fn large_gamma_approaches_output_energy_lqr() {
    let disc = full_output_disc(53, 0.0);
    let (c, du) = (&disc.c2, &disc.d2u);
    let lqr = lqr_core(&disc.a2, &disc.b2u, &(c.transpose() * c), &(c.transpose() * du), &(du.transpose() * du)).unwrap();
    let star = gamma_min(&disc, 1e-4).unwrap().gamma_star;
    let res = hinf_design(&disc, 1e5 * star).unwrap();
    assert!((&res.f - &lqr.f).amax() <= 1e-4 * lqr.f.amax());
}

#[test]
fn norm_of_known_systems() {
    // 0.5 / (z - 0.5) peaks at z = 1
    let n = hinf_norm(&m1(0.5), &m1(0.5), &m1(1.0), &m1(0.0)).unwrap();
    assert!((n - 1.0).abs() <= 1e-12);
    // 1 / (z + 0.9) peaks at z = -1
    let n = hinf_norm(&m1(-0.9), &m1(1.0), &m1(1.0), &m1(0.0)).unwrap();
    assert!((n - 10.0).abs() <= 1e-9);
    assert!(hinf_norm(&m1(1.1), &m1(1.0), &m1(1.0), &m1(0.0)).is_err());
}

#[test]
fn norm_agrees_with_dense_grid() {
    for seed in 60..66 {
        let disc = random_disc(seed, 0.13);
        if disc.n_w() == 0 {
            continue;
        }
        let got = hinf_norm(&disc.a2, &disc.b2w, &disc.c2, &disc.d2w).unwrap();
        let grid = gridded_norm(&disc.a2, &disc.b2w, &disc.c2, &disc.d2w, 20_000);
        assert!(grid <= got * (1.0 + 1e-9));
        assert!(grid >= got * (1.0 - 1e-3));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn norm_is_similarity_invariant(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = 1 + (seed % 4) as usize;
        let a = common::random_stable(&mut rng, n);
        let (phi, _) = dncs::sampled::phi_gamma(&a, 0.1);
        let b = common::random_matrix(&mut rng, n, 2, 1.0);
        let c = common::random_matrix(&mut rng, 2, n, 1.0);
        let d = common::random_matrix(&mut rng, 2, 2, 0.1);
        let t = DMatrix::identity(n, n) * 2.0 + common::random_matrix(&mut rng, n, n, 0.5);
        let ti = t.clone().try_inverse().unwrap();
        let base = hinf_norm(&phi, &b, &c, &d).unwrap();
        let moved = hinf_norm(&(&t * &phi * &ti), &(&t * &b), &(&c * &ti), &d).unwrap();
        prop_assert!((base - moved).abs() <= 1e-8 * base);
    }
}
