use cordp_core::covariance_lab::*;
use cordp_core::optimizer::{analytic_mse, optimal_params_for};
use cordp_core::rng::Seed;
use cordp_core::{EstimatorKind, NoiseParams, SystemConfig};
use proptest::prelude::*;

const S: f64 = 3.975;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

fn random_spd(n: usize, seed: u64) -> CovarianceMatrix {
    random_feasible_sigma(n, S, &Seed::from_u64(seed)).unwrap().0
}

#[test]
fn three_user_mse_by_hand() {
    let e = vec![4.0, -0.5, 0.3, -0.5, 5.0, -1.0, 0.3, -1.0, 6.0];
    let sigma = CovarianceMatrix::new(3, e.clone()).unwrap();
    let d = 7;
    let sub = |u: &[usize]| -> f64 {
        let mut q = 0.0;
        for &i in u {
            for &j in u {
                q += e[i * 3 + j];
            }
        }
        d as f64 * q / (u.len() * u.len()) as f64
    };
    let all = [vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![1, 2], vec![0, 1, 2]];
    for t in 1..=3 {
        let want = all.iter().filter(|u| u.len() >= t).map(|u| sub(u)).fold(f64::MIN, f64::max);
        assert!((unbiased_mse_of_sigma(&sigma, t, d).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn exchangeable_mse_matches_closed_form() {
    for (n, t, c) in [(5, 4, 0), (5, 3, 1), (10, 8, 0), (10, 6, 3), (12, 11, 2)] {
        let cfg = SystemConfig::new(n, t, c, 3).unwrap();
        let p = optimal_params_for(&cfg, S).unwrap();
        let (s2, rho) = (p.sigma2().unwrap(), p.rho());
        let sigma = CovarianceMatrix::exchangeable(n, s2, rho * s2).unwrap();
        let want = 3.0 * (s2 + rho * s2 * (t as f64 - 1.0)) / t as f64;
        let got = unbiased_mse_of_sigma(&sigma, t, 3).unwrap();
        assert!((got - want).abs() < 1e-10 * want, "({n},{t},{c})");
        assert!((analytic_mse(t, 3, &p, EstimatorKind::Unbiased).unwrap() - want).abs() < 1e-10 * want);
        assert!(privacy_check_inverse_diag(&sigma, S).unwrap().passes);
    }
}

#[test]
fn closed_form_average_matches_explicit_sum() {
    let sigma = random_spd(4, 11);
    let perms = permutations(4);
    assert_eq!(perms.len(), 24);
    let mut acc = [0.0; 16];
    for p in &perms {
        for i in 0..4 {
            for j in 0..4 {
                acc[i * 4 + j] += sigma.get(p[i], p[j]) / 24.0;
            }
        }
    }
    let avg = permutation_average(&sigma);
    for (a, b) in acc.iter().zip(avg.entries()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(avg.is_exchangeable(1e-12));
}

#[test]
fn unequal_diagonal_converse() {
    let sigma = CovarianceMatrix::new(4, vec![
        9.0, -1.0, 0.5, 0.0, //
        -1.0, 5.0, 0.0, 0.2, //
        0.5, 0.0, 6.0, -0.4, //
        0.0, 0.2, -0.4, 12.0,
    ])
    .unwrap();
    assert!(privacy_check_inverse_diag(&sigma, S).unwrap().passes);
    let r = converse_check(sigma, 3, 2, S, 0).unwrap();
    assert!(r.holds(), "{r:?}");
}

#[test]
fn near_exchangeable_converse() {
    let base = CovarianceMatrix::exchangeable(5, 6.0, -0.5).unwrap();
    for k in 0..20u64 {
        let mut s = Seed::from_u64(k).stream();
        let mut e = base.entries().to_vec();
        for i in 0..5 {
            for j in i..5 {
                let eps = 1e-3 * s.gaussian();
                e[i * 5 + j] += eps;
                if i != j {
                    e[j * 5 + i] += eps;
                }
            }
        }
        let m = CovarianceMatrix::new(5, e).unwrap();
        if privacy_check_inverse_diag(&m, S).unwrap().passes {
            assert!(converse_check(m, 4, 1, S, 0).unwrap().holds());
        }
    }
}

#[test]
fn ill_conditioned_inverse_is_rejected() {
    let m = CovarianceMatrix::new(2, vec![1.0, 1.0 - 1e-14, 1.0 - 1e-14, 1.0]);
    assert!(m.map_or(true, |m| m.inverse().is_err()));
}

#[test]
fn enumeration_limit() {
    let m = CovarianceMatrix::scaled_identity(21, 1.0).unwrap();
    assert!(unbiased_mse_of_sigma(&m, 3, 1).is_err());
}

#[test]
fn ldp_point_is_exchangeable_and_tight() {
    let m = CovarianceMatrix::exchangeable(6, S, 0.0).unwrap();
    let c = privacy_check_inverse_diag(&m, S).unwrap();
    assert!(c.passes && c.margins.iter().all(|x| x.abs() < 1e-12));
    let _ = NoiseParams::finite(S, 0.0).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn averaging_is_idempotent(n in 2usize..8, seed in any::<u64>()) {
        let once = permutation_average(&random_spd(n, seed));
        let twice = permutation_average(&once);
        for (a, b) in once.entries().iter().zip(twice.entries()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn averaging_keeps_privacy(n in 2usize..8, seed in any::<u64>()) {
        let sigma = random_spd(n, seed);
        prop_assert!(privacy_check_inverse_diag(&sigma, S).unwrap().passes);
        prop_assert!(privacy_check_inverse_diag(&permutation_average(&sigma), S).unwrap().passes);
    }

    #[test]
    fn converse_holds_for_random_feasible(n in 2usize..7, t_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let t = 1 + ((n - 1) as f64 * t_frac) as usize;
        let r = converse_trial_for(n, t, 2, S, &Seed::from_u64(seed)).unwrap();
        prop_assert!(r.sigma_passes);
        prop_assert!(r.holds(), "{:?}", r);
    }
}
