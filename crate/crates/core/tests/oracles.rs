mod common;

use cl_dialeval::metrics::{average_ranks, spearman};
use cl_dialeval::vcl::{kl_gaussian, kl_scalar};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn spearman_tie_example() {
    let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((r - 3.0 / 10f64.sqrt()).abs() <= 1e-12, "{r}");
}

#[test]
fn spearman_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..200 {
        let (x, y) = random_pair(&mut rng);
        let fast = spearman(&x, &y).unwrap();
        let slow = brute_force_spearman(&x, &y);
        assert!(
            (fast - slow).abs() <= 1e-12,
            "{x:?} {y:?}: {fast} vs {slow}"
        );
    }
}

#[test]
fn constant_input_has_no_correlation() {
    assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(spearman(&[1.0], &[1.0]).is_err());
    assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
}

proptest! {
    #[test]
    fn ranks_sum_to_triangular_number(xs in prop::collection::vec(0u8..6, 1..30)) {
        let v: Vec<f64> = xs.iter().map(|&x| f64::from(x)).collect();
        let n = v.len() as f64;
        let total: f64 = average_ranks(&v).iter().sum();
        prop_assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_is_rank_invariant(xs in prop::collection::vec(-5.0f64..5.0, 3..25), shift in -3.0f64..3.0) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * (i % 3) as f64).collect();
        prop_assume!(xs.iter().any(|&a| a != xs[0]) && ys.iter().any(|&a| a != ys[0]));
        let monotone: Vec<f64> = xs.iter().map(|&x| x.exp() + shift).collect();
        let a = spearman(&xs, &ys).unwrap();
        let b = spearman(&monotone, &ys).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a.abs() <= 1.0 + 1e-12);
        prop_assert!((spearman(&ys, &xs).unwrap() - a).abs() < 1e-15);
    }
}

#[test]
fn unit_mean_shift_is_one_half() {
    let kl = kl_gaussian(&scalar_posterior(1.0, 1.0), &scalar_posterior(0.0, 1.0)).unwrap();
    assert!((kl - 0.5).abs() <= 1e-12, "{kl}");
}

#[test]
fn kl_agrees_with_quadrature() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..50 {
        let (mq, mp) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (sq, sp) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
        let closed = kl_scalar(mq, sq, mp, sp);
        let numeric = quadrature_kl(mq, sq, mp, sp);
        assert!(
            (closed - numeric).abs() <= 1e-6,
            "({mq}, {sq}) ‖ ({mp}, {sp}): {closed} vs {numeric}"
        );
        let via_posterior =
            kl_gaussian(&scalar_posterior(mq, sq), &scalar_posterior(mp, sp)).unwrap();
        assert!((via_posterior - closed).abs() < 1e-9);
    }
}

#[test]
fn gradients_of_all_objectives_match_finite_differences() {
    for seed in 0..30 {
        let problem = small_problem(seed);
        for objective in [Objective::Regression, Objective::Ewc, Objective::Vcl] {
            let err = gradient_error(&problem, objective, seed);
            assert!(err < GRAD_REL_TOL, "seed {seed}, {objective:?}: {err:e}");
        }
    }
}
