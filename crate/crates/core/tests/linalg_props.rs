mod common;

use common::*;
use proptest::prelude::*;
use spectral_merge::linalg::{dot, svd, svd_with_limit};
use spectral_merge::{reconstruct, Matrix};

fn matrix_strategy(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(m, n)| {
        proptest::collection::vec(-10.0f64..10.0, m * n)
            .prop_map(move |d| Matrix::new(m, n, d).unwrap())
    })
}

fn orthonormality_error(cols: &[&[f64]]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..cols.len() {
        for j in 0..cols.len() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(cols[i], cols[j]) - target).abs());
        }
    }
    worst
}

proptest! {
    #[test]
    fn svd_invariants(a in matrix_strategy(12)) {
        let d = svd(&a).unwrap();
        let rank = a.rows().min(a.cols());
        prop_assert_eq!(d.rank(), rank);
        let s = d.sigma();
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.iter().all(|&x| x >= 0.0));

        let us: Vec<&[f64]> = (0..rank).map(|r| d.u(r)).collect();
        let vs: Vec<&[f64]> = (0..rank).map(|r| d.v(r)).collect();
        let tol = 1e-10;
        prop_assert!(orthonormality_error(&us) <= tol);
        prop_assert!(orthonormality_error(&vs) <= tol);

        let back = reconstruct(&d, s).unwrap();
        prop_assert!(frob_diff(&back, &a) <= 1e-10 * a.frobenius_norm().max(1.0));

        let fro2: f64 = s.iter().map(|x| x * x).sum();
        let direct = a.frobenius_norm().powi(2);
        prop_assert!((fro2 - direct).abs() <= 1e-10 * direct.max(1.0));
    }

    #[test]
    fn singular_values_match_gram_oracle(a in matrix_strategy(12)) {
        let d = svd(&a).unwrap();
        let oracle = gram_singular_values(&a);
        let scale = d.sigma()[0].max(1.0);
        for (x, y) in d.sigma().iter().zip(&oracle) {
            prop_assert!((x - y).abs() <= 1e-7 * scale, "{} vs {}", x, y);
        }
    }

    #[test]
    fn override_norm_is_sum_of_squares(a in matrix_strategy(10), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = rng(seed);
        let d = svd(&a).unwrap();
        let over: Vec<f64> = (0..d.rank()).map(|_| rng.gen_range(0.0..5.0)).collect();
        let want: f64 = over.iter().map(|x| x * x).sum();
        let got = reconstruct(&d, &over).unwrap().frobenius_norm().powi(2);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(f64::MIN_POSITIVE));
        let zero = reconstruct(&d, &vec![0.0; d.rank()]).unwrap();
        prop_assert!(zero.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scaling_scales_sigma(a in matrix_strategy(8), c in 0.01f64..100.0) {
        let d = svd(&a).unwrap();
        let dc = svd(&a.scaled(c)).unwrap();
        for (x, y) in d.sigma().iter().zip(dc.sigma()) {
            prop_assert!((c * x - y).abs() <= 1e-10 * (c * d.sigma()[0]).max(1.0));
        }
    }

    #[test]
    fn transpose_swaps_factors(a in matrix_strategy(8)) {
        let d = svd(&a).unwrap();
        let t = svd(&a.transpose()).unwrap();
        for (x, y) in d.sigma().iter().zip(t.sigma()) {
            prop_assert!((x - y).abs() <= 1e-10 * d.sigma()[0].max(1.0));
        }
    }
}

#[test]
fn left_vectors_follow_sign_convention() {
    let mut rng = rng(11);
    for _ in 0..50 {
        let a = random_matrix(&mut rng, 7, 5);
        let d = svd(&a).unwrap();
        for r in 0..d.rank() {
            let u = d.u(r);
            let big = u
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big >= 0.0);
        }
    }
}

#[test]
fn singular_vectors_agree_with_nalgebra() {
    let mut rng = rng(12);
    for _ in 0..30 {
        let a = random_matrix(&mut rng, 9, 6);
        let d = svd(&a).unwrap();
        for (r, (sigma, u, v)) in na_triplets(&a).into_iter().enumerate() {
            assert!((sigma - d.sigma()[r]).abs() < 1e-10);
            // Same vector up to a shared sign flip.
            let sign = dot(&u, d.u(r)).signum();
            for (x, y) in u.iter().zip(d.u(r)) {
                assert!((sign * x - y).abs() < 1e-8);
            }
            for (x, y) in v.iter().zip(d.v(r)) {
                assert!((sign * x - y).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn deterministic_bitwise() {
    let mut rng = rng(13);
    let a = random_matrix(&mut rng, 20, 14);
    assert_eq!(svd(&a).unwrap(), svd(&a).unwrap());
}

#[test]
fn zero_sweeps_is_reported() {
    let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
    assert!(matches!(
        svd_with_limit(&a, 0),
        Err(spectral_merge::Error::ConvergenceFailure(_))
    ));
}
