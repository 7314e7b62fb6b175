use genadapter::numerics::{
    finite_difference_check, frobenius_normalize, low_rank_svd, projected_gram, svd_normalize, Matrix, SvdConfig,
    Tape,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `n×n` matrix with the given singular values and random orthogonal factors.
fn planted(spectrum: &[f64], seed: u64) -> Matrix<f64> {
    let n = spectrum.len();
    let q1 = to_na(&random(n, n, seed)).qr().q();
    let q2 = to_na(&random(n, n, seed + 1)).qr().q();
    from_na(&(q1 * DMatrix::from_diagonal(&DVector::from_row_slice(spectrum)) * q2.transpose()))
}

fn singular_values(m: &Matrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn products_match_reference(m in 1usize..9, k in 0usize..9, n in 1usize..9, seed in 0u64..1000) {
        let a = random(m, k, seed);
        let b = random(k, n, seed + 7);
        let oracle = to_na(&a) * to_na(&b);
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&from_na(&oracle)).unwrap() <= 1e-12);
        let at_b = Matrix::product(&a.transpose(), true, &b, false).unwrap();
        prop_assert!(at_b.max_abs_diff(&from_na(&oracle)).unwrap() <= 1e-12);
    }

    #[test]
    fn gram_is_additive_over_rows(rows in 0usize..12, dh in 1usize..8, dr in 1usize..6, seed in 0u64..1000) {
        let h = random(rows, dh, seed);
        let a2 = random(dr, dh, seed + 1);
        let b1 = random(dh, dr, seed + 2);
        let whole = projected_gram(&h, &a2, &b1).unwrap();
        let mut sum = Matrix::<f64>::zeros(dr, dr);
        for i in 0..rows {
            sum = sum.add(&projected_gram(&h.slice_rows(i..i + 1), &a2, &b1).unwrap()).unwrap();
        }
        prop_assert!(whole.max_abs_diff(&sum).unwrap() <= 1e-10);
        let oracle = to_na(&a2) * to_na(&h).transpose() * to_na(&h) * to_na(&b1);
        prop_assert!(whole.max_abs_diff(&from_na(&oracle)).unwrap() <= 1e-10 * oracle.amax().max(1.0));
    }

    #[test]
    fn svd_normalize_has_unit_spectrum(n in 2usize..8, rank in 1usize..8, seed in 0u64..1000) {
        let rank = rank.min(n);
        let spectrum: Vec<f64> = (0..n).map(|i| (n - i) as f64 + 0.5).collect();
        let m = planted(&spectrum, seed);
        let (u, v) = svd_normalize(&m, rank, &SvdConfig::default()).unwrap();
        prop_assert_eq!(u.cols(), rank);
        let out = Matrix::product(&u, false, &v, true).unwrap();
        let s = singular_values(&out);
        for (i, &si) in s.iter().enumerate() {
            if i < rank {
                prop_assert!((si - 1.0).abs() <= 1e-5, "retained value {si}");
            } else {
                prop_assert!(si <= 1e-8, "discarded value {si}");
            }
        }
    }

    #[test]
    fn exact_rank_inputs_reconstruct(rows in 2usize..9, cols in 2usize..9, rank in 1usize..4, seed in 0u64..1000) {
        let rank = rank.min(rows).min(cols);
        let m = random(rows, rank, seed).matmul(&random(rank, cols, seed + 3)).unwrap();
        let svd = low_rank_svd(&m, rank, &SvdConfig::default()).unwrap();
        let back = svd.reconstruct();
        prop_assert!(back.max_abs_diff(&m).unwrap() <= 1e-6 * m.max_abs());
        let oracle = singular_values(&m);
        for (got, want) in svd.singular_values.iter().zip(&oracle) {
            prop_assert!((got - want).abs() <= 1e-6 * oracle[0]);
        }
    }

    #[test]
    fn frobenius_output_has_unit_norm(rows in 1usize..7, cols in 1usize..7, seed in 0u64..1000) {
        let m = random(rows, cols, seed).scale(1e3);
        prop_assert!((frobenius_normalize(&m).frobenius_norm() - 1.0).abs() <= 1e-12);
        prop_assert!(frobenius_normalize(&Matrix::<f64>::zeros(rows, cols)).is_zero());
    }

    #[test]
    fn normalization_maps_pass_gradient_checks(n in 3usize..6, seed in 0u64..200) {
        let spectrum: Vec<f64> = (0..n).map(|i| 2.0 * (n - i) as f64).collect();
        let m = planted(&spectrum, seed);
        let w = random(n, n, seed + 11);
        let cfg = SvdConfig::default();
        for rank in [n, n - 1] {
            let report = finite_difference_check(std::slice::from_ref(&m), 1e-6, |tape, v| {
                let y = tape.svd_normalize(v[0], rank, &cfg)?;
                tape.weighted_sum(y, w.clone())
            })
            .unwrap();
            prop_assert!(report.max_relative_error <= 1e-4, "normalize rank {rank}: {}", report.max_relative_error);
            let report = finite_difference_check(std::slice::from_ref(&m), 1e-6, |tape, v| {
                let y = tape.svd_truncate(v[0], rank, &cfg)?;
                tape.weighted_sum(y, w.clone())
            })
            .unwrap();
            prop_assert!(report.max_relative_error <= 1e-4, "truncate rank {rank}: {}", report.max_relative_error);
        }
        let report = finite_difference_check(std::slice::from_ref(&m), 1e-6, |tape, v| {
            let y = tape.frobenius_normalize(v[0]);
            tape.weighted_sum(y, w.clone())
        })
        .unwrap();
        prop_assert!(report.max_relative_error <= 1e-4);
    }
}

#[test]
fn composed_chain_passes_gradient_check() {
    // Gram, normalization and emission chained as in the generator.
    let h = random(7, 6, 1);
    let a2 = random(4, 6, 2).scale(0.5);
    let b1 = random(6, 4, 3).scale(0.5);
    let a1 = random(5, 4, 4);
    let w = random(5, 4, 5);
    let cfg = SvdConfig::default();
    let report = finite_difference_check(&[h, a2, b1, a1], 1e-6, |tape, v| {
        let s = tape.projected_gram(v[0], v[1], v[2])?;
        let n = tape.svd_normalize(s, 3, &cfg)?;
        let p = tape.matmul(v[3], n)?;
        tape.weighted_sum(p, w.clone())
    })
    .unwrap();
    assert!(report.max_relative_error <= 1e-4, "{}", report.max_relative_error);
    assert_eq!(report.coordinates_checked, 42 + 24 + 24 + 20);
}

#[test]
fn kernels_are_deterministic() {
    let m = random(9, 7, 4);
    let cfg = SvdConfig::default();
    let a = low_rank_svd(&m, 3, &cfg).unwrap();
    let b = low_rank_svd(&m, 3, &cfg).unwrap();
    assert_eq!(a.singular_values, b.singular_values);
    assert_eq!(a.left_vectors, b.left_vectors);
    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let x1 = t1.param(m.clone());
    let x2 = t2.param(m.clone());
    let y1 = t1.svd_normalize(x1, 3, &cfg).unwrap();
    let y2 = t2.svd_normalize(x2, 3, &cfg).unwrap();
    assert_eq!(t1.value(y1), t2.value(y2));
}

#[test]
fn single_precision_tracks_double() {
    let m = planted(&[5.0, 4.0, 3.0, 2.0, 1.0], 9);
    let cfg = SvdConfig::default();
    let (u, v) = svd_normalize(&m, 3, &cfg).unwrap();
    let (u32_, v32) = svd_normalize(&m.cast::<f32>(), 3, &cfg).unwrap();
    let d = Matrix::product(&u, false, &v, true).unwrap();
    let s = Matrix::product(&u32_, false, &v32, true).unwrap().cast::<f64>();
    assert!(d.max_abs_diff(&s).unwrap() <= 1e-4);
}
