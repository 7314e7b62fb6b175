//! Decompositions and the normalization maps built on them.
//!
//! The low-rank SVD is a randomized range finder: a Gaussian sketch of width
//! `rank + min(rank, 8)`, orthonormalized, refined by a configurable number of
//! power iterations, followed by an exact one-sided Jacobi SVD of the small
//! projected matrix. The sketch is drawn from a generator seeded by
//! [`SvdConfig::seed`], so the decomposition is a deterministic function of
//! its input.
//!
//! Gradients of the normalization maps are the exact differentials of the
//! top-`rank` maps, evaluated from a full thin SVD of the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Matrix, Real};
use crate::error::{Error, Result};

/// Singular values at or below `SV_TRUNCATION * s_max` are treated as zero.
pub const SV_TRUNCATION: f64 = 1e-6;
/// Floor on `s_i² − s_j²` in gradient denominators, relative to `s_max²`.
pub const SV_GAP: f64 = 1e-8;
/// Below this Frobenius norm the Frobenius normalization returns zero.
pub const FROBENIUS_GUARD: f64 = 1e-12;

const MAX_SKETCH_OVERSAMPLING: usize = 8;
const JACOBI_MAX_SWEEPS: usize = 80;

/// Settings of the randomized range finder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SvdConfig {
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self {
            power_iterations: 1,
            seed: 0x5eed_5fd0,
        }
    }
}

/// Thin SVD `m ≈ U·diag(s)·Vᵀ` with singular values in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult<T> {
    pub left_vectors: Matrix<T>,
    pub singular_values: Vec<T>,
    pub right_vectors: Matrix<T>,
}

impl<T: Real> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U·diag(s)·Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let us = scale_columns(&self.left_vectors, &self.singular_values);
        Matrix::product(&us, false, &self.right_vectors, true).expect("svd factors conform")
    }

    /// Number of leading directions kept by the truncation convention.
    pub fn retained(&self) -> usize {
        let s_max = self.singular_values.first().copied().unwrap_or_else(T::zero);
        if s_max <= T::zero() {
            return 0;
        }
        let cut = s_max * T::from_f64_lossy(SV_TRUNCATION);
        self.singular_values.iter().take_while(|&&s| s > cut).count()
    }
}

/// `A2·Hᵀ·H·B1` for hidden states `h` (M×d_h).
pub fn projected_gram<T: Real>(h: &Matrix<T>, a2: &Matrix<T>, b1: &Matrix<T>) -> Result<Matrix<T>> {
    if a2.cols() != h.cols() {
        return Err(Error::dim("projected_gram (A2·Hᵀ)", a2.shape(), h.shape()));
    }
    if b1.rows() != h.cols() {
        return Err(Error::dim("projected_gram (H·B1)", h.shape(), b1.shape()));
    }
    let left = Matrix::product(h, false, a2, true)?; // M×d_r = (A2·Hᵀ)ᵀ
    let right = h.matmul(b1)?;
    Matrix::product(&left, true, &right, false)
}

/// Orthonormal basis for the column span of `y`. Columns that are numerically
/// dependent on earlier ones come back as zero columns.
pub fn orthonormalize_columns<T: Real>(y: &Matrix<T>) -> Matrix<T> {
    let mut cols = y.transpose(); // rows of `cols` are columns of `y`
    let n = cols.cols();
    let scale = (0..cols.rows())
        .map(|j| norm(cols.row(j)))
        .fold(T::zero(), T::max);
    let tol = scale * T::epsilon() * T::from_usize(16 * n.max(1)).unwrap();
    for j in 0..cols.rows() {
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for i in 0..j {
                let (head, tail) = cols.as_mut_slice().split_at_mut(j * n);
                let qi = &head[i * n..(i + 1) * n];
                let vj = &mut tail[..n];
                let d = dot(qi, vj);
                for (v, &q) in vj.iter_mut().zip(qi) {
                    *v -= d * q;
                }
            }
        }
        let row = cols.row_mut(j);
        let nrm = norm(row);
        if nrm <= tol || nrm.is_zero() {
            row.iter_mut().for_each(|v| *v = T::zero());
        } else {
            row.iter_mut().for_each(|v| *v /= nrm);
        }
    }
    cols.transpose()
}

/// Exact thin SVD by one-sided Jacobi rotations.
///
/// For an m×n input returns `p = min(m, n)` triplets; singular vectors of
/// zero singular values are completed to an orthonormal set.
pub fn jacobi_svd<T: Real>(m: &Matrix<T>) -> SvdResult<T> {
    if m.rows() < m.cols() {
        let t = jacobi_svd(&m.transpose());
        return SvdResult {
            left_vectors: t.right_vectors,
            singular_values: t.singular_values,
            right_vectors: t.left_vectors,
        };
    }
    let (rows, cols) = m.shape();
    // Row j of `w` is column j of the working matrix; row j of `vt` is column j of V.
    let mut w = m.transpose();
    let mut vt = Matrix::<T>::identity(cols);
    let eps = T::epsilon();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (w.row(p), w.row(q));
                    (dot(wp, wp), dot(wq, wq), dot(wp, wq))
                };
                if gamma.is_zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<T> = (0..cols).map(|j| norm(w.row(j))).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal));

    let s_max = norms.iter().copied().fold(T::zero(), T::max);
    let zero_cut = s_max * eps * T::from_usize(rows.max(1)).unwrap();
    let mut u_rows: Vec<Vec<T>> = Vec::with_capacity(cols);
    let mut singular_values = Vec::with_capacity(cols);
    let mut v_rows = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        v_rows.push(vt.row(j).to_vec());
        if s > zero_cut && s > T::zero() {
            singular_values.push(s);
            u_rows.push(w.row(j).iter().map(|&x| x / s).collect());
        } else {
            singular_values.push(T::zero());
            u_rows.push(vec![T::zero(); rows]);
            pending.push(slot);
        }
    }
    complete_basis(&mut u_rows, &pending, rows);

    let flat = |rows_: Vec<Vec<T>>, len: usize| {
        let data: Vec<T> = rows_.into_iter().flatten().collect();
        Matrix::from_vec(data.len() / len.max(1), len, data)
            .expect("finite svd factors")
            .transpose()
    };
    SvdResult {
        left_vectors: flat(u_rows, rows),
        singular_values,
        right_vectors: flat(v_rows, cols),
    }
}

/// Rank-truncated approximate SVD through a randomized range finder.
pub fn low_rank_svd<T: Real>(m: &Matrix<T>, rank: usize, config: &SvdConfig) -> Result<SvdResult<T>> {
    let (rows, cols) = m.shape();
    let full = rows.min(cols);
    if rank == 0 || rank > full {
        return Err(Error::Rank { rank, rows, cols });
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd of a matrix with non-finite entries".into()));
    }
    let width = (rank + rank.min(MAX_SKETCH_OVERSAMPLING)).min(full);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sketch = Matrix::<T>::random_normal(cols, width, 1.0, &mut rng);

    let mut q = orthonormalize_columns(&m.matmul(&sketch)?);
    for _ in 0..config.power_iterations {
        let z = orthonormalize_columns(&Matrix::product(m, true, &q, false)?);
        q = orthonormalize_columns(&m.matmul(&z)?);
    }
    let projected = Matrix::product(&q, true, m, false)?; // width × cols
    let small = jacobi_svd(&projected);
    let u = q.matmul(&small.left_vectors)?;

    Ok(SvdResult {
        left_vectors: take_columns(&u, rank),
        singular_values: small.singular_values[..rank].to_vec(),
        right_vectors: take_columns(&small.right_vectors, rank),
    })
}

/// Factor pair `(u, v)` with `norm(m) = u·vᵀ`: the rank-`rank` SVD with every
/// retained singular value reset to one. Directions at or below the
/// truncation threshold come back as zero columns, so `norm(0) = 0`.
pub fn svd_normalize<T: Real>(
    m: &Matrix<T>,
    rank: usize,
    config: &SvdConfig,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let svd = low_rank_svd(m, rank, config)?;
    let keep = svd.retained();
    Ok((
        zero_columns_from(&svd.left_vectors, keep),
        zero_columns_from(&svd.right_vectors, keep),
    ))
}

/// `m / ‖m‖_F`, or zero when the norm is below [`FROBENIUS_GUARD`].
pub fn frobenius_normalize<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let n = m.frobenius_norm();
    if n.as_f64() < FROBENIUS_GUARD {
        Matrix::zeros(m.rows(), m.cols())
    } else {
        m.scale(T::one() / n)
    }
}

/// Which top-`rank` map of the SVD a backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMap {
    /// `M ↦ Σ_{i<rank} u_i v_iᵀ` (SVD normalization).
    Orthogonal,
    /// `M ↦ Σ_{i<rank} s_i u_i v_iᵀ` (best rank-`rank` approximation).
    Truncated,
}

/// Reverse-mode gradient of a top-`rank` SVD map.
///
/// `full` must be the complete thin SVD of the input (as from
/// [`jacobi_svd`]) and `upstream` the gradient with respect to the map's
/// output. Couplings between retained and discarded directions use
/// denominators `s_i² − s_j²` clamped to at least `SV_GAP · s_max²`.
pub fn svd_backward<T: Real>(
    full: &SvdResult<T>,
    rank: usize,
    map: SvdMap,
    upstream: &Matrix<T>,
) -> Result<Matrix<T>> {
    let u = &full.left_vectors;
    let v = &full.right_vectors;
    let s = &full.singular_values;
    if upstream.shape() != (u.rows(), v.rows()) {
        return Err(Error::dim("svd_backward", (u.rows(), v.rows()), upstream.shape()));
    }
    let p = s.len();
    let kept = full.retained().min(rank);
    if kept == 0 {
        return Ok(Matrix::zeros(u.rows(), v.rows()));
    }
    let s_max = s[0];
    let gap = s_max * s_max * T::from_f64_lossy(SV_GAP);

    let x = Matrix::product(&Matrix::product(u, true, upstream, false)?, false, v, false)?;
    let mut c = Matrix::<T>::zeros(p, p);
    for a in 0..kept {
        for b in 0..kept {
            let val = match map {
                SvdMap::Orthogonal if a == b => T::zero(),
                SvdMap::Orthogonal => (x.get(a, b) - x.get(b, a)) / (s[a] + s[b]),
                SvdMap::Truncated => x.get(a, b),
            };
            c.set(a, b, val);
        }
    }
    for i in 0..kept {
        let weight = match map {
            SvdMap::Orthogonal => T::one(),
            SvdMap::Truncated => s[i],
        };
        for j in kept..p {
            let delta = (s[i] * s[i] - s[j] * s[j]).max(gap);
            let (xji, xij) = (x.get(j, i), x.get(i, j));
            c.set(j, i, weight * (s[i] * xji + s[j] * xij) / delta);
            c.set(i, j, weight * (s[j] * xji + s[i] * xij) / delta);
        }
    }
    let mut grad = Matrix::product(&u.matmul(&c)?, false, v, true)?;

    // Components outside the thin bases (rectangular inputs only).
    let u_r = take_columns(u, kept);
    let v_r = take_columns(v, kept);
    let inv: Vec<T> = s[..kept]
        .iter()
        .map(|&si| match map {
            SvdMap::Orthogonal => T::one() / si,
            SvdMap::Truncated => T::one(),
        })
        .collect();
    if u.rows() > p {
        // (I − UUᵀ)·G·V_r·W·V_rᵀ
        let gv = scale_columns(&upstream.matmul(&v_r)?, &inv);
        let proj = u.matmul(&Matrix::product(u, true, &gv, false)?)?;
        let term = Matrix::product(&gv.sub(&proj)?, false, &v_r, true)?;
        grad.axpy(T::one(), &term)?;
    }
    if v.rows() > p {
        // U_r·W·U_rᵀ·G·(I − VVᵀ)
        let ug = scale_columns(&Matrix::product(upstream, true, &u_r, false)?, &inv); // n×kept = Gᵀ U_r W
        let proj = v.matmul(&Matrix::product(v, true, &ug, false)?)?;
        let term = Matrix::product(&u_r, false, &ug.sub(&proj)?, true)?;
        grad.axpy(T::one(), &term)?;
    }
    Ok(grad)
}

/// Gradient of [`frobenius_normalize`] at `m` given the upstream gradient.
pub fn frobenius_backward<T: Real>(m: &Matrix<T>, upstream: &Matrix<T>) -> Result<Matrix<T>> {
    let n = m.frobenius_norm();
    if n.as_f64() < FROBENIUS_GUARD {
        return Ok(Matrix::zeros(m.rows(), m.cols()));
    }
    let out = m.scale(T::one() / n);
    let inner = out
        .as_slice()
        .iter()
        .zip(upstream.as_slice())
        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    let mut g = upstream.scale(T::one() / n);
    g.axpy(-inner / n, &out)?;
    Ok(g)
}

pub(crate) fn take_columns<T: Real>(m: &Matrix<T>, k: usize) -> Matrix<T> {
    Matrix::from_fn(m.rows(), k, |i, j| m.get(i, j))
}

pub(crate) fn scale_columns<T: Real>(m: &Matrix<T>, s: &[T]) -> Matrix<T> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * s[j])
}

fn zero_columns_from<T: Real>(m: &Matrix<T>, keep: usize) -> Matrix<T> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| if j < keep { m.get(i, j) } else { T::zero() })
}

fn complete_basis<T: Real>(rows: &mut [Vec<T>], pending: &[usize], dim: usize) {
    let mut candidate = 0;
    for &slot in pending {
        while candidate < dim {
            let mut v = vec![T::zero(); dim];
            v[candidate] = T::one();
            candidate += 1;
            for _ in 0..2 {
                for (k, other) in rows.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let d = dot(other, &v);
                    for (x, &o) in v.iter_mut().zip(other) {
                        *x -= d * o;
                    }
                }
            }
            let n = norm(&v);
            if n > T::from_f64_lossy(0.5) {
                rows[slot] = v.into_iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

fn rotate_rows<T: Real>(m: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    let n = m.cols();
    let (head, tail) = m.as_mut_slice().split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (a, b) in rp.iter_mut().zip(rq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn orthogonal(n: usize, seed: u64) -> Matrix<f64> {
        orthonormalize_columns(&Matrix::random_normal(n, n, 1.0, &mut rng(seed)))
    }

    /// `Q1·diag(spectrum)·Q2ᵀ` with random orthogonal factors.
    fn planted(spectrum: &[f64], seed: u64) -> Matrix<f64> {
        let n = spectrum.len();
        let q1 = orthogonal(n, seed);
        let q2 = orthogonal(n, seed + 1);
        let mid = q1.matmul(&Matrix::from_diag(spectrum)).unwrap();
        Matrix::product(&mid, false, &q2, true).unwrap()
    }

    fn gram_error(m: &Matrix<f64>) -> f64 {
        let g = Matrix::product(m, true, m, false).unwrap();
        g.max_abs_diff(&Matrix::identity(m.cols())).unwrap()
    }

    #[test]
    fn projected_gram_zero_and_outer_product() {
        let i2 = Matrix::<f64>::identity(2);
        let z = projected_gram(&Matrix::zeros(3, 2), &i2, &i2).unwrap();
        assert!(z.is_zero());
        let h = Matrix::from_rows(&[&[1.0, 2.0]]).unwrap();
        let s = projected_gram(&h, &i2, &i2).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 2.0, 2.0, 4.0]);
        let empty = projected_gram(&Matrix::zeros(0, 2), &i2, &i2).unwrap();
        assert!(empty.is_zero());
    }

    #[test]
    fn projected_gram_matches_outer_product_sum() {
        let mut r = rng(7);
        let h = Matrix::<f64>::random_normal(3, 4, 1.0, &mut r);
        let a2 = Matrix::<f64>::random_normal(2, 4, 1.0, &mut r);
        let b1 = Matrix::<f64>::random_normal(4, 2, 1.0, &mut r);
        let mut oracle = Matrix::<f64>::zeros(2, 2);
        for m in 0..3 {
            let hm = h.slice_rows(m..m + 1);
            let left = a2.matmul(&hm.transpose()).unwrap(); // 2×1
            let right = hm.matmul(&b1).unwrap(); // 1×2
            oracle.axpy(1.0, &left.matmul(&right).unwrap()).unwrap();
        }
        let got = projected_gram(&h, &a2, &b1).unwrap();
        assert!(got.max_abs_diff(&oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn projected_gram_shape_errors() {
        let h = Matrix::<f64>::zeros(3, 4);
        assert!(projected_gram(&h, &Matrix::zeros(2, 3), &Matrix::zeros(4, 2)).is_err());
        assert!(projected_gram(&h, &Matrix::zeros(2, 4), &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn jacobi_reconstructs_and_is_orthonormal() {
        for (r, c, seed) in [(6, 4, 1), (4, 6, 2), (5, 5, 3)] {
            let m = Matrix::<f64>::random_normal(r, c, 1.0, &mut rng(seed));
            let svd = jacobi_svd(&m);
            assert!(svd.reconstruct().max_abs_diff(&m).unwrap() < 1e-12);
            assert!(gram_error(&svd.left_vectors) < 1e-12);
            assert!(gram_error(&svd.right_vectors) < 1e-12);
            assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn jacobi_completes_null_directions() {
        let u = Matrix::<f64>::random_normal(5, 1, 1.0, &mut rng(9));
        let v = Matrix::<f64>::random_normal(5, 1, 1.0, &mut rng(10));
        let m = Matrix::product(&u, false, &v, true).unwrap();
        let svd = jacobi_svd(&m);
        assert!(gram_error(&svd.left_vectors) < 1e-10);
        assert!(svd.singular_values[1..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rank_one_recovery() {
        let u = Matrix::<f64>::random_normal(6, 1, 1.0, &mut rng(11));
        let v = Matrix::<f64>::random_normal(4, 1, 1.0, &mut rng(12));
        let m = Matrix::product(&u, false, &v, true).unwrap();
        let svd = low_rank_svd(&m, 1, &SvdConfig::default()).unwrap();
        let expect = u.frobenius_norm() * v.frobenius_norm();
        assert!((svd.singular_values[0] - expect).abs() <= 1e-10 * expect);
        assert!(svd.reconstruct().max_abs_diff(&m).unwrap() <= 1e-10);
    }

    #[test]
    fn identity_spectrum() {
        let svd = low_rank_svd(&Matrix::<f64>::identity(4), 2, &SvdConfig::default()).unwrap();
        for s in svd.singular_values {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_out_of_range_is_an_error() {
        let m = Matrix::<f64>::zeros(3, 5);
        assert!(matches!(
            low_rank_svd(&m, 4, &SvdConfig::default()),
            Err(Error::Rank { rank: 4, rows: 3, cols: 5 })
        ));
        assert!(low_rank_svd(&m, 0, &SvdConfig::default()).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let m = Matrix::<f64>::random_normal(10, 10, 1.0, &mut rng(4));
        let cfg = SvdConfig::default();
        assert_eq!(low_rank_svd(&m, 3, &cfg).unwrap(), low_rank_svd(&m, 3, &cfg).unwrap());
    }

    #[test]
    fn exact_rank_matrices_reconstruct() {
        let a = Matrix::<f64>::random_normal(9, 3, 1.0, &mut rng(21));
        let b = Matrix::<f64>::random_normal(3, 7, 1.0, &mut rng(22));
        let m = a.matmul(&b).unwrap();
        let svd = low_rank_svd(&m, 3, &SvdConfig::default()).unwrap();
        let rel = svd.reconstruct().max_abs_diff(&m).unwrap() / m.max_abs();
        assert!(rel <= 1e-6, "relative reconstruction error {rel}");
    }

    #[test]
    fn planted_spectrum_top_values() {
        let spectrum = [4.0, 3.0, 2.0, 1.0, 0.5, 0.25, 0.125, 0.0625];
        let m = planted(&spectrum, 30);
        let oracle = jacobi_svd(&m);
        let cfg = SvdConfig { power_iterations: 2, ..SvdConfig::default() };
        let svd = low_rank_svd(&m, 4, &cfg).unwrap();
        for i in 0..4 {
            assert!((svd.singular_values[i] - spectrum[i]).abs() <= 1e-3);
            assert!((oracle.singular_values[i] - spectrum[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn svd_normalize_resets_diagonal_spectrum() {
        let m = Matrix::from_diag(&[3.0, 0.5]);
        let (u, v) = svd_normalize(&m, 2, &SvdConfig::default()).unwrap();
        let n = Matrix::product(&u, false, &v, true).unwrap();
        assert!(n.max_abs_diff(&Matrix::identity(2)).unwrap() < 1e-12);
    }

    #[test]
    fn svd_normalize_of_zero_is_zero() {
        let (u, v) = svd_normalize(&Matrix::<f64>::zeros(4, 4), 2, &SvdConfig::default()).unwrap();
        assert!(u.is_zero() && v.is_zero());
    }

    #[test]
    fn svd_normalize_unit_spectrum_on_planted_input() {
        let m = planted(&[6.0, 5.0, 4.0, 3.0, 2.0, 1.0], 40);
        let (u, v) = svd_normalize(&m, 6, &SvdConfig::default()).unwrap();
        let n = Matrix::product(&u, false, &v, true).unwrap();
        for s in jacobi_svd(&n).singular_values {
            assert!((s - 1.0).abs() <= 1e-6, "{s}");
        }
    }

    #[test]
    fn frobenius_examples() {
        let m = Matrix::<f64>::from_rows(&[&[3.0, 4.0]]).unwrap();
        let n = frobenius_normalize(&m);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
        assert!(frobenius_normalize(&Matrix::<f64>::zeros(2, 2)).is_zero());
        let r = Matrix::<f64>::random_normal(4, 4, 1.0, &mut rng(3));
        assert!((frobenius_normalize(&r).frobenius_norm() - 1.0).abs() <= 1e-12);
    }

    /// Central differences of `⟨G, map(M)⟩` using exact SVDs.
    fn fd_gradient(m: &Matrix<f64>, rank: usize, map: SvdMap, g: &Matrix<f64>, h: f64) -> Matrix<f64> {
        let eval = |x: &Matrix<f64>| {
            let svd = jacobi_svd(x);
            let keep = svd.retained().min(rank);
            let mut out = Matrix::<f64>::zeros(x.rows(), x.cols());
            for i in 0..keep {
                let w = match map {
                    SvdMap::Orthogonal => 1.0,
                    SvdMap::Truncated => svd.singular_values[i],
                };
                for a in 0..x.rows() {
                    for b in 0..x.cols() {
                        let val = out.get(a, b)
                            + w * svd.left_vectors.get(a, i) * svd.right_vectors.get(b, i);
                        out.set(a, b, val);
                    }
                }
            }
            out.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            let mut plus = m.clone();
            plus.set(i, j, m.get(i, j) + h);
            let mut minus = m.clone();
            minus.set(i, j, m.get(i, j) - h);
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        })
    }

    fn rel(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.max_abs_diff(b).unwrap() / a.max_abs().max(b.max_abs()).max(1e-300)
    }

    #[test]
    fn backward_diag_matches_finite_differences() {
        let m = Matrix::from_diag(&[2.0, 1.0]);
        let g = Matrix::random_normal(2, 2, 1.0, &mut rng(50));
        let got = svd_backward(&jacobi_svd(&m), 2, SvdMap::Orthogonal, &g).unwrap();
        let fd = fd_gradient(&m, 2, SvdMap::Orthogonal, &g, 1e-5);
        assert!(rel(&got, &fd) <= 1e-6, "{}", rel(&got, &fd));
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let m = planted(&[5.0, 4.0, 3.0], 5);
        let got = svd_backward(&jacobi_svd(&m), 2, SvdMap::Orthogonal, &Matrix::zeros(3, 3)).unwrap();
        assert!(got.is_zero());
    }

    #[test]
    fn backward_planted_spectrum_full_and_truncated() {
        let m = planted(&[5.0, 4.0, 3.0, 2.0, 1.0], 60);
        let g = Matrix::random_normal(5, 5, 1.0, &mut rng(61));
        let full = jacobi_svd(&m);
        for rank in [5, 3, 2] {
            for map in [SvdMap::Orthogonal, SvdMap::Truncated] {
                let got = svd_backward(&full, rank, map, &g).unwrap();
                let fd = fd_gradient(&m, rank, map, &g, 1e-5);
                assert!(rel(&got, &fd) <= 1e-4, "rank {rank} {map:?}: {}", rel(&got, &fd));
            }
        }
    }

    #[test]
    fn backward_rectangular_inputs() {
        for (r, c) in [(6, 4), (3, 5)] {
            let m = Matrix::<f64>::random_normal(r, c, 1.0, &mut rng(70 + r as u64));
            let g = Matrix::random_normal(r, c, 1.0, &mut rng(80 + c as u64));
            let full = jacobi_svd(&m);
            for rank in [1, 2, r.min(c)] {
                for map in [SvdMap::Orthogonal, SvdMap::Truncated] {
                    let got = svd_backward(&full, rank, map, &g).unwrap();
                    let fd = fd_gradient(&m, rank, map, &g, 1e-6);
                    assert!(rel(&got, &fd) <= 1e-5, "{r}x{c} rank {rank} {map:?}: {}", rel(&got, &fd));
                }
            }
        }
    }

    #[test]
    fn frobenius_backward_matches_finite_differences() {
        let m = Matrix::<f64>::random_normal(3, 4, 1.0, &mut rng(90));
        let g = Matrix::<f64>::random_normal(3, 4, 1.0, &mut rng(91));
        let got = frobenius_backward(&m, &g).unwrap();
        let f = |x: &Matrix<f64>| {
            frobenius_normalize(x).as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        let fd = Matrix::from_fn(3, 4, |i, j| {
            let mut p = m.clone();
            p.set(i, j, m.get(i, j) + h);
            let mut q = m.clone();
            q.set(i, j, m.get(i, j) - h);
            (f(&p) - f(&q)) / (2.0 * h)
        });
        assert!(rel(&got, &fd) <= 1e-7);
    }
}
