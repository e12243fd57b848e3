//! Small complex linear-algebra layer on top of `nalgebra`.
//!
//! Everything here works on dense `DMatrix<Complex64>`; the matrices in this
//! crate are at most a few hundred rows, so no sparse or blocked storage.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CellFreeError, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// One sample of CN(0, 1).
#[inline]
pub fn cn_scalar<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// i.i.d. CN(0, 1) vector of length `n`.
pub fn cn_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CVec {
    CVec::from_fn(n, |_, _| cn_scalar(rng))
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Replace `a` by (a + a^H)/2.
pub fn hermitize(a: &mut CMat) {
    let n = a.nrows();
    for i in 0..n {
        a[(i, i)] = C64::new(a[(i, i)].re, 0.0);
        for j in (i + 1)..n {
            let v = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = v;
            a[(j, i)] = v.conj();
        }
    }
}

pub fn real_trace(a: &CMat) -> f64 {
    (0..a.nrows()).map(|i| a[(i, i)].re).sum()
}

/// tr(AB) without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    let mut acc = ZERO;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// x^H A x for Hermitian A, real part only.
pub fn quad_form(a: &CMat, x: &CVec) -> f64 {
    let n = x.len();
    let mut acc = ZERO;
    for j in 0..n {
        let mut col = ZERO;
        for i in 0..n {
            col += x[i].conj() * a[(i, j)];
        }
        acc += col * x[j];
    }
    acc.re
}

/// Cholesky factorization of a Hermitian positive definite matrix. A relative
/// diagonal jitter is tried once before giving up.
pub fn hpd_cholesky(a: &CMat) -> Result<Cholesky<C64, Dyn>> {
    if let Some(ch) = Cholesky::new(a.clone()) {
        return Ok(ch);
    }
    let n = a.nrows();
    let jitter = 1e-12 * real_trace(a).abs().max(f64::MIN_POSITIVE) / n.max(1) as f64;
    let mut b = a.clone();
    for i in 0..n {
        b[(i, i)] += C64::new(jitter, 0.0);
    }
    Cholesky::new(b).ok_or_else(|| {
        CellFreeError::Numerical(format!("{n}x{n} matrix is not positive definite"))
    })
}

pub fn hpd_inverse(a: &CMat) -> Result<CMat> {
    let mut inv = hpd_cholesky(a)?.inverse();
    hermitize(&mut inv);
    Ok(inv)
}

pub fn hpd_solve(a: &CMat, b: &CVec) -> Result<CVec> {
    Ok(hpd_cholesky(a)?.solve(b))
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(a: &CMat) -> Vec<f64> {
    let mut h = a.clone();
    hermitize(&mut h);
    let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// Principal square root of a Hermitian PSD matrix (negative eigenvalues are
/// clipped).
pub fn psd_sqrt(a: &CMat) -> CMat {
    let n = a.nrows();
    if n == 1 {
        return CMat::from_element(1, 1, C64::new(a[(0, 0)].re.max(0.0).sqrt(), 0.0));
    }
    let mut h = a.clone();
    hermitize(&mut h);
    let eig = h.symmetric_eigen();
    let u = &eig.eigenvectors;
    let mut out = CMat::zeros(n, n);
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= 0.0 {
            continue;
        }
        let s = lam.sqrt();
        let col = u.column(idx);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += col[i] * col[j].conj() * s;
            }
        }
    }
    hermitize(&mut out);
    out
}

/// Dense `n × n` matrix with i.i.d. CN(0,1) entries.
pub fn cn_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    CMat::from_fn(rows, cols, |_, _| cn_scalar(rng))
}

/// Random PSD matrix G G^H / cols, used by tests and the acceptance suite.
pub fn random_psd<R: Rng + ?Sized>(n: usize, rank: usize, rng: &mut R) -> CMat {
    let g = cn_matrix(n, rank, rng);
    let mut a = &g * g.adjoint() / C64::new(rank as f64, 0.0);
    hermitize(&mut a);
    a
}

pub fn fro_norm(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// E{|a^H B a|²} for a ~ CN(0, A).
pub fn gaussian_quartic_moment(a: &CMat, b: &CMat) -> f64 {
    let ba = b * a;
    trace_prod(b, a).norm_sqr() + trace_prod(&(&ba * b.adjoint()), a).re
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cn_scalar_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let (mut p, mut m) = (0.0, ZERO);
        for _ in 0..n {
            let z = cn_scalar(&mut rng);
            p += z.norm_sqr();
            m += z;
        }
        assert!((p / n as f64 - 1.0).abs() < 0.01);
        assert!((m / n as f64).norm() < 0.01);
    }

    #[test]
    fn inverse_and_sqrt_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_psd(5, 8, &mut rng) + identity(5) * C64::new(0.1, 0.0);
        let inv = hpd_inverse(&a).unwrap();
        assert!(fro_norm(&(&a * &inv - identity(5))) < 1e-10);
        let s = psd_sqrt(&a);
        assert!(fro_norm(&(&s * &s - &a)) < 1e-10);
    }

    #[test]
    fn trace_prod_matches_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cn_matrix(4, 4, &mut rng);
        let b = cn_matrix(4, 4, &mut rng);
        let direct = (&a * &b).trace();
        assert!((trace_prod(&a, &b) - direct).norm() < 1e-12);
    }

    #[test]
    fn quad_form_of_identity_is_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = cn_vector(6, &mut rng);
        assert!((quad_form(&identity(6), &x) - x.norm_squared()).abs() < 1e-12);
    }
}
