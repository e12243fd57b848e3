//! Spatial correlation matrices for a half-wavelength ULA.
//!
//! The local scattering model integrates the array phase kernel over a
//! Gaussian angular density. Entries depend on the antenna-index lag only, so
//! just N distinct lags are integrated and the Toeplitz matrix is filled in.

use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{CellFreeError, Result};
use crate::linalg::{hermitian_eigenvalues, hermitize, real_trace, C64, CMat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularProfile {
    pub azimuth: f64,
    pub elevation: f64,
    pub asd_azimuth: f64,
    pub asd_elevation: f64,
}

impl AngularProfile {
    pub fn from_degrees(azimuth: f64, elevation: f64, asd_azimuth: f64, asd_elevation: f64) -> Self {
        AngularProfile {
            azimuth: azimuth.to_radians(),
            elevation: elevation.to_radians(),
            asd_azimuth: asd_azimuth.to_radians(),
            asd_elevation: asd_elevation.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCorrelation {
    pub r: CMat,
}

impl SpatialCorrelation {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    /// tr(R)/N.
    pub fn beta(&self) -> f64 {
        real_trace(&self.r) / self.n() as f64
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.r)
    }
}

/// Number of standard deviations covered on each side of the nominal angle.
pub const TRUNCATION_SIGMAS: f64 = 4.0;
/// Largest per-entry change allowed between two refinement levels, relative to β.
pub const QUADRATURE_TOL: f64 = 1e-8;
const FIRST_DEGREE: usize = 8;
const MAX_LEVELS: usize = 8;

fn legendre_rules() -> &'static Vec<Vec<(f64, f64)>> {
    static RULES: OnceLock<Vec<Vec<(f64, f64)>>> = OnceLock::new();
    RULES.get_or_init(|| {
        (0..MAX_LEVELS)
            .map(|lvl| {
                let deg = NonZeroUsize::new(FIRST_DEGREE << lvl).unwrap();
                GaussLegendre::new(deg).as_node_weight_pairs().to_vec()
            })
            .collect()
    })
}

/// Nodes and normalized weights for a Gaussian truncated at ±4σ.
fn gaussian_rule(mean: f64, sd: f64, level: usize) -> Vec<(f64, f64)> {
    if sd == 0.0 {
        return vec![(mean, 1.0)];
    }
    let half = TRUNCATION_SIGMAS * sd;
    let mut out: Vec<(f64, f64)> = legendre_rules()[level]
        .iter()
        .map(|&(t, w)| {
            let u = TRUNCATION_SIGMAS * t;
            (mean + half * t, w * (-0.5 * u * u).exp())
        })
        .collect();
    let total: f64 = out.iter().map(|p| p.1).sum();
    for p in &mut out {
        p.1 /= total;
    }
    out
}

/// E{exp(jπ d sinφ cosθ)} for d = 0..n, at one quadrature level.
fn lag_moments(n: usize, profile: &AngularProfile, level: usize) -> Vec<C64> {
    let az = gaussian_rule(profile.azimuth, profile.asd_azimuth, level);
    let el = gaussian_rule(profile.elevation, profile.asd_elevation, level);
    let mut acc = vec![C64::new(0.0, 0.0); n];
    for &(phi, wp) in &az {
        let sphi = phi.sin();
        for &(theta, wt) in &el {
            let w = wp * wt;
            let step = C64::from_polar(1.0, std::f64::consts::PI * sphi * theta.cos());
            let mut z = C64::new(w, 0.0);
            for a in acc.iter_mut() {
                *a += z;
                z *= step;
            }
        }
    }
    acc
}

fn toeplitz(n: usize, lags: &[C64], beta: f64) -> CMat {
    let mut r = CMat::from_fn(n, n, |m, l| {
        if m >= l {
            lags[m - l] * beta
        } else {
            lags[l - m].conj() * beta
        }
    });
    for i in 0..n {
        r[(i, i)] = C64::new(beta, 0.0);
    }
    hermitize(&mut r);
    r
}

/// Gaussian local scattering model, R[m,l] = β E{exp(jπ(m−l) sinφ cosθ)}.
pub fn local_scattering(n: usize, profile: &AngularProfile, beta: f64) -> Result<SpatialCorrelation> {
    if n == 0 {
        return Err(CellFreeError::InvalidInput("array needs at least one antenna".into()));
    }
    if !(profile.asd_azimuth >= 0.0 && profile.asd_elevation >= 0.0) {
        return Err(CellFreeError::InvalidInput("angular spreads must be nonnegative".into()));
    }
    if n == 1 {
        return Ok(uncorrelated(1, beta));
    }
    let degenerate = profile.asd_azimuth == 0.0 && profile.asd_elevation == 0.0;
    let mut prev = lag_moments(n, profile, 0);
    let mut converged = degenerate;
    let mut level = 1;
    while !converged && level < MAX_LEVELS {
        let next = lag_moments(n, profile, level);
        let change = next
            .iter()
            .zip(prev.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        prev = next;
        converged = change <= QUADRATURE_TOL;
        level += 1;
    }
    if !converged {
        return Err(CellFreeError::Numerical(format!(
            "local scattering quadrature did not settle below {QUADRATURE_TOL} at degree {}",
            FIRST_DEGREE << (MAX_LEVELS - 1)
        )));
    }
    let r = toeplitz(n, &prev, beta);
    Ok(SpatialCorrelation { r: psd_repair(r) })
}

/// Clips eigenvalues below −1e-9·tr(R) and rescales to the original trace.
fn psd_repair(r: CMat) -> CMat {
    let tr = real_trace(&r);
    let ev = hermitian_eigenvalues(&r);
    if ev[0] >= -1e-9 * tr {
        return r;
    }
    log::debug!("clipping negative eigenvalue {} of a correlation matrix", ev[0]);
    let eig = r.clone().symmetric_eigen();
    let n = r.nrows();
    let mut out = CMat::zeros(n, n);
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        let lam = lam.max(0.0);
        let col = eig.eigenvectors.column(idx);
        out += &col * col.adjoint() * C64::new(lam, 0.0);
    }
    let scale = tr / real_trace(&out);
    out *= C64::new(scale, 0.0);
    hermitize(&mut out);
    out
}

pub fn uncorrelated(n: usize, beta: f64) -> SpatialCorrelation {
    SpatialCorrelation {
        r: CMat::identity(n, n) * C64::new(beta, 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::fro_norm;

    fn spread(asd: f64) -> f64 {
        let p = AngularProfile::from_degrees(30.0, -15.0, asd, asd);
        let ev = local_scattering(8, &p, 1.0).unwrap().eigenvalues();
        ev[7] / ev[0]
    }

    #[test]
    fn zero_spread_gives_rank_one_steering() {
        let p = AngularProfile::from_degrees(20.0, 10.0, 0.0, 0.0);
        let r = local_scattering(4, &p, 2.0).unwrap();
        let s = p.azimuth.sin() * p.elevation.cos();
        let a = crate::linalg::CVec::from_fn(4, |m, _| {
            C64::from_polar(1.0, std::f64::consts::PI * m as f64 * s)
        });
        let expect = &a * a.adjoint() * C64::new(2.0, 0.0);
        assert!(fro_norm(&(&r.r - expect)) < 1e-12);
        let ev = r.eigenvalues();
        assert!(ev[..3].iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn diagonal_equals_beta_and_matrix_is_hermitian() {
        let p = AngularProfile::from_degrees(-40.0, 5.0, 12.0, 7.0);
        let r = local_scattering(6, &p, 0.3).unwrap();
        for i in 0..6 {
            assert!((r.r[(i, i)].re - 0.3).abs() < 1e-12);
        }
        assert!(fro_norm(&(&r.r - r.r.adjoint())) < 1e-12);
        assert!((r.beta() - 0.3).abs() < 1e-12);
        assert!(r.eigenvalues()[0] >= -1e-9 * 6.0 * 0.3);
    }

    #[test]
    fn dominant_eigenvalue_carries_about_eighty_percent() {
        let p = AngularProfile::from_degrees(30.0, -15.0, 5.0, 5.0);
        let ev = local_scattering(8, &p, 1.0).unwrap().eigenvalues();
        let top = ev[7];
        assert!((top - 0.80 * 8.0).abs() <= 0.03 * 8.0, "top eigenvalue {top}");
    }

    #[test]
    fn eigenvalue_spread_shrinks_with_angular_spread() {
        let (s5, s10, s20) = (spread(5.0), spread(10.0), spread(20.0));
        assert!(s5 > s10 && s10 > s20 && s20 > 1.0, "{s5} {s10} {s20}");
        assert!(s20 > 100.0, "{s20}");
    }

    #[test]
    fn uncorrelated_baseline() {
        let r = uncorrelated(1, 2.0);
        assert_eq!(r.r[(0, 0)], C64::new(2.0, 0.0));
        let r = uncorrelated(5, 0.7);
        assert!(r.eigenvalues().iter().all(|x| (x - 0.7).abs() < 1e-12));
        assert!((r.beta() - 0.7).abs() < 1e-12);
    }
}
