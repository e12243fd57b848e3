//! MMSE channel estimation statistics, channel draws and NMSE.
//!
//! All per-link matrices are stored flat at index `k·L + l`; per-pilot
//! matrices at `t·L + l`.

use nalgebra::DMatrix;
use rand::Rng;

use crate::cluster::ClusterState;
use crate::correlation::{local_scattering, uncorrelated, AngularProfile};
use crate::error::{CellFreeError, Result};
use crate::geometry::{CorrelationModel, LargeScaleFading, NetworkConfig};
use crate::linalg::{cn_scalar, hermitize, hpd_cholesky, psd_sqrt, real_trace, C64, CMat, CVec, ZERO};

/// Per-link correlation matrices R_kl and gains β_kl = tr(R_kl)/N.
#[derive(Debug, Clone)]
pub struct ChannelStatistics {
    pub n: usize,
    pub num_ues: usize,
    pub num_aps: usize,
    pub beta: DMatrix<f64>,
    r: Vec<CMat>,
}

impl ChannelStatistics {
    /// `r` is indexed `k·L + l`.
    pub fn new(n: usize, num_ues: usize, num_aps: usize, r: Vec<CMat>) -> Result<Self> {
        if r.len() != num_ues * num_aps || r.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(CellFreeError::InvalidInput(
                "correlation matrices do not match the K×L×N shape".into(),
            ));
        }
        let beta = DMatrix::from_fn(num_ues, num_aps, |k, l| real_trace(&r[k * num_aps + l]) / n as f64);
        Ok(ChannelStatistics { n, num_ues, num_aps, beta, r })
    }

    /// R_kl = β_kl I for every link.
    pub fn uncorrelated_from_beta(n: usize, beta: &DMatrix<f64>) -> Self {
        let (k, l) = (beta.nrows(), beta.ncols());
        let r = (0..k * l).map(|idx| uncorrelated(n, beta[(idx / l, idx % l)]).r).collect();
        ChannelStatistics { n, num_ues: k, num_aps: l, beta: beta.clone(), r }
    }

    pub fn from_fading(lsf: &LargeScaleFading, config: &NetworkConfig) -> Result<Self> {
        let (k, l, n) = (lsf.num_ues(), lsf.num_aps(), config.antennas_per_ap);
        if config.correlation == CorrelationModel::Uncorrelated || n == 1 {
            return Ok(Self::uncorrelated_from_beta(n, &lsf.beta));
        }
        let mut r = Vec::with_capacity(k * l);
        for kk in 0..k {
            for ll in 0..l {
                let profile = AngularProfile {
                    azimuth: lsf.azimuth[(kk, ll)],
                    elevation: lsf.elevation[(kk, ll)],
                    asd_azimuth: config.asd_azimuth_deg.to_radians(),
                    asd_elevation: config.asd_elevation_deg.to_radians(),
                };
                r.push(local_scattering(n, &profile, lsf.beta[(kk, ll)])?.r);
            }
        }
        Ok(ChannelStatistics { n, num_ues: k, num_aps: l, beta: lsf.beta.clone(), r })
    }

    #[inline]
    pub fn r(&self, k: usize, l: usize) -> &CMat {
        &self.r[k * self.num_aps + l]
    }
}

/// Estimation statistics for one setup; immutable once built.
#[derive(Debug, Clone)]
pub struct EstimationStatistics {
    pub n: usize,
    pub num_ues: usize,
    pub num_aps: usize,
    pub tau_p: usize,
    pub eta: Vec<f64>,
    pub sigma2: f64,
    pub pilot_of: Vec<usize>,
    pub beta: DMatrix<f64>,
    r: Vec<CMat>,
    r_sqrt: Vec<CMat>,
    psi: Vec<CMat>,
    psi_inv: Vec<CMat>,
    psi_chol: Vec<CMat>,
    gain: Vec<CMat>,
    est_corr: Vec<CMat>,
    err_corr: Vec<CMat>,
}

/// Ψ_tl = Σ_{i: t_i = t} η_i τ_p R_il + σ² I; estimate ĥ_kl = √(η_k τ_p) R_kl Ψ⁻¹ y_tl.
///
/// Every (k, l) pair is materialized: the sets are small enough that lazily
/// restricting to the pairs a scheme needs would only save memory.
pub fn build_estimation_statistics(
    channels: &ChannelStatistics,
    cluster: &ClusterState,
    eta: &[f64],
    tau_p: usize,
    sigma2: f64,
) -> Result<EstimationStatistics> {
    let (k, l, n) = (channels.num_ues, channels.num_aps, channels.n);
    if cluster.num_ues() != k || eta.len() != k {
        return Err(CellFreeError::InvalidInput("UE count mismatch".into()));
    }
    if cluster.pilot_of.iter().any(|&t| t >= tau_p) {
        return Err(CellFreeError::InvalidInput("pilot index exceeds τ_p".into()));
    }
    if !(sigma2 > 0.0) || eta.iter().any(|&e| !(e >= 0.0)) {
        return Err(CellFreeError::InvalidInput("noise must be positive and pilot powers nonnegative".into()));
    }
    let tau = tau_p as f64;
    let mut psi = vec![CMat::identity(n, n) * C64::new(sigma2, 0.0); tau_p * l];
    for kk in 0..k {
        let t = cluster.pilot_of[kk];
        for ll in 0..l {
            psi[t * l + ll] += channels.r(kk, ll) * C64::new(eta[kk] * tau, 0.0);
        }
    }
    let mut psi_inv = Vec::with_capacity(psi.len());
    let mut psi_chol = Vec::with_capacity(psi.len());
    for p in psi.iter_mut() {
        hermitize(p);
        let ch = hpd_cholesky(p)?;
        let mut inv = ch.inverse();
        hermitize(&mut inv);
        psi_chol.push(ch.l());
        psi_inv.push(inv);
    }
    let mut gain = Vec::with_capacity(k * l);
    let mut est_corr = Vec::with_capacity(k * l);
    let mut err_corr = Vec::with_capacity(k * l);
    let mut r_sqrt = Vec::with_capacity(k * l);
    for kk in 0..k {
        let t = cluster.pilot_of[kk];
        for ll in 0..l {
            let r = channels.r(kk, ll);
            let g = r * &psi_inv[t * l + ll] * C64::new((eta[kk] * tau).sqrt(), 0.0);
            let mut e = &g * r * C64::new((eta[kk] * tau).sqrt(), 0.0);
            hermitize(&mut e);
            let mut c = r - &e;
            hermitize(&mut c);
            r_sqrt.push(psd_sqrt(r));
            gain.push(g);
            est_corr.push(e);
            err_corr.push(c);
        }
    }
    Ok(EstimationStatistics {
        n,
        num_ues: k,
        num_aps: l,
        tau_p,
        eta: eta.to_vec(),
        sigma2,
        pilot_of: cluster.pilot_of.clone(),
        beta: channels.beta.clone(),
        r: channels.r.clone(),
        r_sqrt,
        psi,
        psi_inv,
        psi_chol,
        gain,
        est_corr,
        err_corr,
    })
}

impl EstimationStatistics {
    #[inline]
    fn idx(&self, k: usize, l: usize) -> usize {
        k * self.num_aps + l
    }
    pub fn r(&self, k: usize, l: usize) -> &CMat {
        &self.r[self.idx(k, l)]
    }
    pub fn r_sqrt(&self, k: usize, l: usize) -> &CMat {
        &self.r_sqrt[self.idx(k, l)]
    }
    pub fn psi(&self, t: usize, l: usize) -> &CMat {
        &self.psi[t * self.num_aps + l]
    }
    pub fn psi_inv(&self, t: usize, l: usize) -> &CMat {
        &self.psi_inv[t * self.num_aps + l]
    }
    /// Ψ⁻¹ of the pilot used by UE k.
    pub fn psi_inv_of(&self, k: usize, l: usize) -> &CMat {
        self.psi_inv(self.pilot_of[k], l)
    }
    /// √(η_k τ_p) R_kl Ψ⁻¹.
    pub fn gain(&self, k: usize, l: usize) -> &CMat {
        &self.gain[self.idx(k, l)]
    }
    /// E{ĥ_kl ĥ_kl^H} = η_k τ_p R_kl Ψ⁻¹ R_kl.
    pub fn est_corr(&self, k: usize, l: usize) -> &CMat {
        &self.est_corr[self.idx(k, l)]
    }
    /// C_kl = R_kl − E{ĥ_kl ĥ_kl^H}.
    pub fn err_corr(&self, k: usize, l: usize) -> &CMat {
        &self.err_corr[self.idx(k, l)]
    }
    pub fn shares_pilot(&self, k: usize, i: usize) -> bool {
        self.pilot_of[k] == self.pilot_of[i]
    }

    /// E{ĥ_kl ĥ_il^H} = √(η_k η_i) τ_p R_kl Ψ⁻¹ R_il for pilot peers, zero otherwise.
    pub fn cross_corr(&self, k: usize, i: usize, l: usize) -> CMat {
        if !self.shares_pilot(k, i) {
            return CMat::zeros(self.n, self.n);
        }
        let s = (self.eta[k] * self.eta[i]).sqrt() * self.tau_p as f64;
        self.r(k, l) * self.psi_inv_of(k, l) * self.r(i, l) * C64::new(s, 0.0)
    }

    /// tr(C_kl)/tr(R_kl).
    pub fn nmse_link(&self, k: usize, l: usize) -> Result<f64> {
        let tr = real_trace(self.r(k, l));
        if !(tr > 0.0) {
            return Err(CellFreeError::InvalidInput(format!("tr(R_{k},{l}) is zero")));
        }
        Ok((real_trace(self.err_corr(k, l)) / tr).clamp(0.0, 1.0))
    }

    /// Σ_{l∈M_k} tr(C_kl) / Σ_{l∈M_k} tr(R_kl).
    pub fn nmse_collective(&self, k: usize, cluster: &ClusterState) -> Result<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for &l in &cluster.serving_sets[k] {
            num += real_trace(self.err_corr(k, l));
            den += real_trace(self.r(k, l));
        }
        if !(den > 0.0) {
            return Err(CellFreeError::InvalidInput(format!("tr(D_k R_k) is zero for UE {k}")));
        }
        Ok((num / den).clamp(0.0, 1.0))
    }
}

/// NMSE of a single uncontaminated link from the eigenvalues of R, with
/// effective pilot energy ητ_p and noise σ².
pub fn nmse_from_eigenvalues(lambda: &[f64], eta_tau: f64, sigma2: f64) -> f64 {
    let total: f64 = lambda.iter().sum();
    let captured: f64 = lambda.iter().map(|&x| eta_tau * x * x / (eta_tau * x + sigma2)).sum();
    1.0 - captured / total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Draw the processed pilot signal from its Gaussian law, then estimate.
    Direct,
    /// Simulate channels, pilot transmission and noise explicitly.
    PilotPath,
}

/// One coherence block: true channels and their MMSE estimates, flat at
/// `(k·L + l)·N`.
#[derive(Debug, Clone)]
pub struct ChannelDraw {
    pub n: usize,
    pub num_ues: usize,
    pub num_aps: usize,
    h: Vec<C64>,
    hhat: Vec<C64>,
}

fn matvec_into(a: &CMat, x: &[C64], out: &mut [C64]) {
    let n = x.len();
    for i in 0..n {
        let mut s = ZERO;
        for j in 0..n {
            s += a[(i, j)] * x[j];
        }
        out[i] = s;
    }
}

fn lower_matvec_into(a: &CMat, x: &[C64], out: &mut [C64]) {
    let n = x.len();
    for i in 0..n {
        let mut s = ZERO;
        for j in 0..=i {
            s += a[(i, j)] * x[j];
        }
        out[i] = s;
    }
}

impl ChannelDraw {
    #[inline]
    fn off(&self, k: usize, l: usize) -> usize {
        (k * self.num_aps + l) * self.n
    }
    #[inline]
    pub fn h(&self, k: usize, l: usize) -> &[C64] {
        let o = self.off(k, l);
        &self.h[o..o + self.n]
    }
    #[inline]
    pub fn hhat(&self, k: usize, l: usize) -> &[C64] {
        let o = self.off(k, l);
        &self.hhat[o..o + self.n]
    }
    pub fn herr(&self, k: usize, l: usize) -> CVec {
        CVec::from_iterator(self.n, self.h(k, l).iter().zip(self.hhat(k, l)).map(|(a, b)| a - b))
    }
    pub fn h_vec(&self, k: usize, l: usize) -> CVec {
        CVec::from_column_slice(self.h(k, l))
    }
    pub fn hhat_vec(&self, k: usize, l: usize) -> CVec {
        CVec::from_column_slice(self.hhat(k, l))
    }

    /// Builds a draw from explicit vectors (used by tests and deterministic
    /// examples), indexed `k·L + l`.
    pub fn from_parts(n: usize, num_ues: usize, num_aps: usize, h: &[CVec], hhat: &[CVec]) -> Result<Self> {
        if h.len() != num_ues * num_aps || hhat.len() != h.len() {
            return Err(CellFreeError::InvalidInput("draw shape mismatch".into()));
        }
        let flat = |v: &[CVec]| v.iter().flat_map(|x| x.iter().copied()).collect::<Vec<_>>();
        Ok(ChannelDraw { n, num_ues, num_aps, h: flat(h), hhat: flat(hhat) })
    }

    /// X draw where estimates are perfect (h = ĥ).
    pub fn perfect(n: usize, num_ues: usize, num_aps: usize, h: &[CVec]) -> Result<Self> {
        Self::from_parts(n, num_ues, num_aps, h, h)
    }
}

/// Processed pilot signals y_tl = Σ_{i: t_i=t} √(η_i τ_p) h_il + n, n ~ CN(0, σ²I).
fn pilot_signals<R: Rng + ?Sized>(stats: &EstimationStatistics, h: &[C64], rng: &mut R) -> Vec<C64> {
    let (n, l) = (stats.n, stats.num_aps);
    let sd = stats.sigma2.sqrt();
    let mut y: Vec<C64> = (0..stats.tau_p * l * n).map(|_| cn_scalar(rng) * sd).collect();
    for k in 0..stats.num_ues {
        let t = stats.pilot_of[k];
        let a = (stats.eta[k] * stats.tau_p as f64).sqrt();
        for ll in 0..l {
            let src = (k * l + ll) * n;
            let dst = (t * l + ll) * n;
            for j in 0..n {
                y[dst + j] += h[src + j] * a;
            }
        }
    }
    y
}

fn correlated_channels<R: Rng + ?Sized>(stats: &EstimationStatistics, rng: &mut R) -> Vec<C64> {
    let (n, k, l) = (stats.n, stats.num_ues, stats.num_aps);
    let mut h = vec![ZERO; k * l * n];
    let mut z = vec![ZERO; n];
    for kk in 0..k {
        for ll in 0..l {
            for zj in z.iter_mut() {
                *zj = cn_scalar(rng);
            }
            let o = (kk * l + ll) * n;
            matvec_into(stats.r_sqrt(kk, ll), &z, &mut h[o..o + n]);
        }
    }
    h
}

fn estimates_from(stats: &EstimationStatistics, y: &[C64]) -> Vec<C64> {
    let (n, k, l) = (stats.n, stats.num_ues, stats.num_aps);
    let mut hhat = vec![ZERO; k * l * n];
    for kk in 0..k {
        let t = stats.pilot_of[kk];
        for ll in 0..l {
            let src = (t * l + ll) * n;
            let o = (kk * l + ll) * n;
            matvec_into(stats.gain(kk, ll), &y[src..src + n], &mut hhat[o..o + n]);
        }
    }
    hhat
}

/// Samples one coherence block.
///
/// In direct mode the processed pilot y_tl ~ CN(0, Ψ_tl) is drawn once per
/// (pilot, AP) so that estimates of pilot-sharing UEs are correlated exactly
/// as in the pilot-path model. Estimation errors are then drawn jointly by
/// simulating an independent pilot round (h', y') and setting
/// h̃ = h' − E{h' | y'}. Sampling h̃ ~ CN(0, C) independently per UE would give
/// the right marginals but would wrongly correlate the true channels of UEs
/// sharing a pilot.
pub fn sample_channel_draw<R: Rng + ?Sized>(
    stats: &EstimationStatistics,
    mode: SamplingMode,
    rng: &mut R,
) -> ChannelDraw {
    let (n, k, l) = (stats.n, stats.num_ues, stats.num_aps);
    let (h, hhat) = match mode {
        SamplingMode::PilotPath => {
            let h = correlated_channels(stats, rng);
            let y = pilot_signals(stats, &h, rng);
            let hhat = estimates_from(stats, &y);
            (h, hhat)
        }
        SamplingMode::Direct => {
            let mut y = vec![ZERO; stats.tau_p * l * n];
            let mut z = vec![ZERO; n];
            for t in 0..stats.tau_p {
                for ll in 0..l {
                    for zj in z.iter_mut() {
                        *zj = cn_scalar(rng);
                    }
                    let o = (t * l + ll) * n;
                    lower_matvec_into(&stats.psi_chol[t * l + ll], &z, &mut y[o..o + n]);
                }
            }
            let hhat = estimates_from(stats, &y);
            let shadow_h = correlated_channels(stats, rng);
            let shadow_y = pilot_signals(stats, &shadow_h, rng);
            let shadow_hat = estimates_from(stats, &shadow_y);
            let h = hhat
                .iter()
                .zip(shadow_h.iter().zip(shadow_hat.iter()))
                .map(|(a, (b, c))| a + b - c)
                .collect();
            (h, hhat)
        }
    };
    ChannelDraw { n, num_ues: k, num_aps: l, h, hhat }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_setup(beta: f64, eta: f64, sigma2: f64) -> EstimationStatistics {
        let b = DMatrix::from_element(1, 1, beta);
        let ch = ChannelStatistics::uncorrelated_from_beta(1, &b);
        let cl = ClusterState::from_assignment(1, 1, vec![0], vec![vec![0]]).unwrap();
        build_estimation_statistics(&ch, &cl, &[eta], 1, sigma2).unwrap()
    }

    #[test]
    fn zero_pilot_power_means_no_information() {
        let s = scalar_setup(2.0, 0.0, 1.0);
        assert_eq!(s.est_corr(0, 0)[(0, 0)].norm(), 0.0);
        assert!((s.err_corr(0, 0)[(0, 0)].re - 2.0).abs() < 1e-15);
        assert_eq!(s.nmse_link(0, 0).unwrap(), 1.0);
    }

    #[test]
    fn scalar_error_variance() {
        let (beta, eta, sigma2) = (0.7, 2.0, 0.3);
        let s = scalar_setup(beta, eta, sigma2);
        let expect = beta - eta * beta * beta / (eta * beta + sigma2);
        assert!((s.err_corr(0, 0)[(0, 0)].re - expect).abs() < 1e-14);
    }

    #[test]
    fn nmse_at_ten_snr() {
        let s = scalar_setup(1.0, 10.0, 1.0);
        assert!((s.nmse_link(0, 0).unwrap() - 1.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn collective_nmse_with_equal_snrs() {
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let ch = ChannelStatistics::uncorrelated_from_beta(1, &b);
        let cl = ClusterState::from_assignment(2, 1, vec![0], vec![vec![0, 1]]).unwrap();
        let s = build_estimation_statistics(&ch, &cl, &[10.0], 1, 1.0).unwrap();
        assert!((s.nmse_collective(0, &cl).unwrap() - 1.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn large_pilot_power_drives_nmse_to_zero() {
        let s = scalar_setup(1.0, 1e12, 1.0);
        assert!(s.nmse_link(0, 0).unwrap() < 1e-11);
    }

    #[test]
    fn draws_satisfy_h_equals_estimate_plus_error() {
        use rand::SeedableRng;
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 0.9]);
        let ch = ChannelStatistics::uncorrelated_from_beta(2, &b);
        let cl = ClusterState::from_assignment(2, 1, vec![0, 0], vec![vec![0], vec![1]]).unwrap();
        let s = build_estimation_statistics(&ch, &cl, &[1.0, 1.0], 1, 0.1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for mode in [SamplingMode::Direct, SamplingMode::PilotPath] {
            let d = sample_channel_draw(&s, mode, &mut rng);
            for k in 0..2 {
                for l in 0..2 {
                    let e = d.herr(k, l);
                    for j in 0..2 {
                        assert!((d.hhat(k, l)[j] + e[j] - d.h(k, l)[j]).norm() < 1e-14);
                    }
                }
            }
        }
    }
}
