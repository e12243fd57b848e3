//! Precoding from combiners, downlink SE and uplink-downlink duality.
//!
//! Centralized precoders are w_i = √(ρ_i / n_i) v_i with n_i = E{‖D_i v_i‖²};
//! distributed precoders are w_il = √(ρ_il / n_il) v_il per serving AP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterState;
use crate::error::{CellFreeError, Result};
use crate::estimation::{ChannelDraw, EstimationStatistics};
use crate::linalg::{C64, CVec, ZERO};
use crate::uplink::{dot_active, local_dot, CentralCombiners, CentralMoments, DistributedExpectations, LocalCombiners};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownlinkMode {
    Centralized,
    Distributed,
    MrClosedForm,
    Genie,
}

fn clamp_den(den: f64, sigma2: f64, k: usize) -> f64 {
    let floor = sigma2 * 1e-6;
    if den < floor {
        log::warn!("downlink denominator of UE {k} is {den:e}; clamped to {floor:e}");
        floor
    } else {
        den
    }
}

fn check_norm(norm: f64, what: &str) -> Result<()> {
    if norm > 0.0 && norm.is_finite() {
        Ok(())
    } else {
        Err(CellFreeError::InvalidInput(format!("{what}: combiner has zero average norm")))
    }
}

/// Centralized precoders of one draw, compact over each serving set.
pub fn central_precoders(comb: &CentralCombiners, rho: &[f64], norm: &[f64]) -> Result<Vec<CVec>> {
    comb.v
        .iter()
        .enumerate()
        .map(|(k, v)| {
            check_norm(norm[k], "centralized precoder")?;
            Ok(v * C64::new((rho[k] / norm[k]).sqrt(), 0.0))
        })
        .collect()
}

/// Distributed precoders of one draw as flat per-(k, l) N-vectors
/// (zero outside M_k). `rho` is K × L and `norm[k]` lists E{‖v_kl‖²} over M_k.
pub fn distributed_precoders(
    comb: &LocalCombiners,
    rho: &DMatrix<f64>,
    norm: &[Vec<f64>],
    cluster: &ClusterState,
) -> Result<Vec<Vec<CVec>>> {
    let n = comb.n;
    (0..cluster.num_ues())
        .map(|k| {
            (0..cluster.num_aps)
                .map(|l| match cluster.position_in_serving(k, l) {
                    None => Ok(CVec::zeros(n)),
                    Some(pos) => {
                        check_norm(norm[k][pos], "distributed precoder")?;
                        let s = (rho[(k, l)] / norm[k][pos]).sqrt();
                        Ok(CVec::from_iterator(n, comb.v(k, l).iter().map(|z| z * s)))
                    }
                })
                .collect()
        })
        .collect()
}

/// Centralized downlink SINR with precoding from the moments' combiners.
pub fn centralized_dl_sinr(m: &CentralMoments, rho: &[f64], sigma2: f64) -> Vec<f64> {
    let k_total = m.num_ues();
    (0..k_total)
        .map(|k| {
            let sig = rho[k] * m.mean[(k, k)].norm_sqr() / m.norm[k];
            let mut den = sigma2 - sig;
            for i in 0..k_total {
                den += rho[i] * m.second[(k, i)] / m.norm[i];
            }
            sig / clamp_den(den, sigma2, k)
        })
        .collect()
}

/// Distributed downlink SINR; `rho` is K × L (entries outside M_k ignored).
pub fn distributed_dl_sinr(exp: &DistributedExpectations, rho: &DMatrix<f64>, sigma2: f64) -> Vec<f64> {
    let k_total = exp.num_ues();
    let amp = |i: usize, pos: usize| (rho[(i, exp.active[i][pos])] / exp.norm[i][pos]).sqrt();
    (0..k_total)
        .map(|k| {
            let mut desired = ZERO;
            for pos in 0..exp.active[k].len() {
                desired += exp.mean[k][(pos, k)].conj() * amp(k, pos);
            }
            let sig = desired.norm_sqr();
            let mut den = sigma2 - sig;
            for i in 0..k_total {
                let mut lin = ZERO;
                for pos in 0..exp.active[i].len() {
                    let a = amp(i, pos);
                    let mu = exp.mean[i][(pos, k)];
                    lin += mu.conj() * a;
                    den += a * a * (exp.second[i][(pos, k)] - mu.norm_sqr());
                }
                den += lin.norm_sqr();
            }
            sig / clamp_den(den, sigma2, k)
        })
        .collect()
}

/// Closed-form distributed MR downlink SINR for single-antenna APs.
pub fn mr_closed_form_dl_sinr_n1(
    stats: &EstimationStatistics,
    cluster: &ClusterState,
    rho: &DMatrix<f64>,
    sigma2: f64,
) -> Result<Vec<f64>> {
    if stats.n != 1 {
        return Err(CellFreeError::InvalidInput("closed-form MR SINR requires N = 1".into()));
    }
    let k_total = stats.num_ues;
    let gamma = |k: usize, l: usize| stats.est_corr(k, l)[(0, 0)].re;
    Ok((0..k_total)
        .map(|k| {
            let coherent: f64 = cluster.serving_sets[k].iter().map(|&l| (rho[(k, l)] * gamma(k, l)).sqrt()).sum();
            let mut den = sigma2;
            for i in 0..k_total {
                for &l in &cluster.serving_sets[i] {
                    den += rho[(i, l)] * stats.beta[(k, l)];
                }
                if i != k && stats.shares_pilot(k, i) {
                    let s: f64 = cluster.serving_sets[i].iter().map(|&l| (rho[(i, l)] * gamma(k, l)).sqrt()).sum();
                    den += s * s;
                }
            }
            coherent * coherent / den
        })
        .collect())
}

/// Per-draw genie SINR for centralized precoders (compact over serving sets).
pub fn centralized_dl_genie_sinr(draw: &ChannelDraw, w: &[CVec], cluster: &ClusterState, sigma2: f64) -> Vec<f64> {
    let k_total = draw.num_ues;
    (0..k_total)
        .map(|k| {
            let mut sig = 0.0;
            let mut den = sigma2;
            for i in 0..k_total {
                let x = dot_active(&w[i], draw, k, &cluster.serving_sets[i], true).norm_sqr();
                if i == k {
                    sig = x;
                } else {
                    den += x;
                }
            }
            sig / den
        })
        .collect()
}

/// Per-draw genie SINR for distributed precoders from [`distributed_precoders`].
pub fn distributed_dl_genie_sinr(draw: &ChannelDraw, w: &[Vec<CVec>], cluster: &ClusterState, sigma2: f64) -> Vec<f64> {
    let k_total = draw.num_ues;
    (0..k_total)
        .map(|k| {
            let mut sig = 0.0;
            let mut den = sigma2;
            for i in 0..k_total {
                let mut s = ZERO;
                for &l in &cluster.serving_sets[i] {
                    s += local_dot(w[i][l].as_slice(), draw.h(k, l));
                }
                if i == k {
                    sig = s.norm_sqr();
                } else {
                    den += s.norm_sqr();
                }
            }
            sig / den
        })
        .collect()
}

/// Γ, Σ and the downlink powers that reproduce the uplink UatF SINRs.
#[derive(Debug, Clone, PartialEq)]
pub struct DualityMatrices {
    pub gamma: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub rho: Vec<f64>,
}

pub fn duality_power_allocation(ul_sinr: &[f64], m: &CentralMoments, sigma2_dl: f64) -> Result<DualityMatrices> {
    let k_total = m.num_ues();
    if ul_sinr.len() != k_total {
        return Err(CellFreeError::InvalidInput("SINR vector length differs from K".into()));
    }
    if ul_sinr.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(CellFreeError::InvalidInput("target SINRs must be positive and finite".into()));
    }
    let gamma = DVector::from_fn(k_total, |k, _| m.mean[(k, k)].norm_sqr() / (ul_sinr[k] * m.norm[k]));
    let sigma = DMatrix::from_fn(k_total, k_total, |k, i| {
        let mut x = m.second[(k, i)] / m.norm[i];
        if i == k {
            x -= m.mean[(k, k)].norm_sqr() / m.norm[k];
        }
        x
    });
    let a = DMatrix::from_diagonal(&gamma) - &sigma;
    let rhs = DVector::from_element(k_total, sigma2_dl);
    let rho = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CellFreeError::Infeasible("Γ − Σ is singular".into()))?;
    if rho.iter().any(|&r| !(r > 0.0)) {
        return Err(CellFreeError::Infeasible("duality produced a non-positive power".into()));
    }
    Ok(DualityMatrices { gamma, sigma, rho: rho.iter().copied().collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerUsage {
    pub per_ap: Vec<f64>,
    pub violated: Vec<bool>,
}

impl PowerUsage {
    fn from_usage(per_ap: Vec<f64>, rho_max: f64) -> Self {
        let violated = per_ap.iter().map(|&u| u > rho_max * (1.0 + 1e-9)).collect();
        PowerUsage { per_ap, violated }
    }

    pub fn any_violated(&self) -> bool {
        self.violated.iter().any(|&v| v)
    }
}

/// E{‖x_l‖²} = Σ_{k∈D_l} ρ_k E{‖v_kl‖²} / E{‖D_k v_k‖²}.
pub fn central_power_usage(m: &CentralMoments, rho: &[f64], cluster: &ClusterState, rho_max: f64) -> PowerUsage {
    let per_ap = (0..cluster.num_aps)
        .map(|l| cluster.served_sets[l].iter().map(|&k| rho[k] * m.norm_ap[(k, l)] / m.norm[k]).sum())
        .collect();
    PowerUsage::from_usage(per_ap, rho_max)
}

/// E{‖x_l‖²} = Σ_{k∈D_l} ρ_kl.
pub fn distributed_power_usage(rho: &DMatrix<f64>, cluster: &ClusterState, rho_max: f64) -> PowerUsage {
    let per_ap = (0..cluster.num_aps)
        .map(|l| cluster.served_sets[l].iter().map(|&k| rho[(k, l)]).sum())
        .collect();
    PowerUsage::from_usage(per_ap, rho_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{build_estimation_statistics, ChannelStatistics};
    use crate::linalg::random_psd;
    use crate::uplink::uatf_sinr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, k: usize, l: usize, tau_p: usize, seed: u64) -> (EstimationStatistics, ClusterState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = (0..k * l).map(|_| random_psd(n, n + 1, &mut rng)).collect();
        let ch = ChannelStatistics::new(n, k, l, r).unwrap();
        let cl = ClusterState::all_serve_all(l, tau_p, (0..k).map(|i| i % tau_p).collect()).unwrap();
        (build_estimation_statistics(&ch, &cl, &vec![1.0; k], tau_p, 0.5).unwrap(), cl)
    }

    #[test]
    fn duality_single_ue_is_scalar() {
        let g = C64::new(1.5, -0.5);
        let m = CentralMoments {
            mean: DMatrix::from_element(1, 1, g),
            second: DMatrix::from_element(1, 1, g.norm_sqr()),
            norm: vec![2.0],
            norm_ap: DMatrix::from_element(1, 1, 2.0),
        };
        let d = duality_power_allocation(&[3.0], &m, 0.7).unwrap();
        let expect = 0.7 * 3.0 / (g.norm_sqr() / 2.0);
        assert!((d.rho[0] - expect).abs() < 1e-12 * expect);
        assert!((centralized_dl_sinr(&m, &d.rho, 0.7)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn duality_reproduces_uplink_sinrs() {
        let (s, cl) = setup(2, 3, 4, 2, 7);
        let m = CentralMoments::closed_form_mr(&s, &cl);
        let p = [0.2, 0.5, 0.9];
        let ul = uatf_sinr(&m, &p, 0.5);
        let d = duality_power_allocation(&ul, &m, 0.3).unwrap();
        let dl = centralized_dl_sinr(&m, &d.rho, 0.3);
        for k in 0..3 {
            assert!((dl[k] - ul[k]).abs() < 1e-6 * ul[k]);
        }
        let lhs: f64 = d.rho.iter().sum::<f64>() / 0.3;
        let rhs: f64 = p.iter().sum::<f64>() / 0.5;
        assert!((lhs - rhs).abs() < 1e-9 * rhs);
    }

    #[test]
    fn n1_closed_form_matches_general_distributed() {
        let (s, cl) = setup(1, 4, 3, 2, 3);
        let exp = DistributedExpectations::closed_form_mr(&s, &cl);
        let rho = DMatrix::from_fn(4, 3, |k, l| 0.1 + 0.05 * (k + 2 * l) as f64);
        let a = distributed_dl_sinr(&exp, &rho, 0.4);
        let b = mr_closed_form_dl_sinr_n1(&s, &cl, &rho, 0.4).unwrap();
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 1e-10 * a[k]);
        }
    }

    #[test]
    fn coherent_gain_of_two_aps() {
        let beta = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let ch = ChannelStatistics::uncorrelated_from_beta(1, &beta);
        let cl = ClusterState::all_serve_all(2, 1, vec![0]).unwrap();
        let s = build_estimation_statistics(&ch, &cl, &[1.0], 1, 1.0).unwrap();
        let g = s.est_corr(0, 0)[(0, 0)].re;
        let rho2 = DMatrix::from_element(1, 2, 0.5);
        let two = mr_closed_form_dl_sinr_n1(&s, &cl, &rho2, 1.0).unwrap()[0];
        let den = 1.0 + 0.5 * 2.0;
        assert!((two * den - 4.0 * 0.5 * g).abs() < 1e-12);
    }

    #[test]
    fn usage_of_idle_ap_is_zero() {
        let cl = ClusterState::from_assignment(2, 1, vec![0], vec![vec![0]]).unwrap();
        let u = distributed_power_usage(&DMatrix::from_element(1, 2, 0.3), &cl, 1.0);
        assert_eq!(u.per_ap[1], 0.0);
        assert!(!u.any_violated());
    }
}
