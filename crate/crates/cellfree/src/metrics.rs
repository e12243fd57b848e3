//! Channel hardening and favorable propagation diagnostics, fronthaul
//! signaling and multiplication counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterState;
use crate::error::{CellFreeError, Result};
use crate::linalg::{real_trace, trace_prod, CMat};
use crate::uplink::{CentralScheme, LocalScheme, LsfdMode};

/// Normalized variance of Σ_l √(ρ_l / E{‖h_l‖²}) ‖h_l‖² over the links
/// `(ρ_l, R_l)` of one UE.
pub fn hardening_metric(links: &[(f64, &CMat)]) -> Result<f64> {
    check_rho(links.iter().map(|x| x.0))?;
    let n = links.first().map(|x| x.1.nrows()).unwrap_or(1) as f64;
    let mut num = 0.0;
    let mut amp = 0.0;
    for &(rho, r) in links {
        let beta = real_trace(r) / n;
        if rho > 0.0 && beta > 0.0 {
            num += rho * trace_prod(r, r).re / (n * beta);
            amp += (rho * beta).sqrt();
        }
    }
    Ok(num / (n * amp * amp))
}

/// Favorable-propagation metric of UE k against interferer i.
/// `interferer` lists (ρ_il, R_il, R_kl) over M_i, `desired` lists (ρ_kl, R_kl) over M_k.
pub fn favorable_metric(interferer: &[(f64, &CMat, &CMat)], desired: &[(f64, &CMat)]) -> Result<f64> {
    check_rho(desired.iter().map(|x| x.0))?;
    let n = desired.first().map(|x| x.1.nrows()).unwrap_or(1) as f64;
    let mut num = 0.0;
    for &(rho, ri, rk) in interferer {
        let beta_i = real_trace(ri) / n;
        if rho > 0.0 && beta_i > 0.0 {
            num += rho * trace_prod(ri, rk).re / (n * beta_i);
        }
    }
    let amp: f64 = desired.iter().map(|&(rho, r)| (rho * real_trace(r) / n).sqrt()).sum();
    Ok(num / (n * amp * amp))
}

fn check_rho(rho: impl Iterator<Item = f64>) -> Result<()> {
    let mut any = false;
    for r in rho {
        if r < 0.0 || !r.is_finite() {
            return Err(CellFreeError::InvalidInput("powers must be nonnegative".into()));
        }
        any |= r > 0.0;
    }
    if any {
        Ok(())
    } else {
        Err(CellFreeError::InvalidInput("at least one power must be positive".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operation {
    Centralized,
    Distributed,
}

/// Complex scalars over the fronthaul: per coherence block and per
/// statistics update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FronthaulCount {
    pub per_block: f64,
    pub statistics: f64,
}

fn total_served(cluster: &ClusterState) -> f64 {
    cluster.served_sets.iter().map(|d| d.len() as f64).sum()
}

/// Uplink signaling. `lsfd` is only consulted for distributed operation.
pub fn fronthaul_uplink(op: Operation, lsfd: LsfdMode, cluster: &ClusterState, n: usize, tau_p: usize, tau_u: usize) -> FronthaulCount {
    match op {
        Operation::Centralized => FronthaulCount {
            per_block: ((tau_p + tau_u) * n * cluster.num_aps) as f64,
            statistics: 0.0,
        },
        Operation::Distributed => {
            let k = cluster.num_ues() as f64;
            let statistics = match lsfd {
                LsfdMode::Opt => (3.0 * k + 1.0) / 2.0 * total_served(cluster),
                LsfdMode::NOpt => cluster
                    .served_sets
                    .iter()
                    .flat_map(|d| d.iter())
                    .map(|&kk| (3.0 * cluster.coservice[kk].len() as f64 + 1.0) / 2.0)
                    .sum(),
                LsfdMode::None => 0.0,
            };
            FronthaulCount { per_block: tau_u as f64 * total_served(cluster), statistics }
        }
    }
}

/// Downlink CPU-to-AP scalars per coherence block.
pub fn fronthaul_downlink(op: Operation, cluster: &ClusterState, n: usize, tau_d: usize) -> f64 {
    match op {
        Operation::Centralized => (tau_d * n * cluster.num_aps) as f64,
        Operation::Distributed => tau_d as f64 * total_served(cluster),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeRef {
    Central(CentralScheme),
    Local(LocalScheme),
    Lsfd(LsfdMode),
}

impl SchemeRef {
    pub fn key(&self) -> String {
        match self {
            SchemeRef::Central(s) => format!("centralized/{}", s.name()),
            SchemeRef::Local(s) => format!("distributed/{}", s.name()),
            SchemeRef::Lsfd(s) => format!("lsfd/{}", s.name()),
        }
    }

    pub fn all() -> Vec<SchemeRef> {
        use CentralScheme as C;
        use LocalScheme as L;
        vec![
            SchemeRef::Central(C::Mmse),
            SchemeRef::Central(C::PMmse),
            SchemeRef::Central(C::PRzf),
            SchemeRef::Central(C::Mr),
            SchemeRef::Local(L::LMmse),
            SchemeRef::Local(L::LpMmse),
            SchemeRef::Local(L::Mr),
            SchemeRef::Lsfd(LsfdMode::Opt),
            SchemeRef::Lsfd(LsfdMode::NOpt),
            SchemeRef::Lsfd(LsfdMode::None),
        ]
    }
}

/// Complex multiplications per UE and coherence block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityCount {
    pub estimation: f64,
    pub combining: f64,
}

impl ComplexityCount {
    pub fn total(&self) -> f64 {
        self.estimation + self.combining
    }
}

fn inverse_cost(m: f64) -> f64 {
    (m * m * m - m) / 3.0
}

pub fn complexity_count(scheme: SchemeRef, cluster: &ClusterState, k: usize, n: usize, tau_p: usize) -> ComplexityCount {
    let kk = cluster.num_ues() as f64;
    let nf = n as f64;
    let ms = cluster.serving_sets[k].len() as f64;
    let s = cluster.coservice[k].len() as f64;
    let est = (nf * tau_p as f64 + nf * nf) * ms;
    let m = nf * ms;
    match scheme {
        SchemeRef::Central(CentralScheme::Mmse) => ComplexityCount {
            estimation: est * kk,
            combining: (m * m + m) / 2.0 * kk + m * m + inverse_cost(m),
        },
        SchemeRef::Central(CentralScheme::PMmse) => ComplexityCount {
            estimation: est * s,
            combining: (m * m + m) / 2.0 * s + m * m + inverse_cost(m),
        },
        SchemeRef::Central(CentralScheme::PRzf) => ComplexityCount {
            estimation: est * s,
            combining: (s * s + s) / 2.0 * m + s * s + s * m + inverse_cost(s),
        },
        SchemeRef::Central(CentralScheme::Mr) | SchemeRef::Local(LocalScheme::Mr) => {
            ComplexityCount { estimation: est, combining: 0.0 }
        }
        SchemeRef::Local(LocalScheme::LMmse) => ComplexityCount {
            estimation: est * kk,
            combining: (nf * nf + nf) / 2.0 * kk * ms + nf * nf * ms + inverse_cost(nf) * ms,
        },
        SchemeRef::Local(LocalScheme::LpMmse) => {
            let load: f64 = cluster.serving_sets[k].iter().map(|&l| cluster.served_sets[l].len() as f64).sum();
            ComplexityCount {
                estimation: (nf * tau_p as f64 + nf * nf) * load,
                combining: (nf * nf + nf) / 2.0 * load + nf * nf * ms + inverse_cost(nf) * ms,
            }
        }
        SchemeRef::Lsfd(LsfdMode::Opt | LsfdMode::NOpt) => {
            ComplexityCount { estimation: 0.0, combining: ms * ms + inverse_cost(ms) }
        }
        SchemeRef::Lsfd(LsfdMode::None) => ComplexityCount { estimation: 0.0, combining: 0.0 },
    }
}

/// Per-AP fronthaul load attributable to a scheme (statistics plus data).
fn per_ap_fronthaul(scheme: SchemeRef, cluster: &ClusterState, n: usize, tau_p: usize, tau_u: usize) -> f64 {
    let l = cluster.num_aps as f64;
    let fh = match scheme {
        SchemeRef::Central(_) => fronthaul_uplink(Operation::Centralized, LsfdMode::None, cluster, n, tau_p, tau_u),
        SchemeRef::Local(_) => fronthaul_uplink(Operation::Distributed, LsfdMode::None, cluster, n, tau_p, tau_u),
        SchemeRef::Lsfd(m) => fronthaul_uplink(Operation::Distributed, m, cluster, n, tau_p, tau_u),
    };
    (fh.per_block + fh.statistics) / l
}

/// A network that grows with K: L = K APs on a ring, UE k served by APs
/// k, …, k+m−1 (mod L), pilots assigned cyclically. Every AP serves m UEs
/// on distinct pilots when m ≤ τ_p.
pub fn ring_cluster(num_ues: usize, m: usize, tau_p: usize) -> Result<ClusterState> {
    if m == 0 || m > tau_p || m > num_ues {
        return Err(CellFreeError::InvalidInput("ring cluster needs 1 ≤ m ≤ min(τ_p, K)".into()));
    }
    let sets = (0..num_ues).map(|k| (0..m).map(|j| (k + j) % num_ues).collect()).collect();
    ClusterState::from_assignment(num_ues, tau_p, (0..num_ues).map(|k| k % tau_p).collect(), sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeScalability {
    pub per_ue_multiplications: Vec<f64>,
    pub per_ap_fronthaul: Vec<f64>,
    pub scalable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityReport {
    pub k_grid: Vec<usize>,
    pub schemes: BTreeMap<String, SchemeScalability>,
}

impl ScalabilityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluates every scheme on ring networks for each K in `k_grid`; a scheme
/// is flagged scalable iff its per-UE multiplications and per-AP fronthaul
/// do not change with K.
pub fn scalability_report(k_grid: &[usize], n: usize, tau_p: usize, tau_u: usize, m: usize) -> Result<ScalabilityReport> {
    let clusters = k_grid.iter().map(|&k| ring_cluster(k, m, tau_p)).collect::<Result<Vec<_>>>()?;
    let mut schemes = BTreeMap::new();
    for scheme in SchemeRef::all() {
        let mult: Vec<f64> = clusters.iter().map(|c| complexity_count(scheme, c, 0, n, tau_p).total()).collect();
        let fh: Vec<f64> = clusters.iter().map(|c| per_ap_fronthaul(scheme, c, n, tau_p, tau_u)).collect();
        let flat = |v: &[f64]| v.iter().all(|x| (x - v[0]).abs() <= 1e-12 * v[0].abs().max(1.0));
        let scalable = flat(&mult) && flat(&fh);
        schemes.insert(scheme.key(), SchemeScalability { per_ue_multiplications: mult, per_ap_fronthaul: fh, scalable });
    }
    Ok(ScalabilityReport { k_grid: k_grid.to_vec(), schemes })
}

/// Counts for an actual cluster: mean per-UE multiplications per scheme and
/// total fronthaul scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCounts {
    pub mean_multiplications: BTreeMap<String, f64>,
    pub fronthaul_uplink: BTreeMap<String, FronthaulCount>,
    pub fronthaul_downlink: BTreeMap<String, f64>,
}

pub fn instance_counts(cluster: &ClusterState, n: usize, tau_p: usize, tau_u: usize, tau_d: usize) -> InstanceCounts {
    let k = cluster.num_ues();
    let mut mean_multiplications = BTreeMap::new();
    for scheme in SchemeRef::all() {
        let total: f64 = (0..k).map(|kk| complexity_count(scheme, cluster, kk, n, tau_p).total()).sum();
        mean_multiplications.insert(scheme.key(), total / k.max(1) as f64);
    }
    let mut fronthaul_uplink = BTreeMap::new();
    fronthaul_uplink.insert("centralized".into(), self::fronthaul_uplink(Operation::Centralized, LsfdMode::None, cluster, n, tau_p, tau_u));
    for m in [LsfdMode::Opt, LsfdMode::NOpt, LsfdMode::None] {
        fronthaul_uplink.insert(format!("distributed/{}", m.name()), self::fronthaul_uplink(Operation::Distributed, m, cluster, n, tau_p, tau_u));
    }
    let mut fronthaul_downlink = BTreeMap::new();
    fronthaul_downlink.insert("centralized".into(), self::fronthaul_downlink(Operation::Centralized, cluster, n, tau_d));
    fronthaul_downlink.insert("distributed".into(), self::fronthaul_downlink(Operation::Distributed, cluster, n, tau_d));
    InstanceCounts { mean_multiplications, fronthaul_uplink, fronthaul_downlink }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{identity, C64, CVec};

    fn scaled_identity(n: usize, b: f64) -> CMat {
        identity(n) * C64::new(b, 0.0)
    }

    #[test]
    fn hardening_special_cases() {
        let r: Vec<CMat> = [0.5, 2.0, 0.125].iter().map(|&b| scaled_identity(4, b)).collect();
        let links: Vec<(f64, &CMat)> = r.iter().map(|m| (1.0 / (real_trace(m) / 4.0), m)).collect();
        assert!((hardening_metric(&links).unwrap() - 1.0 / 12.0).abs() < 1e-15);
        let one = scaled_identity(8, 3.0);
        assert!((hardening_metric(&[(0.2, &one)]).unwrap() - 1.0 / 8.0).abs() < 1e-15);
        let v = CVec::from_fn(3, |i, _| C64::new(1.0, i as f64));
        let rank1 = &v * v.adjoint();
        assert!((hardening_metric(&[(0.7, &rank1)]).unwrap() - 1.0).abs() < 1e-12);
        assert!(hardening_metric(&[(0.0, &one)]).is_err());
    }

    #[test]
    fn hardening_decreases_with_antennas() {
        let mut prev = f64::INFINITY;
        for n in 1..10 {
            let r = scaled_identity(n, 0.3);
            let h = hardening_metric(&[(1.0, &r), (0.4, &r)]).unwrap();
            assert!(h < prev);
            prev = h;
        }
    }

    #[test]
    fn favorable_orthogonal_is_zero() {
        let mut a = CMat::zeros(2, 2);
        a[(0, 0)] = C64::new(1.0, 0.0);
        let mut b = CMat::zeros(2, 2);
        b[(1, 1)] = C64::new(1.0, 0.0);
        assert_eq!(favorable_metric(&[(1.0, &a, &b)], &[(1.0, &b)]).unwrap(), 0.0);
    }

    #[test]
    fn fronthaul_and_complexity_arithmetic() {
        let cl = ClusterState::all_serve_all(100, 1, vec![0]).unwrap();
        let fh = fronthaul_uplink(Operation::Centralized, LsfdMode::None, &cl, 4, 10, 190);
        assert_eq!(fh.per_block, 80_000.0);
        assert_eq!(fronthaul_uplink(Operation::Distributed, LsfdMode::None, &cl, 4, 10, 190).statistics, 0.0);
        let ring = ring_cluster(20, 8, 10).unwrap();
        let c = complexity_count(SchemeRef::Central(CentralScheme::Mr), &ring, 3, 4, 10);
        assert_eq!(c.total(), 448.0);
        let full = ring_cluster(20, 10, 10).unwrap();
        assert_eq!(fronthaul_uplink(Operation::Distributed, LsfdMode::None, &full, 4, 10, 190).per_block, 190.0 * 10.0 * 20.0);
    }

    #[test]
    fn scalability_flags() {
        let rep = scalability_report(&[20, 40, 80], 4, 10, 190, 5).unwrap();
        for (key, s) in &rep.schemes {
            let expect = !matches!(key.as_str(), "centralized/mmse" | "distributed/l-mmse" | "lsfd/opt");
            assert_eq!(s.scalable, expect, "{key}");
        }
    }
}
