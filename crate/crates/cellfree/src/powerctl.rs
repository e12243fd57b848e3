//! Power control: SINR coefficient extraction, max-min and sum-SE solvers,
//! and the scalable heuristics.
//!
//! Coefficient convention: `c[(k, i)]` multiplies the power of UE i in the
//! denominator of UE k. Distributed downlink variables are square roots
//! ρ̃_kl = √ρ_kl stored over each serving set.

use std::path::Path;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterState;
use crate::error::{CellFreeError, Result};
use crate::linalg::{C64, CMat};
use crate::uplink::{CentralMoments, DistributedExpectations, LsfdWeights};

pub const DEFAULT_FIXED_POINT_EPS: f64 = 1e-5;
pub const DEFAULT_BCD_EPS: f64 = 1e-6;
pub const DEFAULT_BISECTION_EPS: f64 = 1e-5;
pub const FIXED_POINT_MAX_ITER: usize = 10_000;
pub const BCD_MAX_ITER: usize = 1_000;

/// `SINR_k(p) = b_k p_k / (c_k^T p + σ_k²)` with `p_k ≤ p_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct UlCoefficients {
    pub b: Vec<f64>,
    pub c: DMatrix<f64>,
    pub noise: Vec<f64>,
    pub p_max: f64,
}

/// `SINR_k(ρ) = b_k ρ_k / (c_k^T ρ + σ²)` with Σ_{k∈D_l} ρ_k ω_kl ≤ ρ_max,
/// where ω_kl = E{‖w̄_kl‖²}/E{‖w̄_k‖²}.
#[derive(Debug, Clone, PartialEq)]
pub struct DlCentralCoefficients {
    pub b: Vec<f64>,
    pub c: DMatrix<f64>,
    pub sigma2: f64,
    pub weights: DMatrix<f64>,
    pub served: Vec<Vec<usize>>,
    pub rho_max: f64,
}

/// `SINR_k = (b̃_k^T ρ̃_k)² / (Σ_i ρ̃_i^T C̃_ki ρ̃_i − (b̃_k^T ρ̃_k)² + σ²)`
/// with Σ_{k∈D_l} ρ̃_kl² ≤ ρ_max. `c[k][i]` is the real part of C̃_ki over M_i.
#[derive(Debug, Clone, PartialEq)]
pub struct DlDistributedCoefficients {
    pub active: Vec<Vec<usize>>,
    pub b: Vec<DVector<f64>>,
    pub c: Vec<Vec<DMatrix<f64>>>,
    pub sigma2: f64,
    pub num_aps: usize,
    pub rho_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SinrCoefficients {
    UlGeneric(UlCoefficients),
    DlCentralized(DlCentralCoefficients),
    DlDistributed(DlDistributedCoefficients),
}

impl UlCoefficients {
    /// Centralized UatF coefficients from combiner moments.
    pub fn from_central(m: &CentralMoments, sigma2: f64, p_max: f64) -> Self {
        let k = m.num_ues();
        let b: Vec<f64> = (0..k).map(|k| m.mean[(k, k)].norm_sqr()).collect();
        let c = DMatrix::from_fn(k, k, |kk, i| {
            let x = m.second[(i, kk)];
            if i == kk { (x - b[kk]).max(0.0) } else { x }
        });
        let noise = (0..k).map(|kk| sigma2 * m.norm[kk]).collect();
        UlCoefficients { b, c, noise, p_max }
    }

    /// Distributed coefficients for fixed LSFD weights.
    pub fn from_distributed(exp: &DistributedExpectations, lsfd: &LsfdWeights, p_max: f64) -> Self {
        let k = exp.num_ues();
        let b: Vec<f64> = (0..k).map(|kk| lsfd.a[kk].dotc(&exp.g_mean(kk, kk)).norm_sqr()).collect();
        let c = DMatrix::from_fn(k, k, |kk, i| {
            let x = exp.corr_quad(kk, i, &lsfd.a[kk]);
            if i == kk { (x - b[kk]).max(0.0) } else { x }
        });
        let noise = (0..k)
            .map(|kk| {
                let a = &lsfd.a[kk];
                (0..a.len()).map(|p| a[p].norm_sqr() * exp.sigma2 * exp.norm[kk][p]).sum()
            })
            .collect();
        UlCoefficients { b, c, noise, p_max }
    }

    pub fn num_ues(&self) -> usize {
        self.b.len()
    }

    pub fn sinr(&self, p: &[f64]) -> Vec<f64> {
        linear_sinr(&self.b, &self.c, |k| self.noise[k], p)
    }

    pub fn feasible(&self, p: &[f64]) -> bool {
        p.iter().all(|&x| x >= -1e-12 && x <= self.p_max * (1.0 + 1e-9))
    }
}

impl DlCentralCoefficients {
    pub fn from_central(m: &CentralMoments, cluster: &ClusterState, sigma2: f64, rho_max: f64) -> Self {
        let k = m.num_ues();
        let b: Vec<f64> = (0..k).map(|kk| m.mean[(kk, kk)].norm_sqr() / m.norm[kk]).collect();
        let c = DMatrix::from_fn(k, k, |kk, i| {
            let x = m.second[(kk, i)] / m.norm[i];
            if i == kk { (x - b[kk]).max(0.0) } else { x }
        });
        let weights = DMatrix::from_fn(k, cluster.num_aps, |kk, l| m.norm_ap[(kk, l)] / m.norm[kk]);
        DlCentralCoefficients { b, c, sigma2, weights, served: cluster.served_sets.clone(), rho_max }
    }

    pub fn num_ues(&self) -> usize {
        self.b.len()
    }

    pub fn sinr(&self, rho: &[f64]) -> Vec<f64> {
        linear_sinr(&self.b, &self.c, |_| self.sigma2, rho)
    }

    pub fn ap_usage(&self, rho: &[f64]) -> Vec<f64> {
        self.served.iter().enumerate().map(|(l, d)| d.iter().map(|&k| rho[k] * self.weights[(k, l)]).sum()).collect()
    }

    pub fn feasible(&self, rho: &[f64]) -> bool {
        rho.iter().all(|&x| x >= -1e-12) && self.ap_usage(rho).iter().all(|&u| u <= self.rho_max * (1.0 + 1e-9))
    }

    /// ω_k = max_{l∈M_k} ω_kl, used by the centralized FPA heuristic.
    pub fn omega(&self, cluster: &ClusterState) -> Vec<f64> {
        (0..self.num_ues())
            .map(|k| cluster.serving_sets[k].iter().map(|&l| self.weights[(k, l)]).fold(0.0, f64::max))
            .collect()
    }
}

impl DlDistributedCoefficients {
    /// Builds b̃ and C̃ from local-combiner statistics, rotating each
    /// precoder phase so that b̃ is real and nonnegative.
    pub fn from_distributed(exp: &DistributedExpectations, num_aps: usize, rho_max: f64) -> Result<Self> {
        let k_total = exp.num_ues();
        let mut phase = Vec::with_capacity(k_total);
        let mut b = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let m = exp.active[k].len();
            let raw: Vec<C64> = (0..m).map(|p| exp.mean[k][(p, k)].conj() / exp.norm[k][p].sqrt()).collect();
            let rot: Vec<C64> = raw.iter().map(|z| if z.norm() > 0.0 { z.conj() / z.norm() } else { C64::new(1.0, 0.0) }).collect();
            let rotated: Vec<C64> = raw.iter().zip(&rot).map(|(z, r)| z * r).collect();
            if rotated.iter().any(|z| z.im.abs() > 1e-8 * (1.0 + z.re.abs())) {
                return Err(CellFreeError::Numerical(format!("b̃ of UE {k} is not real after rotation")));
            }
            b.push(DVector::from_iterator(m, rotated.iter().map(|z| z.re.max(0.0))));
            phase.push(rot);
        }
        let c = (0..k_total)
            .map(|k| {
                (0..k_total)
                    .map(|i| {
                        let m = exp.active[i].len();
                        let mu: Vec<C64> = (0..m).map(|p| exp.mean[i][(p, k)] / exp.norm[i][p].sqrt()).collect();
                        let full = CMat::from_fn(m, m, |l, r| {
                            let base = if l == r {
                                C64::new(exp.second[i][(l, k)] / exp.norm[i][l], 0.0)
                            } else {
                                mu[l].conj() * mu[r]
                            };
                            base * phase[i][l] * phase[i][r].conj()
                        });
                        let mut re = full.map(|z| z.re);
                        let t = re.transpose();
                        re = (re + t) * 0.5;
                        re
                    })
                    .collect()
            })
            .collect();
        Ok(DlDistributedCoefficients { active: exp.active.clone(), b, c, sigma2: exp.sigma2, num_aps, rho_max })
    }

    pub fn num_ues(&self) -> usize {
        self.b.len()
    }

    pub fn sinr(&self, x: &[DVector<f64>]) -> Vec<f64> {
        (0..self.num_ues())
            .map(|k| {
                let s = self.b[k].dot(&x[k]).powi(2);
                let total: f64 = (0..self.num_ues()).map(|i| x[i].dot(&(&self.c[k][i] * &x[i]))).sum();
                s / (total - s + self.sigma2)
            })
            .collect()
    }

    pub fn ap_usage(&self, x: &[DVector<f64>]) -> Vec<f64> {
        let mut u = vec![0.0; self.num_aps];
        for (k, a) in self.active.iter().enumerate() {
            for (p, &l) in a.iter().enumerate() {
                u[l] += x[k][p] * x[k][p];
            }
        }
        u
    }

    pub fn feasible(&self, x: &[DVector<f64>]) -> bool {
        x.iter().all(|v| v.iter().all(|&z| z >= -1e-9))
            && self.ap_usage(x).iter().all(|&u| u <= self.rho_max * (1.0 + 1e-7))
    }

    /// ρ as a K × L matrix.
    pub fn to_rho(&self, x: &[DVector<f64>]) -> DMatrix<f64> {
        let mut rho = DMatrix::zeros(self.num_ues(), self.num_aps);
        for (k, a) in self.active.iter().enumerate() {
            for (p, &l) in a.iter().enumerate() {
                rho[(k, l)] = x[k][p] * x[k][p];
            }
        }
        rho
    }

    /// ρ̃ from a K × L power matrix.
    pub fn from_rho(&self, rho: &DMatrix<f64>) -> Vec<DVector<f64>> {
        self.active
            .iter()
            .enumerate()
            .map(|(k, a)| DVector::from_iterator(a.len(), a.iter().map(|&l| rho[(k, l)].max(0.0).sqrt())))
            .collect()
    }
}

fn linear_sinr(b: &[f64], c: &DMatrix<f64>, noise: impl Fn(usize) -> f64, p: &[f64]) -> Vec<f64> {
    (0..b.len())
        .map(|k| {
            let den: f64 = (0..b.len()).map(|i| c[(k, i)] * p[i]).sum::<f64>() + noise(k);
            b[k] * p[k] / den
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub min_sinr: f64,
    pub max_sinr: f64,
}

impl TraceRow {
    fn new(iteration: usize, objective: f64, sinr: &[f64]) -> Self {
        let (lo, hi) = min_max(sinr);
        TraceRow { iteration, objective, min_sinr: lo, max_sinr: hi }
    }
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSolution<T> {
    pub power: T,
    /// Min SINR for max-min solvers, Σ log2(1 + SINR) for sum-SE solvers.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

fn sum_log(sinr: &[f64]) -> f64 {
    sinr.iter().map(|s| (1.0 + s).log2()).sum()
}

fn check_signal(b: &[f64], noise: impl Fn(usize) -> f64) -> Result<()> {
    for (k, &bk) in b.iter().enumerate() {
        if !(bk > 0.0) || !(noise(k) > 0.0) {
            return Err(CellFreeError::InvalidInput(format!("UE {k} needs positive signal gain and noise")));
        }
    }
    Ok(())
}

/// Off-diagonal zeros would break the uniqueness argument of the fixed point.
fn perturb_zeros(c: &DMatrix<f64>) -> DMatrix<f64> {
    let max = c.iter().copied().fold(0.0, f64::max);
    let mut out = c.clone();
    let mut touched = false;
    for k in 0..c.nrows() {
        for i in 0..c.ncols() {
            if i != k && out[(k, i)] <= 0.0 {
                out[(k, i)] = 1e-12 * max.max(f64::MIN_POSITIVE);
                touched = true;
            }
        }
    }
    if touched {
        log::warn!("zero interference coefficients perturbed by 1e-12·max(c)");
    }
    out
}

fn fixed_point(
    b: &[f64],
    c: &DMatrix<f64>,
    noise: impl Fn(usize) -> f64,
    normalize: impl Fn(&mut [f64]),
    eps: f64,
    what: &'static str,
) -> Result<PowerSolution<Vec<f64>>> {
    check_signal(b, &noise)?;
    let c = perturb_zeros(c);
    let k = b.len();
    let mut p = vec![1.0; k];
    normalize(&mut p);
    let mut trace = Vec::new();
    for it in 0..FIXED_POINT_MAX_ITER {
        let sinr = linear_sinr(b, &c, &noise, &p);
        let (lo, hi) = min_max(&sinr);
        trace.push(TraceRow::new(it, lo, &sinr));
        if hi - lo <= eps {
            return Ok(PowerSolution { power: p, objective: lo, iterations: it, converged: true, trace });
        }
        for kk in 0..k {
            p[kk] /= sinr[kk];
        }
        normalize(&mut p);
    }
    Err(CellFreeError::NonConvergence { what: what.into(), iterations: FIXED_POINT_MAX_ITER })
}

/// Uplink max-min fairness by the normalized fixed-point iteration.
pub fn ul_maxmin_fixedpoint(coeffs: &UlCoefficients, eps: f64) -> Result<PowerSolution<Vec<f64>>> {
    let p_max = coeffs.p_max;
    fixed_point(
        &coeffs.b,
        &coeffs.c,
        |k| coeffs.noise[k],
        |p| {
            let m = p.iter().copied().fold(0.0, f64::max);
            p.iter_mut().for_each(|x| *x *= p_max / m);
        },
        eps,
        "uplink max-min fixed point",
    )
}

/// Centralized downlink max-min with per-AP renormalization.
pub fn dl_cent_maxmin_fixedpoint(coeffs: &DlCentralCoefficients, eps: f64) -> Result<PowerSolution<Vec<f64>>> {
    fixed_point(
        &coeffs.b,
        &coeffs.c,
        |_| coeffs.sigma2,
        |p| {
            let m = coeffs.ap_usage(p).into_iter().fold(0.0, f64::max);
            p.iter_mut().for_each(|x| *x *= coeffs.rho_max / m);
        },
        eps,
        "centralized downlink max-min fixed point",
    )
}

/// u_k, e_k, d_k for a linear SINR model at powers p.
fn wmmse_weights(b: &[f64], c: &DMatrix<f64>, noise: impl Fn(usize) -> f64, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = b.len();
    let mut u = vec![0.0; k];
    let mut d = vec![0.0; k];
    for kk in 0..k {
        let total: f64 = b[kk] * p[kk] + (0..k).map(|i| c[(kk, i)] * p[i]).sum::<f64>() + noise(kk);
        u[kk] = (b[kk] * p[kk]).sqrt() / total;
        let e = 1.0 - (b[kk] * p[kk]) / total;
        d[kk] = 1.0 / e;
    }
    (u, d)
}

/// MSE of the scaled estimate u·y for the linear model, `e_k(p, u_k)`.
pub fn mse(b: f64, c_row: &[f64], noise: f64, p: &[f64], k: usize, u: f64) -> f64 {
    let total = b * p[k] + c_row.iter().zip(p).map(|(c, x)| c * x).sum::<f64>() + noise;
    u * u * total - 2.0 * u * (b * p[k]).sqrt() + 1.0
}

/// Minimizers A_i x_i² − 2 B_i x_i of the separable power subproblem.
fn quad_terms(b: &[f64], c: &DMatrix<f64>, u: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = b.len();
    let a = (0..k)
        .map(|i| d[i] * u[i] * u[i] * b[i] + (0..k).map(|kk| d[kk] * u[kk] * u[kk] * c[(kk, i)]).sum::<f64>())
        .collect();
    let bb = (0..k).map(|i| d[i] * u[i] * b[i].sqrt()).collect();
    (a, bb)
}

fn bcd_stop(prev: f64, cur: f64, eps: f64) -> bool {
    let gain = cur - prev;
    gain <= 0.0 || gain <= eps * prev.abs().max(f64::MIN_POSITIVE)
}

/// Uplink sum-SE maximization by block coordinate descent on the WMMSE form.
pub fn ul_sumse_bcd(coeffs: &UlCoefficients, eps: f64, init: &[f64]) -> Result<PowerSolution<Vec<f64>>> {
    check_signal(&coeffs.b, |k| coeffs.noise[k])?;
    if !coeffs.feasible(init) {
        return Err(CellFreeError::InvalidInput("initial powers violate p_max".into()));
    }
    let mut p = init.to_vec();
    let mut sinr = coeffs.sinr(&p);
    let mut obj = sum_log(&sinr);
    let mut trace = vec![TraceRow::new(0, obj, &sinr)];
    for it in 1..=BCD_MAX_ITER {
        let (u, d) = wmmse_weights(&coeffs.b, &coeffs.c, |k| coeffs.noise[k], &p);
        let (a, bb) = quad_terms(&coeffs.b, &coeffs.c, &u, &d);
        let next: Vec<f64> = (0..p.len()).map(|i| ((bb[i] / a[i]).powi(2)).min(coeffs.p_max)).collect();
        let next_sinr = coeffs.sinr(&next);
        let next_obj = sum_log(&next_sinr);
        let stop = bcd_stop(obj, next_obj, eps);
        if next_obj >= obj {
            p = next;
            sinr = next_sinr;
            obj = next_obj;
        }
        trace.push(TraceRow::new(it, obj, &sinr));
        if stop {
            return Ok(PowerSolution { power: p, objective: obj, iterations: it, converged: true, trace });
        }
    }
    Err(CellFreeError::NonConvergence { what: "uplink sum-SE BCD".into(), iterations: BCD_MAX_ITER })
}

/// Rows of `A x + s = b` grouped per cone, with P kept upper triangular.
struct Conic {
    n: usize,
    ai: Vec<usize>,
    aj: Vec<usize>,
    av: Vec<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

impl Conic {
    fn new(n: usize) -> Self {
        Conic { n, ai: Vec::new(), aj: Vec::new(), av: Vec::new(), b: Vec::new(), cones: Vec::new() }
    }

    fn row(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let r = self.b.len();
        for &(j, v) in entries {
            if v != 0.0 {
                self.ai.push(r);
                self.aj.push(j);
                self.av.push(-v);
            }
        }
        self.b.push(rhs);
    }

    fn nonneg(&mut self) {
        for j in 0..self.n {
            self.row(&[(j, 1.0)], 0.0);
        }
        self.cones.push(SupportedConeT::NonnegativeConeT(self.n));
    }

    /// ‖[rows]‖ ≤ head, each given as (linear terms, constant).
    fn soc(&mut self, head: (&[(usize, f64)], f64), rows: &[(Vec<(usize, f64)>, f64)]) {
        self.row(head.0, head.1);
        for (e, c) in rows {
            self.row(e, *c);
        }
        self.cones.push(SupportedConeT::SecondOrderConeT(rows.len() + 1));
    }

    fn solve(self, p_upper: &[(usize, usize, f64)], q: &[f64]) -> Result<(SolverStatus, Vec<f64>)> {
        let (pi, pj, pv): (Vec<_>, Vec<_>, Vec<_>) = p_upper
            .iter()
            .filter(|t| t.0 <= t.1 && t.2 != 0.0)
            .fold((vec![], vec![], vec![]), |mut acc, &(i, j, v)| {
                acc.0.push(i);
                acc.1.push(j);
                acc.2.push(v);
                acc
            });
        let p = CscMatrix::new_from_triplets(self.n, self.n, pi, pj, pv);
        let a = CscMatrix::new_from_triplets(self.b.len(), self.n, self.ai, self.aj, self.av);
        let settings = DefaultSettings {
            verbose: false,
            tol_gap_abs: 1e-10,
            tol_gap_rel: 1e-10,
            tol_feas: 1e-9,
            tol_ktratio: 1e-8,
            max_iter: 500,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, q, &a, &self.b, &self.cones, settings)
            .map_err(|e| CellFreeError::Numerical(format!("cone solver setup failed: {e}")))?;
        solver.solve();
        Ok((solver.solution.status, solver.solution.x.clone()))
    }
}

fn solved(status: SolverStatus) -> bool {
    matches!(status, SolverStatus::Solved | SolverStatus::AlmostSolved)
}

/// Centralized downlink sum-SE by BCD; each power subproblem is a convex
/// quadratic program in x = √ρ with per-AP second-order-cone constraints.
pub fn dl_cent_sumse_bcd(coeffs: &DlCentralCoefficients, eps: f64, init: Option<&[f64]>) -> Result<PowerSolution<Vec<f64>>> {
    check_signal(&coeffs.b, |_| coeffs.sigma2)?;
    let k = coeffs.num_ues();
    let mut rho = match init {
        Some(p) => p.to_vec(),
        None => {
            let mut p = vec![1.0; k];
            let m = coeffs.ap_usage(&p).into_iter().fold(0.0, f64::max);
            p.iter_mut().for_each(|x| *x *= coeffs.rho_max / m);
            p
        }
    };
    if !coeffs.feasible(&rho) {
        return Err(CellFreeError::InvalidInput("initial powers violate the per-AP limit".into()));
    }
    let mut sinr = coeffs.sinr(&rho);
    let mut obj = sum_log(&sinr);
    let mut trace = vec![TraceRow::new(0, obj, &sinr)];
    for it in 1..=BCD_MAX_ITER {
        let (u, d) = wmmse_weights(&coeffs.b, &coeffs.c, |_| coeffs.sigma2, &rho);
        let (a, bb) = quad_terms(&coeffs.b, &coeffs.c, &u, &d);
        let mut conic = Conic::new(k);
        conic.nonneg();
        for (l, served) in coeffs.served.iter().enumerate() {
            if served.is_empty() {
                continue;
            }
            let rows: Vec<(Vec<(usize, f64)>, f64)> =
                served.iter().map(|&kk| (vec![(kk, coeffs.weights[(kk, l)].sqrt())], 0.0)).collect();
            conic.soc((&[], coeffs.rho_max.sqrt()), &rows);
        }
        let p_up: Vec<(usize, usize, f64)> = (0..k).map(|i| (i, i, 2.0 * a[i])).collect();
        let q: Vec<f64> = bb.iter().map(|x| -2.0 * x).collect();
        let (status, x) = conic.solve(&p_up, &q)?;
        if !solved(status) {
            return Err(CellFreeError::Numerical(format!("power subproblem ended with {status:?}")));
        }
        let next: Vec<f64> = x.iter().map(|v| v.max(0.0).powi(2)).collect();
        let next = scale_into(coeffs, next);
        let next_sinr = coeffs.sinr(&next);
        let next_obj = sum_log(&next_sinr);
        let stop = bcd_stop(obj, next_obj, eps);
        if next_obj >= obj {
            rho = next;
            sinr = next_sinr;
            obj = next_obj;
        }
        trace.push(TraceRow::new(it, obj, &sinr));
        if stop {
            return Ok(PowerSolution { power: rho, objective: obj, iterations: it, converged: true, trace });
        }
    }
    Err(CellFreeError::NonConvergence { what: "centralized downlink sum-SE BCD".into(), iterations: BCD_MAX_ITER })
}

/// Pulls a solver output that overshoots by round-off back onto the feasible set.
fn scale_into(coeffs: &DlCentralCoefficients, mut rho: Vec<f64>) -> Vec<f64> {
    let m = coeffs.ap_usage(&rho).into_iter().fold(0.0, f64::max);
    if m > coeffs.rho_max {
        rho.iter_mut().for_each(|x| *x *= coeffs.rho_max / m);
    }
    rho
}

fn scale_into_dist(coeffs: &DlDistributedCoefficients, x: &mut [DVector<f64>]) {
    let usage = coeffs.ap_usage(x);
    for (k, a) in coeffs.active.iter().enumerate() {
        for (p, &l) in a.iter().enumerate() {
            x[k][p] = x[k][p].max(0.0);
            if usage[l] > coeffs.rho_max {
                x[k][p] *= (coeffs.rho_max / usage[l]).sqrt();
            }
        }
    }
}

/// Symmetric factor F with F^T F = C for a PSD matrix.
fn psd_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(c.clone());
    let mut f = eig.eigenvectors.transpose();
    for (r, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        for j in 0..f.ncols() {
            f[(r, j)] *= s;
        }
    }
    f
}

struct Layout {
    offset: Vec<usize>,
    n: usize,
}

impl Layout {
    fn new(active: &[Vec<usize>]) -> Self {
        let mut offset = Vec::with_capacity(active.len());
        let mut n = 0;
        for a in active {
            offset.push(n);
            n += a.len();
        }
        Layout { offset, n }
    }

    fn unpack(&self, active: &[Vec<usize>], x: &[f64]) -> Vec<DVector<f64>> {
        active
            .iter()
            .enumerate()
            .map(|(k, a)| DVector::from_iterator(a.len(), (0..a.len()).map(|p| x[self.offset[k] + p])))
            .collect()
    }
}

fn per_ap_balls(coeffs: &DlDistributedCoefficients, lay: &Layout, conic: &mut Conic) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); coeffs.num_aps];
    for (k, a) in coeffs.active.iter().enumerate() {
        for (p, &l) in a.iter().enumerate() {
            members[l].push(lay.offset[k] + p);
        }
    }
    for m in members.iter().filter(|m| !m.is_empty()) {
        let rows: Vec<(Vec<(usize, f64)>, f64)> = m.iter().map(|&j| (vec![(j, 1.0)], 0.0)).collect();
        conic.soc((&[], coeffs.rho_max.sqrt()), &rows);
    }
}

/// Distributed downlink max-min fairness by bisection over SOCP feasibility.
pub fn dl_dist_maxmin_bisection(coeffs: &DlDistributedCoefficients, eps: f64) -> Result<PowerSolution<Vec<DVector<f64>>>> {
    let k_total = coeffs.num_ues();
    if coeffs.b.iter().any(|b| b.iter().all(|&x| x <= 0.0)) || !(coeffs.sigma2 > 0.0) {
        return Err(CellFreeError::InvalidInput("every UE needs a nonzero b̃ and σ² > 0".into()));
    }
    let lay = Layout::new(&coeffs.active);
    let factors: Vec<Vec<DMatrix<f64>>> = coeffs.c.iter().map(|row| row.iter().map(psd_factor).collect()).collect();
    let mut lo = 0.0;
    let mut hi = (0..k_total)
        .map(|k| coeffs.active[k].len() as f64 * coeffs.rho_max * coeffs.b[k].norm_squared() / coeffs.sigma2)
        .fold(f64::INFINITY, f64::min);
    let mut best: Option<Vec<DVector<f64>>> = None;
    let mut trace = Vec::new();
    let mut it = 0;
    while hi - lo > eps {
        it += 1;
        let t = 0.5 * (lo + hi);
        let scale = ((1.0 + t) / t).sqrt();
        let mut conic = Conic::new(lay.n);
        conic.nonneg();
        per_ap_balls(coeffs, &lay, &mut conic);
        for k in 0..k_total {
            let head: Vec<(usize, f64)> =
                (0..coeffs.active[k].len()).map(|p| (lay.offset[k] + p, scale * coeffs.b[k][p])).collect();
            let mut rows = Vec::new();
            for i in 0..k_total {
                let f = &factors[k][i];
                for r in 0..f.nrows() {
                    let e: Vec<(usize, f64)> = (0..f.ncols()).map(|j| (lay.offset[i] + j, f[(r, j)])).collect();
                    if e.iter().any(|x| x.1 != 0.0) {
                        rows.push((e, 0.0));
                    }
                }
            }
            rows.push((vec![], coeffs.sigma2.sqrt()));
            conic.soc((&head, 0.0), &rows);
        }
        let p_up: Vec<(usize, usize, f64)> = (0..lay.n).map(|j| (j, j, 2.0)).collect();
        let (status, x) = conic.solve(&p_up, &vec![0.0; lay.n])?;
        let infeasible = matches!(status, SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible);
        let mut cand = lay.unpack(&coeffs.active, &x);
        let mut accepted = false;
        if !infeasible && x.iter().all(|v| v.is_finite()) {
            scale_into_dist(coeffs, &mut cand);
            let sinr = coeffs.sinr(&cand);
            let (mn, _) = min_max(&sinr);
            // Inconclusive solver exits near the feasibility boundary are kept
            // only when the returned point actually certifies t.
            if solved(status) || mn >= t * (1.0 - 1e-6) {
                if !solved(status) {
                    log::warn!("bisection step t={t:.4e} ended with {status:?}; point certifies t");
                }
                trace.push(TraceRow::new(it, mn, &sinr));
                lo = t.max(mn.min(hi));
                best = Some(cand);
                accepted = true;
            }
        }
        if !accepted {
            if !infeasible {
                log::warn!("bisection step t={t:.4e} ended with {status:?}; treated as infeasible");
            }
            hi = t;
        }
        if it > 200 {
            return Err(CellFreeError::NonConvergence { what: "distributed downlink bisection".into(), iterations: it });
        }
    }
    let power = match best {
        Some(b) => b,
        None => {
            // Only reachable when the initial interval is already below ε.
            let mut x: Vec<DVector<f64>> = coeffs.active.iter().map(|a| DVector::from_element(a.len(), 0.0)).collect();
            let usage_count = coeffs.ap_usage(&coeffs.active.iter().map(|a| DVector::from_element(a.len(), 1.0)).collect::<Vec<_>>());
            for (k, a) in coeffs.active.iter().enumerate() {
                for (p, &l) in a.iter().enumerate() {
                    x[k][p] = (coeffs.rho_max / usage_count[l]).sqrt();
                }
            }
            x
        }
    };
    let sinr = coeffs.sinr(&power);
    let objective = min_max(&sinr).0;
    Ok(PowerSolution { power, objective, iterations: it, converged: true, trace })
}

fn dist_wmmse(coeffs: &DlDistributedCoefficients, x: &[DVector<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k_total = coeffs.num_ues();
    let mut u = vec![0.0; k_total];
    let mut d = vec![0.0; k_total];
    for k in 0..k_total {
        let s = coeffs.b[k].dot(&x[k]);
        let total: f64 = (0..k_total).map(|i| x[i].dot(&(&coeffs.c[k][i] * &x[i]))).sum::<f64>() + coeffs.sigma2;
        u[k] = s / total;
        d[k] = 1.0 / (1.0 - s * s / total);
    }
    (u, d)
}

/// Distributed downlink sum-SE by BCD with a convex QCQP per power update.
pub fn dl_dist_sumse_bcd(
    coeffs: &DlDistributedCoefficients,
    eps: f64,
    init: Option<&[DVector<f64>]>,
) -> Result<PowerSolution<Vec<DVector<f64>>>> {
    let k_total = coeffs.num_ues();
    let lay = Layout::new(&coeffs.active);
    let mut x: Vec<DVector<f64>> = match init {
        Some(v) => v.to_vec(),
        None => {
            let ones: Vec<DVector<f64>> = coeffs.active.iter().map(|a| DVector::from_element(a.len(), 1.0)).collect();
            let count = coeffs.ap_usage(&ones);
            coeffs
                .active
                .iter()
                .map(|a| DVector::from_iterator(a.len(), a.iter().map(|&l| (coeffs.rho_max / count[l]).sqrt())))
                .collect()
        }
    };
    if !coeffs.feasible(&x) {
        return Err(CellFreeError::InvalidInput("initial powers violate the per-AP limit".into()));
    }
    let mut sinr = coeffs.sinr(&x);
    let mut obj = sum_log(&sinr);
    let mut trace = vec![TraceRow::new(0, obj, &sinr)];
    for it in 1..=BCD_MAX_ITER {
        let (u, d) = dist_wmmse(coeffs, &x);
        let mut p_up = Vec::new();
        let mut q = vec![0.0; lay.n];
        for i in 0..k_total {
            let m = coeffs.active[i].len();
            let mut blk = DMatrix::zeros(m, m);
            for k in 0..k_total {
                blk += &coeffs.c[k][i] * (d[k] * u[k] * u[k]);
            }
            for r in 0..m {
                for c in r..m {
                    p_up.push((lay.offset[i] + r, lay.offset[i] + c, 2.0 * 0.5 * (blk[(r, c)] + blk[(c, r)])));
                }
                q[lay.offset[i] + r] = -2.0 * d[i] * u[i] * coeffs.b[i][r];
            }
        }
        let mut conic = Conic::new(lay.n);
        conic.nonneg();
        per_ap_balls(coeffs, &lay, &mut conic);
        let (status, sol) = conic.solve(&p_up, &q)?;
        if !solved(status) {
            return Err(CellFreeError::Numerical(format!("QCQP subproblem ended with {status:?}")));
        }
        let mut next = lay.unpack(&coeffs.active, &sol);
        scale_into_dist(coeffs, &mut next);
        let next_sinr = coeffs.sinr(&next);
        let next_obj = sum_log(&next_sinr);
        let stop = bcd_stop(obj, next_obj, eps);
        if next_obj >= obj {
            x = next;
            sinr = next_sinr;
            obj = next_obj;
        }
        trace.push(TraceRow::new(it, obj, &sinr));
        if stop {
            return Ok(PowerSolution { power: x, objective: obj, iterations: it, converged: true, trace });
        }
    }
    Err(CellFreeError::NonConvergence { what: "distributed downlink sum-SE BCD".into(), iterations: BCD_MAX_ITER })
}

fn check_exponent(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v < lo || v > hi || !v.is_finite() {
        return Err(CellFreeError::InvalidInput(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn serving_gain(beta: &DMatrix<f64>, cluster: &ClusterState, k: usize) -> f64 {
    cluster.serving_sets[k].iter().map(|&l| beta[(k, l)]).sum()
}

/// Uplink fractional power control.
pub fn ul_fpc(beta: &DMatrix<f64>, cluster: &ClusterState, p_max: f64, upsilon: f64) -> Result<Vec<f64>> {
    check_exponent("υ", upsilon, -1.0, 1.0)?;
    let g: Vec<f64> = (0..cluster.num_ues()).map(|k| serving_gain(beta, cluster, k).powf(upsilon)).collect();
    Ok((0..g.len())
        .map(|k| {
            let m = cluster.coservice[k].iter().map(|&i| g[i]).fold(0.0, f64::max);
            p_max * g[k] / m
        })
        .collect())
}

/// Centralized downlink fractional power allocation; `omega` from
/// [`DlCentralCoefficients::omega`].
pub fn dl_cent_fpa(
    beta: &DMatrix<f64>,
    cluster: &ClusterState,
    omega: &[f64],
    rho_max: f64,
    upsilon: f64,
    kappa: f64,
) -> Result<Vec<f64>> {
    check_exponent("υ", upsilon, -1.0, 1.0)?;
    check_exponent("κ", kappa, 0.0, 1.0)?;
    let k_total = cluster.num_ues();
    let g: Vec<f64> = (0..k_total).map(|k| serving_gain(beta, cluster, k).powf(upsilon)).collect();
    let load: Vec<f64> = cluster
        .served_sets
        .iter()
        .map(|d| d.iter().map(|&i| g[i] * omega[i].powf(1.0 - kappa)).sum())
        .collect();
    Ok((0..k_total)
        .map(|k| {
            let m = cluster.serving_sets[k].iter().map(|&l| load[l]).fold(0.0, f64::max);
            rho_max * g[k] * omega[k].powf(-kappa) / m
        })
        .collect())
}

/// Distributed downlink fractional power allocation as a K × L matrix.
pub fn dl_dist_fpa(beta: &DMatrix<f64>, cluster: &ClusterState, rho_max: f64, upsilon: f64) -> Result<DMatrix<f64>> {
    check_exponent("υ", upsilon, -1.0, 1.0)?;
    let mut rho = DMatrix::zeros(cluster.num_ues(), cluster.num_aps);
    for (l, d) in cluster.served_sets.iter().enumerate() {
        let total: f64 = d.iter().map(|&i| beta[(i, l)].powf(upsilon)).sum();
        for &k in d {
            rho[(k, l)] = rho_max * beta[(k, l)].powf(upsilon) / total;
        }
    }
    Ok(rho)
}

pub fn dl_cent_equal(num_ues: usize, rho_max: f64, tau_p: usize) -> Vec<f64> {
    vec![rho_max / tau_p as f64; num_ues]
}

pub fn dl_dist_equal(cluster: &ClusterState, rho_max: f64) -> DMatrix<f64> {
    let mut rho = DMatrix::zeros(cluster.num_ues(), cluster.num_aps);
    for (l, d) in cluster.served_sets.iter().enumerate() {
        for &k in d {
            rho[(k, l)] = rho_max / d.len() as f64;
        }
    }
    rho
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ul2() -> UlCoefficients {
        UlCoefficients {
            b: vec![2.0, 0.5],
            c: DMatrix::from_row_slice(2, 2, &[0.1, 0.3, 0.2, 0.05]),
            noise: vec![0.1, 0.2],
            p_max: 1.0,
        }
    }

    #[test]
    fn single_ue_maxmin_uses_full_power() {
        let c = UlCoefficients { b: vec![3.0], c: DMatrix::from_element(1, 1, 0.1), noise: vec![1.0], p_max: 0.2 };
        let s = ul_maxmin_fixedpoint(&c, 1e-8).unwrap();
        assert!((s.power[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair_gets_equal_full_power() {
        let c = UlCoefficients { b: vec![1.0, 1.0], c: DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.4, 0.0]), noise: vec![0.3, 0.3], p_max: 1.0 };
        let s = ul_maxmin_fixedpoint(&c, 1e-10).unwrap();
        assert!((s.power[0] - 1.0).abs() < 1e-9 && (s.power[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fixed_point_balances_sinrs() {
        let s = ul_maxmin_fixedpoint(&ul2(), 1e-9).unwrap();
        let sinr = ul2().sinr(&s.power);
        assert!((sinr[0] - sinr[1]).abs() < 1e-9);
        assert!((s.power.iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_at_optimal_u_is_inverse_one_plus_sinr() {
        let c = ul2();
        let p = [0.7, 0.4];
        let (u, _) = wmmse_weights(&c.b, &c.c, |k| c.noise[k], &p);
        let sinr = c.sinr(&p);
        for k in 0..2 {
            let row: Vec<f64> = (0..2).map(|i| c.c[(k, i)]).collect();
            let e = mse(c.b[k], &row, c.noise[k], &p, k, u[k]);
            assert!((1.0 / e - (1.0 + sinr[k])).abs() < 1e-10);
            for du in [-1e-4, 1e-4] {
                assert!(mse(c.b[k], &row, c.noise[k], &p, k, u[k] + du) > e);
            }
        }
    }

    #[test]
    fn interference_free_bcd_stays_at_full_power() {
        let c = UlCoefficients { b: vec![1.0, 2.0], c: DMatrix::zeros(2, 2), noise: vec![1.0, 1.0], p_max: 0.5 };
        let s = ul_sumse_bcd(&c, 1e-8, &[0.1, 0.2]).unwrap();
        assert!(s.power.iter().all(|&p| (p - 0.5).abs() < 1e-9));
    }

    #[test]
    fn bcd_trace_is_monotone() {
        let s = ul_sumse_bcd(&ul2(), 1e-10, &[1.0, 1.0]).unwrap();
        for w in s.trace.windows(2) {
            assert!(w[1].objective >= w[0].objective - 1e-12);
        }
    }

    #[test]
    fn centralized_dl_interior_matches_closed_form_update() {
        let c = DlCentralCoefficients {
            b: vec![1.0, 0.8],
            c: DMatrix::from_row_slice(2, 2, &[0.05, 2.0, 1.5, 0.05]),
            sigma2: 0.5,
            weights: DMatrix::from_element(2, 1, 1.0),
            served: vec![vec![0, 1]],
            rho_max: 100.0,
        };
        let rho = [0.3, 0.4];
        let (u, d) = wmmse_weights(&c.b, &c.c, |_| c.sigma2, &rho);
        let (a, bb) = quad_terms(&c.b, &c.c, &u, &d);
        let closed: Vec<f64> = (0..2).map(|i| (bb[i] / a[i]).powi(2)).collect();
        let mut conic = Conic::new(2);
        conic.nonneg();
        conic.soc((&[], 10.0), &[(vec![(0, 1.0)], 0.0), (vec![(1, 1.0)], 0.0)]);
        let (st, x) = conic.solve(&[(0, 0, 2.0 * a[0]), (1, 1, 2.0 * a[1])], &[-2.0 * bb[0], -2.0 * bb[1]]).unwrap();
        assert!(solved(st));
        for i in 0..2 {
            assert!((x[i] * x[i] - closed[i]).abs() < 1e-6 * closed[i]);
        }
    }

    #[test]
    fn single_link_distributed_bisection() {
        let c = DlDistributedCoefficients {
            active: vec![vec![0]],
            b: vec![DVector::from_element(1, 2.0)],
            c: vec![vec![DMatrix::from_element(1, 1, 4.0)]],
            sigma2: 0.5,
            num_aps: 1,
            rho_max: 0.3,
        };
        let s = dl_dist_maxmin_bisection(&c, 1e-7).unwrap();
        assert!((s.power[0][0] - 0.3f64.sqrt()).abs() < 1e-5);
        assert!((s.objective - 0.3 * 4.0 / 0.5).abs() < 1e-4);
    }

    #[test]
    fn single_ue_distributed_bcd_uses_every_ap_fully() {
        let c = DlDistributedCoefficients {
            active: vec![vec![0, 1]],
            b: vec![DVector::from_vec(vec![1.0, 0.5])],
            c: vec![vec![DMatrix::from_row_slice(2, 2, &[1.2, 0.5, 0.5, 0.4])]],
            sigma2: 0.1,
            num_aps: 2,
            rho_max: 0.2,
        };
        let s = dl_dist_sumse_bcd(&c, 1e-9, None).unwrap();
        for p in 0..2 {
            assert!((s.power[0][p] - 0.2f64.sqrt()).abs() < 1e-4);
        }
    }

    #[test]
    fn fractional_rules() {
        let beta = DMatrix::from_row_slice(2, 1, &[0.3, 0.1]);
        let cl = ClusterState::all_serve_all(1, 2, vec![0, 1]).unwrap();
        let r = dl_dist_fpa(&beta, &cl, 2.0, 1.0).unwrap();
        assert!((r[(0, 0)] - 1.5).abs() < 1e-12 && (r[(1, 0)] - 0.5).abs() < 1e-12);
        let p = ul_fpc(&beta, &cl, 0.1, 0.0).unwrap();
        assert!(p.iter().all(|&x| (x - 0.1).abs() < 1e-15));
        let rc = dl_cent_fpa(&beta, &cl, &[1.0, 1.0], 1.0, 0.0, 0.5).unwrap();
        assert!(rc.iter().all(|&x| (x - 0.5).abs() < 1e-12));
        assert!(ul_fpc(&beta, &cl, 0.1, 1.5).is_err());
    }
}
