//! The nine acceptance checks. Each returns a [`CriterionResult`]; the
//! `acceptance` integration test and `cellfree check` both print them.
//!
//! Oracles here are written against the model definitions directly (trace
//! formulas, brute-force grids, plain sample averages) so that they do not
//! share code paths with the quantities they check.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{build_setup, intro_snr_benchmark, run_comparison, stream_rng, ExperimentSpec, ProcessingMode};
use crate::cluster::ClusterState;
use crate::downlink::{centralized_dl_sinr, distributed_dl_sinr, duality_power_allocation};
use crate::error::Result;
use crate::estimation::{
    build_estimation_statistics, nmse_from_eigenvalues, sample_channel_draw, ChannelDraw, ChannelStatistics,
    EstimationStatistics, SamplingMode,
};
use crate::geometry::NetworkConfig;
use crate::linalg::{cn_matrix, cn_vector, gaussian_quartic_moment, psd_sqrt, random_psd, real_trace, C64, CMat};
use crate::metrics::{
    complexity_count, favorable_metric, fronthaul_downlink, fronthaul_uplink, hardening_metric, scalability_report,
    Operation, SchemeRef,
};
use crate::powerctl::{
    dl_cent_equal, dl_cent_maxmin_fixedpoint, dl_cent_sumse_bcd, dl_dist_maxmin_bisection, dl_dist_sumse_bcd,
    ul_maxmin_fixedpoint, ul_sumse_bcd, DlCentralCoefficients, DlDistributedCoefficients, TraceRow, UlCoefficients,
    DEFAULT_BCD_EPS, DEFAULT_BISECTION_EPS, DEFAULT_FIXED_POINT_EPS,
};
use crate::uplink::{
    centralized_combiners, local_combiners, uatf_sinr, CentralAccumulator, CentralMoments, CentralScheme,
    DistributedAccumulator, DistributedExpectations, LocalScheme, LsfdMode, UplinkContext,
};

pub const ACCEPTANCE_SEED: u64 = 7;

pub const CRITERIA: [(usize, &str); 9] = [
    (1, "intro-snr-benchmark"),
    (2, "uplink-downlink-duality"),
    (3, "mr-closed-forms-vs-monte-carlo"),
    (4, "estimation-suite"),
    (5, "power-optimizers"),
    (6, "scheme-ordering"),
    (7, "hardening-and-favorable-propagation"),
    (8, "scalability-accounting"),
    (9, "fourth-moment-identity"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] criterion {} ({}): {}", self.id, self.name, self.detail)
    }
}

#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, msg: impl Into<String>) {
        let msg = msg.into();
        if ok {
            self.notes.push(msg);
        } else {
            self.failures.push(msg);
        }
    }

    fn rel(&mut self, what: &str, got: f64, want: f64, tol: f64) {
        let e = rel_err(got, want);
        self.check(e <= tol, format!("{what}: rel err {e:.2e} (tol {tol:.0e})"));
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

pub fn run_criterion(id: usize) -> CriterionResult {
    let name = CRITERIA.iter().find(|c| c.0 == id).map(|c| c.1).unwrap_or("unknown");
    let mut checks = Checks::default();
    let outcome = match id {
        1 => intro_snr(&mut checks),
        2 => duality(&mut checks),
        3 => mr_closed_forms(&mut checks),
        4 => estimation_suite(&mut checks),
        5 => optimizers(&mut checks),
        6 => scheme_ordering(&mut checks),
        7 => hardening(&mut checks),
        8 => scalability(&mut checks),
        9 => fourth_moment(&mut checks),
        _ => {
            checks.check(false, format!("no criterion {id}"));
            Ok(())
        }
    };
    if let Err(e) = outcome {
        checks.check(false, format!("error: {e}"));
    }
    let passed = checks.failures.is_empty();
    let detail = if passed { checks.notes.join("; ") } else { checks.failures.join("; ") };
    CriterionResult { id, name, passed, detail }
}

pub fn run_all() -> Vec<CriterionResult> {
    CRITERIA.iter().map(|c| run_criterion(c.0)).collect()
}

/// Random instance with R_kl = β_kl N G/tr(G), G of rank `min_rank`..N.
fn random_instance(
    rng: &mut ChaCha8Rng,
    min_rank: usize,
    l: usize,
    n: usize,
    tau_p: usize,
    pilot_of: Vec<usize>,
    sets: Vec<Vec<usize>>,
    eta: &[f64],
    sigma2: f64,
) -> Result<(ClusterState, EstimationStatistics)> {
    let k = pilot_of.len();
    let mut r = Vec::with_capacity(k * l);
    for kk in 0..k {
        for ll in 0..l {
            let beta = 10f64.powf(rng.random_range(-1.0..0.5));
            let g = random_psd(n, min_rank + (kk + ll) % (n + 1 - min_rank), rng);
            r.push(&g * C64::new(beta * n as f64 / real_trace(&g), 0.0));
        }
    }
    let ch = ChannelStatistics::new(n, k, l, r)?;
    let cl = ClusterState::from_assignment(l, tau_p, pilot_of, sets)?;
    let st = build_estimation_statistics(&ch, &cl, eta, tau_p, sigma2)?;
    Ok((cl, st))
}

fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// tr(R_il Ψ⁻¹ R_kl) with Ψ the pilot covariance of UE i at AP l.
fn tr_rpr(st: &EstimationStatistics, i: usize, k: usize, l: usize) -> C64 {
    (st.r(i, l) * st.psi_inv_of(i, l) * st.r(k, l)).trace()
}

fn intro_snr(c: &mut Checks) -> Result<()> {
    let r = intro_snr_benchmark(&NetworkConfig::intro_benchmark(), 100_000, ACCEPTANCE_SEED)?;
    c.check((r.cell_free_db - 24.5).abs() <= 0.5, format!("cell-free {:.2} dB (24.5 ± 0.5)", r.cell_free_db));
    c.check((r.cellular_db - 6.5).abs() <= 0.5, format!("co-located {:.2} dB (6.5 ± 0.5)", r.cellular_db));
    let gap = r.cell_free_db - r.small_cell_db;
    c.check((gap - 4.0).abs() <= 0.5, format!("small-cell gap {gap:.2} dB (4 ± 0.5)"));
    Ok(())
}

fn duality(c: &mut Checks) -> Result<()> {
    let mut rng = stream_rng(ACCEPTANCE_SEED, 2);
    let p = [1.0, 0.5, 0.8];
    let (s2_ul, s2_dl) = (0.1, 0.2);
    let sets = vec![vec![0, 1, 2], vec![1, 2, 3], vec![0, 3]];
    let (cl, st) = random_instance(&mut rng, 1, 4, 2, 2, vec![0, 1, 0], sets, &p, s2_ul)?;
    let m = CentralMoments::closed_form_mr(&st, &cl);
    let ul = uatf_sinr(&m, &p, s2_ul);
    let d = duality_power_allocation(&ul, &m, s2_dl)?;
    let dl = centralized_dl_sinr(&m, &d.rho, s2_dl);
    let worst = ul.iter().zip(&dl).map(|(u, x)| rel_err(*x, *u)).fold(0.0, f64::max);
    c.check(worst <= 1e-6, format!("max per-UE SINR mismatch {worst:.2e}"));
    let lhs = d.rho.iter().sum::<f64>() / s2_dl;
    let rhs = p.iter().sum::<f64>() / s2_ul;
    c.rel("Σρ/σ²_dl vs Σp/σ²_ul", lhs, rhs, 1e-9);
    Ok(())
}

fn mr_closed_forms(c: &mut Checks) -> Result<()> {
    let mut rng = stream_rng(ACCEPTANCE_SEED, 3);
    let eta = [1.0, 0.6, 0.8, 1.2];
    let sigma2 = 0.2;
    let sets = vec![vec![0, 1], vec![1, 2], vec![0, 2], vec![0, 1, 2]];
    let (cl, st) = random_instance(&mut rng, 2, 3, 2, 2, vec![0, 1, 0, 1], sets, &eta, sigma2)?;
    let (k, l) = (4, 3);
    let ctx = UplinkContext::new(&st, &cl, &eta)?;

    let mut rho = DMatrix::zeros(k, l);
    for (ll, d) in cl.served_sets.iter().enumerate() {
        for &kk in d {
            rho[(kk, ll)] = 0.2 / d.len() as f64;
        }
    }
    // E‖ĥ_il‖² = η_i τ_p tr(R_il Ψ⁻¹ R_il)
    let e_hat = |i: usize, ll: usize| st.eta[i] * st.tau_p as f64 * tr_rpr(&st, i, i, ll).re;
    let pilot = |a: usize, b: usize| cl.pilot_of[a] == cl.pilot_of[b];
    let signal: Vec<f64> = (0..k)
        .map(|kk| cl.serving_sets[kk].iter().map(|&ll| (rho[(kk, ll)] * e_hat(kk, ll)).sqrt()).sum())
        .collect();
    let interference = DMatrix::from_fn(k, k, |kk, i| {
        let mut first = 0.0;
        let mut coherent = C64::new(0.0, 0.0);
        for &ll in &cl.serving_sets[i] {
            let norm = tr_rpr(&st, i, i, ll).re;
            first += rho[(i, ll)] * (st.r(i, ll) * st.psi_inv_of(i, ll) * st.r(i, ll) * st.r(kk, ll)).trace().re / norm;
            coherent += tr_rpr(&st, i, kk, ll) * (rho[(i, ll)] * st.eta[kk] * st.tau_p as f64).sqrt() / norm.sqrt();
        }
        first + if pilot(kk, i) { coherent.norm_sqr() } else { 0.0 }
    });

    // 10⁶ rather than 10⁵: off-pilot |g|² is near-exponential, so 10⁵ draws leave
    // ~0.3% standard error per entry and the worst of ~40 entries lands near 1%.
    let draws = 1_000_000;
    let mut acc = DistributedAccumulator::new(&cl);
    let mut sig_mc = vec![C64::new(0.0, 0.0); k];
    let mut int_mc = DMatrix::<f64>::zeros(k, k);
    for _ in 0..draws {
        let d = sample_channel_draw(&st, SamplingMode::PilotPath, &mut rng);
        acc.add(&d, &local_combiners(LocalScheme::Mr, &d, &ctx)?);
        for kk in 0..k {
            for i in 0..k {
                let z: C64 = cl.serving_sets[i]
                    .iter()
                    .map(|&ll| inner(d.h(kk, ll), d.hhat(i, ll)) * (rho[(i, ll)] / e_hat(i, ll)).sqrt())
                    .sum();
                if i == kk {
                    sig_mc[kk] += z;
                }
                int_mc[(kk, i)] += z.norm_sqr();
            }
        }
    }
    let mc = acc.finish(sigma2);
    let cf = DistributedExpectations::closed_form_mr(&st, &cl);
    c.check(mc.active == cf.active, "same active sets");

    let (mut worst_mean, mut worst_second, mut worst_norm, mut worst_zero) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for kk in 0..k {
        for (pos, &ll) in cl.serving_sets[kk].iter().enumerate() {
            worst_norm = worst_norm.max(rel_err(mc.norm[kk][pos], e_hat(kk, ll)));
            for i in 0..k {
                let want_mean = if pilot(kk, i) {
                    tr_rpr(&st, kk, i, ll).conj() * (st.eta[kk] * st.eta[i]).sqrt() * st.tau_p as f64
                } else {
                    C64::new(0.0, 0.0)
                };
                let quad = (st.r(i, ll) * st.r(kk, ll) * st.psi_inv_of(kk, ll) * st.r(kk, ll)).trace().re;
                let want_second = st.eta[kk] * st.tau_p as f64 * quad + want_mean.norm_sqr();
                let got_mean = mc.mean[kk][(pos, i)];
                if pilot(kk, i) {
                    worst_mean = worst_mean.max((got_mean - want_mean).norm() / want_mean.norm());
                } else {
                    worst_zero = worst_zero.max(got_mean.norm() / want_second.sqrt());
                }
                worst_second = worst_second.max(rel_err(mc.second[kk][(pos, i)], want_second));
            }
        }
    }
    c.check(worst_mean <= 0.01, format!("UL E{{g}} max rel err {worst_mean:.2e}"));
    c.check(worst_zero <= 0.01, format!("UL E{{g}} off-pilot {worst_zero:.2e} of rms"));
    c.check(worst_second <= 0.01, format!("UL E{{|g|²}} max rel err {worst_second:.2e}"));
    c.check(worst_norm <= 0.01, format!("E‖v‖² max rel err {worst_norm:.2e}"));

    let n = draws as f64;
    let worst_sig = (0..k).map(|kk| (sig_mc[kk] / n - signal[kk]).norm() / signal[kk]).fold(0.0, f64::max);
    let worst_int = (0..k * k).map(|j| rel_err(int_mc[j] / n, interference[j])).fold(0.0, f64::max);
    c.check(worst_sig <= 0.01, format!("DL signal max rel err {worst_sig:.2e}"));
    c.check(worst_int <= 0.01, format!("DL interference max rel err {worst_int:.2e}"));

    let sinr_lib = distributed_dl_sinr(&cf, &rho, sigma2);
    let worst_lib = (0..k)
        .map(|kk| {
            let s = signal[kk] * signal[kk];
            let tot: f64 = (0..k).map(|i| interference[(kk, i)]).sum();
            rel_err(sinr_lib[kk], s / (tot - s + sigma2))
        })
        .fold(0.0, f64::max);
    c.check(worst_lib <= 1e-9, format!("DL SINR from closed-form expectations {worst_lib:.2e}"));
    Ok(())
}

fn estimation_suite(c: &mut Checks) -> Result<()> {
    let mut rng = stream_rng(ACCEPTANCE_SEED, 4);
    let eta = [1.0, 0.5, 2.0, 1.0];
    let sigma2 = 0.5;
    let sets = vec![vec![0, 1], vec![0], vec![0, 1], vec![1]];
    let (cl, st) = random_instance(&mut rng, 1, 2, 4, 2, vec![0, 1, 0, 1], sets, &eta, sigma2)?;
    let (k, l, n) = (4, 2, 4);

    let nmse_formula = |kk: usize, ll: usize| {
        let tr = real_trace(st.r(kk, ll));
        (tr - eta[kk] * st.tau_p as f64 * tr_rpr(&st, kk, kk, ll).re) / tr
    };
    let mut worst_lib = 0.0f64;
    for kk in 0..k {
        for ll in 0..l {
            worst_lib = worst_lib.max(rel_err(st.nmse_link(kk, ll)?, nmse_formula(kk, ll)));
        }
    }
    c.check(worst_lib <= 1e-10, format!("NMSE library vs trace formula {worst_lib:.1e}"));

    let draws = 100_000;
    let mut err = DMatrix::<f64>::zeros(k, l);
    let mut cross = vec![CMat::zeros(n, n); l];
    for _ in 0..draws {
        let d: ChannelDraw = sample_channel_draw(&st, SamplingMode::PilotPath, &mut rng);
        for kk in 0..k {
            for ll in 0..l {
                err[(kk, ll)] += d.herr(kk, ll).norm_squared();
            }
        }
        for (ll, acc) in cross.iter_mut().enumerate() {
            *acc += d.hhat_vec(0, ll) * d.hhat_vec(2, ll).adjoint();
        }
    }
    let nd = draws as f64;
    let mut worst_link = 0.0f64;
    for kk in 0..k {
        for ll in 0..l {
            let mc = err[(kk, ll)] / nd / real_trace(st.r(kk, ll));
            worst_link = worst_link.max(rel_err(mc, nmse_formula(kk, ll)));
        }
    }
    c.check(worst_link <= 0.01, format!("per-link NMSE vs MC {worst_link:.2e}"));
    let mut worst_coll = 0.0f64;
    for kk in 0..k {
        let m = &cl.serving_sets[kk];
        let mc: f64 = m.iter().map(|&ll| err[(kk, ll)] / nd).sum::<f64>() / m.iter().map(|&ll| real_trace(st.r(kk, ll))).sum::<f64>();
        worst_coll = worst_coll.max(rel_err(mc, st.nmse_collective(kk, &cl)?));
    }
    c.check(worst_coll <= 0.01, format!("collective NMSE vs MC {worst_coll:.2e}"));

    let mut worst_cross = 0.0f64;
    for (ll, acc) in cross.iter().enumerate() {
        let want = st.r(0, ll) * st.psi_inv_of(0, ll) * st.r(2, ll) * C64::new((eta[0] * eta[2]).sqrt() * st.tau_p as f64, 0.0);
        let got = acc / C64::new(nd, 0.0);
        worst_cross = worst_cross.max((got - &want).norm() / want.norm());
    }
    c.check(worst_cross <= 0.02, format!("cross-correlation Frobenius rel err {worst_cross:.2e}"));

    let mut concave_ok = 0;
    let mut merge_ok = 0;
    for _ in 0..100 {
        let n_ant = 4;
        let beta = 10f64.powf(rng.random_range(-1.0..1.0));
        let eta_tau = 10f64.powf(rng.random_range(-1.0..2.0));
        let draw = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..n_ant).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x * n_ant as f64 * beta / s).collect::<Vec<f64>>()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let lhs = nmse_from_eigenvalues(&mid, eta_tau, 1.0);
        let rhs = 0.5 * (nmse_from_eigenvalues(&a, eta_tau, 1.0) + nmse_from_eigenvalues(&b, eta_tau, 1.0));
        if lhs >= rhs - 1e-15 {
            concave_ok += 1;
        }
        let mut sorted = a.clone();
        sorted.sort_by(f64::total_cmp);
        let mut merged = sorted.clone();
        merged[1] += merged[0];
        merged[0] = 0.0;
        if nmse_from_eigenvalues(&sorted, eta_tau, 1.0) > nmse_from_eigenvalues(&merged, eta_tau, 1.0) {
            merge_ok += 1;
        }
    }
    c.check(concave_ok == 100, format!("concavity holds on {concave_ok}/100"));
    c.check(merge_ok == 100, format!("merge decreases NMSE on {merge_ok}/100"));
    Ok(())
}

fn monotone(trace: &[TraceRow]) -> bool {
    trace.windows(2).all(|w| w[1].objective >= w[0].objective - 1e-12 * w[0].objective.abs())
}

/// Maximizes `f` over a box by a brute-force grid, then twice more on a
/// zoomed grid around the incumbent.
fn grid_max(lo: &[f64], hi: &[f64], points: usize, f: &dyn Fn(&[f64]) -> f64) -> (f64, Vec<f64>) {
    let dim = lo.len();
    let mut lo = lo.to_vec();
    let mut hi = hi.to_vec();
    let mut best = (f64::NEG_INFINITY, lo.clone());
    for _round in 0..3 {
        let total = points.pow(dim as u32);
        let mut x = vec![0.0; dim];
        for idx in 0..total {
            let mut rem = idx;
            for d in 0..dim {
                let j = rem % points;
                rem /= points;
                x[d] = lo[d] + (hi[d] - lo[d]) * j as f64 / (points - 1) as f64;
            }
            let v = f(&x);
            if v > best.0 {
                best = (v, x.clone());
            }
        }
        let (orig_lo, orig_hi) = (lo.clone(), hi.clone());
        for d in 0..dim {
            let step = 2.0 * (orig_hi[d] - orig_lo[d]) / (points - 1) as f64;
            lo[d] = (best.1[d] - step).max(orig_lo[d].min(best.1[d]));
            hi[d] = (best.1[d] + step).min(orig_hi[d].max(best.1[d]));
        }
    }
    best
}

fn optimizers(c: &mut Checks) -> Result<()> {
    let mut rng = stream_rng(ACCEPTANCE_SEED, 5);
    let (p_max, rho_max, s2) = (1.0, 1.0, 0.1);

    // K = 6 backbone instance for spread, binding and monotonicity.
    let k = 6;
    let sets = (0..k).map(|kk| vec![kk % 5, (kk + 1) % 5, (kk + 3) % 5]).collect();
    let (cl, st) = random_instance(&mut rng, 1, 5, 2, 3, (0..k).map(|kk| kk % 3).collect(), sets, &vec![p_max; k], s2)?;
    let m = CentralMoments::closed_form_mr(&st, &cl);
    let ul = UlCoefficients::from_central(&m, s2, p_max);
    let sol = ul_maxmin_fixedpoint(&ul, DEFAULT_FIXED_POINT_EPS)?;
    let sinr = ul.sinr(&sol.power);
    let spread = sinr.iter().copied().fold(f64::NEG_INFINITY, f64::max) - sinr.iter().copied().fold(f64::INFINITY, f64::min);
    let binding = sol.power.iter().any(|&x| (x - p_max).abs() <= 1e-9 * p_max);
    c.check(spread <= 1e-5 && binding, format!("UL max-min spread {spread:.1e}, binding {binding}"));

    let dl = DlCentralCoefficients::from_central(&m, &cl, s2, rho_max);
    let sol = dl_cent_maxmin_fixedpoint(&dl, DEFAULT_FIXED_POINT_EPS)?;
    let sinr = dl.sinr(&sol.power);
    let spread = sinr.iter().copied().fold(f64::NEG_INFINITY, f64::max) - sinr.iter().copied().fold(f64::INFINITY, f64::min);
    let usage = dl.ap_usage(&sol.power);
    let binding = usage.iter().any(|&u| (u - rho_max).abs() <= 1e-9 * rho_max);
    let feasible = dl.feasible(&sol.power);
    c.check(spread <= 1e-5 && binding && feasible, format!("DL max-min spread {spread:.1e}, binding {binding}"));

    let low = vec![0.01 * p_max; k];
    let t = ul_sumse_bcd(&ul, DEFAULT_BCD_EPS, &low)?.trace;
    c.check(monotone(&t) && t.len() > 2, format!("UL sum-SE BCD monotone over {} iterations", t.len() - 1));
    let init: Vec<f64> = dl_cent_equal(k, rho_max, 3).iter().map(|x| 0.05 * x).collect();
    let max_use = dl.ap_usage(&init).into_iter().fold(0.0, f64::max);
    let init: Vec<f64> = init.iter().map(|x| x * 0.1 * rho_max / max_use).collect();
    let t = dl_cent_sumse_bcd(&dl, DEFAULT_BCD_EPS, Some(&init))?.trace;
    c.check(monotone(&t) && t.len() > 2, format!("centralized DL sum-SE BCD monotone over {} iterations", t.len() - 1));
    let exp = DistributedExpectations::closed_form_mr(&st, &cl);
    let dd = DlDistributedCoefficients::from_distributed(&exp, 5, rho_max)?;
    let init: Vec<DVector<f64>> = dd.active.iter().map(|a| DVector::from_element(a.len(), 0.05 * rho_max.sqrt())).collect();
    let t = dl_dist_sumse_bcd(&dd, DEFAULT_BCD_EPS, Some(&init))?.trace;
    c.check(monotone(&t) && t.len() > 2, format!("distributed DL sum-SE BCD monotone over {} iterations", t.len() - 1));

    // K = 2 grid oracles.
    let (cl2, st2) = random_instance(&mut rng, 1, 2, 2, 1, vec![0, 0], vec![vec![0, 1], vec![0, 1]], &[p_max, p_max], s2)?;
    let m2 = CentralMoments::closed_form_mr(&st2, &cl2);
    let ul2 = UlCoefficients::from_central(&m2, s2, p_max);
    let fp = ul_maxmin_fixedpoint(&ul2, DEFAULT_FIXED_POINT_EPS)?;
    let min_sinr = |s: Vec<f64>| s.into_iter().fold(f64::INFINITY, f64::min);
    let (grid, _) = grid_max(&[0.0, 0.0], &[p_max, p_max], 401, &|x| min_sinr(ul2.sinr(x)));
    c.rel("UL max-min vs K=2 grid", min_sinr(ul2.sinr(&fp.power)), grid, 0.01);

    let dl2 = DlCentralCoefficients::from_central(&m2, &cl2, s2, rho_max);
    let fp = dl_cent_maxmin_fixedpoint(&dl2, DEFAULT_FIXED_POINT_EPS)?;
    let ub: Vec<f64> = (0..2).map(|kk| rho_max / cl2.serving_sets[kk].iter().map(|&l| dl2.weights[(kk, l)]).fold(0.0, f64::max)).collect();
    let (grid, _) = grid_max(&[0.0, 0.0], &ub, 401, &|x| if dl2.feasible(x) { min_sinr(dl2.sinr(x)) } else { f64::NEG_INFINITY });
    c.rel("centralized DL max-min vs K=2 grid", min_sinr(dl2.sinr(&fp.power)), grid, 0.01);

    let exp2 = DistributedExpectations::closed_form_mr(&st2, &cl2);
    let dd2 = DlDistributedCoefficients::from_distributed(&exp2, 2, rho_max)?;
    let bis = dl_dist_maxmin_bisection(&dd2, DEFAULT_BISECTION_EPS)?;
    let got = min_sinr(distributed_dl_sinr(&exp2, &dd2.to_rho(&bis.power), s2));
    // x = (P_0, share_0, P_1, share_1): AP l gives UE 0 P_l·share_l, UE 1 the rest.
    let eval = |x: &[f64]| {
        let rho = DMatrix::from_row_slice(2, 2, &[x[0] * x[1], x[2] * x[3], x[0] * (1.0 - x[1]), x[2] * (1.0 - x[3])]);
        min_sinr(distributed_dl_sinr(&exp2, &rho, s2))
    };
    let (grid, _) = grid_max(&[0.0; 4], &[rho_max, 1.0, rho_max, 1.0], 25, &eval);
    c.rel("distributed DL bisection vs K=2 grid", got, grid, 0.02);

    // Full-power stationarity on the running example.
    let cfg = NetworkConfig::running_example(100, 4);
    let setup = build_setup(&cfg, &mut stream_rng(ACCEPTANCE_SEED, 50))?;
    let kk = cfg.num_ues;
    let p = vec![cfg.max_ul_power; kk];
    let ctx = UplinkContext::new(&setup.stats, &setup.cluster, &p)?;
    let mut acc = CentralAccumulator::new(kk, cfg.num_aps);
    let mut drng = stream_rng(ACCEPTANCE_SEED, 51);
    for _ in 0..100 {
        let d = sample_channel_draw(&setup.stats, SamplingMode::Direct, &mut drng);
        acc.add(&d, &centralized_combiners(CentralScheme::PMmse, &d, &ctx)?, &ctx);
    }
    let coeffs = UlCoefficients::from_central(&acc.moments(), cfg.noise_power_ul, cfg.max_ul_power);
    let sol = ul_sumse_bcd(&coeffs, DEFAULT_BCD_EPS, &p)?;
    let below = sol.power.iter().filter(|&&x| x < cfg.max_ul_power * (1.0 - 1e-9)).count();
    let first_gain = sol.trace.get(1).map(|r| r.objective - sol.trace[0].objective).unwrap_or(0.0);
    c.check(
        below == 0,
        format!(
            "running example: {below} of {kk} UEs below p_max after sum-SE BCD from full power \
             (first step gain {first_gain:.3e}, total {:.3e} on Σlog2(1+SINR) = {:.4})",
            sol.objective - sol.trace[0].objective,
            sol.trace[0].objective
        ),
    );
    Ok(())
}

fn scheme_ordering(c: &mut Checks) -> Result<()> {
    let scenario = "running-example-100x4";
    let mk = |mode, scheme: &str, lsfd| {
        let mut s = ExperimentSpec::new(scenario, mode, scheme);
        s.lsfd = lsfd;
        s.num_setups = 20;
        s.draws_per_setup = 200;
        s.seed = ACCEPTANCE_SEED;
        s
    };
    use ProcessingMode::{Centralized as C, Distributed as D};
    let specs = vec![
        mk(C, "mmse", LsfdMode::NOpt),
        mk(C, "p-mmse", LsfdMode::NOpt),
        mk(C, "p-rzf", LsfdMode::NOpt),
        mk(C, "mr", LsfdMode::NOpt),
        mk(D, "l-mmse", LsfdMode::Opt),
        mk(D, "l-mmse", LsfdMode::NOpt),
        mk(D, "l-mmse", LsfdMode::None),
        mk(D, "lp-mmse", LsfdMode::NOpt),
        mk(D, "mr", LsfdMode::NOpt),
    ];
    let med: Vec<f64> = run_comparison(&specs)?.iter().map(|o| o.table.median()).collect();
    let names: Vec<String> = specs.iter().map(|s| s.label()).collect();
    let listing = names.iter().zip(&med).map(|(n, m)| format!("{n}={m:.3}")).collect::<Vec<_>>().join(", ");
    c.check(med[0] >= med[1] && med[1] >= med[2] && med[2] > med[3], format!("centralized MMSE ≥ P-MMSE ≥ P-RZF > MR"));
    let gap = (med[0] - med[1]) / med[0];
    c.check(gap < 0.05, format!("MMSE−P-MMSE median gap {:.2}%", 100.0 * gap));
    c.check(med[4] >= med[5] && med[5] >= med[6], "opt ≥ n-opt ≥ no LSFD");
    c.check(med[5] >= med[7] && med[7] > med[8], "L-MMSE ≥ LP-MMSE > MR");
    c.notes.push(format!("medians: {listing}"));
    if !c.failures.is_empty() {
        c.failures.push(format!("medians: {listing}"));
    }
    Ok(())
}

fn hardening(c: &mut Checks) -> Result<()> {
    let mut rng = stream_rng(ACCEPTANCE_SEED, 7);
    let (n, m) = (4, 5);
    let betas: Vec<f64> = (0..m).map(|_| 10f64.powf(rng.random_range(-2.0..0.0))).collect();
    let rs: Vec<CMat> = betas.iter().map(|&b| CMat::identity(n, n) * C64::new(b, 0.0)).collect();
    let links: Vec<(f64, &CMat)> = betas.iter().zip(&rs).map(|(&b, r)| (0.3 / b, r)).collect();
    let exact = hardening_metric(&links)?;
    c.rel("hardening metric for βI with equal ρβ", exact, 1.0 / (n * m) as f64, 1e-12);

    let rk: Vec<CMat> = (0..m).map(|j| random_psd(n, 1 + j % n, &mut rng) * C64::new(betas[j], 0.0)).collect();
    let ri: Vec<CMat> = (0..m).map(|j| random_psd(n, 1 + (j + 1) % n, &mut rng)).collect();
    let rho_k: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let rho_i: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let sk: Vec<CMat> = rk.iter().map(psd_sqrt).collect();
    let si: Vec<CMat> = ri.iter().map(psd_sqrt).collect();
    let samples = 100_000;
    let (mut sx, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for _ in 0..samples {
        let mut x = 0.0;
        let mut y = C64::new(0.0, 0.0);
        for j in 0..m {
            let hk = &sk[j] * cn_vector(n, &mut rng);
            let hi = &si[j] * cn_vector(n, &mut rng);
            x += (rho_k[j] / real_trace(&rk[j])).sqrt() * hk.norm_squared();
            y += hi.dotc(&hk) * (rho_i[j] / real_trace(&ri[j])).sqrt();
        }
        sx += x;
        sxx += x * x;
        syy += y.norm_sqr();
    }
    let ns = samples as f64;
    let mean = sx / ns;
    let var = sxx / ns - mean * mean;
    let dl: Vec<(f64, &CMat)> = rho_k.iter().copied().zip(rk.iter()).collect();
    c.rel("hardening MC variance ratio", var / (mean * mean), hardening_metric(&dl)?, 0.05);
    let inter: Vec<(f64, &CMat, &CMat)> = (0..m).map(|j| (rho_i[j], &ri[j], &rk[j])).collect();
    c.rel("favorable-propagation MC ratio", syy / ns / (mean * mean), favorable_metric(&inter, &dl)?, 0.05);
    Ok(())
}

/// Multiplication counts straight from the complexity tables; `s` and
/// `load` are |S_k| and Σ_{l∈M_k} |D_l|.
fn table_count(scheme: SchemeRef, k_total: f64, n: f64, ms: f64, s: f64, load: f64, tau_p: f64) -> f64 {
    let m = n * ms;
    let est = n * tau_p + n * n;
    match scheme {
        SchemeRef::Central(CentralScheme::Mmse) => est * k_total * ms + (m * m + m) / 2.0 * k_total + m * m + (m.powi(3) - m) / 3.0,
        SchemeRef::Central(CentralScheme::PMmse) => est * s * ms + (m * m + m) / 2.0 * s + m * m + (m.powi(3) - m) / 3.0,
        SchemeRef::Central(CentralScheme::PRzf) => {
            est * s * ms + (s * s + s) / 2.0 * m + s * s + s * m + (s.powi(3) - s) / 3.0
        }
        SchemeRef::Central(CentralScheme::Mr) | SchemeRef::Local(LocalScheme::Mr) => est * ms,
        SchemeRef::Local(LocalScheme::LMmse) => {
            est * k_total * ms + (n * n + n) / 2.0 * k_total * ms + n * n * ms + (n.powi(3) - n) / 3.0 * ms
        }
        SchemeRef::Local(LocalScheme::LpMmse) => est * load + (n * n + n) / 2.0 * load + n * n * ms + (n.powi(3) - n) / 3.0 * ms,
        SchemeRef::Lsfd(LsfdMode::Opt | LsfdMode::NOpt) => ms * ms + (ms.powi(3) - ms) / 3.0,
        SchemeRef::Lsfd(LsfdMode::None) => 0.0,
    }
}

fn scalability(c: &mut Checks) -> Result<()> {
    let cfg = NetworkConfig::running_example(100, 4);
    let (n, tau_p, tau_u, tau_d) = (cfg.antennas_per_ap, cfg.pilot_length, cfg.ul_data, cfg.dl_data);
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for s in 0..3 {
        let setup = build_setup(&cfg, &mut stream_rng(ACCEPTANCE_SEED, 80 + s))?;
        let cl = &setup.cluster;
        let (k, l) = (cl.num_ues(), cl.num_aps);
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|kk| (0..l).map(move |ll| (kk, ll))).filter(|&(kk, ll)| cl.serves(kk, ll)).collect();
        let sum_d = pairs.len() as f64;
        let coservice: Vec<usize> = (0..k)
            .map(|kk| (0..k).filter(|&i| (0..l).any(|ll| cl.serves(kk, ll) && cl.serves(i, ll))).count())
            .collect();
        let d_size: Vec<f64> = (0..l).map(|ll| (0..k).filter(|&kk| cl.serves(kk, ll)).count() as f64).collect();

        let mut eq = |got: f64, want: f64| {
            compared += 1;
            if got != want {
                mismatches += 1;
            }
        };
        let cen = fronthaul_uplink(Operation::Centralized, LsfdMode::None, cl, n, tau_p, tau_u);
        eq(cen.per_block, ((tau_p + tau_u) * n * l) as f64);
        eq(cen.statistics, 0.0);
        for mode in [LsfdMode::Opt, LsfdMode::NOpt, LsfdMode::None] {
            let f = fronthaul_uplink(Operation::Distributed, mode, cl, n, tau_p, tau_u);
            eq(f.per_block, tau_u as f64 * sum_d);
            let want = match mode {
                LsfdMode::Opt => (3.0 * k as f64 + 1.0) / 2.0 * sum_d,
                LsfdMode::NOpt => pairs.iter().map(|&(kk, _)| (3.0 * coservice[kk] as f64 + 1.0) / 2.0).sum(),
                LsfdMode::None => 0.0,
            };
            eq(f.statistics, want);
        }
        eq(fronthaul_downlink(Operation::Centralized, cl, n, tau_d), (tau_d * n * l) as f64);
        eq(fronthaul_downlink(Operation::Distributed, cl, n, tau_d), tau_d as f64 * sum_d);
        for kk in 0..k {
            let ms = cl.serving_sets[kk].len() as f64;
            let load: f64 = (0..l).filter(|&ll| cl.serves(kk, ll)).map(|ll| d_size[ll]).sum();
            for scheme in SchemeRef::all() {
                let want = table_count(scheme, k as f64, n as f64, ms, coservice[kk] as f64, load, tau_p as f64);
                let got = complexity_count(scheme, cl, kk, n, tau_p).total();
                compared += 1;
                if (got - want).abs() > 1e-9 * want.abs().max(1.0) {
                    mismatches += 1;
                }
            }
        }
    }
    c.check(mismatches == 0, format!("{compared} table entries compared, {mismatches} mismatches"));

    let report = scalability_report(&[20, 40, 80], n, tau_p, tau_u, 4)?;
    let verdicts = [
        ("centralized/mmse", false),
        ("centralized/p-mmse", true),
        ("centralized/p-rzf", true),
        ("centralized/mr", true),
        ("distributed/l-mmse", false),
        ("distributed/lp-mmse", true),
        ("distributed/mr", true),
        ("lsfd/opt", false),
        ("lsfd/n-opt", true),
        ("lsfd/none", true),
    ];
    let wrong: Vec<&str> = verdicts
        .iter()
        .filter(|(key, want)| report.schemes.get(*key).map(|s| s.scalable) != Some(*want))
        .map(|(key, _)| *key)
        .collect();
    c.check(
        wrong.is_empty(),
        if wrong.is_empty() { "all 10 scalability verdicts match".to_string() } else { format!("scalability flags wrong for {wrong:?}") },
    );
    Ok(())
}

fn fourth_moment(c: &mut Checks) -> Result<()> {
    let mut rng = stream_rng(ACCEPTANCE_SEED, 9);
    let a = random_psd(4, 4, &mut rng);
    let general = cn_matrix(4, 4, &mut rng);
    let hermitian = random_psd(4, 3, &mut rng);
    let sa = psd_sqrt(&a);
    let samples = 1_000_000;
    let (mut s_gen, mut s_her) = (0.0, 0.0);
    for _ in 0..samples {
        let x = &sa * cn_vector(4, &mut rng);
        s_gen += x.dotc(&(&general * &x)).norm_sqr();
        s_her += x.dotc(&(&hermitian * &x)).norm_sqr();
    }
    let ns = samples as f64;
    c.rel("general B", s_gen / ns, gaussian_quartic_moment(&a, &general), 0.01);
    c.rel("Hermitian B", s_her / ns, gaussian_quartic_moment(&a, &hermitian), 0.01);
    Ok(())
}
