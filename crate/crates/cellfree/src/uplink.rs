//! Receive combining, LSFD and uplink spectral-efficiency bounds.
//!
//! Centralized combiners are stored compactly over the serving set: `v[k]`
//! has length N·|M_k| with blocks in the (sorted) order of `serving_sets[k]`.
//! Local combiners are stored per (k, l) and are zero where l ∉ M_k.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterState;
use crate::error::{CellFreeError, Result};
use crate::estimation::{ChannelDraw, EstimationStatistics};
use crate::linalg::{hpd_cholesky, hermitize, quad_form, real_trace, trace_prod, C64, CMat, CVec, ONE, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentralScheme {
    Mmse,
    PMmse,
    PRzf,
    Mr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalScheme {
    LMmse,
    LpMmse,
    Mr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LsfdMode {
    Opt,
    NOpt,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UplinkBound {
    Centralized,
    CUatf,
    Distributed,
    GenieCentralized,
    GenieDistributed,
    Cellular,
    MrClosedForm,
}

macro_rules! kebab_names {
    ($ty:ty { $($var:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn name(&self) -> &'static str {
                match self { $(Self::$var => $name),* }
            }
            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$var),)*
                    other => Err(CellFreeError::InvalidInput(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

kebab_names!(CentralScheme { Mmse => "mmse", PMmse => "p-mmse", PRzf => "p-rzf", Mr => "mr" });
kebab_names!(LocalScheme { LMmse => "l-mmse", LpMmse => "lp-mmse", Mr => "mr" });
kebab_names!(LsfdMode { Opt => "opt", NOpt => "n-opt", None => "none" });

/// Per-setup data shared by every draw: powers and summed error correlations.
#[derive(Debug, Clone)]
pub struct UplinkContext<'a> {
    pub stats: &'a EstimationStatistics,
    pub cluster: &'a ClusterState,
    pub p: Vec<f64>,
    /// Σ_i p_i C_il per AP.
    z_all: Vec<CMat>,
    /// Σ_{i∈D_l} p_i C_il per AP.
    z_served: Vec<CMat>,
    /// Σ_{i∈S_k} p_i C_il per UE and serving position.
    z_partial: Vec<Vec<CMat>>,
}

impl<'a> UplinkContext<'a> {
    pub fn new(stats: &'a EstimationStatistics, cluster: &'a ClusterState, p: &[f64]) -> Result<Self> {
        let (k, l, n) = (stats.num_ues, stats.num_aps, stats.n);
        if p.len() != k || cluster.num_ues() != k || cluster.num_aps != l {
            return Err(CellFreeError::InvalidInput("power vector or cluster does not match".into()));
        }
        if p.iter().any(|&x| !(x >= 0.0)) {
            return Err(CellFreeError::InvalidInput("powers must be nonnegative".into()));
        }
        let mut z_all = vec![CMat::zeros(n, n); l];
        let mut z_served = vec![CMat::zeros(n, n); l];
        for ll in 0..l {
            for kk in 0..k {
                z_all[ll] += stats.err_corr(kk, ll) * C64::new(p[kk], 0.0);
            }
            for &kk in &cluster.served_sets[ll] {
                z_served[ll] += stats.err_corr(kk, ll) * C64::new(p[kk], 0.0);
            }
        }
        let z_partial = (0..k)
            .map(|kk| {
                cluster.serving_sets[kk]
                    .iter()
                    .map(|&ll| {
                        let mut z = CMat::zeros(n, n);
                        for &i in &cluster.coservice[kk] {
                            z += stats.err_corr(i, ll) * C64::new(p[i], 0.0);
                        }
                        z
                    })
                    .collect()
            })
            .collect();
        Ok(UplinkContext { stats, cluster, p: p.to_vec(), z_all, z_served, z_partial })
    }

    pub fn sigma2(&self) -> f64 {
        self.stats.sigma2
    }

    pub fn z_all(&self, l: usize) -> &CMat {
        &self.z_all[l]
    }
}

fn stack(draw: &ChannelDraw, i: usize, aps: &[usize], truth: bool) -> CVec {
    let n = draw.n;
    let mut out = CVec::zeros(n * aps.len());
    for (pos, &l) in aps.iter().enumerate() {
        let src = if truth { draw.h(i, l) } else { draw.hhat(i, l) };
        for a in 0..n {
            out[pos * n + a] = src[a];
        }
    }
    out
}

/// v^H x where x is UE i's (true or estimated) channel over `aps`.
#[inline]
pub(crate) fn dot_active(v: &CVec, draw: &ChannelDraw, i: usize, aps: &[usize], truth: bool) -> C64 {
    let n = draw.n;
    let mut acc = ZERO;
    for (pos, &l) in aps.iter().enumerate() {
        let x = if truth { draw.h(i, l) } else { draw.hhat(i, l) };
        for a in 0..n {
            acc += v[pos * n + a].conj() * x[a];
        }
    }
    acc
}

#[derive(Debug, Clone)]
pub struct CentralCombiners {
    pub scheme: CentralScheme,
    pub n: usize,
    pub v: Vec<CVec>,
}

impl CentralCombiners {
    /// The LN-vector with zeros outside M_k.
    pub fn full(&self, k: usize, cluster: &ClusterState) -> CVec {
        let n = self.n;
        let mut out = CVec::zeros(n * cluster.num_aps);
        for (pos, &l) in cluster.serving_sets[k].iter().enumerate() {
            for a in 0..n {
                out[l * n + a] = self.v[k][pos * n + a];
            }
        }
        out
    }
}

fn add_noise_and_blocks(a: &mut CMat, blocks: &[&CMat], n: usize, sigma2: f64) {
    for (pos, z) in blocks.iter().enumerate() {
        for r in 0..n {
            for c in 0..n {
                a[(pos * n + r, pos * n + c)] += z[(r, c)];
            }
        }
    }
    for d in 0..a.nrows() {
        a[(d, d)] += C64::new(sigma2, 0.0);
    }
}

fn gram_all(draw: &ChannelDraw, p: &[f64]) -> CMat {
    let (n, k, l) = (draw.n, draw.num_ues, draw.num_aps);
    let h = CMat::from_fn(n * l, k, |row, i| draw.hhat(i, row / n)[row % n] * p[i].sqrt());
    let mut g = &h * h.adjoint();
    hermitize(&mut g);
    g
}

fn principal(g: &CMat, aps: &[usize], n: usize) -> CMat {
    let m = n * aps.len();
    CMat::from_fn(m, m, |r, c| g[(aps[r / n] * n + r % n, aps[c / n] * n + c % n)])
}

/// Centralized combiners for every UE. MMSE and P-MMSE invert only the
/// N|M_k| × N|M_k| block of the serving APs; P-RZF inverts |S_k| × |S_k|.
pub fn centralized_combiners(scheme: CentralScheme, draw: &ChannelDraw, ctx: &UplinkContext) -> Result<CentralCombiners> {
    let (n, kk_total) = (draw.n, draw.num_ues);
    let cl = ctx.cluster;
    let p = &ctx.p;
    let sigma2 = ctx.sigma2();
    let gram = match scheme {
        CentralScheme::Mmse | CentralScheme::PMmse => Some(gram_all(draw, p)),
        _ => None,
    };
    let mut v = Vec::with_capacity(kk_total);
    for k in 0..kk_total {
        let aps = &cl.serving_sets[k];
        let hk = stack(draw, k, aps, false);
        let vk = match scheme {
            CentralScheme::Mr => hk,
            CentralScheme::Mmse => {
                let mut a = principal(gram.as_ref().unwrap(), aps, n);
                let blocks: Vec<&CMat> = aps.iter().map(|&l| &ctx.z_all[l]).collect();
                add_noise_and_blocks(&mut a, &blocks, n, sigma2);
                hpd_cholesky(&a)?.solve(&hk) * C64::new(p[k], 0.0)
            }
            CentralScheme::PMmse => {
                let s = &cl.coservice[k];
                let m = n * aps.len();
                let mut a = if s.len() * 2 <= kk_total {
                    let mut a = CMat::zeros(m, m);
                    for &i in s {
                        let hi = stack(draw, i, aps, false);
                        a.gerc(C64::new(p[i], 0.0), &hi, &hi, ONE);
                    }
                    a
                } else {
                    let mut a = principal(gram.as_ref().unwrap(), aps, n);
                    for i in (0..kk_total).filter(|i| s.binary_search(i).is_err()) {
                        let hi = stack(draw, i, aps, false);
                        a.gerc(C64::new(-p[i], 0.0), &hi, &hi, ONE);
                    }
                    a
                };
                hermitize(&mut a);
                let blocks: Vec<&CMat> = ctx.z_partial[k].iter().collect();
                add_noise_and_blocks(&mut a, &blocks, n, sigma2);
                hpd_cholesky(&a)?.solve(&hk) * C64::new(p[k], 0.0)
            }
            CentralScheme::PRzf => {
                let s = &cl.coservice[k];
                if s.iter().any(|&i| !(p[i] > 0.0)) {
                    return Err(CellFreeError::InvalidInput("P-RZF needs strictly positive powers".into()));
                }
                let m = n * aps.len();
                let mut h = CMat::zeros(m, s.len());
                for (col, &i) in s.iter().enumerate() {
                    h.set_column(col, &stack(draw, i, aps, false));
                }
                let mut g = h.adjoint() * &h;
                for (d, &i) in s.iter().enumerate() {
                    g[(d, d)] += C64::new(sigma2 / p[i], 0.0);
                }
                hermitize(&mut g);
                let mut e = CVec::zeros(s.len());
                e[s.binary_search(&k).expect("k ∈ S_k")] = ONE;
                let x = hpd_cholesky(&g)?.solve(&e);
                &h * x * C64::new(p[k], 0.0)
            }
        };
        if vk.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(CellFreeError::Numerical(format!("combiner of UE {k} is not finite")));
        }
        v.push(vk);
    }
    Ok(CentralCombiners { scheme, n, v })
}

/// Per-draw SINR of the centralized achievable bound for combiner `v` of UE k
/// (interference from all K UEs and the full error term Σ_i p_i C_il).
pub fn centralized_sinr(k: usize, v: &CVec, draw: &ChannelDraw, ctx: &UplinkContext) -> f64 {
    let aps = &ctx.cluster.serving_sets[k];
    let n = draw.n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..draw.num_ues {
        let x = dot_active(v, draw, i, aps, false).norm_sqr() * ctx.p[i];
        if i == k {
            num = x;
        } else {
            den += x;
        }
    }
    for (pos, &l) in aps.iter().enumerate() {
        let blk = CVec::from_iterator(n, (0..n).map(|a| v[pos * n + a]));
        den += quad_form(&ctx.z_all[l], &blk);
    }
    den += ctx.sigma2() * v.norm_squared();
    num / den
}

/// Per-draw SINR when the detector knows the true effective channels.
pub fn centralized_genie_sinr(k: usize, v: &CVec, draw: &ChannelDraw, ctx: &UplinkContext) -> f64 {
    let aps = &ctx.cluster.serving_sets[k];
    let mut num = 0.0;
    let mut den = ctx.sigma2() * v.norm_squared();
    for i in 0..draw.num_ues {
        let x = dot_active(v, draw, i, aps, true).norm_sqr() * ctx.p[i];
        if i == k {
            num = x;
        } else {
            den += x;
        }
    }
    num / den
}

/// Running mean of log2(1 + SINR) per UE.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogSinrStats {
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    pub max_sinr: Vec<f64>,
    pub count: usize,
}

impl LogSinrStats {
    pub fn new(k: usize) -> Self {
        LogSinrStats { sum: vec![0.0; k], sum_sq: vec![0.0; k], max_sinr: vec![0.0; k], count: 0 }
    }

    pub fn push(&mut self, sinr: &[f64]) {
        for (k, &s) in sinr.iter().enumerate() {
            let r = (1.0 + s.max(0.0)).log2();
            self.sum[k] += r;
            self.sum_sq[k] += r * r;
            self.max_sinr[k] = self.max_sinr[k].max(s);
        }
        self.count += 1;
    }

    /// prelog · mean and its standard error.
    pub fn se(&self, prelog: f64) -> (Vec<f64>, Vec<f64>) {
        let c = self.count.max(1) as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / c).collect();
        let err = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / c - m * m).max(0.0) * c / (c - 1.0).max(1.0);
                prelog * (var / c).sqrt()
            })
            .collect();
        (mean.iter().map(|m| prelog * m).collect(), err)
    }
}

/// Channel statistics of the centralized combiners, shared by the UatF bound,
/// downlink precoding, duality and power control.
///
/// `mean[(k, i)] = E{v_i^H D_i h_k}`, `second[(k, i)] = E{|v_i^H D_i h_k|²}`,
/// `norm[i] = E{‖D_i v_i‖²}` and `norm_ap[(i, l)] = E{‖v_il‖²}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralMoments {
    pub mean: DMatrix<C64>,
    pub second: DMatrix<f64>,
    pub norm: Vec<f64>,
    pub norm_ap: DMatrix<f64>,
}

impl CentralMoments {
    /// Exact moments for centralized MR combining, v_i = D_i ĥ_i.
    pub fn closed_form_mr(stats: &EstimationStatistics, cluster: &ClusterState) -> Self {
        let (k, l) = (stats.num_ues, stats.num_aps);
        let tau = stats.tau_p as f64;
        let mut mean = DMatrix::from_element(k, k, ZERO);
        let mut second = DMatrix::zeros(k, k);
        let mut norm = vec![0.0; k];
        let mut norm_ap = DMatrix::zeros(k, l);
        for i in 0..k {
            for &ll in &cluster.serving_sets[i] {
                let q = stats.est_corr(i, ll);
                let e = real_trace(q);
                norm[i] += e;
                norm_ap[(i, ll)] = e;
                for kk in 0..k {
                    if stats.shares_pilot(kk, i) {
                        let t = trace_prod(&(stats.r(kk, ll) * stats.psi_inv_of(i, ll)), stats.r(i, ll));
                        mean[(kk, i)] += t * ((stats.eta[kk] * stats.eta[i]).sqrt() * tau);
                    }
                    second[(kk, i)] += trace_prod(q, stats.r(kk, ll)).re;
                }
            }
            for kk in 0..k {
                second[(kk, i)] += mean[(kk, i)].norm_sqr();
            }
        }
        CentralMoments { mean, second, norm, norm_ap }
    }

    pub fn num_ues(&self) -> usize {
        self.norm.len()
    }
}

/// Accumulates centralized statistics and instantaneous SEs over draws.
#[derive(Debug, Clone)]
pub struct CentralAccumulator {
    mean: DMatrix<C64>,
    second: DMatrix<f64>,
    norm: Vec<f64>,
    norm_ap: DMatrix<f64>,
    pub achievable: LogSinrStats,
    pub genie: LogSinrStats,
    draws: usize,
}

impl CentralAccumulator {
    pub fn new(k: usize, l: usize) -> Self {
        CentralAccumulator {
            mean: DMatrix::from_element(k, k, ZERO),
            second: DMatrix::zeros(k, k),
            norm: vec![0.0; k],
            norm_ap: DMatrix::zeros(k, l),
            achievable: LogSinrStats::new(k),
            genie: LogSinrStats::new(k),
            draws: 0,
        }
    }

    pub fn add(&mut self, draw: &ChannelDraw, comb: &CentralCombiners, ctx: &UplinkContext) {
        let k_total = draw.num_ues;
        let n = draw.n;
        let mut sinr = vec![0.0; k_total];
        let mut genie = vec![0.0; k_total];
        for k in 0..k_total {
            let v = &comb.v[k];
            let aps = &ctx.cluster.serving_sets[k];
            let mut gen_den = ctx.sigma2() * v.norm_squared();
            let mut gen_num = 0.0;
            for i in 0..k_total {
                let b = dot_active(v, draw, i, aps, true);
                self.mean[(i, k)] += b;
                self.second[(i, k)] += b.norm_sqr();
                if i == k {
                    gen_num = ctx.p[i] * b.norm_sqr();
                } else {
                    gen_den += ctx.p[i] * b.norm_sqr();
                }
            }
            let nv = v.norm_squared();
            self.norm[k] += nv;
            for (pos, &l) in aps.iter().enumerate() {
                self.norm_ap[(k, l)] += (0..n).map(|a| v[pos * n + a].norm_sqr()).sum::<f64>();
            }
            sinr[k] = centralized_sinr(k, v, draw, ctx);
            genie[k] = gen_num / gen_den;
        }
        self.achievable.push(&sinr);
        self.genie.push(&genie);
        self.draws += 1;
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn moments(&self) -> CentralMoments {
        let c = self.draws.max(1) as f64;
        CentralMoments {
            mean: self.mean.map(|z| z / c),
            second: self.second.map(|x| x / c),
            norm: self.norm.iter().map(|x| x / c).collect(),
            norm_ap: self.norm_ap.map(|x| x / c),
        }
    }
}

/// UatF SINR from centralized moments.
pub fn uatf_sinr(m: &CentralMoments, p: &[f64], sigma2: f64) -> Vec<f64> {
    let k_total = m.num_ues();
    (0..k_total)
        .map(|k| {
            let sig = p[k] * m.mean[(k, k)].norm_sqr();
            let mut den = sigma2 * m.norm[k] - sig;
            for i in 0..k_total {
                den += p[i] * m.second[(i, k)];
            }
            sig / den
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LocalCombiners {
    pub scheme: LocalScheme,
    pub n: usize,
    pub num_aps: usize,
    v: Vec<C64>,
}

impl LocalCombiners {
    #[inline]
    pub fn v(&self, k: usize, l: usize) -> &[C64] {
        let o = (k * self.num_aps + l) * self.n;
        &self.v[o..o + self.n]
    }
}

/// Local combiners at every AP; each AP inverts one N × N matrix.
pub fn local_combiners(scheme: LocalScheme, draw: &ChannelDraw, ctx: &UplinkContext) -> Result<LocalCombiners> {
    let (n, k_total, l_total) = (draw.n, draw.num_ues, draw.num_aps);
    let cl = ctx.cluster;
    let mut v = vec![ZERO; k_total * l_total * n];
    for l in 0..l_total {
        let served = &cl.served_sets[l];
        if served.is_empty() {
            continue;
        }
        let chol = match scheme {
            LocalScheme::Mr => None,
            LocalScheme::LMmse | LocalScheme::LpMmse => {
                let (users, z): (Vec<usize>, &CMat) = if scheme == LocalScheme::LMmse {
                    ((0..k_total).collect(), &ctx.z_all[l])
                } else {
                    (served.clone(), &ctx.z_served[l])
                };
                let mut a = z.clone();
                for i in users {
                    let h = draw.hhat_vec(i, l);
                    a.gerc(C64::new(ctx.p[i], 0.0), &h, &h, ONE);
                }
                for d in 0..n {
                    a[(d, d)] += C64::new(ctx.sigma2(), 0.0);
                }
                hermitize(&mut a);
                Some(hpd_cholesky(&a)?)
            }
        };
        for &k in served {
            let h = draw.hhat_vec(k, l);
            let vk = match &chol {
                None => h,
                Some(ch) => ch.solve(&h) * C64::new(ctx.p[k], 0.0),
            };
            let o = (k * l_total + l) * n;
            v[o..o + n].copy_from_slice(vk.as_slice());
        }
    }
    Ok(LocalCombiners { scheme, n, num_aps: l_total, v })
}

#[inline]
pub(crate) fn local_dot(v: &[C64], h: &[C64]) -> C64 {
    v.iter().zip(h).map(|(a, b)| a.conj() * b).sum()
}

/// Statistics of g_ki = [v_kl^H h_il]_{l∈M_k}, stored per UE over its serving set.
///
/// Off-diagonal entries of E{g_ki g_ki^H} factor into products of means
/// because channels at different APs are independent, so only the diagonal
/// second moments are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedExpectations {
    pub sigma2: f64,
    pub active: Vec<Vec<usize>>,
    /// Per UE k: |M_k| × K, column i is E{g_ki}.
    pub mean: Vec<DMatrix<C64>>,
    /// Per UE k: |M_k| × K, E{|[g_ki]_l|²}.
    pub second: Vec<DMatrix<f64>>,
    /// Per UE k: E{‖v_kl‖²} over its serving set.
    pub norm: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectationMethod {
    MonteCarlo,
    ClosedFormMr,
}

impl DistributedExpectations {
    pub fn num_ues(&self) -> usize {
        self.active.len()
    }

    pub fn g_mean(&self, k: usize, i: usize) -> CVec {
        self.mean[k].column(i).into_owned()
    }

    /// E{g_ki g_ki^H} over the serving set of k.
    pub fn g_corr(&self, k: usize, i: usize) -> CMat {
        let m = self.g_mean(k, i);
        let mut c = &m * m.adjoint();
        for d in 0..m.len() {
            c[(d, d)] = C64::new(self.second[k][(d, i)], 0.0);
        }
        c
    }

    /// F_k = σ² diag(E{‖v_kl‖²}).
    pub fn f(&self, k: usize) -> CMat {
        let d = self.norm[k].len();
        CMat::from_fn(d, d, |r, c| if r == c { C64::new(self.sigma2 * self.norm[k][r], 0.0) } else { ZERO })
    }

    /// a^H E{g_ki g_ki^H} a without forming the matrix.
    pub fn corr_quad(&self, k: usize, i: usize, a: &CVec) -> f64 {
        let mut lin = ZERO;
        let mut diag = 0.0;
        for pos in 0..a.len() {
            let mu = self.mean[k][(pos, i)];
            lin += a[pos].conj() * mu;
            diag += a[pos].norm_sqr() * (self.second[k][(pos, i)] - mu.norm_sqr());
        }
        lin.norm_sqr() + diag
    }

    /// Exact expectations for local MR combining.
    pub fn closed_form_mr(stats: &EstimationStatistics, cluster: &ClusterState) -> Self {
        let k_total = stats.num_ues;
        let tau = stats.tau_p as f64;
        let mut mean = Vec::with_capacity(k_total);
        let mut second = Vec::with_capacity(k_total);
        let mut norm = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let aps = &cluster.serving_sets[k];
            let mut mk = DMatrix::from_element(aps.len(), k_total, ZERO);
            let mut sk = DMatrix::zeros(aps.len(), k_total);
            let mut nk = Vec::with_capacity(aps.len());
            for (pos, &l) in aps.iter().enumerate() {
                let q = stats.est_corr(k, l);
                nk.push(real_trace(q));
                let rpsi = stats.r(k, l) * stats.psi_inv_of(k, l);
                for i in 0..k_total {
                    let mut s = trace_prod(q, stats.r(i, l)).re;
                    if stats.shares_pilot(k, i) {
                        let t = trace_prod(stats.r(i, l), &rpsi) * ((stats.eta[k] * stats.eta[i]).sqrt() * tau);
                        mk[(pos, i)] = t;
                        s += t.norm_sqr();
                    }
                    sk[(pos, i)] = s;
                }
            }
            mean.push(mk);
            second.push(sk);
            norm.push(nk);
        }
        DistributedExpectations { sigma2: stats.sigma2, active: cluster.serving_sets.clone(), mean, second, norm }
    }
}

/// Monte Carlo accumulator for [`DistributedExpectations`].
#[derive(Debug, Clone)]
pub struct DistributedAccumulator {
    active: Vec<Vec<usize>>,
    mean: Vec<DMatrix<C64>>,
    second: Vec<DMatrix<f64>>,
    norm: Vec<Vec<f64>>,
    draws: usize,
}

impl DistributedAccumulator {
    pub fn new(cluster: &ClusterState) -> Self {
        let k = cluster.num_ues();
        let active = cluster.serving_sets.clone();
        DistributedAccumulator {
            mean: active.iter().map(|a| DMatrix::from_element(a.len(), k, ZERO)).collect(),
            second: active.iter().map(|a| DMatrix::zeros(a.len(), k)).collect(),
            norm: active.iter().map(|a| vec![0.0; a.len()]).collect(),
            active,
            draws: 0,
        }
    }

    pub fn add(&mut self, draw: &ChannelDraw, comb: &LocalCombiners) {
        for k in 0..self.active.len() {
            for (pos, &l) in self.active[k].iter().enumerate() {
                let v = comb.v(k, l);
                self.norm[k][pos] += v.iter().map(|z| z.norm_sqr()).sum::<f64>();
                for i in 0..draw.num_ues {
                    let g = local_dot(v, draw.h(i, l));
                    self.mean[k][(pos, i)] += g;
                    self.second[k][(pos, i)] += g.norm_sqr();
                }
            }
        }
        self.draws += 1;
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn finish(&self, sigma2: f64) -> DistributedExpectations {
        let c = self.draws.max(1) as f64;
        DistributedExpectations {
            sigma2,
            active: self.active.clone(),
            mean: self.mean.iter().map(|m| m.map(|z| z / c)).collect(),
            second: self.second.iter().map(|m| m.map(|x| x / c)).collect(),
            norm: self.norm.iter().map(|v| v.iter().map(|x| x / c).collect()).collect(),
        }
    }
}

/// Estimates distributed expectations. Monte Carlo mode consumes `draws`
/// with per-draw local combiners; closed form is only valid for MR.
pub fn distributed_expectations(
    method: ExpectationMethod,
    scheme: LocalScheme,
    ctx: &UplinkContext,
    draws: &[ChannelDraw],
) -> Result<DistributedExpectations> {
    match method {
        ExpectationMethod::ClosedFormMr => {
            if scheme != LocalScheme::Mr {
                return Err(CellFreeError::InvalidInput(
                    "closed-form expectations exist only for MR combining".into(),
                ));
            }
            Ok(DistributedExpectations::closed_form_mr(ctx.stats, ctx.cluster))
        }
        ExpectationMethod::MonteCarlo => {
            let mut acc = DistributedAccumulator::new(ctx.cluster);
            for d in draws {
                acc.add(d, &local_combiners(scheme, d, ctx)?);
            }
            Ok(acc.finish(ctx.sigma2()))
        }
    }
}

/// LSFD weights a_k over the serving set of each UE.
#[derive(Debug, Clone, PartialEq)]
pub struct LsfdWeights {
    pub mode: LsfdMode,
    pub a: Vec<CVec>,
}

impl LsfdWeights {
    /// The L-vector with zeros outside M_k.
    pub fn full(&self, k: usize, cluster: &ClusterState) -> CVec {
        let mut out = CVec::zeros(cluster.num_aps);
        for (pos, &l) in cluster.serving_sets[k].iter().enumerate() {
            out[l] = self.a[k][pos];
        }
        out
    }
}

pub fn lsfd_weights(mode: LsfdMode, exp: &DistributedExpectations, p: &[f64], cluster: &ClusterState) -> Result<LsfdWeights> {
    let k_total = exp.num_ues();
    let mut a = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let dim = exp.active[k].len();
        if mode == LsfdMode::None {
            a.push(CVec::from_element(dim, ONE));
            continue;
        }
        let users: Vec<usize> = match mode {
            LsfdMode::Opt => (0..k_total).collect(),
            _ => cluster.coservice[k].clone(),
        };
        let mut b = exp.f(k);
        for i in users {
            b += exp.g_corr(k, i) * C64::new(p[i], 0.0);
        }
        hermitize(&mut b);
        let rhs = exp.g_mean(k, k) * C64::new(p[k], 0.0);
        let sol = match hpd_cholesky(&b) {
            Ok(ch) => ch.solve(&rhs),
            Err(_) => {
                log::warn!("LSFD block of UE {k} is singular; adding trace jitter");
                let j = 1e-12 * real_trace(&b).max(f64::MIN_POSITIVE);
                let mut bj = b.clone();
                for d in 0..dim {
                    bj[(d, d)] += C64::new(j, 0.0);
                }
                hpd_cholesky(&bj)?.solve(&rhs)
            }
        };
        a.push(sol);
    }
    Ok(LsfdWeights { mode, a })
}

/// Distributed-operation SINR with deterministic LSFD weights.
pub fn distributed_sinr(exp: &DistributedExpectations, lsfd: &LsfdWeights, p: &[f64]) -> Vec<f64> {
    (0..exp.num_ues())
        .map(|k| {
            let a = &lsfd.a[k];
            let m = exp.g_mean(k, k);
            let sig = p[k] * a.dotc(&m).norm_sqr();
            let mut den = quad_form(&exp.f(k), a) - sig;
            for i in 0..exp.num_ues() {
                den += p[i] * exp.corr_quad(k, i, a);
            }
            sig / den
        })
        .collect()
}

/// Per-draw SINR of the distributed operation with perfect CSI at the CPU.
pub fn distributed_genie_sinr(draw: &ChannelDraw, comb: &LocalCombiners, lsfd: &LsfdWeights, ctx: &UplinkContext) -> Vec<f64> {
    let cl = ctx.cluster;
    (0..draw.num_ues)
        .map(|k| {
            let aps = &cl.serving_sets[k];
            let a = &lsfd.a[k];
            let mut num = 0.0;
            let mut den = 0.0;
            for (pos, &l) in aps.iter().enumerate() {
                let nv: f64 = comb.v(k, l).iter().map(|z| z.norm_sqr()).sum();
                den += ctx.sigma2() * a[pos].norm_sqr() * nv;
            }
            for i in 0..draw.num_ues {
                let mut s = ZERO;
                for (pos, &l) in aps.iter().enumerate() {
                    s += a[pos].conj() * local_dot(comb.v(k, l), draw.h(i, l));
                }
                if i == k {
                    num = ctx.p[i] * s.norm_sqr();
                } else {
                    den += ctx.p[i] * s.norm_sqr();
                }
            }
            num / den
        })
        .collect()
}

/// Closed-form distributed MR SINR for single-antenna APs.
pub fn mr_closed_form_sinr_n1(stats: &EstimationStatistics, cluster: &ClusterState, lsfd: &LsfdWeights, p: &[f64]) -> Result<Vec<f64>> {
    if stats.n != 1 {
        return Err(CellFreeError::InvalidInput("closed-form MR SINR requires N = 1".into()));
    }
    let k_total = stats.num_ues;
    let gamma = |k: usize, l: usize| stats.est_corr(k, l)[(0, 0)].re;
    let beta = |k: usize, l: usize| stats.beta[(k, l)];
    Ok((0..k_total)
        .map(|k| {
            let aps = &cluster.serving_sets[k];
            let a = &lsfd.a[k];
            let mut coh = ZERO;
            for (pos, &l) in aps.iter().enumerate() {
                coh += a[pos].conj() * gamma(k, l);
            }
            let sig = p[k] * coh.norm_sqr();
            let mut den = 0.0;
            for i in 0..k_total {
                for (pos, &l) in aps.iter().enumerate() {
                    den += p[i] * a[pos].norm_sqr() * beta(i, l) * gamma(k, l);
                }
                if i != k && stats.shares_pilot(k, i) {
                    let mut s = ZERO;
                    for (pos, &l) in aps.iter().enumerate() {
                        let ratio = (stats.eta[i] / stats.eta[k]).sqrt() * beta(i, l) / beta(k, l);
                        s += a[pos].conj() * (gamma(k, l) * ratio);
                    }
                    den += p[i] * s.norm_sqr();
                }
            }
            for (pos, &l) in aps.iter().enumerate() {
                den += stats.sigma2 * a[pos].norm_sqr() * gamma(k, l);
            }
            sig / den
        })
        .collect())
}

/// Cellular benchmark: UE k served only by AP `ap_of[k]` with L-MMSE.
/// Returns (achievable, genie) SINRs of one draw.
pub fn cellular_sinr(draw: &ChannelDraw, ctx: &UplinkContext, ap_of: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, k_total) = (draw.n, draw.num_ues);
    let mut chols = std::collections::BTreeMap::new();
    let mut ach = vec![0.0; k_total];
    let mut gen = vec![0.0; k_total];
    for k in 0..k_total {
        let l = ap_of[k];
        if !chols.contains_key(&l) {
            let mut a = ctx.z_all[l].clone();
            for i in 0..k_total {
                let h = draw.hhat_vec(i, l);
                a.gerc(C64::new(ctx.p[i], 0.0), &h, &h, ONE);
            }
            for d in 0..n {
                a[(d, d)] += C64::new(ctx.sigma2(), 0.0);
            }
            hermitize(&mut a);
            chols.insert(l, hpd_cholesky(&a)?);
        }
        let v = chols[&l].solve(&draw.hhat_vec(k, l));
        let (mut num, mut den) = (0.0, quad_form(&ctx.z_all[l], &v) + ctx.sigma2() * v.norm_squared());
        let (mut gnum, mut gden) = (0.0, ctx.sigma2() * v.norm_squared());
        for i in 0..k_total {
            let e = local_dot(v.as_slice(), draw.hhat(i, l)).norm_sqr() * ctx.p[i];
            let t = local_dot(v.as_slice(), draw.h(i, l)).norm_sqr() * ctx.p[i];
            if i == k {
                num = e;
                gnum = t;
            } else {
                den += e;
                gden += t;
            }
        }
        ach[k] = num / den;
        gen[k] = gnum / gden;
    }
    Ok((ach, gen))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UplinkSeResult {
    pub bound: UplinkBound,
    pub se: Vec<f64>,
    /// Monte Carlo standard error of each SE; zero for deterministic bounds.
    pub std_err: Vec<f64>,
}

/// Inputs to [`uplink_se`]; each bound accepts exactly one variant.
pub enum UplinkInput<'a> {
    /// Sampled log2(1 + SINR) for instantaneous bounds.
    Samples(&'a LogSinrStats),
    Central(&'a CentralMoments),
    Distributed {
        expectations: &'a DistributedExpectations,
        lsfd: &'a LsfdWeights,
    },
    ClosedFormN1 {
        stats: &'a EstimationStatistics,
        cluster: &'a ClusterState,
        lsfd: &'a LsfdWeights,
    },
}

pub fn se_from_sinr(sinr: &[f64], prelog: f64) -> Vec<f64> {
    sinr.iter().map(|s| prelog * (1.0 + s.max(0.0)).log2()).collect()
}

pub fn uplink_se(bound: UplinkBound, input: UplinkInput, p: &[f64], sigma2: f64, prelog: f64) -> Result<UplinkSeResult> {
    use UplinkBound as B;
    let deterministic = |sinr: Vec<f64>| {
        let k = sinr.len();
        Ok(UplinkSeResult { bound, se: se_from_sinr(&sinr, prelog), std_err: vec![0.0; k] })
    };
    match (bound, input) {
        (B::Centralized | B::GenieCentralized | B::GenieDistributed | B::Cellular, UplinkInput::Samples(s)) => {
            if s.count == 0 {
                return Err(CellFreeError::InvalidInput("no channel draws were accumulated".into()));
            }
            let (se, std_err) = s.se(prelog);
            Ok(UplinkSeResult { bound, se, std_err })
        }
        (B::CUatf, UplinkInput::Central(m)) => deterministic(uatf_sinr(m, p, sigma2)),
        (B::Distributed, UplinkInput::Distributed { expectations, lsfd }) => {
            deterministic(distributed_sinr(expectations, lsfd, p))
        }
        (B::MrClosedForm, UplinkInput::ClosedFormN1 { stats, cluster, lsfd }) => {
            deterministic(mr_closed_form_sinr_n1(stats, cluster, lsfd, p)?)
        }
        (b, _) => Err(CellFreeError::InvalidInput(format!("inputs do not match bound {b:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{build_estimation_statistics, sample_channel_draw, ChannelStatistics, SamplingMode};
    use crate::linalg::{random_psd, cn_vector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, k: usize, l: usize, tau_p: usize, seed: u64) -> (EstimationStatistics, ClusterState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<CMat> = (0..k * l).map(|_| random_psd(n, n + 1, &mut rng)).collect();
        let ch = ChannelStatistics::new(n, k, l, r).unwrap();
        let pilots: Vec<usize> = (0..k).map(|i| i % tau_p).collect();
        let cl = ClusterState::all_serve_all(l, tau_p, pilots).unwrap();
        let eta = vec![1.0; k];
        (build_estimation_statistics(&ch, &cl, &eta, tau_p, 0.5).unwrap(), cl)
    }

    #[test]
    fn single_link_schemes_are_parallel() {
        let (s, cl) = setup(1, 1, 1, 1, 2);
        let ctx = UplinkContext::new(&s, &cl, &[1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = sample_channel_draw(&s, SamplingMode::Direct, &mut rng);
        let base = centralized_sinr(0, &centralized_combiners(CentralScheme::Mr, &d, &ctx).unwrap().v[0], &d, &ctx);
        for sch in [CentralScheme::Mmse, CentralScheme::PMmse, CentralScheme::PRzf] {
            let c = centralized_combiners(sch, &d, &ctx).unwrap();
            assert!((centralized_sinr(0, &c.v[0], &d, &ctx) - base).abs() < 1e-10 * base);
        }
    }

    #[test]
    fn pmmse_equals_mmse_when_all_serve_all() {
        let (s, cl) = setup(2, 3, 2, 2, 5);
        let ctx = UplinkContext::new(&s, &cl, &[0.5, 1.0, 2.0]).unwrap();
        let d = sample_channel_draw(&s, SamplingMode::Direct, &mut ChaCha8Rng::seed_from_u64(9));
        let a = centralized_combiners(CentralScheme::Mmse, &d, &ctx).unwrap();
        let b = centralized_combiners(CentralScheme::PMmse, &d, &ctx).unwrap();
        for k in 0..3 {
            assert!((&a.v[k] - &b.v[k]).norm() < 1e-10 * a.v[k].norm());
        }
    }

    #[test]
    fn mmse_sinr_equals_rayleigh_quotient_and_is_scale_invariant() {
        let (s, cl) = setup(2, 3, 2, 2, 6);
        let p = [0.5, 1.0, 2.0];
        let ctx = UplinkContext::new(&s, &cl, &p).unwrap();
        let d = sample_channel_draw(&s, SamplingMode::Direct, &mut ChaCha8Rng::seed_from_u64(1));
        let c = centralized_combiners(CentralScheme::Mmse, &d, &ctx).unwrap();
        for k in 0..3 {
            let aps = &cl.serving_sets[k];
            let hk = stack(&d, k, aps, false);
            let mut b = CMat::zeros(4, 4);
            for i in (0..3).filter(|&i| i != k) {
                let hi = stack(&d, i, aps, false);
                b.gerc(C64::new(p[i], 0.0), &hi, &hi, ONE);
            }
            let blocks: Vec<&CMat> = aps.iter().map(|&l| ctx.z_all(l)).collect();
            add_noise_and_blocks(&mut b, &blocks, 2, ctx.sigma2());
            let x = hpd_cholesky(&b).unwrap().solve(&hk);
            let rq = p[k] * hk.dotc(&x).re;
            let got = centralized_sinr(k, &c.v[k], &d, &ctx);
            assert!((got - rq).abs() < 1e-9 * rq);
            let scaled = &c.v[k] * C64::new(-3.0, 7.0);
            assert!((centralized_sinr(k, &scaled, &d, &ctx) - got).abs() < 1e-10 * got);
        }
    }

    #[test]
    fn lpmmse_equals_lmmse_when_every_ap_serves_everyone() {
        let (s, cl) = setup(2, 3, 2, 3, 8);
        let ctx = UplinkContext::new(&s, &cl, &[1.0, 1.0, 1.0]).unwrap();
        let d = sample_channel_draw(&s, SamplingMode::Direct, &mut ChaCha8Rng::seed_from_u64(2));
        let a = local_combiners(LocalScheme::LMmse, &d, &ctx).unwrap();
        let b = local_combiners(LocalScheme::LpMmse, &d, &ctx).unwrap();
        for k in 0..3 {
            for l in 0..2 {
                for j in 0..2 {
                    assert!((a.v(k, l)[j] - b.v(k, l)[j]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn closed_form_n1_matches_general_distributed_sinr() {
        let (s, cl) = setup(1, 4, 3, 2, 12);
        let p = [0.3, 1.0, 0.7, 0.2];
        let exp = DistributedExpectations::closed_form_mr(&s, &cl);
        for mode in [LsfdMode::None, LsfdMode::Opt] {
            let w = lsfd_weights(mode, &exp, &p, &cl).unwrap();
            let a = distributed_sinr(&exp, &w, &p);
            let b = mr_closed_form_sinr_n1(&s, &cl, &w, &p).unwrap();
            for k in 0..4 {
                assert!((a[k] - b[k]).abs() < 1e-10 * a[k], "{mode:?} {k}: {} {}", a[k], b[k]);
            }
        }
    }

    #[test]
    fn mr_without_lsfd_matches_centralized_mr_uatf() {
        let (s, cl) = setup(2, 4, 3, 2, 13);
        let p = [0.3, 1.0, 0.7, 0.2];
        let exp = DistributedExpectations::closed_form_mr(&s, &cl);
        let w = lsfd_weights(LsfdMode::None, &exp, &p, &cl).unwrap();
        let d = distributed_sinr(&exp, &w, &p);
        let c = uatf_sinr(&CentralMoments::closed_form_mr(&s, &cl), &p, s.sigma2);
        for k in 0..4 {
            assert!((d[k] - c[k]).abs() < 1e-10 * c[k]);
        }
    }

    #[test]
    fn opt_lsfd_beats_other_weights() {
        let (s, cl) = setup(2, 4, 3, 2, 14);
        let p = [0.3, 1.0, 0.7, 0.2];
        let exp = DistributedExpectations::closed_form_mr(&s, &cl);
        let best = distributed_sinr(&exp, &lsfd_weights(LsfdMode::Opt, &exp, &p, &cl).unwrap(), &p);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = LsfdWeights { mode: LsfdMode::None, a: (0..4).map(|_| cn_vector(3, &mut rng)).collect() };
            let other = distributed_sinr(&exp, &a, &p);
            for k in 0..4 {
                assert!(other[k] <= best[k] * (1.0 + 1e-10));
            }
        }
        let none = distributed_sinr(&exp, &lsfd_weights(LsfdMode::None, &exp, &p, &cl).unwrap(), &p);
        let nopt = distributed_sinr(&exp, &lsfd_weights(LsfdMode::NOpt, &exp, &p, &cl).unwrap(), &p);
        for k in 0..4 {
            assert!(none[k] <= best[k] * (1.0 + 1e-10));
            assert!((nopt[k] - best[k]).abs() < 1e-10 * best[k]);
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (s, cl) = setup(1, 2, 2, 2, 15);
        let m = CentralMoments::closed_form_mr(&s, &cl);
        assert!(uplink_se(UplinkBound::Distributed, UplinkInput::Central(&m), &[1.0, 1.0], 1.0, 0.5).is_err());
        assert!(uplink_se(UplinkBound::CUatf, UplinkInput::Central(&m), &[1.0, 1.0], 1.0, 0.5).is_ok());
    }

    #[test]
    fn awgn_collapse() {
        let g = C64::new(0.6, -0.8) * 2.0;
        let h = vec![CVec::from_element(1, g)];
        let d = ChannelDraw::perfect(1, 1, 1, &h).unwrap();
        let b = nalgebra::DMatrix::from_element(1, 1, 1.0);
        let ch = ChannelStatistics::uncorrelated_from_beta(1, &b);
        let cl = ClusterState::all_serve_all(1, 1, vec![0]).unwrap();
        let s = build_estimation_statistics(&ch, &cl, &[1e12], 1, 0.25).unwrap();
        let ctx = UplinkContext::new(&s, &cl, &[0.5]).unwrap();
        let v = CVec::from_element(1, g);
        let sinr = centralized_genie_sinr(0, &v, &d, &ctx);
        let expect = 0.5 * g.norm_sqr() / 0.25;
        assert!((sinr - expect).abs() < 1e-12 * expect);
        let se = se_from_sinr(&[sinr], 0.5)[0];
        assert!((se - 0.5 * (1.0 + expect).log2()).abs() < 1e-12);
    }
}
