//! Monte Carlo experiment runner: setups × coherence blocks, per-UE SE
//! pooling into CDF tables, CSV/JSON output.
//!
//! Every setup owns two ChaCha streams derived from the master seed: stream
//! `2·s` drives deployment and fading, stream `2·s + 1` the channel draws.
//! All variants evaluated on one setup replay the same draws.

pub mod acceptance;

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{assign_pilots_and_dcc, small_cell_selection, ClusterState};
use crate::downlink::{centralized_dl_sinr, distributed_dl_sinr};
use crate::error::{CellFreeError, Result};
use crate::estimation::{build_estimation_statistics, sample_channel_draw, ChannelStatistics, EstimationStatistics, SamplingMode};
use crate::geometry::{deploy, gain_db, db_to_linear, large_scale_fading, linear_to_db, uniform_point, grid_positions, LargeScaleFading, NetworkConfig};
use crate::metrics::{instance_counts, scalability_report, InstanceCounts, ScalabilityReport};
use crate::powerctl::{
    dl_cent_equal, dl_cent_fpa, dl_cent_maxmin_fixedpoint, dl_cent_sumse_bcd, dl_dist_equal, dl_dist_fpa,
    dl_dist_maxmin_bisection, dl_dist_sumse_bcd, ul_fpc, ul_maxmin_fixedpoint, ul_sumse_bcd, DlCentralCoefficients,
    DlDistributedCoefficients, UlCoefficients, DEFAULT_BCD_EPS, DEFAULT_BISECTION_EPS, DEFAULT_FIXED_POINT_EPS,
};
use crate::uplink::{
    cellular_sinr, centralized_combiners, distributed_sinr, local_combiners, lsfd_weights, CentralAccumulator,
    CentralMoments, CentralScheme, DistributedAccumulator, DistributedExpectations, LocalScheme, LogSinrStats,
    LsfdMode, UplinkContext,
};

pub const DEFAULT_SETUPS: usize = 50;
pub const DEFAULT_DRAWS: usize = 500;
pub const SCALABILITY_K_GRID: [usize; 3] = [20, 40, 80];
pub const QUANTILES: [f64; 7] = [0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessingMode {
    Centralized,
    Distributed,
    Cellular,
    SmallCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    #[default]
    Uplink,
    Downlink,
}

/// Transmit-power policy. `Full` is p_max in the uplink; `Equal` is the
/// equal downlink split (ρ_max/τ_p centralized, ρ_max/|D_l| distributed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerPolicy {
    Full,
    Equal,
    Fractional { upsilon: f64, kappa: f64 },
    MaxMin,
    SumSe,
}

impl PowerPolicy {
    /// `full`, `equal`, `max-min`, `sum-se`, `fractional[:υ[:κ]]`.
    pub fn parse(s: &str, link: Link, mode: ProcessingMode) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or("");
        let nums: Vec<f64> = parts
            .map(|p| p.parse::<f64>().map_err(|_| CellFreeError::Config(format!("bad exponent `{p}`"))))
            .collect::<Result<_>>()?;
        let (du, dk) = default_exponents(link, mode);
        match (head, nums.len()) {
            ("full", 0) => Ok(PowerPolicy::Full),
            ("equal", 0) => Ok(PowerPolicy::Equal),
            ("max-min", 0) => Ok(PowerPolicy::MaxMin),
            ("sum-se", 0) => Ok(PowerPolicy::SumSe),
            ("fractional", 0..=2) => Ok(PowerPolicy::Fractional {
                upsilon: nums.first().copied().unwrap_or(du),
                kappa: nums.get(1).copied().unwrap_or(dk),
            }),
            _ => Err(CellFreeError::Config(format!("unknown power policy `{s}`"))),
        }
    }
}

fn default_exponents(link: Link, mode: ProcessingMode) -> (f64, f64) {
    match (link, mode) {
        (Link::Downlink, ProcessingMode::Centralized) => (-0.5, 0.5),
        (Link::Downlink, _) => (0.5, 0.0),
        (Link::Uplink, _) => (0.5, 0.0),
    }
}

fn default_setups() -> usize {
    DEFAULT_SETUPS
}
fn default_draws() -> usize {
    DEFAULT_DRAWS
}
fn default_power() -> PowerPolicy {
    PowerPolicy::Full
}
fn default_lsfd() -> LsfdMode {
    LsfdMode::NOpt
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Preset name; ignored when `config` is given.
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub config: Option<NetworkConfig>,
    pub mode: ProcessingMode,
    #[serde(default)]
    pub link: Link,
    pub scheme: String,
    #[serde(default = "default_lsfd")]
    pub lsfd: LsfdMode,
    #[serde(default = "default_power")]
    pub power: PowerPolicy,
    #[serde(default = "default_setups")]
    pub num_setups: usize,
    #[serde(default = "default_draws")]
    pub draws_per_setup: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SchemeSel {
    Central(CentralScheme),
    Local(LocalScheme),
    SingleAp,
}

impl ExperimentSpec {
    pub fn new(scenario: &str, mode: ProcessingMode, scheme: &str) -> Self {
        ExperimentSpec {
            scenario: Some(scenario.to_string()),
            config: None,
            mode,
            link: Link::Uplink,
            scheme: scheme.to_string(),
            lsfd: default_lsfd(),
            power: PowerPolicy::Full,
            num_setups: DEFAULT_SETUPS,
            draws_per_setup: DEFAULT_DRAWS,
            seed: 0,
        }
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let cfg = match (&self.config, &self.scenario) {
            (Some(c), _) => c.clone(),
            (None, Some(name)) => NetworkConfig::preset(name)?,
            (None, None) => return Err(CellFreeError::Config("spec needs a scenario or a config".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn scheme_sel(&self) -> Result<SchemeSel> {
        match self.mode {
            ProcessingMode::Centralized => CentralScheme::parse(&self.scheme).map(SchemeSel::Central),
            ProcessingMode::Distributed => LocalScheme::parse(&self.scheme).map(SchemeSel::Local),
            ProcessingMode::Cellular | ProcessingMode::SmallCell => {
                if self.scheme == "l-mmse" {
                    Ok(SchemeSel::SingleAp)
                } else {
                    Err(CellFreeError::Config(format!("{:?} mode uses l-mmse, got `{}`", self.mode, self.scheme)))
                }
            }
        }
        .map_err(|e| CellFreeError::Config(format!("scheme not valid for mode {:?}: {e}", self.mode)))
    }

    pub fn validate(&self) -> Result<()> {
        self.network()?;
        self.scheme_sel()?;
        if self.num_setups == 0 {
            return Err(CellFreeError::Config("num_setups = 0 gives an empty table".into()));
        }
        if self.draws_per_setup == 0 {
            return Err(CellFreeError::Config("draws_per_setup must be positive".into()));
        }
        let single = matches!(self.mode, ProcessingMode::Cellular | ProcessingMode::SmallCell);
        match (self.link, self.power) {
            (Link::Downlink, _) if single => Err(CellFreeError::Config("downlink is not modeled for single-AP modes".into())),
            (Link::Uplink, PowerPolicy::Equal) => Err(CellFreeError::Config("`equal` is a downlink policy".into())),
            (Link::Downlink, PowerPolicy::Full) => Err(CellFreeError::Config("`full` is an uplink policy".into())),
            (Link::Uplink, PowerPolicy::MaxMin | PowerPolicy::SumSe) if single => {
                Err(CellFreeError::Config("optimized powers need a cell-free mode".into()))
            }
            _ => Ok(()),
        }
    }

    fn same_setups(&self, other: &ExperimentSpec) -> bool {
        self.scenario == other.scenario
            && self.config == other.config
            && self.num_setups == other.num_setups
            && self.draws_per_setup == other.draws_per_setup
            && self.seed == other.seed
    }

    pub fn label(&self) -> String {
        let link = match self.link {
            Link::Uplink => "ul",
            Link::Downlink => "dl",
        };
        let mode = serde_json::to_value(self.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        match self.mode {
            ProcessingMode::Distributed if self.link == Link::Uplink => format!("{link}/{mode}/{}+{}", self.scheme, self.lsfd.name()),
            _ => format!("{link}/{mode}/{}", self.scheme),
        }
    }
}

/// One network realization with its statistics.
#[derive(Debug, Clone)]
pub struct Setup {
    pub fading: LargeScaleFading,
    pub channels: ChannelStatistics,
    pub cluster: ClusterState,
    pub stats: EstimationStatistics,
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn build_setup(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Setup> {
    let dep = deploy(config, rng)?;
    let fading = large_scale_fading(&dep, config, rng)?;
    let channels = ChannelStatistics::from_fading(&fading, config)?;
    let cluster = assign_pilots_and_dcc(&fading.beta, config.pilot_length)?;
    let eta = vec![config.pilot_power; config.num_ues];
    let stats = build_estimation_statistics(&channels, &cluster, &eta, config.pilot_length, config.noise_power_ul)?;
    Ok(Setup { fading, channels, cluster, stats })
}

/// Per-UE SE of one variant on one setup.
pub fn evaluate_setup(spec: &ExperimentSpec, config: &NetworkConfig, setup: &Setup, draw_seed: (u64, u64)) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = config.num_ues;
    let p_max = config.max_ul_power;
    let rho_max = config.max_dl_power;
    let beta = &setup.fading.beta;
    let cl = &setup.cluster;
    let draws = || {
        let mut rng = stream_rng(draw_seed.0, draw_seed.1);
        (0..spec.draws_per_setup).map(move |_| sample_channel_draw(&setup.stats, SamplingMode::Direct, &mut rng))
    };
    let ul_prelog = config.ul_prelog();
    let dl_prelog = config.dl_prelog();
    let deterministic = |sinr: Vec<f64>, prelog: f64| {
        (sinr.iter().map(|s| prelog * (1.0 + s.max(0.0)).log2()).collect::<Vec<_>>(), vec![0.0; sinr.len()])
    };
    let ul_power = |p_policy: PowerPolicy| -> Result<Vec<f64>> {
        match p_policy {
            PowerPolicy::Fractional { upsilon, .. } => ul_fpc(beta, cl, p_max, upsilon),
            _ => Ok(vec![p_max; k]),
        }
    };
    let central_moments = |scheme: CentralScheme, p: &[f64]| -> Result<CentralAccumulator> {
        let ctx = UplinkContext::new(&setup.stats, cl, p)?;
        let mut acc = CentralAccumulator::new(k, config.num_aps);
        for d in draws() {
            let comb = centralized_combiners(scheme, &d, &ctx)?;
            acc.add(&d, &comb, &ctx);
        }
        Ok(acc)
    };
    let local_expectations = |scheme: LocalScheme, p: &[f64]| -> Result<DistributedExpectations> {
        let ctx = UplinkContext::new(&setup.stats, cl, p)?;
        let mut acc = DistributedAccumulator::new(cl);
        for d in draws() {
            acc.add(&d, &local_combiners(scheme, &d, &ctx)?);
        }
        Ok(acc.finish(config.noise_power_ul))
    };
    match (spec.link, spec.scheme_sel()?) {
        (Link::Uplink, SchemeSel::Central(scheme)) => {
            let p = ul_power(spec.power)?;
            let acc = central_moments(scheme, &p)?;
            match spec.power {
                PowerPolicy::MaxMin | PowerPolicy::SumSe => {
                    let coeffs = UlCoefficients::from_central(&acc.moments(), config.noise_power_ul, p_max);
                    let p_opt = optimize_ul(&coeffs, spec.power)?;
                    Ok(deterministic(coeffs.sinr(&p_opt), ul_prelog))
                }
                _ => Ok(acc.achievable.se(ul_prelog)),
            }
        }
        (Link::Uplink, SchemeSel::Local(scheme)) => {
            let p = ul_power(spec.power)?;
            let exp = local_expectations(scheme, &p)?;
            let w = lsfd_weights(spec.lsfd, &exp, &p, cl)?;
            match spec.power {
                PowerPolicy::MaxMin | PowerPolicy::SumSe => {
                    let coeffs = UlCoefficients::from_distributed(&exp, &w, p_max);
                    let p_opt = optimize_ul(&coeffs, spec.power)?;
                    Ok(deterministic(coeffs.sinr(&p_opt), ul_prelog))
                }
                _ => Ok(deterministic(distributed_sinr(&exp, &w, &p), ul_prelog)),
            }
        }
        (Link::Uplink, SchemeSel::SingleAp) => {
            let p = ul_power(spec.power)?;
            let ctx = UplinkContext::new(&setup.stats, cl, &p)?;
            let ap_of = small_cell_selection(cl, beta);
            let mut stats = LogSinrStats::new(k);
            for d in draws() {
                let (ach, genie) = cellular_sinr(&d, &ctx, &ap_of)?;
                stats.push(if spec.mode == ProcessingMode::SmallCell { &genie } else { &ach });
            }
            Ok(stats.se(ul_prelog))
        }
        (Link::Downlink, SchemeSel::Central(scheme)) => {
            let m: CentralMoments = central_moments(scheme, &vec![p_max; k])?.moments();
            let coeffs = DlCentralCoefficients::from_central(&m, cl, config.noise_power_dl, rho_max);
            let rho = match spec.power {
                PowerPolicy::Equal => dl_cent_equal(k, rho_max, config.pilot_length),
                PowerPolicy::Fractional { upsilon, kappa } => dl_cent_fpa(beta, cl, &coeffs.omega(cl), rho_max, upsilon, kappa)?,
                PowerPolicy::MaxMin => dl_cent_maxmin_fixedpoint(&coeffs, DEFAULT_FIXED_POINT_EPS)?.power,
                PowerPolicy::SumSe => dl_cent_sumse_bcd(&coeffs, DEFAULT_BCD_EPS, None)?.power,
                PowerPolicy::Full => unreachable!("rejected by validate"),
            };
            Ok(deterministic(centralized_dl_sinr(&m, &rho, config.noise_power_dl), dl_prelog))
        }
        (Link::Downlink, SchemeSel::Local(scheme)) => {
            let exp = local_expectations(scheme, &vec![p_max; k])?;
            match spec.power {
                PowerPolicy::Equal | PowerPolicy::Fractional { .. } => {
                    let rho: DMatrix<f64> = match spec.power {
                        PowerPolicy::Equal => dl_dist_equal(cl, rho_max),
                        PowerPolicy::Fractional { upsilon, .. } => dl_dist_fpa(beta, cl, rho_max, upsilon)?,
                        _ => unreachable!(),
                    };
                    Ok(deterministic(distributed_dl_sinr(&exp, &rho, config.noise_power_dl), dl_prelog))
                }
                _ => {
                    let coeffs = DlDistributedCoefficients::from_distributed(&exp, config.num_aps, rho_max)?;
                    let x = if spec.power == PowerPolicy::MaxMin {
                        dl_dist_maxmin_bisection(&coeffs, DEFAULT_BISECTION_EPS)?.power
                    } else {
                        dl_dist_sumse_bcd(&coeffs, DEFAULT_BCD_EPS, None)?.power
                    };
                    Ok(deterministic(coeffs.sinr(&x), dl_prelog))
                }
            }
        }
        (Link::Downlink, SchemeSel::SingleAp) => Err(CellFreeError::Config("downlink is not modeled for single-AP modes".into())),
    }
}

fn optimize_ul(coeffs: &UlCoefficients, policy: PowerPolicy) -> Result<Vec<f64>> {
    match policy {
        PowerPolicy::MaxMin => Ok(ul_maxmin_fixedpoint(coeffs, DEFAULT_FIXED_POINT_EPS)?.power),
        _ => Ok(ul_sumse_bcd(coeffs, DEFAULT_BCD_EPS, &vec![coeffs.p_max; coeffs.num_ues()])?.power),
    }
}

/// Sorted SE samples pooled over (setup, UE) with quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfTable {
    pub samples: Vec<f64>,
    /// Monte Carlo standard error of each sample (zero for deterministic bounds).
    pub std_errors: Vec<f64>,
    pub quantiles: Vec<(f64, f64)>,
    pub count: usize,
}

/// Linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl CdfTable {
    pub fn from_samples(samples: Vec<f64>, std_errors: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CellFreeError::InvalidInput("empty sample set".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(CellFreeError::Numerical("non-finite SE sample".into()));
        }
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.sort_by(|&a, &b| samples[a].total_cmp(&samples[b]));
        let s: Vec<f64> = idx.iter().map(|&i| samples[i]).collect();
        let e: Vec<f64> = idx.iter().map(|&i| std_errors.get(i).copied().unwrap_or(0.0)).collect();
        let quantiles = QUANTILES.iter().map(|&q| (q, quantile(&s, q))).collect();
        Ok(CdfTable { count: s.len(), samples: s, std_errors: e, quantiles })
    }

    pub fn median(&self) -> f64 {
        quantile(&self.samples, 0.5)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.count as f64
    }

    pub fn to_csv(&self) -> Result<String> {
        if self.count == 0 {
            return Err(CellFreeError::InvalidInput("empty table".into()));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_index", "se_bits_per_hz", "cdf_value"])?;
        for (i, s) in self.samples.iter().enumerate() {
            w.write_record([i.to_string(), format!("{s:.12e}"), format!("{:.12e}", (i + 1) as f64 / self.count as f64)])?;
        }
        let bytes = w.into_inner().map_err(|e| CellFreeError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub spec: ExperimentSpec,
    pub table: CdfTable,
    /// Fronthaul and multiplication counts of the first setup.
    pub counts: Option<InstanceCounts>,
    /// K-independence verdicts on ring networks with this scenario's N, τ_p, τ_u.
    pub scalability: ScalabilityReport,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl ExperimentOutput {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn emit(&self, format: OutputFormat, path: &Path) -> Result<()> {
        let text = match format {
            OutputFormat::Csv => self.table.to_csv()?,
            OutputFormat::Json => self.to_json()?,
        };
        fs::write(path, text)?;
        Ok(())
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    Ok(run_comparison(std::slice::from_ref(spec))?.remove(0))
}

/// Evaluates several variants on shared setups and draws. All specs must
/// agree on scenario, seed and Monte Carlo sizes.
pub fn run_comparison(specs: &[ExperimentSpec]) -> Result<Vec<ExperimentOutput>> {
    let first = specs.first().ok_or_else(|| CellFreeError::Config("no experiment given".into()))?;
    for s in specs {
        s.validate()?;
        if !first.same_setups(s) {
            return Err(CellFreeError::Config("compared specs must share scenario, seed and sizes".into()));
        }
    }
    let config = first.network()?;
    let per_setup: Vec<Result<(Vec<(Vec<f64>, Vec<f64>)>, InstanceCounts)>> = (0..first.num_setups)
        .into_par_iter()
        .map(|s| {
            let wrap = |e: CellFreeError| CellFreeError::Setup { setup: s, source: Box::new(e) };
            let mut rng = stream_rng(first.seed, 2 * s as u64);
            let setup = build_setup(&config, &mut rng).map_err(wrap)?;
            let counts = instance_counts(&setup.cluster, config.antennas_per_ap, config.pilot_length, config.ul_data, config.dl_data);
            let results = specs
                .iter()
                .map(|sp| evaluate_setup(sp, &config, &setup, (first.seed, 2 * s as u64 + 1)).map_err(wrap))
                .collect::<Result<Vec<_>>>()?;
            Ok((results, counts))
        })
        .collect();
    let mut pooled: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); specs.len()];
    let scalability = scalability_report(&SCALABILITY_K_GRID, config.antennas_per_ap, config.pilot_length, config.ul_data, config.pilot_length.min(4))?;
    let mut counts = None;
    for r in per_setup {
        let (res, c) = r?;
        counts.get_or_insert(c);
        for (v, (se, err)) in res.into_iter().enumerate() {
            pooled[v].0.extend(se);
            pooled[v].1.extend(err);
        }
    }
    specs
        .iter()
        .zip(pooled)
        .map(|(sp, (se, err))| {
            Ok(ExperimentOutput {
                spec: sp.clone(),
                table: CdfTable::from_samples(se, err)?,
                counts: counts.clone(),
                scalability: scalability.clone(),
                metadata: Metadata { seed: sp.seed, version: env!("CARGO_PKG_VERSION").to_string() },
            })
        })
        .collect()
}

/// 5%-quantile uplink SNRs (dB) of a single UE in the intro benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntroSnr {
    pub cell_free_db: f64,
    pub cellular_db: f64,
    pub small_cell_db: f64,
    pub drops: usize,
}

/// Drops one UE uniformly per realization. Cell-free combines all APs
/// coherently (Σβ), small cells use the best AP (max β) and the cellular
/// reference places all L antennas at the area center.
pub fn intro_snr_benchmark(config: &NetworkConfig, drops: usize, seed: u64) -> Result<IntroSnr> {
    config.validate()?;
    if drops == 0 {
        return Err(CellFreeError::InvalidInput("need at least one drop".into()));
    }
    let aps = grid_positions(config.num_aps, config.area_side)?;
    let center = [config.area_side / 2.0, config.area_side / 2.0];
    let snr0 = config.max_ul_power / config.noise_power_ul;
    let beta_at = |a: [f64; 2], u: [f64; 2]| {
        let d = (a[0] - u[0]).hypot(a[1] - u[1]).hypot(config.ap_height);
        db_to_linear(gain_db(config, d, 0.0))
    };
    let mut rng = stream_rng(seed, 0);
    let mut cf = Vec::with_capacity(drops);
    let mut sc = Vec::with_capacity(drops);
    let mut cell = Vec::with_capacity(drops);
    for _ in 0..drops {
        let u = uniform_point(config.area_side, &mut rng);
        let b: Vec<f64> = aps.iter().map(|&a| beta_at(a, u)).collect();
        cf.push(linear_to_db(snr0 * b.iter().sum::<f64>()));
        sc.push(linear_to_db(snr0 * b.iter().copied().fold(0.0, f64::max)));
        cell.push(linear_to_db(snr0 * config.num_aps as f64 * beta_at(center, u)));
    }
    for v in [&mut cf, &mut sc, &mut cell] {
        v.sort_by(f64::total_cmp);
    }
    Ok(IntroSnr {
        cell_free_db: quantile(&cf, 0.05),
        cellular_db: quantile(&cell, 0.05),
        small_cell_db: quantile(&sc, 0.05),
        drops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_values_of_three_samples() {
        let t = CdfTable::from_samples(vec![3.0, 1.0, 2.0], vec![]).unwrap();
        let csv = t.to_csv().unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "sample_index,se_bits_per_hz,cdf_value");
        let cdf: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(2).unwrap().parse().unwrap()).collect();
        assert!((cdf[0] - 1.0 / 3.0).abs() < 1e-12 && (cdf[1] - 2.0 / 3.0).abs() < 1e-12 && cdf[2] == 1.0);
        assert!(CdfTable::from_samples(vec![], vec![]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = CdfTable::from_samples(vec![0.5, 0.25], vec![0.01, 0.02]).unwrap();
        let back: CdfTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn zero_setups_rejected() {
        let mut s = ExperimentSpec::new("running-example-100x4", ProcessingMode::Centralized, "mr");
        s.num_setups = 0;
        assert!(run_experiment(&s).is_err());
    }

    #[test]
    fn policies_parse() {
        let p = PowerPolicy::parse("fractional", Link::Downlink, ProcessingMode::Centralized).unwrap();
        assert_eq!(p, PowerPolicy::Fractional { upsilon: -0.5, kappa: 0.5 });
        let p = PowerPolicy::parse("fractional:1", Link::Downlink, ProcessingMode::Distributed).unwrap();
        assert_eq!(p, PowerPolicy::Fractional { upsilon: 1.0, kappa: 0.0 });
        assert!(PowerPolicy::parse("max", Link::Uplink, ProcessingMode::Centralized).is_err());
    }
}
