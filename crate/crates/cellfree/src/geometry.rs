//! Network configuration, AP/UE placement and large-scale fading.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CellFreeError, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutMode {
    #[default]
    UniformRandom,
    SquareGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationModel {
    #[default]
    LocalScattering,
    Uncorrelated,
}

/// Static scenario parameters. Powers are in watts, lengths in meters, angles
/// in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_aps: usize,
    pub antennas_per_ap: usize,
    pub num_ues: usize,
    pub area_side: f64,
    pub coherence_block: usize,
    pub pilot_length: usize,
    pub ul_data: usize,
    pub dl_data: usize,
    pub max_ul_power: f64,
    pub max_dl_power: f64,
    pub pilot_power: f64,
    pub noise_power_ul: f64,
    pub noise_power_dl: f64,
    pub ap_height: f64,
    pub shadow_std: f64,
    #[serde(default = "default_intercept")]
    pub pathloss_intercept: f64,
    #[serde(default = "default_exponent")]
    pub pathloss_exponent_coeff: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub layout: LayoutMode,
    #[serde(default = "default_true")]
    pub wrap_around: bool,
    #[serde(default)]
    pub correlation: CorrelationModel,
    #[serde(default = "default_asd")]
    pub asd_azimuth_deg: f64,
    #[serde(default = "default_asd")]
    pub asd_elevation_deg: f64,
}

fn default_intercept() -> f64 {
    -30.5
}
fn default_exponent() -> f64 {
    36.7
}
fn default_true() -> bool {
    true
}
fn default_asd() -> f64 {
    15.0
}

/// dBm to watts.
pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub const PRESET_NAMES: [&str; 3] = [
    "running-example-400x1",
    "running-example-100x4",
    "intro-benchmark",
];

impl NetworkConfig {
    /// The 1 km × 1 km running example with `l` APs of `n` antennas.
    pub fn running_example(l: usize, n: usize) -> Self {
        NetworkConfig {
            num_aps: l,
            antennas_per_ap: n,
            num_ues: 40,
            area_side: 1000.0,
            coherence_block: 200,
            pilot_length: 10,
            ul_data: 95,
            dl_data: 95,
            max_ul_power: 0.1,
            max_dl_power: 0.2,
            pilot_power: 0.1,
            noise_power_ul: dbm_to_watt(-94.0),
            noise_power_dl: dbm_to_watt(-94.0),
            ap_height: 10.0,
            shadow_std: 4.0,
            pathloss_intercept: -30.5,
            pathloss_exponent_coeff: 36.7,
            rng_seed: 0,
            layout: LayoutMode::UniformRandom,
            wrap_around: true,
            correlation: CorrelationModel::LocalScattering,
            asd_azimuth_deg: 15.0,
            asd_elevation_deg: 15.0,
        }
    }

    /// 64 single-antenna APs on an 8×8 grid over 400 m × 400 m, one UE, no
    /// shadowing, 10 dBm transmit power and −96 dBm noise.
    pub fn intro_benchmark() -> Self {
        NetworkConfig {
            num_aps: 64,
            antennas_per_ap: 1,
            num_ues: 1,
            area_side: 400.0,
            coherence_block: 200,
            pilot_length: 1,
            ul_data: 100,
            dl_data: 99,
            max_ul_power: dbm_to_watt(10.0),
            max_dl_power: dbm_to_watt(10.0),
            pilot_power: dbm_to_watt(10.0),
            noise_power_ul: dbm_to_watt(-96.0),
            noise_power_dl: dbm_to_watt(-96.0),
            ap_height: 10.0,
            shadow_std: 0.0,
            pathloss_intercept: -30.5,
            pathloss_exponent_coeff: 36.7,
            rng_seed: 0,
            layout: LayoutMode::SquareGrid,
            wrap_around: false,
            correlation: CorrelationModel::Uncorrelated,
            asd_azimuth_deg: 0.0,
            asd_elevation_deg: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "running-example-400x1" => Ok(Self::running_example(400, 1)),
            "running-example-100x4" => Ok(Self::running_example(100, 4)),
            "intro-benchmark" => Ok(Self::intro_benchmark()),
            other => Err(CellFreeError::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CellFreeError::Config(m.to_string()));
        if self.num_aps == 0 || self.antennas_per_ap == 0 || self.num_ues == 0 {
            return bad("counts must be positive");
        }
        if self.pilot_length == 0 || self.ul_data == 0 || self.dl_data == 0 {
            return bad("pilot and data lengths must be positive");
        }
        if self.pilot_length + self.ul_data + self.dl_data != self.coherence_block {
            return bad("pilot_length + ul_data + dl_data must equal coherence_block");
        }
        let positive = [
            self.area_side,
            self.max_ul_power,
            self.max_dl_power,
            self.pilot_power,
            self.noise_power_ul,
            self.noise_power_dl,
            self.ap_height,
        ];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return bad("powers, noise, area and height must be positive and finite");
        }
        if !(self.shadow_std >= 0.0) || !(self.asd_azimuth_deg >= 0.0) || !(self.asd_elevation_deg >= 0.0) {
            return bad("shadow_std and angular spreads must be nonnegative");
        }
        if self.layout == LayoutMode::SquareGrid {
            grid_side(self.num_aps)?;
        }
        Ok(())
    }

    pub fn ul_prelog(&self) -> f64 {
        self.ul_data as f64 / self.coherence_block as f64
    }

    pub fn dl_prelog(&self) -> f64 {
        self.dl_data as f64 / self.coherence_block as f64
    }
}

fn grid_side(l: usize) -> Result<usize> {
    let s = (l as f64).sqrt().round() as usize;
    if s * s != l {
        return Err(CellFreeError::Config(format!(
            "square-grid layout needs a square number of APs, got {l}"
        )));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub ap_positions: Vec<Point>,
    pub ue_positions: Vec<Point>,
    pub layout_mode: LayoutMode,
}

/// AP centers of a `side × side` grid; index = row·side + col, x follows col.
pub fn grid_positions(l: usize, area_side: f64) -> Result<Vec<Point>> {
    let side = grid_side(l)?;
    let spacing = area_side / side as f64;
    Ok((0..l)
        .map(|idx| {
            let (row, col) = (idx / side, idx % side);
            [(col as f64 + 0.5) * spacing, (row as f64 + 0.5) * spacing]
        })
        .collect())
}

pub fn uniform_point<R: Rng + ?Sized>(area_side: f64, rng: &mut R) -> Point {
    [rng.random::<f64>() * area_side, rng.random::<f64>() * area_side]
}

pub fn deploy<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Deployment> {
    config.validate()?;
    let a = config.area_side;
    let ap_positions = match config.layout {
        LayoutMode::SquareGrid => grid_positions(config.num_aps, a)?,
        LayoutMode::UniformRandom => (0..config.num_aps).map(|_| uniform_point(a, rng)).collect(),
    };
    let ue_positions = (0..config.num_ues).map(|_| uniform_point(a, rng)).collect();
    Ok(Deployment {
        ap_positions,
        ue_positions,
        layout_mode: config.layout,
    })
}

/// Shortest displacement from `p` to any of the 9 translated copies of `q`.
pub fn wrap_displacement(p: Point, q: Point, area_side: f64) -> Point {
    let mut best = [q[0] - p[0], q[1] - p[1]];
    let mut best_d2 = best[0] * best[0] + best[1] * best[1];
    for sx in [-1.0, 0.0, 1.0] {
        for sy in [-1.0, 0.0, 1.0] {
            let d = [q[0] + sx * area_side - p[0], q[1] + sy * area_side - p[1]];
            let d2 = d[0] * d[0] + d[1] * d[1];
            if d2 < best_d2 {
                best = d;
                best_d2 = d2;
            }
        }
    }
    best
}

pub fn wrap_distance(p: Point, q: Point, area_side: f64) -> f64 {
    let d = wrap_displacement(p, q, area_side);
    d[0].hypot(d[1])
}

fn displacement(p: Point, q: Point, config: &NetworkConfig) -> Point {
    if config.wrap_around {
        wrap_displacement(p, q, config.area_side)
    } else {
        [q[0] - p[0], q[1] - p[1]]
    }
}

/// Channel gain in dB at 3D distance `d` with shadow term `f_db`.
pub fn gain_db(config: &NetworkConfig, d: f64, f_db: f64) -> f64 {
    config.pathloss_intercept - config.pathloss_exponent_coeff * d.log10() + f_db
}

/// Per-link large-scale quantities, all stored K×L (UE rows, AP columns).
#[derive(Debug, Clone)]
pub struct LargeScaleFading {
    pub beta: DMatrix<f64>,
    pub shadow: DMatrix<f64>,
    pub distances: DMatrix<f64>,
    /// Azimuth of the AP→UE direction, radians.
    pub azimuth: DMatrix<f64>,
    /// Elevation of the AP→UE direction, radians.
    pub elevation: DMatrix<f64>,
}

impl LargeScaleFading {
    pub fn num_ues(&self) -> usize {
        self.beta.nrows()
    }
    pub fn num_aps(&self) -> usize {
        self.beta.ncols()
    }
}

/// Shadow-fading covariance between two UEs separated by `delta` meters.
pub fn shadow_covariance(shadow_std: f64, delta: f64) -> f64 {
    shadow_std * shadow_std * 2f64.powf(-delta / 9.0)
}

pub const SHADOW_JITTER: f64 = 1e-9;

/// Draws the K×L shadow terms. UEs are processed in index order, each new row
/// conditioned on the rows already drawn. APs are independent, so the
/// conditional weights are shared by all L columns.
pub fn draw_shadowing<R: Rng + ?Sized>(
    ue_positions: &[Point],
    num_aps: usize,
    config: &NetworkConfig,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let k = ue_positions.len();
    let mut f = DMatrix::zeros(k, num_aps);
    let s = config.shadow_std;
    if s == 0.0 {
        return Ok(f);
    }
    let dist = |a: usize, b: usize| {
        let d = displacement(ue_positions[a], ue_positions[b], config);
        d[0].hypot(d[1])
    };
    for kk in 0..k {
        if kk == 0 {
            for l in 0..num_aps {
                let z: f64 = rng.sample(StandardNormal);
                f[(0, l)] = s * z;
            }
            continue;
        }
        let prev = DMatrix::from_fn(kk, kk, |i, j| {
            shadow_covariance(s, dist(i, j)) + if i == j { SHADOW_JITTER } else { 0.0 }
        });
        let c = DVector::from_fn(kk, |i, _| shadow_covariance(s, dist(i, kk)));
        let chol = prev.cholesky().ok_or_else(|| {
            CellFreeError::Numerical("shadow covariance is not positive definite".into())
        })?;
        let w = chol.solve(&c);
        let var = (s * s + SHADOW_JITTER - c.dot(&w)).max(0.0);
        let sd = var.sqrt();
        for l in 0..num_aps {
            let mut mean = 0.0;
            for i in 0..kk {
                mean += w[i] * f[(i, l)];
            }
            let z: f64 = rng.sample(StandardNormal);
            f[(kk, l)] = mean + sd * z;
        }
    }
    Ok(f)
}

pub fn large_scale_fading<R: Rng + ?Sized>(
    deployment: &Deployment,
    config: &NetworkConfig,
    rng: &mut R,
) -> Result<LargeScaleFading> {
    let k = deployment.ue_positions.len();
    let l = deployment.ap_positions.len();
    if k != config.num_ues || l != config.num_aps {
        return Err(CellFreeError::InvalidInput(
            "deployment does not match the configuration".into(),
        ));
    }
    let shadow = draw_shadowing(&deployment.ue_positions, l, config, rng)?;
    let mut beta = DMatrix::zeros(k, l);
    let mut distances = DMatrix::zeros(k, l);
    let mut azimuth = DMatrix::zeros(k, l);
    let mut elevation = DMatrix::zeros(k, l);
    for kk in 0..k {
        for ll in 0..l {
            let d2 = displacement(deployment.ap_positions[ll], deployment.ue_positions[kk], config);
            let horiz = d2[0].hypot(d2[1]);
            let d = horiz.hypot(config.ap_height);
            distances[(kk, ll)] = d;
            azimuth[(kk, ll)] = d2[1].atan2(d2[0]);
            elevation[(kk, ll)] = (config.ap_height / d).asin();
            beta[(kk, ll)] = db_to_linear(gain_db(config, d, shadow[(kk, ll)]));
        }
    }
    Ok(LargeScaleFading {
        beta,
        shadow,
        distances,
        azimuth,
        elevation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_of_four() {
        let p = grid_positions(4, 400.0).unwrap();
        assert_eq!(p, vec![[100.0, 100.0], [300.0, 100.0], [100.0, 300.0], [300.0, 300.0]]);
    }

    #[test]
    fn grid_rejects_non_square() {
        let mut cfg = NetworkConfig::intro_benchmark();
        cfg.num_aps = 10;
        assert!(matches!(cfg.validate(), Err(CellFreeError::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(deploy(&cfg, &mut rng).is_err());
    }

    #[test]
    fn nearest_grid_ap_from_center() {
        let p = grid_positions(64, 400.0).unwrap();
        let c = [200.0, 200.0];
        let m = p
            .iter()
            .map(|q| (q[0] - c[0]).hypot(q[1] - c[1]))
            .fold(f64::INFINITY, f64::min);
        assert!((m - 25.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn deploy_is_deterministic() {
        let cfg = NetworkConfig::running_example(100, 4);
        let a = deploy(&cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = deploy(&cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert!(a
            .ap_positions
            .iter()
            .chain(a.ue_positions.iter())
            .all(|p| p.iter().all(|x| (0.0..=1000.0).contains(x))));
    }

    #[test]
    fn wrap_distance_examples() {
        assert!((wrap_distance([0.0, 0.0], [999.0, 0.0], 1000.0) - 1.0).abs() < 1e-12);
        assert_eq!(wrap_distance([3.0, 4.0], [3.0, 4.0], 1000.0), 0.0);
        let d = wrap_distance([0.0, 0.0], [500.0, 500.0], 1000.0);
        assert!((d - 500.0 * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn pathloss_anchor_points() {
        let cfg = NetworkConfig::running_example(400, 1);
        assert!((gain_db(&cfg, 1.0, 0.0) + 30.5).abs() < 1e-12);
        assert!((gain_db(&cfg, 1000.0, 0.0) + 140.6).abs() < 1e-9);
    }

    #[test]
    fn colocated_shadow_covariance_is_sixteen() {
        assert_eq!(shadow_covariance(4.0, 0.0), 16.0);
    }

    #[test]
    fn fading_respects_height_floor_and_formula() {
        let cfg = NetworkConfig::running_example(100, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dep = deploy(&cfg, &mut rng).unwrap();
        let lsf = large_scale_fading(&dep, &cfg, &mut rng).unwrap();
        for k in 0..cfg.num_ues {
            for l in 0..cfg.num_aps {
                let d = lsf.distances[(k, l)];
                assert!(d >= cfg.ap_height);
                let db = linear_to_db(lsf.beta[(k, l)]);
                let expect = -30.5 - 36.7 * d.log10() + lsf.shadow[(k, l)];
                assert!((db - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = NetworkConfig::running_example(400, 1);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(NetworkConfig::from_json(&text).unwrap(), cfg);
        for name in PRESET_NAMES {
            NetworkConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn frame_split_must_add_up() {
        let mut cfg = NetworkConfig::running_example(400, 1);
        cfg.ul_data = 190;
        assert!(cfg.validate().is_err());
    }
}
