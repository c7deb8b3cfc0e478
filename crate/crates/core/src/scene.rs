//! Experiment configuration, surface/feed geometry, the multi-band frequency
//! plan and ROI sampling.
//!
//! Coordinates: origin at the center of the surface, x along the board
//! normal, z vertical. Elements lie in the x = 0 plane.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linx::SPEED_OF_LIGHT;

pub type Point = Vector3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub n_subbands: usize,
    pub n_frames: usize,
    pub n_feeds: usize,
    pub n_elements: usize,
    pub element_spacing_factor: f64,
    pub noise_psd: f64,
    pub max_power: f64,
    pub refractive_index: f64,
    pub gain_element: f64,
    pub gain_user: f64,
    /// One value for all bands, or one per band.
    pub rms_delay_spread_s: Vec<f64>,
    pub max_speed_mps: f64,
    pub frame_duration_s: f64,
    pub angular_spread_deg: f64,
    /// Gauss–Legendre nodes per half-axis of the angular grid.
    pub pap_quadrature_nodes: usize,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            n_subbands: 4,
            n_frames: 4,
            n_feeds: 2,
            n_elements: 16,
            element_spacing_factor: 0.3,
            noise_psd: 1e-20,
            max_power: 0.1,
            refractive_index: 2.1,
            gain_element: 1.0,
            gain_user: 1.0,
            rms_delay_spread_s: vec![50e-9],
            max_speed_mps: 1.0,
            frame_duration_s: 1e-3,
            angular_spread_deg: 10.0,
            pap_quadrature_nodes: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandsSection {
    pub n_bands: usize,
    pub band_base_hz: f64,
    pub band_step_hz: f64,
    pub subband_width_hz: f64,
}

impl Default for BandsSection {
    fn default() -> Self {
        Self { n_bands: 2, band_base_hz: 2.0e9, band_step_hz: 0.5e9, subband_width_hz: 10e6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSection {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub n_samples: usize,
}

impl Default for RoiSection {
    fn default() -> Self {
        Self { center: [10.0, 0.0, 0.0], dims: [10.0, 10.0, 2.0], n_samples: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub max_outer_iters: usize,
    pub updates_per_subproblem: usize,
    /// Initial barrier weight relative to the initial objective.
    pub barrier_mu0: f64,
    pub barrier_shrink: f64,
    /// Initial trust radius relative to `1 + ‖x‖`.
    pub tr_radius0: f64,
    pub ga_population: usize,
    pub ga_generations: usize,
    pub ga_tournament: usize,
    pub ga_crossover: f64,
    pub ga_mutation_sigma: f64,
    pub ga_elitism: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            max_outer_iters: 10,
            updates_per_subproblem: 20,
            barrier_mu0: 1e-3,
            barrier_shrink: 0.2,
            tr_radius0: 0.1,
            ga_population: 20,
            ga_generations: 10,
            ga_tournament: 3,
            ga_crossover: 0.5,
            ga_mutation_sigma: 0.05,
            ga_elitism: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RngSection {
    pub seed: u64,
}

impl Default for RngSection {
    fn default() -> Self {
        Self { seed: 1 }
    }
}

/// All parameters of one experiment. Every key has a default; unknown keys
/// are rejected when parsing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub system: SystemSection,
    pub bands: BandsSection,
    pub roi: RoiSection,
    pub optimizer: OptimizerSection,
    pub rng: RngSection,
}

impl SystemConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Small canonical instance: 2 bands, 2 sub-bands, 2 frames, 2 feeds,
    /// 2x2 elements, 3 ROI samples.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.system.n_subbands = 2;
        cfg.system.n_frames = 2;
        cfg.system.n_feeds = 2;
        cfg.system.n_elements = 4;
        cfg.roi.n_samples = 3;
        cfg
    }

    pub fn n_bands(&self) -> usize {
        self.bands.n_bands
    }
    pub fn n_subbands(&self) -> usize {
        self.system.n_subbands
    }
    pub fn n_frames(&self) -> usize {
        self.system.n_frames
    }
    pub fn n_feeds(&self) -> usize {
        self.system.n_feeds
    }
    pub fn n_elements(&self) -> usize {
        self.system.n_elements
    }

    pub fn noise_var(&self) -> f64 {
        self.system.noise_psd * self.bands.subband_width_hz
    }

    pub fn delay_spread(&self, band: usize) -> f64 {
        let v = &self.system.rms_delay_spread_s;
        if v.len() == 1 {
            v[0]
        } else {
            v[band]
        }
    }

    pub fn roi_box(&self) -> RoiBox {
        RoiBox { center: Point::from(self.roi.center), dims: Point::from(self.roi.dims) }
    }

    pub fn grid_side(&self) -> Result<usize> {
        let n = self.system.n_elements;
        let m = (n as f64).sqrt().round() as usize;
        if m * m != n {
            return Err(Error::InvalidConfig(format!("n_elements = {n} is not a perfect square")));
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        let counts = [
            ("n_bands", self.bands.n_bands),
            ("n_subbands", s.n_subbands),
            ("n_frames", s.n_frames),
            ("n_feeds", s.n_feeds),
            ("n_elements", s.n_elements),
            ("n_samples", self.roi.n_samples),
            ("max_outer_iters", self.optimizer.max_outer_iters),
            ("updates_per_subproblem", self.optimizer.updates_per_subproblem),
            ("pap_quadrature_nodes", s.pap_quadrature_nodes),
            ("ga_population", self.optimizer.ga_population),
            ("ga_tournament", self.optimizer.ga_tournament),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        self.grid_side()?;
        let positive = [
            ("element_spacing_factor", s.element_spacing_factor),
            ("noise_psd", s.noise_psd),
            ("max_power", s.max_power),
            ("refractive_index", s.refractive_index),
            ("gain_element", s.gain_element),
            ("gain_user", s.gain_user),
            ("frame_duration_s", s.frame_duration_s),
            ("angular_spread_deg", s.angular_spread_deg),
            ("band_base_hz", self.bands.band_base_hz),
            ("band_step_hz", self.bands.band_step_hz),
            ("subband_width_hz", self.bands.subband_width_hz),
            ("barrier_mu0", self.optimizer.barrier_mu0),
            ("tr_radius0", self.optimizer.tr_radius0),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and > 0 (got {v})")));
            }
        }
        if !(s.max_speed_mps.is_finite() && s.max_speed_mps >= 0.0) {
            return Err(Error::InvalidConfig("max_speed_mps must be >= 0".into()));
        }
        let ds = &s.rms_delay_spread_s;
        if !(ds.len() == 1 || ds.len() == self.bands.n_bands) {
            return Err(Error::InvalidConfig(format!(
                "rms_delay_spread_s needs 1 or {} entries, got {}",
                self.bands.n_bands,
                ds.len()
            )));
        }
        if ds.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig("rms_delay_spread_s entries must be > 0".into()));
        }
        let shrink = self.optimizer.barrier_shrink;
        if !(shrink > 0.0 && shrink < 1.0) {
            return Err(Error::InvalidConfig(format!("barrier_shrink must lie in (0,1), got {shrink}")));
        }
        if self.roi.dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidConfig("roi dims must be > 0".into()));
        }
        if self.bands.band_step_hz < s.n_subbands as f64 * self.bands.subband_width_hz {
            return Err(Error::InvalidConfig(format!(
                "bands overlap: step {} Hz < {} sub-bands x {} Hz",
                self.bands.band_step_hz, s.n_subbands, self.bands.subband_width_hz
            )));
        }
        let lowest = self.bands.band_base_hz + self.bands.band_step_hz
            - 0.5 * s.n_subbands as f64 * self.bands.subband_width_hz;
        if lowest <= 0.0 {
            return Err(Error::InvalidConfig("lowest sub-band frequency must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhsGeometry {
    pub elements: Vec<Point>,
    pub feeds: Vec<Point>,
    pub spacing: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandPlan {
    pub centers: Vec<f64>,
    /// `subband_freqs[i][j]`
    pub subband_freqs: Vec<Vec<f64>>,
    pub lambda_avr: f64,
}

impl BandPlan {
    pub fn n_bands(&self) -> usize {
        self.centers.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub center: Point,
    pub dims: Point,
}

impl RoiBox {
    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= 0.5 * self.dims[a] + 1e-12)
    }
}

pub fn build_band_plan(cfg: &SystemConfig) -> Result<BandPlan> {
    cfg.validate()?;
    let b = &cfg.bands;
    let ns = cfg.n_subbands();
    let centers: Vec<f64> = (1..=b.n_bands).map(|i| b.band_base_hz + b.band_step_hz * i as f64).collect();
    let subband_freqs = centers
        .iter()
        .map(|&fc| {
            (0..ns)
                .map(|j| fc + (j as f64 - (ns as f64 - 1.0) / 2.0) * b.subband_width_hz)
                .collect()
        })
        .collect();
    let mean = centers.iter().sum::<f64>() / centers.len() as f64;
    Ok(BandPlan { centers, subband_freqs, lambda_avr: SPEED_OF_LIGHT / mean })
}

/// Square element grid in the y–z plane with feeds on a line `2 d_E` below
/// the grid, evenly spread over the grid's y-extent.
pub fn build_geometry(cfg: &SystemConfig, plan: &BandPlan) -> Result<RhsGeometry> {
    let m = cfg.grid_side()?;
    let d = cfg.system.element_spacing_factor * plan.lambda_avr;
    Ok(grid_geometry(m, cfg.n_feeds(), d))
}

pub(crate) fn grid_geometry(m: usize, n_feeds: usize, d: f64) -> RhsGeometry {
    let offset = |a: usize| (a as f64 - (m as f64 - 1.0) / 2.0) * d;
    let mut elements = Vec::with_capacity(m * m);
    for row in 0..m {
        for col in 0..m {
            elements.push(Point::new(0.0, offset(col), offset(row)));
        }
    }
    let half_extent = (m as f64 - 1.0) / 2.0 * d;
    let z_feed = -half_extent - 2.0 * d;
    let feeds = (0..n_feeds)
        .map(|k| {
            let y = if n_feeds == 1 {
                0.0
            } else {
                -half_extent + 2.0 * half_extent * k as f64 / (n_feeds as f64 - 1.0)
            };
            Point::new(0.0, y, z_feed)
        })
        .collect();
    RhsGeometry { elements, feeds, spacing: d }
}

/// `n` i.i.d. uniform points in the box, deterministic in `seed`.
pub fn sample_positions(roi: &RoiBox, n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Point::from_fn(|a, _| roi.center[a] + roi.dims[a] * (rng.random::<f64>() - 0.5))
        })
        .collect()
}
