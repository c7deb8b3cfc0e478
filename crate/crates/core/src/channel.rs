//! Physical model of the positioning phase: LoS gains and their position
//! derivatives, onboard propagation, the multipath angular covariance, the
//! frequency/time decorrelation kernels, assembly of the effective
//! beamforming matrix `T_i`, received-signal synthesis and band capacity.
//!
//! Row index convention for every `(N_S Q)`-row object: row `j*Q + q`
//! (sub-band major).

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linx::{bessel_j0, gauss_legendre, kron, psd_sqrt_factor, CMat, CVec, RMat, SPEED_OF_LIGHT};
use crate::scene::{
    build_band_plan, build_geometry, sample_positions, BandPlan, Point, RhsGeometry, RoiBox, SystemConfig,
};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Seed of the fixed ROI sample set that anchors the multipath power.
const POWER_ANCHOR_SEED: u64 = 0x5eed_0f_1057;
const POWER_ANCHOR_SAMPLES: usize = 256;
const MIN_DISTANCE: f64 = 1e-6;

/// Analog configurations `C_i` (real, `Q x N_E`) and digital combiners
/// `S_{i,j}` (complex, `Q x K_F`).
#[derive(Clone, Debug, PartialEq)]
pub struct Beamforming {
    pub configs: Vec<RMat>,
    pub combiners: Vec<Vec<CMat>>,
}

impl Beamforming {
    pub fn n_bands(&self) -> usize {
        self.configs.len()
    }

    /// `Σ_j ‖row q of S_{i,j}‖²`
    pub fn frame_power(&self, band: usize, frame: usize) -> f64 {
        self.combiners[band]
            .iter()
            .map(|s| s.row(frame).iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum()
    }

    pub fn max_power_residual(&self, p_max: f64) -> f64 {
        let mut worst = 0.0_f64;
        for (i, c) in self.configs.iter().enumerate() {
            for q in 0..c.nrows() {
                worst = worst.max((self.frame_power(i, q) - p_max).abs() / p_max);
            }
        }
        worst
    }

    pub fn configs_in_box(&self) -> bool {
        self.configs.iter().all(|c| c.iter().all(|&v| (0.0..=1.0).contains(&v)))
    }

    pub fn is_feasible(&self, p_max: f64, tol: f64) -> bool {
        self.configs_in_box() && self.max_power_residual(p_max) <= tol
    }

    /// All `C` entries, band by band, row-major within each `Q x N_E` matrix.
    pub fn configs_to_vec(&self) -> Vec<f64> {
        self.configs.iter().flat_map(|c| c.transpose().as_slice().to_vec()).collect()
    }

    pub fn set_configs_from(&mut self, x: &[f64]) {
        let mut it = x.iter();
        for c in &mut self.configs {
            let (q, n) = c.shape();
            for r in 0..q {
                for m in 0..n {
                    c[(r, m)] = *it.next().expect("config vector too short");
                }
            }
        }
    }

    /// All `S` entries as interleaved `(re, im)` pairs, ordered by band,
    /// sub-band, then row-major.
    pub fn combiners_to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for band in &self.combiners {
            for s in band {
                for r in 0..s.nrows() {
                    for k in 0..s.ncols() {
                        out.push(s[(r, k)].re);
                        out.push(s[(r, k)].im);
                    }
                }
            }
        }
        out
    }

    pub fn set_combiners_from(&mut self, x: &[f64]) {
        let mut it = x.chunks_exact(2);
        for band in &mut self.combiners {
            for s in band {
                for r in 0..s.nrows() {
                    for k in 0..s.ncols() {
                        let pair = it.next().expect("combiner vector too short");
                        s[(r, k)] = Complex64::new(pair[0], pair[1]);
                    }
                }
            }
        }
    }

    pub fn scale_combiners(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for band in &mut out.combiners {
            for s in band {
                *s *= Complex64::from(alpha);
            }
        }
        out
    }
}

/// Precomputed per-band quantities, plus the geometry and frequency plan
/// they were built from.
#[derive(Clone, Debug)]
pub struct ChannelTables {
    pub plan: BandPlan,
    pub geom: RhsGeometry,
    /// `onboard[i][j]`: `K_F x N_E` unit-modulus gains `B_{i,j}`.
    pub onboard: Vec<Vec<CMat>>,
    pub angular_cov: Vec<CMat>,
    pub kernel_f: Vec<CMat>,
    pub kernel_t: Vec<RMat>,
    pub kernel_ft: Vec<CMat>,
    pub noise_var: f64,
    pub gain_element: f64,
    pub gain_user: f64,
    pub n_frames: usize,
    pub n_feeds: usize,
    pub max_power: f64,
    pub subband_width: f64,
    pub refractive_index: f64,
}

impl ChannelTables {
    pub fn build(cfg: &SystemConfig) -> Result<Self> {
        let plan = build_band_plan(cfg)?;
        let geom = build_geometry(cfg, &plan)?;
        let s = &cfg.system;
        let n_b = cfg.n_bands();
        let onboard = (0..n_b)
            .map(|i| {
                plan.subband_freqs[i]
                    .iter()
                    .map(|&f| {
                        CMat::from_fn(geom.feeds.len(), geom.elements.len(), |k, m| {
                            onboard_gain(f, &geom.feeds[k], &geom.elements[m], s.refractive_index)
                        })
                    })
                    .collect()
            })
            .collect();
        let profile = AngularProfile { spread_deg: s.angular_spread_deg, nodes: s.pap_quadrature_nodes };
        let roi = cfg.roi_box();
        let angular_cov = (0..n_b)
            .map(|i| angular_covariance(i, &plan, &geom, &profile, &roi, s.gain_element, s.gain_user))
            .collect::<Result<Vec<_>>>()?;
        let mut kernel_f = Vec::with_capacity(n_b);
        let mut kernel_t = Vec::with_capacity(n_b);
        let mut kernel_ft = Vec::with_capacity(n_b);
        for i in 0..n_b {
            let (kf, kt, kft) = kernels(i, cfg, &plan);
            kernel_f.push(kf);
            kernel_t.push(kt);
            kernel_ft.push(kft);
        }
        Ok(Self {
            plan,
            geom,
            onboard,
            angular_cov,
            kernel_f,
            kernel_t,
            kernel_ft,
            noise_var: cfg.noise_var(),
            gain_element: s.gain_element,
            gain_user: s.gain_user,
            n_frames: cfg.n_frames(),
            n_feeds: cfg.n_feeds(),
            max_power: s.max_power,
            subband_width: cfg.bands.subband_width_hz,
            refractive_index: s.refractive_index,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.plan.n_bands()
    }
    pub fn n_subbands(&self) -> usize {
        self.plan.subband_freqs[0].len()
    }
    pub fn n_elements(&self) -> usize {
        self.geom.elements.len()
    }

    /// Same tables with the multipath covariance removed (LoS + noise only).
    pub fn without_multipath(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.angular_cov {
            v.fill(Complex64::new(0.0, 0.0));
        }
        out
    }
}

pub fn onboard_gain(f: f64, p_src: &Point, p_dst: &Point, n_r: f64) -> Complex64 {
    let d = (p_dst - p_src).norm();
    Complex64::from_polar(1.0, -2.0 * PI * n_r * f / SPEED_OF_LIGHT * d)
}

/// Free-space LoS gain `c g_E g_U e^{-i 2π f d / c} / (4π f d)`.
pub fn los_gain(f: f64, p_user: &Point, p_elem: &Point, g_e: f64, g_u: f64) -> Result<Complex64> {
    let d = (p_user - p_elem).norm();
    if d <= MIN_DISTANCE {
        return Err(Error::CoincidentPoints { distance: d });
    }
    Ok(los_from_distance(f, d, g_e * g_u))
}

fn los_from_distance(f: f64, d: f64, gain: f64) -> Complex64 {
    Complex64::from_polar(SPEED_OF_LIGHT * gain / (4.0 * PI * f * d), -2.0 * PI * f / SPEED_OF_LIGHT * d)
}

/// `N_S x N_E` LoS gains of band `band` for a user at `p`.
pub fn los_matrix(band: usize, tables: &ChannelTables, p: &Point) -> Result<CMat> {
    let freqs = &tables.plan.subband_freqs[band];
    let elems = &tables.geom.elements;
    let gain = tables.gain_element * tables.gain_user;
    let mut h = CMat::zeros(freqs.len(), elems.len());
    for (m, pe) in elems.iter().enumerate() {
        let d = (p - pe).norm();
        if d <= MIN_DISTANCE {
            return Err(Error::CoincidentPoints { distance: d });
        }
        for (j, &f) in freqs.iter().enumerate() {
            h[(j, m)] = los_from_distance(f, d, gain);
        }
    }
    Ok(h)
}

/// `∂ H^LoS / ∂ p_axis`, via `∂h/∂p_u = ((p_u - e_u)/d) (-1/d - i 2π f / c) h`.
pub fn los_matrix_grad(band: usize, axis: usize, tables: &ChannelTables, p: &Point) -> Result<CMat> {
    let mut unit = Point::zeros();
    unit[axis] = 1.0;
    los_matrix_dgrad(band, &unit, tables, p)
}

/// Derivative of `H^LoS` along the unit vector `dir`.
pub fn los_matrix_dgrad(band: usize, dir: &Point, tables: &ChannelTables, p: &Point) -> Result<CMat> {
    let h = los_matrix(band, tables, p)?;
    let freqs = &tables.plan.subband_freqs[band];
    let mut out = h;
    for (m, pe) in tables.geom.elements.iter().enumerate() {
        let d = (p - pe).norm();
        let proj = dir.dot(&(p - pe)) / d;
        for (j, &f) in freqs.iter().enumerate() {
            out[(j, m)] *= proj * Complex64::new(-1.0 / d, -2.0 * PI * f / SPEED_OF_LIGHT);
        }
    }
    Ok(out)
}

/// Unit vector for azimuth `az` and elevation `el` (x is the board normal).
pub fn direction(az: f64, el: f64) -> Point {
    Point::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

pub fn array_response(f: f64, geom: &RhsGeometry, g_e: f64, az: f64, el: f64) -> CVec {
    let n = direction(az, el);
    let k = 2.0 * PI * f / SPEED_OF_LIGHT;
    let p1 = geom.elements[0];
    CVec::from_iterator(
        geom.elements.len(),
        geom.elements.iter().map(|pm| Complex64::from_polar(g_e, k * (pm - p1).dot(&n))),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct AngularProfile {
    pub spread_deg: f64,
    /// Gauss–Legendre nodes on each half of each angular axis.
    pub nodes: usize,
}

/// Nodes and weights over `[-π/2, π/2]`, split at the Laplace cusp.
fn split_axis(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut x, mut w) = gauss_legendre(n, -PI / 2.0, 0.0);
    let (x2, w2) = gauss_legendre(n, 0.0, PI / 2.0);
    x.extend(x2);
    w.extend(w2);
    (x, w)
}

/// Average per-element LoS power over a fixed ROI sample set at the center
/// sub-band of `band`.
pub fn roi_average_los_power(band: usize, plan: &BandPlan, geom: &RhsGeometry, roi: &RoiBox, gain: f64) -> f64 {
    let ns = plan.subband_freqs[band].len();
    let f = plan.subband_freqs[band][(ns - 1) / 2];
    let samples = sample_positions(roi, POWER_ANCHOR_SAMPLES, POWER_ANCHOR_SEED);
    let mut acc = 0.0;
    for p in &samples {
        let per_elem: f64 = geom
            .elements
            .iter()
            .map(|e| los_from_distance(f, (p - e).norm().max(MIN_DISTANCE), gain).norm_sqr())
            .sum::<f64>()
            / geom.elements.len() as f64;
        acc += per_elem;
    }
    acc / samples.len() as f64
}

/// Multipath spatial covariance `V_i`: quadrature of `a aᴴ` against a
/// separable Laplacian power-angle profile over the front hemisphere,
/// normalized so each diagonal entry equals the ROI-average LoS power.
pub fn angular_covariance(
    band: usize,
    plan: &BandPlan,
    geom: &RhsGeometry,
    profile: &AngularProfile,
    roi: &RoiBox,
    g_e: f64,
    g_u: f64,
) -> Result<CMat> {
    if profile.nodes == 0 {
        return Err(Error::InvalidConfig("quadrature needs at least one node".into()));
    }
    let f = plan.centers[band];
    let b = profile.spread_deg.to_radians() / 2f64.sqrt();
    let laplace = |x: f64| (-x.abs() / b).exp() / (2.0 * b);
    let (xs, ws) = split_axis(profile.nodes);
    let n_e = geom.elements.len();
    let n_nodes = xs.len() * xs.len();
    let mut a = CMat::zeros(n_e, n_nodes);
    let mut total = 0.0;
    let mut col = 0;
    for (&az, &waz) in xs.iter().zip(&ws) {
        for (&el, &wel) in xs.iter().zip(&ws) {
            let weight = waz * wel * laplace(az) * laplace(el);
            total += weight;
            let resp = array_response(f, geom, g_e, az, el);
            a.set_column(col, &(resp * Complex64::from(weight.sqrt())));
            col += 1;
        }
    }
    let mut v = &a * a.adjoint();
    let target = roi_average_los_power(band, plan, geom, roi, g_e * g_u);
    v *= Complex64::from(target / (g_e * g_e * total));
    // Exact Hermitian symmetry and a real diagonal.
    let v = (&v + v.adjoint()).scale(0.5);
    Ok(v)
}

pub fn rho_f(cfg_spread: f64, f1: f64, f2: f64) -> Complex64 {
    (Complex64::from(1.0) + I * (2.0 * PI * cfg_spread * (f1 - f2))).inv()
}

pub fn rho_t(doppler: f64, frame_duration: f64, q1: usize, q2: usize) -> f64 {
    bessel_j0(2.0 * PI * doppler * (q1 as f64 - q2 as f64) * frame_duration)
}

/// `(K_f, K_t, K_ft)` for one band, with `K_ft = K_f ⊗ K_t`.
pub fn kernels(band: usize, cfg: &SystemConfig, plan: &BandPlan) -> (CMat, RMat, CMat) {
    let freqs = &plan.subband_freqs[band];
    let spread = cfg.delay_spread(band);
    let kf = CMat::from_fn(freqs.len(), freqs.len(), |a, b| {
        if a == b {
            Complex64::from(1.0)
        } else {
            rho_f(spread, freqs[a], freqs[b])
        }
    });
    let doppler = cfg.system.max_speed_mps * plan.centers[band] / SPEED_OF_LIGHT;
    let q = cfg.n_frames();
    let kt = RMat::from_fn(q, q, |a, b| rho_t(doppler, cfg.system.frame_duration_s, a, b));
    let kft = kron(&kf, &kt.map(Complex64::from));
    (kf, kt, kft)
}

/// `T_i`: row block `j` is `C_i ⊙ (S_{i,j} B_{i,j})`.
pub fn assemble_t(band: usize, bf: &Beamforming, tables: &ChannelTables) -> Result<CMat> {
    let c = &bf.configs[band];
    let q = c.nrows();
    let n_e = tables.n_elements();
    let ns = tables.n_subbands();
    if c.ncols() != n_e || bf.combiners[band].len() != ns {
        return Err(Error::DimensionMismatch {
            op: "assemble_t",
            detail: format!("C is {:?}, {} combiners, expected N_E = {n_e}, N_S = {ns}", c.shape(), bf.combiners[band].len()),
        });
    }
    let mut t = CMat::zeros(ns * q, n_e);
    for (j, s) in bf.combiners[band].iter().enumerate() {
        let b = &tables.onboard[band][j];
        if s.nrows() != q || s.ncols() != b.nrows() {
            return Err(Error::DimensionMismatch {
                op: "assemble_t",
                detail: format!("S[{band}][{j}] is {:?}, expected {q} x {}", s.shape(), b.nrows()),
            });
        }
        let sb = s * b;
        for r in 0..q {
            for m in 0..n_e {
                t[(j * q + r, m)] = sb[(r, m)] * c[(r, m)];
            }
        }
    }
    Ok(t)
}

/// `diag((H ⊗ 1_Q) Tᵀ)` for an `N_S x N_E` matrix `h`.
pub(crate) fn replicated_diag(h: &CMat, t: &CMat, q: usize) -> CVec {
    CVec::from_fn(t.nrows(), |r, _| {
        let j = r / q;
        (0..t.ncols()).map(|m| h[(j, m)] * t[(r, m)]).sum()
    })
}

/// Noiseless mean signal `ŷ_i` for a user at `p`.
pub fn mean_signal(band: usize, p: &Point, bf: &Beamforming, tables: &ChannelTables) -> Result<CVec> {
    let h = los_matrix(band, tables, p)?;
    let t = assemble_t(band, bf, tables)?;
    Ok(replicated_diag(&h, &t, tables.n_frames))
}

/// One realization of the random parts of the received signal.
#[derive(Clone, Debug)]
pub struct Realization {
    /// Per band, `(N_S Q) x N_E` multipath gains, when drawn.
    pub multipath: Option<Vec<CMat>>,
    /// Per band, `N_S Q` thermal noise samples, when drawn.
    pub noise: Option<Vec<CVec>>,
}

fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Kronecker-structured square-root factors `(kron(L_f, L_t), L_V)` of band
/// `band`'s multipath covariance.
pub fn multipath_factors(band: usize, tables: &ChannelTables) -> Result<(CMat, CMat)> {
    let lf = psd_sqrt_factor(&tables.kernel_f[band])?;
    let lt = psd_sqrt_factor(&tables.kernel_t[band].map(Complex64::from))?;
    let lv = psd_sqrt_factor(&tables.angular_cov[band])?;
    Ok((kron(&lf, &lt), lv))
}

/// Draws multipath and noise. Each band uses its own ChaCha stream, so draws
/// across bands are independent and a band's draw does not depend on how
/// many bands exist.
pub fn draw_realization(
    tables: &ChannelTables,
    include_multipath: bool,
    include_noise: bool,
    seed: u64,
) -> Result<Realization> {
    let n_b = tables.n_bands();
    let rows = tables.n_subbands() * tables.n_frames;
    let n_e = tables.n_elements();
    let multipath = if include_multipath {
        let mut out = Vec::with_capacity(n_b);
        for i in 0..n_b {
            let (lr, lv) = multipath_factors(i, tables)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * i as u64);
            let z = CMat::from_fn(rows, n_e, |_, _| complex_normal(&mut rng));
            out.push(&lr * z * lv.transpose());
        }
        Some(out)
    } else {
        None
    };
    let noise = include_noise.then(|| {
        let sd = tables.noise_var.sqrt();
        (0..n_b)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(2 * i as u64 + 1);
                CVec::from_fn(rows, |_, _| complex_normal(&mut rng) * sd)
            })
            .collect()
    });
    Ok(Realization { multipath, noise })
}

/// Received signals from given draws: row `i` is
/// `diag((H_i^LoS ⊗ 1_Q + H_i^MP) T_iᵀ) + e_i` with unit transmit symbol.
pub fn received_from(p: &Point, bf: &Beamforming, tables: &ChannelTables, draws: &Realization) -> Result<CMat> {
    let n_b = tables.n_bands();
    let q = tables.n_frames;
    let rows = tables.n_subbands() * q;
    let mut y = CMat::zeros(n_b, rows);
    for i in 0..n_b {
        let h = los_matrix(i, tables, p)?;
        let t = assemble_t(i, bf, tables)?;
        let mut yi = replicated_diag(&h, &t, q);
        if let Some(mp) = &draws.multipath {
            yi += mp[i].component_mul(&t).column_sum();
        }
        if let Some(noise) = &draws.noise {
            yi += &noise[i];
        }
        y.set_row(i, &yi.transpose());
    }
    Ok(y)
}

pub fn synth_received(
    p: &Point,
    bf: &Beamforming,
    tables: &ChannelTables,
    include_multipath: bool,
    include_noise: bool,
    seed: u64,
) -> Result<CMat> {
    let draws = draw_realization(tables, include_multipath, include_noise, seed)?;
    received_from(p, bf, tables, &draws)
}

/// Effective radiating rows `t_j = c ⊙ (s_j B_{i,j})` for one band.
pub fn effective_rows(band: usize, c: &[f64], s: &[CVec], tables: &ChannelTables) -> Vec<CVec> {
    s.iter()
        .enumerate()
        .map(|(j, sj)| {
            let sb = tables.onboard[band][j].transpose() * sj;
            CVec::from_fn(c.len(), |m, _| sb[m] * c[m])
        })
        .collect()
}

/// Capacity of band `band` in bits/s for radiating rows `t_rows` (one per
/// sub-band), counting LoS and multipath received power.
pub fn capacity(band: usize, t_rows: &[CVec], p: &Point, tables: &ChannelTables) -> Result<f64> {
    let h = los_matrix(band, tables, p)?;
    let v = &tables.angular_cov[band];
    let mut r = 0.0;
    for (j, t) in t_rows.iter().enumerate() {
        if t.len() != h.ncols() {
            return Err(Error::DimensionMismatch {
                op: "capacity",
                detail: format!("row length {} vs N_E = {}", t.len(), h.ncols()),
            });
        }
        let los: Complex64 = (0..t.len()).map(|m| t[m] * h[(j, m)]).sum();
        let mp = (t.transpose() * v * t.conjugate())[(0, 0)].re;
        let snr = (los.norm_sqr() + mp.max(0.0)) / tables.noise_var;
        r += tables.subband_width * (1.0 + snr).log2();
    }
    Ok(r)
}

pub fn zero_vector(n: usize) -> CVec {
    DVector::from_element(n, Complex64::new(0.0, 0.0))
}
