//! Alternating optimization of the analog configurations and digital
//! combiners: trust-region Steihaug-CG steps, a log barrier keeping `C`
//! inside `(0,1)`, and projection of `S` back onto the per-frame power
//! sphere after every step.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::{Beamforming, ChannelTables};
use crate::error::{Error, Result};
use crate::fisher::avg_crlb;
use crate::grad::{avg_crlb_with_grad, GradC, GradS};
use crate::linx::{CMat, RMat};
use crate::scene::{Point, SystemConfig};

const CONFIG_MARGIN: f64 = 1e-3;
const MU_FLOOR: f64 = 1e-12;
const CG_MAX_ITERS: usize = 25;
const HVP_STEP: f64 = 1e-7;
const FRACTION_TO_BOUNDARY: f64 = 0.995;
const UNCHANGED_TOL: f64 = 1e-12;

/// Something to minimize over a beamforming.
pub trait Objective: Sync {
    fn value(&self, bf: &Beamforming) -> Result<f64>;
    fn value_grad(&self, bf: &Beamforming, want_c: bool, want_s: bool) -> Result<(f64, Option<GradC>, Option<GradS>)>;
}

/// Average CRLB over a fixed sample set.
pub struct SampledCrlb<'a> {
    pub samples: &'a [Point],
    pub tables: &'a ChannelTables,
}

impl Objective for SampledCrlb<'_> {
    fn value(&self, bf: &Beamforming) -> Result<f64> {
        avg_crlb(self.samples, bf, self.tables)
    }

    fn value_grad(&self, bf: &Beamforming, want_c: bool, want_s: bool) -> Result<(f64, Option<GradC>, Option<GradS>)> {
        avg_crlb_with_grad(self.samples, bf, self.tables, want_c, want_s)
    }
}

#[derive(Clone, Debug)]
pub struct OptSettings {
    pub max_outer_iters: usize,
    pub updates_per_subproblem: usize,
    pub barrier_mu0: f64,
    pub barrier_shrink: f64,
    pub tr_radius0: f64,
    pub max_power: f64,
}

impl OptSettings {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        let o = &cfg.optimizer;
        Self {
            max_outer_iters: o.max_outer_iters,
            updates_per_subproblem: o.updates_per_subproblem,
            barrier_mu0: o.barrier_mu0,
            barrier_shrink: o.barrier_shrink,
            tr_radius0: o.tr_radius0,
            max_power: cfg.system.max_power,
        }
    }
}

/// Which variables a descent run moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Configs,
    Combiners,
    Joint,
}

impl Block {
    fn has_c(self) -> bool {
        matches!(self, Block::Configs | Block::Joint)
    }

    fn has_s(self) -> bool {
        matches!(self, Block::Combiners | Block::Joint)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Trust radii and barrier weight carried between sub-problem calls.
#[derive(Clone, Debug, Default)]
pub struct OptState {
    pub radius: [Option<f64>; 3],
    pub mu: f64,
}

impl OptState {
    pub fn new(initial_objective: f64, settings: &OptSettings) -> Self {
        Self { radius: [None; 3], mu: (settings.barrier_mu0 * initial_objective.abs()).max(MU_FLOOR) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub phase: String,
    /// true objective, barrier excluded
    pub objective: f64,
    pub grad_norm: f64,
    pub mu: f64,
    pub radius: f64,
    pub step_norm: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OptTrace {
    pub initial_objective: f64,
    pub rows: Vec<TraceRow>,
}

impl OptTrace {
    pub fn objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial_objective).chain(self.rows.iter().map(|r| r.objective)).collect()
    }

    pub fn is_monotone(&self, tol: f64) -> bool {
        self.objectives().windows(2).all(|w| w[1] <= w[0] + tol)
    }

    pub fn final_objective(&self) -> f64 {
        self.rows.last().map_or(self.initial_objective, |r| r.objective)
    }
}

/// Scale every `(band, frame)` group of combiner rows to power `p_max`.
pub fn project_power(bf: &Beamforming, p_max: f64) -> Result<Beamforming> {
    let mut out = bf.clone();
    for i in 0..bf.n_bands() {
        for q in 0..bf.configs[i].nrows() {
            let power = bf.frame_power(i, q);
            if !(power > 0.0) || !power.is_finite() {
                return Err(Error::ZeroPowerGroup { band: i, frame: q });
            }
            let scale = Complex64::from((p_max / power).sqrt());
            for s in &mut out.combiners[i] {
                for k in 0..s.ncols() {
                    s[(q, k)] *= scale;
                }
            }
        }
    }
    Ok(out)
}

/// Random configurations inside `[1e-3, 1 - 1e-3]` and constant combiners
/// projected onto the power sphere.
pub fn init_vars(cfg: &SystemConfig, seed: u64) -> Result<Beamforming> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nb, ns, q, kf, ne) = (cfg.n_bands(), cfg.n_subbands(), cfg.n_frames(), cfg.n_feeds(), cfg.n_elements());
    let configs = (0..nb)
        .map(|_| RMat::from_fn(q, ne, |_, _| rng.random::<f64>().clamp(CONFIG_MARGIN, 1.0 - CONFIG_MARGIN)))
        .collect();
    let s0 = Complex64::from(cfg.system.max_power.sqrt() / kf as f64);
    let combiners = (0..nb).map(|_| (0..ns).map(|_| CMat::from_element(q, kf, s0)).collect()).collect();
    project_power(&Beamforming { configs, combiners }, cfg.system.max_power)
}

/// Result of one truncated-CG trust-region subproblem.
#[derive(Clone, Debug)]
pub struct TrStep {
    pub d: Vec<f64>,
    /// `gᵀd`
    pub gd: f64,
    /// `dᵀHd`
    pub dhd: f64,
    pub hit_boundary: bool,
    pub iterations: usize,
}

impl TrStep {
    /// Decrease `-(gᵀd + ½dᵀHd)` of the quadratic model.
    pub fn model_decrease(&self) -> f64 {
        -(self.gd + 0.5 * self.dhd)
    }

    fn scaled(mut self, tau: f64) -> Self {
        for v in &mut self.d {
            *v *= tau;
        }
        self.gd *= tau;
        self.dhd *= tau * tau;
        self
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| alpha * a + b).collect()
}

/// Positive `τ` with `‖z + τ d‖ = radius`.
fn to_boundary(z: &[f64], d: &[f64], radius: f64) -> f64 {
    let a = dot(d, d);
    let b = 2.0 * dot(z, d);
    let c = dot(z, z) - radius * radius;
    (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)
}

/// Steihaug truncated CG on `min gᵀd + ½dᵀHd` subject to `‖d‖ ≤ radius`.
pub fn tr_cg_step<H>(g: &[f64], mut hvp: H, radius: f64) -> Result<TrStep>
where
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!("trust radius must be positive, got {radius}")));
    }
    let n = g.len();
    let g_norm = norm(g);
    if !g_norm.is_finite() {
        return Err(Error::NonFinite("trust-region gradient"));
    }
    let mut z = vec![0.0; n];
    let mut hz = vec![0.0; n];
    if g_norm == 0.0 {
        return Ok(TrStep { d: z, gd: 0.0, dhd: 0.0, hit_boundary: false, iterations: 0 });
    }
    let tol = 1e-8 * g_norm;
    let mut r = g.to_vec();
    let mut p: Vec<f64> = g.iter().map(|v| -v).collect();
    let finish = |z: Vec<f64>, hz: &[f64], hit_boundary: bool, iterations: usize| -> Result<TrStep> {
        let gd = dot(g, &z);
        let dhd = dot(&z, hz);
        if !(gd.is_finite() && dhd.is_finite()) {
            return Err(Error::NonFinite("trust-region model"));
        }
        Ok(TrStep { d: z, gd, dhd, hit_boundary, iterations })
    };
    for it in 1..=CG_MAX_ITERS {
        let hp = hvp(&p)?;
        let php = dot(&p, &hp);
        if !php.is_finite() {
            return Err(Error::NonFinite("Hessian-vector product"));
        }
        if php <= 0.0 {
            let tau = to_boundary(&z, &p, radius);
            let z_b = axpy(tau, &p, &z);
            let hz_b = axpy(tau, &hp, &hz);
            return finish(z_b, &hz_b, true, it);
        }
        let rr = dot(&r, &r);
        let alpha = rr / php;
        let z_next = axpy(alpha, &p, &z);
        if norm(&z_next) >= radius {
            let tau = to_boundary(&z, &p, radius);
            let z_b = axpy(tau, &p, &z);
            let hz_b = axpy(tau, &hp, &hz);
            return finish(z_b, &hz_b, true, it);
        }
        z = z_next;
        hz = axpy(alpha, &hp, &hz);
        r = axpy(alpha, &hp, &r);
        let rr_next = dot(&r, &r);
        if rr_next.sqrt() <= tol {
            return finish(z, &hz, false, it);
        }
        let beta = rr_next / rr;
        p = axpy(beta, &p, &r.iter().map(|v| -v).collect::<Vec<_>>());
    }
    finish(z, &hz, false, CG_MAX_ITERS)
}

/// Flat-vector view of a beamforming restricted to one block.
struct Layout {
    block: Block,
    n_c: usize,
    /// indices of each `(band, frame)` power group inside the vector
    groups: Vec<Vec<usize>>,
}

impl Layout {
    fn new(block: Block, bf: &Beamforming) -> Self {
        let n_c = if block.has_c() { bf.configs.iter().map(|c| c.len()).sum() } else { 0 };
        let mut groups = Vec::new();
        if block.has_s() {
            let ns = bf.combiners[0].len();
            let q = bf.configs[0].nrows();
            let kf = bf.combiners[0][0].ncols();
            for i in 0..bf.n_bands() {
                for qq in 0..q {
                    let mut idx = Vec::with_capacity(ns * kf * 2);
                    for j in 0..ns {
                        let start = n_c + ((i * ns + j) * q + qq) * kf * 2;
                        idx.extend(start..start + 2 * kf);
                    }
                    groups.push(idx);
                }
            }
        }
        Self { block, n_c, groups }
    }

    fn get(&self, bf: &Beamforming) -> Vec<f64> {
        let mut x = if self.block.has_c() { bf.configs_to_vec() } else { Vec::new() };
        if self.block.has_s() {
            x.extend(bf.combiners_to_vec());
        }
        x
    }

    fn set(&self, bf: &mut Beamforming, x: &[f64]) {
        if self.block.has_c() {
            bf.set_configs_from(&x[..self.n_c]);
        }
        if self.block.has_s() {
            bf.set_combiners_from(&x[self.n_c..]);
        }
    }

    fn grad_vec(&self, gc: Option<GradC>, gs: Option<GradS>) -> Vec<f64> {
        let mut g = gc.map(|g| g.to_vec()).unwrap_or_default();
        if let Some(gs) = gs {
            g.extend(gs.to_vec());
        }
        g
    }

    fn barrier(&self, x: &[f64]) -> f64 {
        -x[..self.n_c].iter().map(|c| c.ln() + (1.0 - c).ln()).sum::<f64>()
    }

    /// Barrier gradient added, radial components of the combiner groups
    /// removed.
    fn reduced(&self, x: &[f64], g: &[f64], mu: f64) -> Vec<f64> {
        let mut out = g.to_vec();
        for k in 0..self.n_c {
            out[k] += mu * (1.0 / (1.0 - x[k]) - 1.0 / x[k]);
        }
        for idx in &self.groups {
            let ss: f64 = idx.iter().map(|&k| x[k] * x[k]).sum();
            let gs: f64 = idx.iter().map(|&k| x[k] * out[k]).sum();
            if ss > 0.0 {
                for &k in idx {
                    out[k] -= gs / ss * x[k];
                }
            }
        }
        out
    }

    /// Largest `τ` with the configuration part of `x + τ d` still in `[0,1]`.
    fn interior_limit(&self, x: &[f64], d: &[f64]) -> f64 {
        let mut tau = f64::INFINITY;
        for k in 0..self.n_c {
            if d[k] < 0.0 {
                tau = tau.min(x[k] / -d[k]);
            } else if d[k] > 0.0 {
                tau = tau.min((1.0 - x[k]) / d[k]);
            }
        }
        tau
    }

    /// Step fraction keeping `C` strictly inside `(0,1)`.
    fn max_fraction(&self, x: &[f64], d: &[f64]) -> f64 {
        (FRACTION_TO_BOUNDARY * self.interior_limit(x, d)).min(1.0)
    }
}

/// Summary of one descent run.
#[derive(Clone, Debug)]
pub struct DescentSummary {
    pub objective: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub attempts: usize,
    pub accepted: usize,
}

/// Up to `n_steps` trust-region step attempts on `block`, updating `bf` in
/// place. A step is kept only when the true objective does not increase.
#[allow(clippy::too_many_arguments)]
pub fn descend(
    bf: &mut Beamforming,
    obj: &dyn Objective,
    block: Block,
    settings: &OptSettings,
    state: &mut OptState,
    n_steps: usize,
) -> Result<DescentSummary> {
    let layout = Layout::new(block, bf);
    let mut x = layout.get(bf);
    let eval = |b: &Beamforming| -> Result<(f64, Vec<f64>)> {
        let (f, gc, gs) = obj.value_grad(b, block.has_c(), block.has_s())?;
        Ok((f, layout.grad_vec(gc, gs)))
    };
    let (mut f, mut g_raw) = eval(bf)?;
    let x_norm0 = norm(&x);
    let radius = state.radius[block.index()].get_or_insert(settings.tr_radius0 * (1.0 + x_norm0));
    let mut mu = if block.has_c() { state.mu } else { 0.0 };
    let mut total_step = vec![0.0; x.len()];
    let (mut attempts, mut accepted) = (0, 0);

    for _ in 0..n_steps {
        // stationary for the true objective: the barrier alone never moves C
        if layout.reduced(&x, &g_raw, 0.0).iter().all(|v| *v == 0.0) {
            break;
        }
        let g = layout.reduced(&x, &g_raw, mu);
        attempts += 1;
        let eps = HVP_STEP * (1.0 + norm(&x));
        let hvp = |v: &[f64]| -> Result<Vec<f64>> {
            let nv = norm(v);
            if nv == 0.0 {
                return Ok(vec![0.0; v.len()]);
            }
            // probes never leave the box, where the barrier is undefined
            let h = eps.min(0.5 * nv * layout.interior_limit(&x, v));
            let xp = axpy(h / nv, v, &x);
            let mut bp = bf.clone();
            layout.set(&mut bp, &xp);
            let (_, gp) = eval(&bp)?;
            let gp = layout.reduced(&xp, &gp, mu);
            Ok(gp.iter().zip(&g).map(|(a, b)| (a - b) * nv / h).collect())
        };
        let step = tr_cg_step(&g, hvp, *radius)?;
        let hit_boundary = step.hit_boundary;
        let tau = layout.max_fraction(&x, &step.d);
        let step = step.scaled(tau);
        let pred = step.model_decrease();

        let mut trial = bf.clone();
        layout.set(&mut trial, &axpy(1.0, &step.d, &x));
        if block.has_s() {
            trial = project_power(&trial, settings.max_power)?;
        }
        let x_trial = layout.get(&trial);
        let f_trial = obj.value(&trial).ok().filter(|v| v.is_finite());

        let ratio = match f_trial {
            Some(ft) if pred > 0.0 => {
                let merit = f + mu * layout.barrier(&x);
                let merit_trial = ft + mu * layout.barrier(&x_trial);
                (merit - merit_trial) / pred
            }
            _ => f64::NEG_INFINITY,
        };
        if ratio < 0.25 {
            *radius *= 0.25;
        } else if ratio > 0.75 && hit_boundary {
            *radius *= 2.0;
        }
        if let Some(ft) = f_trial {
            if ft <= f && ratio > 0.0 {
                for (t, (a, b)) in total_step.iter_mut().zip(x_trial.iter().zip(&x)) {
                    *t += a - b;
                }
                *bf = trial;
                x = x_trial;
                (f, g_raw) = eval(bf)?;
                mu = (mu * settings.barrier_shrink).max(MU_FLOOR);
                accepted += 1;
            }
        }
        if *radius <= f64::EPSILON * (1.0 + norm(&x)) {
            break;
        }
    }
    if block.has_c() {
        state.mu = mu;
    }
    Ok(DescentSummary {
        objective: f,
        grad_norm: norm(&layout.reduced(&x, &g_raw, 0.0)),
        step_norm: norm(&total_step),
        attempts,
        accepted,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_phase(
    bf: &mut Beamforming,
    obj: &dyn Objective,
    block: Block,
    settings: &OptSettings,
    state: &mut OptState,
    n_steps: usize,
    trace: &mut OptTrace,
    iter: usize,
    phase: &str,
) -> Result<DescentSummary> {
    let start = Instant::now();
    let summary = descend(bf, obj, block, settings, state, n_steps)?;
    trace.rows.push(TraceRow {
        iter,
        phase: phase.to_string(),
        objective: summary.objective,
        grad_norm: summary.grad_norm,
        mu: if block.has_c() { state.mu } else { 0.0 },
        radius: state.radius[block.index()].unwrap_or(0.0),
        step_norm: summary.step_norm,
        ms: start.elapsed().as_secs_f64() * 1e3,
    });
    Ok(summary)
}

/// Analog sub-problem: `N_upd` step attempts on `C` with `S` fixed.
pub fn solve_sp1(
    bf: &mut Beamforming,
    obj: &dyn Objective,
    settings: &OptSettings,
    state: &mut OptState,
    trace: &mut OptTrace,
    iter: usize,
) -> Result<DescentSummary> {
    run_phase(bf, obj, Block::Configs, settings, state, settings.updates_per_subproblem, trace, iter, "sp1")
}

/// Digital sub-problem: `N_upd` step attempts on `S` with `C` fixed.
pub fn solve_sp2(
    bf: &mut Beamforming,
    obj: &dyn Objective,
    settings: &OptSettings,
    state: &mut OptState,
    trace: &mut OptTrace,
    iter: usize,
) -> Result<DescentSummary> {
    run_phase(bf, obj, Block::Combiners, settings, state, settings.updates_per_subproblem, trace, iter, "sp2")
}

/// Largest absolute entry change between two beamformings.
pub fn linf_change(a: &Beamforming, b: &Beamforming) -> f64 {
    let dc = a.configs_to_vec().into_iter().zip(b.configs_to_vec()).map(|(x, y)| (x - y).abs());
    let ds = a.combiners_to_vec().into_iter().zip(b.combiners_to_vec()).map(|(x, y)| (x - y).abs());
    dc.chain(ds).fold(0.0, f64::max)
}

/// Alternate the two sub-problems from a given start.
pub fn alternate_from(
    mut bf: Beamforming,
    obj: &dyn Objective,
    settings: &OptSettings,
) -> Result<(Beamforming, OptTrace)> {
    let f0 = obj.value(&bf)?;
    let mut state = OptState::new(f0, settings);
    let mut trace = OptTrace { initial_objective: f0, rows: Vec::new() };
    for rho in 1..=settings.max_outer_iters {
        let before = bf.clone();
        // each sub-problem is a fresh trust-region solve
        state.radius = [None; 3];
        solve_sp1(&mut bf, obj, settings, &mut state, &mut trace, rho)?;
        solve_sp2(&mut bf, obj, settings, &mut state, &mut trace, rho)?;
        if linf_change(&before, &bf) <= UNCHANGED_TOL {
            break;
        }
    }
    Ok((bf, trace))
}

/// Full alternating optimization from the seeded initial point.
pub fn alternate(
    cfg: &SystemConfig,
    tables: &ChannelTables,
    samples: &[Point],
    seed: u64,
) -> Result<(Beamforming, OptTrace)> {
    let bf = init_vars(cfg, seed)?;
    let obj = SampledCrlb { samples, tables };
    alternate_from(bf, &obj, &OptSettings::from_config(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::sample_positions;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn desk() -> (SystemConfig, ChannelTables, Vec<Point>) {
        let cfg = SystemConfig::desk();
        let tables = ChannelTables::build(&cfg).unwrap();
        let samples = sample_positions(&cfg.roi_box(), cfg.roi.n_samples, 11);
        (cfg, tables, samples)
    }

    struct Flat;

    impl Objective for Flat {
        fn value(&self, _: &Beamforming) -> Result<f64> {
            Ok(1.0)
        }

        fn value_grad(&self, bf: &Beamforming, want_c: bool, want_s: bool) -> Result<(f64, Option<GradC>, Option<GradS>)> {
            let gc = GradC(bf.configs.iter().map(|c| RMat::zeros(c.nrows(), c.ncols())).collect());
            let gs = GradS(
                bf.combiners.iter().map(|b| b.iter().map(|s| CMat::zeros(s.nrows(), s.ncols())).collect()).collect(),
            );
            Ok((1.0, want_c.then_some(gc), want_s.then_some(gs)))
        }
    }

    #[test]
    fn init_vars_is_feasible_and_seeded() {
        let cfg = SystemConfig::default();
        let a = init_vars(&cfg, 4).unwrap();
        assert!(a.max_power_residual(cfg.system.max_power) <= 1e-12);
        assert!(a.configs.iter().flat_map(|c| c.iter()).all(|&v| (1e-3..=1.0 - 1e-3).contains(&v)));
        assert_eq!(a, init_vars(&cfg, 4).unwrap());
        assert_ne!(a, init_vars(&cfg, 5).unwrap());
    }

    #[test]
    fn project_power_cases() {
        let cfg = SystemConfig::desk();
        let p = cfg.system.max_power;
        let bf = init_vars(&cfg, 1).unwrap();
        assert_eq!(project_power(&bf, p).unwrap().combiners_to_vec().len(), bf.combiners_to_vec().len());
        let same = project_power(&bf, p).unwrap();
        for (a, b) in same.combiners_to_vec().iter().zip(bf.combiners_to_vec()) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
        let back = project_power(&bf.scale_combiners(2.0), p).unwrap();
        for (a, b) in back.combiners_to_vec().iter().zip(bf.combiners_to_vec()) {
            assert!((a - b).abs() <= 1e-15);
        }
        let mut zero = bf.clone();
        for s in &mut zero.combiners[1] {
            s.row_mut(0).fill(Complex64::new(0.0, 0.0));
        }
        assert!(matches!(project_power(&zero, p), Err(Error::ZeroPowerGroup { band: 1, frame: 0 })));
    }

    fn quad_hvp(h: &DMatrix<f64>) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + '_ {
        move |v: &[f64]| Ok((h * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec())
    }

    #[test]
    fn newton_step_for_identity() {
        let h = DMatrix::<f64>::identity(3, 3);
        let g = [0.1, -0.2, 0.05];
        let s = tr_cg_step(&g, quad_hvp(&h), 10.0).unwrap();
        for (d, gv) in s.d.iter().zip(g) {
            assert!((d + gv).abs() < 1e-15);
        }
        assert!(!s.hit_boundary);
        assert!(tr_cg_step(&g, quad_hvp(&h), 0.0).is_err());
        assert!(tr_cg_step(&[f64::NAN, 0.0, 0.0], quad_hvp(&h), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn steihaug_radius_and_cauchy(
            vals in proptest::collection::vec(-2.0f64..2.0, 16),
            g in proptest::collection::vec(-1.0f64..1.0, 4),
            radius in 0.01f64..5.0,
        ) {
            let a = DMatrix::from_column_slice(4, 4, &vals);
            let h = (&a + a.transpose()) * 0.5;
            let gn = norm(&g);
            prop_assume!(gn > 1e-6);
            let s = tr_cg_step(&g, quad_hvp(&h), radius).unwrap();
            prop_assert!(norm(&s.d) <= radius * (1.0 + 1e-12));
            let h_norm = h.norm().max(1e-300);
            let cauchy = 0.5 * gn * radius.min(gn / h_norm);
            prop_assert!(s.model_decrease() >= cauchy * (1.0 - 1e-9), "{} < {}", s.model_decrease(), cauchy);
        }
    }

    #[test]
    fn flat_objective_leaves_variables_unchanged() {
        let cfg = SystemConfig::desk();
        let settings = OptSettings::from_config(&cfg);
        let bf0 = init_vars(&cfg, 2).unwrap();
        let mut state = OptState::new(1.0, &settings);
        let mut trace = OptTrace::default();
        let mut bf = bf0.clone();
        solve_sp1(&mut bf, &Flat, &settings, &mut state, &mut trace, 1).unwrap();
        solve_sp2(&mut bf, &Flat, &settings, &mut state, &mut trace, 1).unwrap();
        assert_eq!(bf, bf0);
    }

    #[test]
    fn sub_problems_descend_and_stay_feasible() {
        let (cfg, tables, samples) = desk();
        let settings = OptSettings::from_config(&cfg);
        let obj = SampledCrlb { samples: &samples, tables: &tables };
        let mut bf = init_vars(&cfg, 3).unwrap();
        let f0 = obj.value(&bf).unwrap();
        let mut state = OptState::new(f0, &settings);
        let mut trace = OptTrace { initial_objective: f0, rows: vec![] };
        let s1 = solve_sp1(&mut bf, &obj, &settings, &mut state, &mut trace, 1).unwrap();
        assert!(s1.objective <= f0 + 1e-9);
        assert!(bf.configs.iter().flat_map(|c| c.iter()).all(|&v| v > 0.0 && v < 1.0));
        let s2 = solve_sp2(&mut bf, &obj, &settings, &mut state, &mut trace, 1).unwrap();
        assert!(s2.objective <= s1.objective + 1e-9);
        assert!(bf.max_power_residual(cfg.system.max_power) <= 1e-12);
        assert!(s2.objective < f0, "no progress: {f0} -> {}", s2.objective);
        assert!((obj.value(&bf).unwrap() - s2.objective).abs() <= 1e-12 * s2.objective);
    }

    #[test]
    fn alternate_is_monotone_and_deterministic() {
        let (cfg, tables, samples) = desk();
        let (bf, trace) = alternate(&cfg, &tables, &samples, 7).unwrap();
        assert!(trace.is_monotone(1e-9), "{:?}", trace.objectives());
        assert!(trace.rows.len() <= 2 * cfg.optimizer.max_outer_iters);
        assert!(bf.is_feasible(cfg.system.max_power, 1e-12));
        assert!(trace.final_objective() < trace.initial_objective);
        let (bf2, trace2) = alternate(&cfg, &tables, &samples, 7).unwrap();
        assert_eq!(bf, bf2);
        assert_eq!(trace.objectives(), trace2.objectives());
    }
}
