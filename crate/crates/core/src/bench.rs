//! Reference beamformers and competing optimizers: joint gradient descent,
//! a real-coded genetic algorithm, scanning focused beams and random beams.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{los_matrix, onboard_gain, Beamforming, ChannelTables};
use crate::error::{Error, Result};
use crate::fisher::avg_crlb;
use crate::linx::{CMat, CVec, RMat, SPEED_OF_LIGHT};
use crate::opt::{self, init_vars, project_power, Block, OptSettings, OptState, OptTrace, SampledCrlb};
use crate::scene::{Point, RoiBox, SystemConfig};

const GA_STREAM: u64 = 7;
const RANDOM_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Alt,
    Gd,
    Ga,
    Directional,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Alt, Method::Gd, Method::Ga, Method::Directional, Method::Random];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Alt => "alt",
            Method::Gd => "gd",
            Method::Ga => "ga",
            Method::Directional => "directional",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}' (expected alt|gd|ga|directional|random)")))
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub method: Method,
    pub beamforming: Beamforming,
    /// average CRLB over the optimization samples
    pub avg_crlb: f64,
    pub wall_ms: f64,
    pub seed: u64,
    pub trace: Option<OptTrace>,
}

/// Joint descent on `(C, Re S, Im S)` with `2 ρ_max N_upd` step attempts,
/// started from the same point as [`opt::alternate`].
pub fn direct_gd(cfg: &SystemConfig, tables: &ChannelTables, samples: &[Point], seed: u64) -> Result<BenchResult> {
    let start = Instant::now();
    let settings = OptSettings::from_config(cfg);
    let obj = SampledCrlb { samples, tables };
    let mut bf = init_vars(cfg, seed)?;
    let f0 = opt::Objective::value(&obj, &bf)?;
    let mut state = OptState::new(f0, &settings);
    let mut trace = OptTrace { initial_objective: f0, rows: Vec::new() };
    for chunk in 1..=2 * settings.max_outer_iters {
        opt::run_phase(&mut bf, &obj, Block::Joint, &settings, &mut state, settings.updates_per_subproblem, &mut trace, chunk, "joint")?;
    }
    Ok(BenchResult {
        method: Method::Gd,
        avg_crlb: trace.final_objective(),
        beamforming: bf,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        seed,
        trace: Some(trace),
    })
}

/// Outcome of a genetic run: the result plus the best objective after each
/// generation (index 0 is the initial population).
#[derive(Clone, Debug)]
pub struct GaRun {
    pub result: BenchResult,
    pub best_history: Vec<f64>,
}

fn fitness(bf: &Beamforming, samples: &[Point], tables: &ChannelTables) -> f64 {
    avg_crlb(samples, bf, tables).ok().filter(|v| v.is_finite()).unwrap_or(f64::INFINITY)
}

fn genes(bf: &Beamforming) -> Vec<f64> {
    let mut g = bf.configs_to_vec();
    g.extend(bf.combiners_to_vec());
    g
}

fn from_genes(template: &Beamforming, g: &[f64], p_max: f64) -> Result<Beamforming> {
    let mut bf = template.clone();
    let n_c: usize = bf.configs.iter().map(|c| c.len()).sum();
    let clipped: Vec<f64> = g[..n_c].iter().map(|v| v.clamp(0.0, 1.0)).collect();
    bf.set_configs_from(&clipped);
    bf.set_combiners_from(&g[n_c..]);
    project_power(&bf, p_max)
}

/// Real-coded GA with tournament selection, uniform crossover, Gaussian
/// mutation on every gene and one elite.
pub fn genetic(cfg: &SystemConfig, tables: &ChannelTables, samples: &[Point], seed: u64) -> Result<GaRun> {
    let start = Instant::now();
    let o = &cfg.optimizer;
    let p_max = cfg.system.max_power;
    if o.ga_population < 2 || o.ga_tournament == 0 || o.ga_elitism >= o.ga_population {
        return Err(Error::InvalidConfig("GA needs population ≥ 2, tournament ≥ 1 and elitism < population".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(GA_STREAM);

    let first = init_vars(cfg, seed)?;
    let mut pop = vec![first.clone()];
    while pop.len() < o.ga_population {
        pop.push(random_beams(cfg, rng.random())?);
    }
    let mut scores: Vec<f64> = pop.par_iter().map(|b| fitness(b, samples, tables)).collect();
    let best_of = |scores: &[f64]| {
        (0..scores.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).expect("non-empty population")
    };
    let mut best_history = vec![scores[best_of(&scores)]];

    for _ in 0..o.ga_generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let mut next: Vec<Beamforming> = order[..o.ga_elitism].iter().map(|&k| pop[k].clone()).collect();
        let tournament = |rng: &mut ChaCha8Rng| {
            (0..o.ga_tournament)
                .map(|_| rng.random_range(0..pop.len()))
                .min_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .expect("tournament size ≥ 1")
        };
        while next.len() < o.ga_population {
            let pa = genes(&pop[tournament(&mut rng)]);
            let pb = genes(&pop[tournament(&mut rng)]);
            let child: Vec<f64> = pa
                .iter()
                .zip(&pb)
                .map(|(a, b)| {
                    let gene = if rng.random::<f64>() < o.ga_crossover { *b } else { *a };
                    gene + o.ga_mutation_sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            next.push(from_genes(&first, &child, p_max)?);
        }
        pop = next;
        scores = pop.par_iter().map(|b| fitness(b, samples, tables)).collect();
        best_history.push(scores[best_of(&scores)]);
    }
    let k = best_of(&scores);
    if !scores[k].is_finite() {
        return Err(Error::NonFinite("genetic algorithm best objective"));
    }
    Ok(GaRun {
        result: BenchResult {
            method: Method::Ga,
            beamforming: pop[k].clone(),
            avg_crlb: scores[k],
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            seed,
            trace: None,
        },
        best_history,
    })
}

const REFERENCE_PHASES: usize = 32;

/// Focused beam towards `target` on band `band`. The configuration is the
/// amplitude hologram `½(1 + cos(φ_m - ψ))` of the feed-1 path phase plus
/// the LoS phase `φ_m`; the free reference offset `ψ` is scanned and the
/// one with the largest matched LoS power kept. Combiners conjugate-match
/// the effective feed channel of each sub-band with power `P/N_S` each.
pub fn focus_beam(band: usize, target: &Point, tables: &ChannelTables) -> Result<(Vec<f64>, Vec<CVec>)> {
    let geom = &tables.geom;
    let f_c = tables.plan.centers[band];
    let ref_feed = &geom.feeds[0];
    let h = los_matrix(band, tables, target)?;
    let ns = tables.n_subbands();
    let phase: Vec<f64> = geom
        .elements
        .iter()
        .map(|pe| {
            let kappa = onboard_gain(f_c, ref_feed, pe, tables.refractive_index);
            let los = Complex64::from_polar(1.0, -2.0 * PI * f_c / SPEED_OF_LIGHT * (target - pe).norm());
            (kappa * los).arg()
        })
        .collect();
    let feed_channels = |c: &[f64]| -> Vec<CVec> {
        (0..ns)
            .map(|j| {
                let b = &tables.onboard[band][j];
                CVec::from_fn(b.nrows(), |k, _| (0..b.ncols()).map(|m| b[(k, m)] * c[m] * h[(j, m)]).sum())
            })
            .collect()
    };
    let mut best: Option<(f64, Vec<f64>, Vec<CVec>)> = None;
    for r in 0..REFERENCE_PHASES {
        let psi = 2.0 * PI * r as f64 / REFERENCE_PHASES as f64;
        let c: Vec<f64> = phase.iter().map(|p| 0.5 * (1.0 + (p - psi).cos())).collect();
        let g = feed_channels(&c);
        let gain: f64 = g.iter().map(|v| v.norm()).sum();
        if best.as_ref().is_none_or(|(b, _, _)| gain > *b) {
            best = Some((gain, c, g));
        }
    }
    let (_, c, g) = best.expect("at least one reference phase");
    let per_band = tables.max_power / ns as f64;
    let s = g
        .into_iter()
        .map(|g| {
            let n = g.norm();
            if n > 0.0 {
                g.conjugate() * Complex64::from(per_band.sqrt() / n)
            } else {
                CVec::from_element(g.len(), Complex64::from((per_band / g.len() as f64).sqrt()))
            }
        })
        .collect();
    Ok((c, s))
}

/// Lattice of `n³` points covering the ROI, `n = ⌈Q^{1/3}⌉`, row-major
/// over x, y, z.
pub fn scan_lattice(roi: &RoiBox, n_frames: usize) -> Vec<Point> {
    let mut n = 1;
    while n * n * n < n_frames {
        n += 1;
    }
    let mut pts = Vec::with_capacity(n * n * n);
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                let frac = Point::new(ix as f64, iy as f64, iz as f64).map(|v| (v + 0.5) / n as f64 - 0.5);
                pts.push(roi.center + roi.dims.component_mul(&frac));
            }
        }
    }
    pts
}

/// Frame `q` of every band carries the focused beam towards lattice point `q`.
pub fn directional_beams(cfg: &SystemConfig, tables: &ChannelTables) -> Result<Beamforming> {
    let q = cfg.n_frames();
    let targets = scan_lattice(&cfg.roi_box(), q);
    let (nb, ns, kf, ne) = (cfg.n_bands(), cfg.n_subbands(), cfg.n_feeds(), cfg.n_elements());
    let mut configs = vec![RMat::zeros(q, ne); nb];
    let mut combiners = vec![vec![CMat::zeros(q, kf); ns]; nb];
    for i in 0..nb {
        for (qq, target) in targets.iter().take(q).enumerate() {
            let (c, s) = focus_beam(i, target, tables)?;
            for m in 0..ne {
                configs[i][(qq, m)] = c[m];
            }
            for (j, sj) in s.iter().enumerate() {
                for k in 0..kf {
                    combiners[i][j][(qq, k)] = sj[k];
                }
            }
        }
    }
    Ok(Beamforming { configs, combiners })
}

/// `C ~ U(0,1)` and constant-magnitude combiners with uniform phases.
pub fn random_beams(cfg: &SystemConfig, seed: u64) -> Result<Beamforming> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(RANDOM_STREAM);
    let (nb, ns, q, kf, ne) = (cfg.n_bands(), cfg.n_subbands(), cfg.n_frames(), cfg.n_feeds(), cfg.n_elements());
    let mag = (cfg.system.max_power / (ns * kf) as f64).sqrt();
    let configs = (0..nb).map(|_| RMat::from_fn(q, ne, |_, _| rng.random::<f64>())).collect();
    let combiners = (0..nb)
        .map(|_| {
            (0..ns)
                .map(|_| CMat::from_fn(q, kf, |_, _| Complex64::from_polar(mag, rng.random_range(0.0..2.0 * PI))))
                .collect()
        })
        .collect();
    project_power(&Beamforming { configs, combiners }, cfg.system.max_power)
}

fn fixed_result(
    method: Method,
    bf: Beamforming,
    samples: &[Point],
    tables: &ChannelTables,
    seed: u64,
    start: Instant,
) -> Result<BenchResult> {
    let avg = avg_crlb(samples, &bf, tables)?;
    Ok(BenchResult { method, beamforming: bf, avg_crlb: avg, wall_ms: start.elapsed().as_secs_f64() * 1e3, seed, trace: None })
}

/// Run one method end to end.
pub fn run_method(
    method: Method,
    cfg: &SystemConfig,
    tables: &ChannelTables,
    samples: &[Point],
    seed: u64,
) -> Result<BenchResult> {
    let start = Instant::now();
    match method {
        Method::Alt => {
            let (bf, trace) = opt::alternate(cfg, tables, samples, seed)?;
            Ok(BenchResult {
                method,
                avg_crlb: trace.final_objective(),
                beamforming: bf,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                seed,
                trace: Some(trace),
            })
        }
        Method::Gd => direct_gd(cfg, tables, samples, seed),
        Method::Ga => Ok(genetic(cfg, tables, samples, seed)?.result),
        Method::Directional => fixed_result(method, directional_beams(cfg, tables)?, samples, tables, seed, start),
        Method::Random => fixed_result(method, random_beams(cfg, seed)?, samples, tables, seed, start),
    }
}
