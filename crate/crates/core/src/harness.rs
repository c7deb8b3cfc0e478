//! Experiment orchestration: held-out evaluation, the CRLB-driven position
//! error model, capacity loss of the follow-up focused beam, and the files
//! written for each run.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{focus_beam, run_method, BenchResult, Method};
use crate::channel::{capacity, effective_rows, synth_received, Beamforming, ChannelTables};
use crate::error::{Error, Result};
use crate::fisher::{avg_crlb, fim, fim_inverse};
use crate::grad::gradient_check;
use crate::linx::{CMat, RMat};
use crate::opt::{init_vars, OptTrace};
use crate::scene::{sample_positions, Point, RoiBox, SystemConfig};

pub const BEAMS_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const GRADCHECK_STEP: f64 = 1e-6;

const EVAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const USER_SALT: u64 = 0xc2b2_ae3d_27d4_eb4f;
const ERROR_SALT: u64 = 0x1656_67b1_9e37_79f9;
const HEATMAP_SIDE: usize = 24;

/// Optimization sample set for a seed.
pub fn training_samples(cfg: &SystemConfig, seed: u64) -> Vec<Point> {
    sample_positions(&cfg.roi_box(), cfg.roi.n_samples, seed)
}

/// Held-out sample set, drawn from a stream disjoint from the training one.
pub fn eval_samples(roi: &RoiBox, n_eval: usize, seed: u64) -> Vec<Point> {
    sample_positions(roi, n_eval, seed ^ EVAL_SALT)
}

/// Average CRLB over `n_eval` fresh positions.
pub fn evaluate_avg_crlb(bf: &Beamforming, tables: &ChannelTables, roi: &RoiBox, n_eval: usize, seed: u64) -> Result<f64> {
    avg_crlb(&eval_samples(roi, n_eval, seed), bf, tables)
}

/// Efficient-estimator model: `p_true + g` with `g ~ N(0, F⁻¹)`.
pub fn error_model(p_true: &Point, fim: &Matrix3<f64>, seed: u64) -> Result<Point> {
    let cov = fim_inverse(fim, p_true)?;
    let chol = cov.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Point::from_fn(|_, _| StandardNormal.sample(&mut rng));
    Ok(p_true + chol.l() * z)
}

/// Rate at `p_true` of a beam focused on `p_true` minus that of a beam
/// focused on `p_est`.
pub fn capacity_loss(band: usize, p_true: &Point, p_est: &Point, tables: &ChannelTables) -> Result<f64> {
    let rate = |target: &Point| -> Result<f64> {
        let (c, s) = focus_beam(band, target, tables)?;
        capacity(band, &effective_rows(band, &c, &s, tables), p_true, tables)
    };
    if p_true == p_est {
        return Ok(0.0);
    }
    Ok(rate(p_true)? - rate(p_est)?)
}

/// Capacity losses for users sampled from the ROI, each localized through
/// [`error_model`] under beamforming `bf`. Per-user seeds depend only on the
/// run seed and the user index.
pub fn capacity_losses(
    bf: &Beamforming,
    tables: &ChannelTables,
    roi: &RoiBox,
    band: usize,
    n_users: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if band >= tables.n_bands() {
        return Err(Error::InvalidConfig(format!("band {band} out of range (N_B = {})", tables.n_bands())));
    }
    let users = sample_positions(roi, n_users, seed ^ USER_SALT);
    users
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let eval = fim(p, bf, tables)?;
            let est = error_model(p, &eval.fim, (seed ^ ERROR_SALT).wrapping_add(k as u64))?;
            capacity_loss(band, p, &est, tables)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
    pub n: usize,
}

/// Linear-interpolation quartiles.
pub fn quartiles(values: &[f64]) -> Quartiles {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        if v.is_empty() {
            return f64::NAN;
        }
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Quartiles { q1: at(0.25), median: at(0.5), q3: at(0.75), mean, n: v.len() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Optimize,
    Benchmark,
    Evaluate,
    Gradcheck,
    SampleSignals,
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "optimize" => Command::Optimize,
            "benchmark" => Command::Benchmark,
            "evaluate" => Command::Evaluate,
            "gradcheck" => Command::Gradcheck,
            "sample-signals" => Command::SampleSignals,
            other => return Err(Error::InvalidConfig(format!("unknown command '{other}'"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunRequest {
    pub command: Command,
    pub config: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub method: Method,
    /// zero-based band index for the capacity-loss study
    pub band: usize,
    pub eval_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seed: u64,
    pub avg_crlb_train: f64,
    pub avg_crlb_eval: f64,
    pub wall_ms: f64,
    pub outer_iterations: Option<usize>,
    pub capacity_loss: Option<Quartiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub rel_error_c: f64,
    pub rel_error_s: f64,
    pub step: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub command: Command,
    pub seed: u64,
    pub config: SystemConfig,
    pub methods: Vec<MethodSummary>,
    pub capacity_band: usize,
    pub eval_samples: usize,
    /// how estimated positions are produced for the capacity study
    pub error_model: String,
    pub gradcheck: Option<GradcheckSummary>,
    pub files: Vec<String>,
}

/// Versioned beamforming snapshot. Complex numbers are `[re, im]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamsDoc {
    pub version: u32,
    pub method: String,
    pub seed: u64,
    /// `[band][frame][element]`
    pub configs: Vec<Vec<Vec<f64>>>,
    /// `[band][sub-band][frame][feed]`
    pub combiners: Vec<Vec<Vec<Vec<[f64; 2]>>>>,
}

impl BeamsDoc {
    pub fn from_beamforming(bf: &Beamforming, method: &str, seed: u64) -> Self {
        let configs = bf.configs.iter().map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect()).collect();
        let combiners = bf
            .combiners
            .iter()
            .map(|band| {
                band.iter()
                    .map(|s| s.row_iter().map(|r| r.iter().map(|z| [z.re, z.im]).collect()).collect())
                    .collect()
            })
            .collect();
        Self { version: BEAMS_VERSION, method: method.to_string(), seed, configs, combiners }
    }

    pub fn to_beamforming(&self) -> Result<Beamforming> {
        if self.version != BEAMS_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported beams version {}", self.version)));
        }
        let bad = |what: &str| Error::InvalidConfig(format!("ragged {what} in beams document"));
        let mut configs = Vec::new();
        for band in &self.configs {
            let q = band.len();
            let ne = band.first().map_or(0, |r| r.len());
            if band.iter().any(|r| r.len() != ne) {
                return Err(bad("configs"));
            }
            configs.push(RMat::from_fn(q, ne, |r, m| band[r][m]));
        }
        let mut combiners = Vec::new();
        for band in &self.combiners {
            let mut subs = Vec::new();
            for s in band {
                let q = s.len();
                let kf = s.first().map_or(0, |r| r.len());
                if s.iter().any(|r| r.len() != kf) {
                    return Err(bad("combiners"));
                }
                subs.push(CMat::from_fn(q, kf, |r, k| num_complex::Complex64::new(s[r][k][0], s[r][k][1])));
            }
            combiners.push(subs);
        }
        Ok(Beamforming { configs, combiners })
    }

    /// Shape must match the configuration.
    pub fn check_shape(bf: &Beamforming, cfg: &SystemConfig) -> Result<()> {
        let ok = bf.configs.len() == cfg.n_bands()
            && bf.combiners.len() == cfg.n_bands()
            && bf.configs.iter().all(|c| c.shape() == (cfg.n_frames(), cfg.n_elements()))
            && bf.combiners.iter().all(|b| {
                b.len() == cfg.n_subbands() && b.iter().all(|s| s.shape() == (cfg.n_frames(), cfg.n_feeds()))
            });
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { op: "beams.json", detail: "shape does not match the configuration".into() })
        }
    }
}

#[derive(Serialize)]
struct TraceCsvRow<'a> {
    iter: usize,
    phase: &'a str,
    objective: f64,
    grad_norm: f64,
    mu: f64,
    radius: f64,
    step_norm: f64,
    ms: f64,
    method: &'a str,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>, header_if_empty: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut any = false;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
        any = true;
    }
    if !any {
        w.write_record(header_if_empty).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `iter,phase,objective,grad_norm,mu,radius,step_norm,ms,method`; the
/// initial objective is the `iter = 0`, `phase = init` row.
pub fn trace_csv(traces: &[(Method, &OptTrace)]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for (m, t) in traces {
        rows.push(TraceCsvRow {
            iter: 0,
            phase: "init",
            objective: t.initial_objective,
            grad_norm: f64::NAN,
            mu: f64::NAN,
            radius: f64::NAN,
            step_norm: 0.0,
            ms: 0.0,
            method: m.tag(),
        });
        for r in &t.rows {
            rows.push(TraceCsvRow {
                iter: r.iter,
                phase: &r.phase,
                objective: r.objective,
                grad_norm: r.grad_norm,
                mu: r.mu,
                radius: r.radius,
                step_norm: r.step_norm,
                ms: r.ms,
                method: m.tag(),
            });
        }
    }
    csv_bytes(rows, &["iter", "phase", "objective", "grad_norm", "mu", "radius", "step_norm", "ms", "method"])
}

#[derive(Serialize)]
struct CrlbRow {
    x: f64,
    y: f64,
    z: f64,
    crlb: f64,
}

pub fn crlb_samples_csv(points: &[Point], values: &[f64]) -> Result<Vec<u8>> {
    let rows = points.iter().zip(values).map(|(p, &crlb)| CrlbRow { x: p.x, y: p.y, z: p.z, crlb });
    csv_bytes(rows, &["x", "y", "z", "crlb"])
}

/// Per-sample CRLB (`NaN` where the FIM is singular).
pub fn crlb_per_sample(points: &[Point], bf: &Beamforming, tables: &ChannelTables) -> Vec<f64> {
    points.par_iter().map(|p| fim(p, bf, tables).map_or(f64::NAN, |e| e.crlb)).collect()
}

/// x–y slice of `log10 CRLB` at the ROI mid-height.
pub fn heatmap_svg(bf: &Beamforming, tables: &ChannelTables, roi: &RoiBox) -> String {
    let n = HEATMAP_SIDE;
    let pts: Vec<Point> = (0..n * n)
        .map(|k| {
            let (ix, iy) = (k % n, k / n);
            let fx = (ix as f64 + 0.5) / n as f64 - 0.5;
            let fy = (iy as f64 + 0.5) / n as f64 - 0.5;
            Point::new(roi.center.x + roi.dims.x * fx, roi.center.y + roi.dims.y * fy, roi.center.z)
        })
        .collect();
    let vals: Vec<f64> = crlb_per_sample(&pts, bf, tables).into_iter().map(f64::log10).collect();
    let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cell = 16;
    let size = n * cell;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{}\" viewBox=\"0 0 {size} {}\">\n",
        size + 24,
        size + 24
    );
    for (k, v) in vals.iter().enumerate() {
        let (ix, iy) = (k % n, k / n);
        let color = if v.is_finite() {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let r = (255.0 * t).round() as u8;
            let b = (255.0 * (1.0 - t)).round() as u8;
            format!("rgb({r},64,{b})")
        } else {
            "rgb(128,128,128)".to_string()
        };
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{color}\"/>",
            ix * cell,
            (n - 1 - iy) * cell
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"4\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">log10 CRLB [m^2]: {lo:.2} (blue) .. {hi:.2} (red), z = {:.2} m</text>",
        size + 16,
        roi.center.z
    );
    svg.push_str("</svg>\n");
    svg
}

/// Received signals of a few held-out users: `user,x,y,z,band,row,re,im`.
pub fn signals_csv(points: &[Point], bf: &Beamforming, tables: &ChannelTables, seed: u64) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Row {
        user: usize,
        x: f64,
        y: f64,
        z: f64,
        band: usize,
        row: usize,
        re: f64,
        im: f64,
    }
    let mut rows = Vec::new();
    for (u, p) in points.iter().enumerate() {
        let y = synth_received(p, bf, tables, true, true, seed.wrapping_add(u as u64))?;
        for band in 0..y.ncols() {
            for r in 0..y.nrows() {
                let z = y[(r, band)];
                rows.push(Row { user: u, x: p.x, y: p.y, z: p.z, band, row: r, re: z.re, im: z.im });
            }
        }
    }
    csv_bytes(rows, &["user", "x", "y", "z", "band", "row", "re", "im"])
}

/// Write every file into `dir` through temporary files renamed into place.
pub fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, path) in staged {
        tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
    }
    Ok(())
}

const ERROR_MODEL_NOTE: &str = "estimated positions are drawn as p_true + N(0, FIM^-1) (efficient-estimator model); \
no learned positioning network is involved, so no MSE-reduction figures are claimed";

struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn push(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }
}

fn summarize(
    r: &BenchResult,
    tables: &ChannelTables,
    cfg: &SystemConfig,
    req: &RunRequest,
    with_loss: bool,
) -> Result<MethodSummary> {
    let roi = cfg.roi_box();
    let eval = evaluate_avg_crlb(&r.beamforming, tables, &roi, req.eval_samples, req.seed)?;
    let loss = if with_loss {
        Some(quartiles(&capacity_losses(&r.beamforming, tables, &roi, req.band, req.eval_samples, req.seed)?))
    } else {
        None
    };
    Ok(MethodSummary {
        method: r.method,
        seed: r.seed,
        avg_crlb_train: r.avg_crlb,
        avg_crlb_eval: eval,
        wall_ms: r.wall_ms,
        outer_iterations: r.trace.as_ref().map(|t| t.rows.iter().map(|row| row.iter).max().unwrap_or(0)),
        capacity_loss: loss,
    })
}

fn beams_and_samples(
    out: &mut Outputs,
    r: &BenchResult,
    tables: &ChannelTables,
    cfg: &SystemConfig,
    req: &RunRequest,
) -> Result<()> {
    let doc = BeamsDoc::from_beamforming(&r.beamforming, r.method.tag(), r.seed);
    out.push("beams.json", serde_json::to_vec_pretty(&doc)?);
    let pts = eval_samples(&cfg.roi_box(), req.eval_samples, req.seed);
    let vals = crlb_per_sample(&pts, &r.beamforming, tables);
    out.push("crlb_samples.csv", crlb_samples_csv(&pts, &vals)?);
    out.push("crlb_heatmap.svg", heatmap_svg(&r.beamforming, tables, &cfg.roi_box()).into_bytes());
    Ok(())
}

/// Execute one CLI command. Nothing is written unless the whole command
/// succeeds.
pub fn run_experiment(req: &RunRequest) -> Result<ExperimentReport> {
    let cfg = SystemConfig::from_path(&req.config)?;
    let tables = ChannelTables::build(&cfg)?;
    if req.band >= cfg.n_bands() {
        return Err(Error::InvalidConfig(format!("--band {} out of range (N_B = {})", req.band, cfg.n_bands())));
    }
    if req.eval_samples == 0 {
        return Err(Error::InvalidConfig("--eval-samples must be positive".into()));
    }
    let samples = training_samples(&cfg, req.seed);
    let mut out = Outputs { files: Vec::new() };
    let mut methods = Vec::new();
    let mut gradcheck = None;

    match req.command {
        Command::Optimize => {
            let r = run_method(req.method, &cfg, &tables, &samples, req.seed)?;
            methods.push(summarize(&r, &tables, &cfg, req, false)?);
            if let Some(t) = &r.trace {
                out.push("trace.csv", trace_csv(&[(r.method, t)])?);
            }
            beams_and_samples(&mut out, &r, &tables, &cfg, req)?;
        }
        Command::Benchmark => {
            let results: Vec<BenchResult> = Method::ALL
                .iter()
                .map(|&m| run_method(m, &cfg, &tables, &samples, req.seed))
                .collect::<Result<_>>()?;
            for r in &results {
                methods.push(summarize(r, &tables, &cfg, req, true)?);
            }
            let traces: Vec<(Method, &OptTrace)> =
                results.iter().filter_map(|r| r.trace.as_ref().map(|t| (r.method, t))).collect();
            out.push("trace.csv", trace_csv(&traces)?);
            let chosen = results.iter().find(|r| r.method == req.method).expect("every method was run");
            beams_and_samples(&mut out, chosen, &tables, &cfg, req)?;
        }
        Command::Evaluate => {
            let existing = req.out.join("beams.json");
            let r = if existing.exists() {
                let doc: BeamsDoc = serde_json::from_slice(&fs::read(&existing)?)?;
                let bf = doc.to_beamforming()?;
                BeamsDoc::check_shape(&bf, &cfg)?;
                let method = doc.method.parse().unwrap_or(req.method);
                BenchResult {
                    method,
                    avg_crlb: avg_crlb(&samples, &bf, &tables)?,
                    beamforming: bf,
                    wall_ms: 0.0,
                    seed: doc.seed,
                    trace: None,
                }
            } else {
                run_method(req.method, &cfg, &tables, &samples, req.seed)?
            };
            methods.push(summarize(&r, &tables, &cfg, req, true)?);
            let pts = eval_samples(&cfg.roi_box(), req.eval_samples, req.seed);
            let vals = crlb_per_sample(&pts, &r.beamforming, &tables);
            out.push("crlb_samples.csv", crlb_samples_csv(&pts, &vals)?);
        }
        Command::Gradcheck => {
            let bf = init_vars(&cfg, req.seed)?;
            let (ec, es) = gradient_check(&samples, &bf, &tables, GRADCHECK_STEP)?;
            gradcheck = Some(GradcheckSummary {
                rel_error_c: ec,
                rel_error_s: es,
                step: GRADCHECK_STEP,
                tolerance: GRADCHECK_TOL,
                pass: ec.max(es) <= GRADCHECK_TOL,
            });
        }
        Command::SampleSignals => {
            let bf = init_vars(&cfg, req.seed)?;
            let pts = eval_samples(&cfg.roi_box(), req.eval_samples, req.seed);
            out.push("signals.csv", signals_csv(&pts, &bf, &tables, req.seed)?);
        }
    }

    let mut names = out.names();
    names.push("report.json".to_string());
    let report = ExperimentReport {
        version: REPORT_VERSION,
        command: req.command,
        seed: req.seed,
        config: cfg,
        methods,
        capacity_band: req.band,
        eval_samples: req.eval_samples,
        error_model: ERROR_MODEL_NOTE.to_string(),
        gradcheck,
        files: names,
    };
    out.push("report.json", serde_json::to_vec_pretty(&report)?);
    write_outputs(&req.out, &out.files)?;
    Ok(report)
}
