//! Analytic gradients of the sampled average CRLB with respect to the analog
//! configurations `C_i` and the digital combiners `S_{i,j}`, plus the
//! central-difference oracle used to check them.
//!
//! For any scalar parameter `x`, `∂CRLB/∂x = -Σ_{u,v} [F⁻²]_{vu} ∂F_{uv}/∂x`.
//! Each `∂F_{uv}` is assembled from four blocks,
//! `A_{vu} + A_{uv} + B_{uv} + B_{vu}`: the `A` blocks carry the change of
//! the mean-signal derivatives, the `B` blocks the change of `Λ_i` (they
//! vanish without multipath).
//!
//! Complex gradients use the convention `G = ∂f/∂Re(s) + i ∂f/∂Im(s)`, i.e.
//! twice the conjugate of the holomorphic Wirtinger derivative.

use nalgebra::Matrix3;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::{Beamforming, ChannelTables};
use crate::error::{Error, Result};
use crate::fisher::{fim, fim_inverse, FimEval};
use crate::linx::{hadamard, kron, pface, reshape_block, CMat, CVec, RMat};
use crate::scene::Point;

/// `∂(avg CRLB)/∂C_i`, one `Q x N_E` matrix per band.
#[derive(Clone, Debug, PartialEq)]
pub struct GradC(pub Vec<RMat>);

/// `∂(avg CRLB)/∂S_{i,j}` as `∂/∂Re + i ∂/∂Im`, indexed `[i][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradS(pub Vec<Vec<CMat>>);

impl GradC {
    /// Same ordering as [`Beamforming::configs_to_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().flat_map(|g| g.transpose().as_slice().to_vec()).collect()
    }
}

impl GradS {
    /// Gradient with respect to the interleaved `(re, im)` parameters of
    /// [`Beamforming::combiners_to_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for band in &self.0 {
            for g in band {
                for r in 0..g.nrows() {
                    for k in 0..g.ncols() {
                        out.push(g[(r, k)].re);
                        out.push(g[(r, k)].im);
                    }
                }
            }
        }
        out
    }
}

fn ones(r: usize, c: usize) -> CMat {
    CMat::from_element(r, c, Complex64::new(1.0, 0.0))
}

fn col(v: &CVec) -> CMat {
    CMat::from_column_slice(v.len(), 1, v.as_slice())
}

/// Per-band quantities shared by all `(u, v)` blocks at one position.
struct BandCtx {
    q: usize,
    /// `S_{i,j} B_{i,j}`, `Q x N_E`
    sb: Vec<CMat>,
    /// `kron(V_i T_iᴴ, 1_Q)`, `(N_E Q) x (N_S Q)`
    vth_rep: CMat,
    /// `V_i T_iᴴ`, `N_E x (N_S Q)`
    vth: CMat,
    /// rows `jQ..(j+1)Q` of `K_ft`
    kft_slices: Vec<CMat>,
    /// `kron(B_{i,j}, 1_Q)`, `(K_F Q) x N_E`
    b_rep: Vec<CMat>,
    /// `C_i` as complex
    c: CMat,
}

impl BandCtx {
    fn new(band: usize, eval: &FimEval, bf: &Beamforming, tables: &ChannelTables) -> Self {
        let q = tables.n_frames;
        let ns = tables.n_subbands();
        let be = &eval.bands[band];
        let sb = (0..ns).map(|j| &bf.combiners[band][j] * &tables.onboard[band][j]).collect();
        let vth = &tables.angular_cov[band] * be.t.adjoint();
        let vth_rep = kron(&vth, &ones(q, 1));
        let kft_slices = (0..ns).map(|j| tables.kernel_ft[band].rows(j * q, q).into_owned()).collect();
        let b_rep = (0..ns).map(|j| kron(&tables.onboard[band][j], &ones(q, 1))).collect();
        let c = bf.configs[band].map(Complex64::from);
        Self { q, sb, vth_rep, vth, kft_slices, b_rep, c }
    }

    /// `conj(ζ_u)` rows of sub-band `j`, broadcast across `width` columns.
    fn zeta_conj_block(&self, zeta: &CVec, j: usize, width: usize) -> CMat {
        let slice = col(&zeta.rows(j * self.q, self.q).conjugate().into_owned());
        kron(&slice, &ones(1, width))
    }

    /// Rows of sub-band `j` of `∂H^LoS/∂p_v ⊗ 1_Q`.
    fn hdot_block(&self, hdot: &CMat, j: usize) -> CMat {
        kron(&hdot.rows(j, 1).into_owned(), &ones(self.q, 1))
    }
}

fn check_indices(eval: &FimEval, band: usize, u: usize, v: usize) -> Result<()> {
    if band >= eval.bands.len() || u > 2 || v > 2 {
        return Err(Error::DimensionMismatch {
            op: "fim partial",
            detail: format!("band {band}, axes ({u}, {v}) out of range"),
        });
    }
    Ok(())
}

/// `ζ_{i,u} = Λ_i⁻¹ ∂ŷ_i/∂p_u`, from the cached factorization.
pub fn zeta(band: usize, axis: usize, eval: &FimEval) -> Result<CVec> {
    check_indices(eval, band, axis, axis)?;
    let be = &eval.bands[band];
    Ok(be.factor.solve_vec(&be.dy[axis]))
}

fn a_c(ctx: &BandCtx, be: &crate::fisher::BandEval, u: usize, v: usize) -> Result<RMat> {
    let n_e = ctx.c.ncols();
    let mut acc = CMat::zeros(ctx.q, n_e);
    for (j, sb) in ctx.sb.iter().enumerate() {
        let z = ctx.zeta_conj_block(&be.zeta[u], j, n_e);
        let h = ctx.hdot_block(&be.hdot[v], j);
        acc += hadamard(&hadamard(&z, &h)?, sb)?;
    }
    Ok(acc.map(|z| 2.0 * z.re))
}

fn b_c(ctx: &BandCtx, be: &crate::fisher::BandEval, u: usize, v: usize) -> Result<RMat> {
    let n_e = ctx.c.ncols();
    let mut acc = CMat::zeros(ctx.q, n_e);
    for (j, sb) in ctx.sb.iter().enumerate() {
        let z = ctx.zeta_conj_block(&be.zeta[u], j, n_e);
        let coupled = pface(&ctx.kft_slices[j], &ctx.vth_rep)? * &be.zeta[v];
        let w = reshape_block(&coupled, ctx.q, n_e)?;
        acc += hadamard(&hadamard(&z, sb)?, &w)?;
    }
    Ok(acc.map(|z| -2.0 * z.re))
}

fn a_s(ctx: &BandCtx, be: &crate::fisher::BandEval, j: usize, u: usize, v: usize) -> Result<CMat> {
    let k_f = ctx.b_rep[j].nrows() / ctx.q;
    let n_e = ctx.c.ncols();
    let weighted = hadamard(&ctx.hdot_block(&be.hdot[v], j), &ctx.c)?;
    let summed = pface(&weighted, &ctx.b_rep[j])? * CVec::from_element(n_e, Complex64::new(1.0, 0.0));
    let inner = hadamard(&ctx.zeta_conj_block(&be.zeta[u], j, k_f), &reshape_block(&summed, ctx.q, k_f)?)?;
    Ok(inner.map(|z| 2.0 * z.conj()))
}

fn b_s(ctx: &BandCtx, be: &crate::fisher::BandEval, j: usize, u: usize, v: usize) -> Result<CMat> {
    let k_f = ctx.b_rep[j].nrows() / ctx.q;
    let cb = pface(&ctx.c, &ctx.b_rep[j])? * &ctx.vth;
    let coupled = pface(&ctx.kft_slices[j], &cb)? * &be.zeta[v];
    let inner = hadamard(&ctx.zeta_conj_block(&be.zeta[u], j, k_f), &reshape_block(&coupled, ctx.q, k_f)?)?;
    Ok(inner.map(|z| -2.0 * z.conj()))
}

/// `∂[F]_{uv}/∂C_i`, a real `Q x N_E` matrix.
pub fn fim_partial_c(
    band: usize,
    u: usize,
    v: usize,
    eval: &FimEval,
    bf: &Beamforming,
    tables: &ChannelTables,
) -> Result<RMat> {
    check_indices(eval, band, u, v)?;
    let ctx = BandCtx::new(band, eval, bf, tables);
    let be = &eval.bands[band];
    Ok(a_c(&ctx, be, v, u)? + a_c(&ctx, be, u, v)? + b_c(&ctx, be, u, v)? + b_c(&ctx, be, v, u)?)
}

/// `∂[F]_{uv}/∂S_{i,j}` in the `∂/∂Re + i ∂/∂Im` convention, `Q x K_F`.
pub fn fim_partial_s(
    band: usize,
    sub: usize,
    u: usize,
    v: usize,
    eval: &FimEval,
    bf: &Beamforming,
    tables: &ChannelTables,
) -> Result<CMat> {
    check_indices(eval, band, u, v)?;
    if sub >= tables.n_subbands() {
        return Err(Error::DimensionMismatch { op: "fim_partial_s", detail: format!("sub-band {sub} out of range") });
    }
    let ctx = BandCtx::new(band, eval, bf, tables);
    let be = &eval.bands[band];
    Ok(a_s(&ctx, be, sub, v, u)? + a_s(&ctx, be, sub, u, v)? + b_s(&ctx, be, sub, u, v)? + b_s(&ctx, be, sub, v, u)?)
}

/// Split into the `A` and `B` parts, for inspection.
pub fn fim_partial_c_blocks(
    band: usize,
    u: usize,
    v: usize,
    eval: &FimEval,
    bf: &Beamforming,
    tables: &ChannelTables,
) -> Result<(RMat, RMat)> {
    check_indices(eval, band, u, v)?;
    let ctx = BandCtx::new(band, eval, bf, tables);
    let be = &eval.bands[band];
    Ok((a_c(&ctx, be, u, v)?, b_c(&ctx, be, u, v)?))
}

pub fn fim_partial_s_blocks(
    band: usize,
    sub: usize,
    u: usize,
    v: usize,
    eval: &FimEval,
    bf: &Beamforming,
    tables: &ChannelTables,
) -> Result<(CMat, CMat)> {
    check_indices(eval, band, u, v)?;
    let ctx = BandCtx::new(band, eval, bf, tables);
    let be = &eval.bands[band];
    Ok((a_s(&ctx, be, sub, u, v)?, b_s(&ctx, be, sub, u, v)?))
}

/// `-Σ_{u,v} W_{vu} P_{uv}` for real partial blocks.
pub fn contract_real(weights: &Matrix3<f64>, partials: &[[RMat; 3]; 3]) -> RMat {
    let mut out = RMat::zeros(partials[0][0].nrows(), partials[0][0].ncols());
    for u in 0..3 {
        for v in 0..3 {
            out -= &partials[u][v] * weights[(v, u)];
        }
    }
    out
}

pub fn contract_complex(weights: &Matrix3<f64>, partials: &[[CMat; 3]; 3]) -> CMat {
    let mut out = CMat::zeros(partials[0][0].nrows(), partials[0][0].ncols());
    for u in 0..3 {
        for v in 0..3 {
            out -= &partials[u][v] * Complex64::from(weights[(v, u)]);
        }
    }
    out
}

/// CRLB and its gradients at one position.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub crlb: f64,
    pub c: Option<Vec<RMat>>,
    pub s: Option<Vec<Vec<CMat>>>,
}

/// CRLB gradient at a single position given an explicit contraction weight
/// `W = F⁻²`.
pub(crate) fn gradient_with_weights(
    eval: &FimEval,
    weights: &Matrix3<f64>,
    bf: &Beamforming,
    tables: &ChannelTables,
    want_c: bool,
    want_s: bool,
) -> Result<(Option<Vec<RMat>>, Option<Vec<Vec<CMat>>>)> {
    let nb = tables.n_bands();
    let ns = tables.n_subbands();
    let mut gc = Vec::with_capacity(nb);
    let mut gs = Vec::with_capacity(nb);
    for band in 0..nb {
        let ctx = BandCtx::new(band, eval, bf, tables);
        let be = &eval.bands[band];
        if want_c {
            let a: Vec<Vec<RMat>> = (0..3).map(|u| (0..3).map(|v| a_c(&ctx, be, u, v)).collect::<Result<_>>()).collect::<Result<_>>()?;
            let b: Vec<Vec<RMat>> = (0..3).map(|u| (0..3).map(|v| b_c(&ctx, be, u, v)).collect::<Result<_>>()).collect::<Result<_>>()?;
            let partials: [[RMat; 3]; 3] =
                std::array::from_fn(|u| std::array::from_fn(|v| &a[v][u] + &a[u][v] + &b[u][v] + &b[v][u]));
            gc.push(contract_real(weights, &partials));
        }
        if want_s {
            let mut per_sub = Vec::with_capacity(ns);
            for j in 0..ns {
                let a: Vec<Vec<CMat>> = (0..3).map(|u| (0..3).map(|v| a_s(&ctx, be, j, u, v)).collect::<Result<_>>()).collect::<Result<_>>()?;
                let b: Vec<Vec<CMat>> = (0..3).map(|u| (0..3).map(|v| b_s(&ctx, be, j, u, v)).collect::<Result<_>>()).collect::<Result<_>>()?;
                let partials: [[CMat; 3]; 3] =
                    std::array::from_fn(|u| std::array::from_fn(|v| &a[v][u] + &a[u][v] + &b[u][v] + &b[v][u]));
                per_sub.push(contract_complex(weights, &partials));
            }
            gs.push(per_sub);
        }
    }
    Ok((want_c.then_some(gc), want_s.then_some(gs)))
}

pub fn sample_gradient(
    p: &Point,
    bf: &Beamforming,
    tables: &ChannelTables,
    want_c: bool,
    want_s: bool,
) -> Result<SampleGrad> {
    let eval = fim(p, bf, tables)?;
    let inv = fim_inverse(&eval.fim_local, p)?;
    let weights = inv * inv;
    let (c, s) = gradient_with_weights(&eval, &weights, bf, tables, want_c, want_s)?;
    Ok(SampleGrad { crlb: eval.crlb, c, s })
}

/// Average CRLB with gradients for the requested variable sets. Samples are
/// processed in parallel and reduced in sample order.
pub fn avg_crlb_with_grad(
    samples: &[Point],
    bf: &Beamforming,
    tables: &ChannelTables,
    want_c: bool,
    want_s: bool,
) -> Result<(f64, Option<GradC>, Option<GradS>)> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty sample set".into()));
    }
    let per: Vec<SampleGrad> = samples
        .par_iter()
        .map(|p| sample_gradient(p, bf, tables, want_c, want_s))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let objective = per.iter().map(|g| g.crlb).sum::<f64>() / n;
    let gc = want_c.then(|| {
        let mut acc: Vec<RMat> = bf.configs.iter().map(|c| RMat::zeros(c.nrows(), c.ncols())).collect();
        for g in &per {
            for (a, b) in acc.iter_mut().zip(g.c.as_ref().unwrap()) {
                *a += b;
            }
        }
        GradC(acc.into_iter().map(|a| a / n).collect())
    });
    let gs = want_s.then(|| {
        let mut acc: Vec<Vec<CMat>> =
            bf.combiners.iter().map(|band| band.iter().map(|s| CMat::zeros(s.nrows(), s.ncols())).collect()).collect();
        for g in &per {
            for (a_band, b_band) in acc.iter_mut().zip(g.s.as_ref().unwrap()) {
                for (a, b) in a_band.iter_mut().zip(b_band) {
                    *a += b;
                }
            }
        }
        GradS(acc.into_iter().map(|band| band.into_iter().map(|a| a / Complex64::from(n)).collect()).collect())
    });
    Ok((objective, gc, gs))
}

pub fn grad_avg_crlb_c(samples: &[Point], bf: &Beamforming, tables: &ChannelTables) -> Result<GradC> {
    Ok(avg_crlb_with_grad(samples, bf, tables, true, false)?.1.unwrap())
}

pub fn grad_avg_crlb_s(samples: &[Point], bf: &Beamforming, tables: &ChannelTables) -> Result<GradS> {
    Ok(avg_crlb_with_grad(samples, bf, tables, false, true)?.2.unwrap())
}

/// Central differences `(f(x+h e_k) - f(x-h e_k)) / 2h` per coordinate.
pub fn fd_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let fp = f(&probe)?;
        probe[k] = x[k] - h;
        let fm = f(&probe)?;
        probe[k] = x[k];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite("finite-difference probe"));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Central differences on the real and imaginary part of each entry,
/// returned as `∂f/∂Re + i ∂f/∂Im`.
pub fn fd_grad_complex<F>(f: F, z: &[Complex64], h: f64) -> Result<Vec<Complex64>>
where
    F: Fn(&[Complex64]) -> Result<f64>,
{
    let flat: Vec<f64> = z.iter().flat_map(|c| [c.re, c.im]).collect();
    let g = fd_grad(
        |x: &[f64]| {
            let zz: Vec<Complex64> = x.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
            f(&zz)
        },
        &flat,
        h,
    )?;
    Ok(g.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect())
}

/// `max |a - b| / max |b|`
pub fn rel_linf_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let err = analytic.iter().zip(reference).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

/// Relative ℓ∞ errors of the analytic C and S gradients against central
/// differences of the average CRLB, step `h` on every real parameter.
pub fn gradient_check(samples: &[Point], bf: &Beamforming, tables: &ChannelTables, h: f64) -> Result<(f64, f64)> {
    let (_, gc, gs) = avg_crlb_with_grad(samples, bf, tables, true, true)?;
    let xc = bf.configs_to_vec();
    let fd_c = fd_grad(
        |x| {
            let mut b = bf.clone();
            b.set_configs_from(x);
            crate::fisher::avg_crlb(samples, &b, tables)
        },
        &xc,
        h,
    )?;
    let xs = bf.combiners_to_vec();
    let fd_s = fd_grad(
        |x| {
            let mut b = bf.clone();
            b.set_combiners_from(x);
            crate::fisher::avg_crlb(samples, &b, tables)
        },
        &xs,
        h,
    )?;
    Ok((rel_linf_error(&gc.unwrap().to_vec(), &fd_c), rel_linf_error(&gs.unwrap().to_vec(), &fd_s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::test_support::random_feasible;
    use crate::scene::{sample_positions, SystemConfig};

    fn desk() -> (SystemConfig, ChannelTables) {
        let cfg = SystemConfig::desk();
        let t = ChannelTables::build(&cfg).unwrap();
        (cfg, t)
    }

    #[test]
    fn fd_grad_basics() {
        let lin = fd_grad(|x| Ok(3.0 * x[0] - 2.0 * x[1] + 0.5), &[0.3, -1.2], 1e-3).unwrap();
        assert!((lin[0] - 3.0).abs() < 1e-10 && (lin[1] + 2.0).abs() < 1e-10);
        let sq = fd_grad(|x| Ok(x[0] * x[0]), &[1.0], 1e-4).unwrap();
        assert!((sq[0] - 2.0).abs() < 1e-7);
        let f = |x: &[f64]| Ok(x[0].sin());
        let e1 = (fd_grad(f, &[0.7], 1e-2).unwrap()[0] - 0.7f64.cos()).abs();
        let e2 = (fd_grad(f, &[0.7], 5e-3).unwrap()[0] - 0.7f64.cos()).abs();
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        assert!(fd_grad(|_| Ok(f64::NAN), &[0.0], 1e-3).is_err());
        let gz = fd_grad_complex(|z| Ok(z[0].norm_sqr()), &[Complex64::new(1.0, 2.0)], 1e-5).unwrap();
        assert!((gz[0] - Complex64::new(2.0, 4.0)).norm() < 1e-8);
    }

    #[test]
    fn zeta_solves_lambda_system() {
        let (cfg, tables) = desk();
        let bf = random_feasible(&cfg, 3);
        let p = Point::new(10.0, 2.0, 0.3);
        let eval = fim(&p, &bf, &tables).unwrap();
        for band in 0..2 {
            let lam = crate::fisher::lambda(band, &bf, &tables).unwrap();
            for u in 0..3 {
                let z = zeta(band, u, &eval).unwrap();
                assert_eq!(z.len(), cfg.n_subbands() * cfg.n_frames());
                let dy = &eval.bands[band].dy[u];
                assert!((&lam * &z - dy).norm() / dy.norm() <= 1e-10);
            }
        }
        // without multipath Λ = σ² I
        let t0 = tables.without_multipath();
        let e0 = fim(&p, &bf, &t0).unwrap();
        let z = zeta(1, 2, &e0).unwrap();
        let expect = &e0.bands[1].dy[2] / Complex64::from(t0.noise_var);
        assert!((&z - &expect).norm() <= 1e-12 * expect.norm());
    }

    #[test]
    fn partial_c_matches_fd_of_fim_entries() {
        let (cfg, tables) = desk();
        let bf = random_feasible(&cfg, 5);
        let p = Point::new(9.5, -1.0, 0.4);
        let eval = fim(&p, &bf, &tables).unwrap();
        let x0 = bf.configs_to_vec();
        let per_band = cfg.n_frames() * cfg.n_elements();
        for (u, v) in [(0, 0), (0, 1), (1, 2), (2, 2)] {
            let fd = fd_grad(
                |x| {
                    let mut b = bf.clone();
                    b.set_configs_from(x);
                    Ok(fim(&p, &b, &tables)?.fim_local[(u, v)])
                },
                &x0,
                1e-6,
            )
            .unwrap();
            for band in 0..2 {
                let g = fim_partial_c(band, u, v, &eval, &bf, &tables).unwrap();
                let analytic: Vec<f64> = g.transpose().as_slice().to_vec();
                let reference = &fd[band * per_band..(band + 1) * per_band];
                assert!(rel_linf_error(&analytic, reference) <= 1e-5, "({u},{v}) band {band}");
                let g_vu = fim_partial_c(band, v, u, &eval, &bf, &tables).unwrap();
                assert!((&g - &g_vu).norm() <= 1e-12 * g.norm());
            }
        }
    }

    #[test]
    fn partial_s_matches_fd_of_fim_entries() {
        let (cfg, tables) = desk();
        let bf = random_feasible(&cfg, 6);
        let p = Point::new(12.0, 3.0, -0.6);
        let eval = fim(&p, &bf, &tables).unwrap();
        let x0 = bf.combiners_to_vec();
        let per_sub = 2 * cfg.n_frames() * cfg.n_feeds();
        for (u, v) in [(0, 0), (1, 0), (2, 1)] {
            let fd = fd_grad(
                |x| {
                    let mut b = bf.clone();
                    b.set_combiners_from(x);
                    Ok(fim(&p, &b, &tables)?.fim_local[(u, v)])
                },
                &x0,
                1e-6,
            )
            .unwrap();
            for band in 0..2 {
                for j in 0..cfg.n_subbands() {
                    let g = fim_partial_s(band, j, u, v, &eval, &bf, &tables).unwrap();
                    let mut analytic = Vec::new();
                    for r in 0..g.nrows() {
                        for k in 0..g.ncols() {
                            analytic.push(g[(r, k)].re);
                            analytic.push(g[(r, k)].im);
                        }
                    }
                    let off = (band * cfg.n_subbands() + j) * per_sub;
                    assert!(rel_linf_error(&analytic, &fd[off..off + per_sub]) <= 1e-5, "({u},{v}) {band}/{j}");
                }
            }
        }
    }

    #[test]
    fn b_blocks_vanish_without_multipath() {
        let (cfg, tables) = desk();
        let t0 = tables.without_multipath();
        let bf = random_feasible(&cfg, 2);
        let p = Point::new(10.0, 0.5, 0.1);
        let eval = fim(&p, &bf, &t0).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                let (a, b) = fim_partial_c_blocks(0, u, v, &eval, &bf, &t0).unwrap();
                assert!(b.iter().all(|x| *x == 0.0));
                assert!(a.iter().any(|x| *x != 0.0));
                let (_, bs) = fim_partial_s_blocks(1, 0, u, v, &eval, &bf, &t0).unwrap();
                assert!(bs.iter().all(|x| x.norm() == 0.0));
            }
        }
    }

    #[test]
    fn s_blocks_vanish_with_zero_config() {
        let (cfg, tables) = desk();
        let bf = random_feasible(&cfg, 2);
        let p = Point::new(10.0, 0.5, 0.1);
        let eval = fim(&p, &bf, &tables).unwrap();
        let mut zero_c = bf.clone();
        zero_c.configs[0].fill(0.0);
        for u in 0..3 {
            for v in 0..3 {
                let (a, b) = fim_partial_s_blocks(0, 1, u, v, &eval, &zero_c, &tables).unwrap();
                assert!(a.iter().chain(b.iter()).all(|x| x.norm() == 0.0));
            }
        }
    }

    #[test]
    fn identity_weights_give_negative_trace_of_partials() {
        let (cfg, tables) = desk();
        let bf = random_feasible(&cfg, 4);
        let p = Point::new(11.0, 1.0, 0.0);
        let eval = fim(&p, &bf, &tables).unwrap();
        let (gc, gs) = gradient_with_weights(&eval, &Matrix3::identity(), &bf, &tables, true, true).unwrap();
        let gc = gc.unwrap();
        let gs = gs.unwrap();
        for band in 0..2 {
            let mut expect = RMat::zeros(cfg.n_frames(), cfg.n_elements());
            for u in 0..3 {
                expect -= fim_partial_c(band, u, u, &eval, &bf, &tables).unwrap();
            }
            assert!((&gc[band] - &expect).norm() <= 1e-12 * expect.norm());
            let mut expect_s = CMat::zeros(cfg.n_frames(), cfg.n_feeds());
            for u in 0..3 {
                expect_s -= fim_partial_s(band, 1, u, u, &eval, &bf, &tables).unwrap();
            }
            assert!((&gs[band][1] - &expect_s).norm() <= 1e-12 * expect_s.norm());
        }
    }

    #[test]
    fn avg_gradient_matches_fd() {
        let (cfg, tables) = desk();
        let samples = sample_positions(&cfg.roi_box(), 3, 17);
        for seed in 0..4 {
            let bf = random_feasible(&cfg, 100 + seed);
            let (ec, es) = gradient_check(&samples, &bf, &tables, 1e-6).unwrap();
            assert!(ec <= 1e-5 && es <= 1e-5, "seed {seed}: C {ec:e}, S {es:e}");
        }
    }

    #[test]
    fn a_blocks_alone_pass_fd_without_multipath() {
        let (cfg, tables) = desk();
        let t0 = tables.without_multipath();
        let samples = sample_positions(&cfg.roi_box(), 2, 5);
        let bf = random_feasible(&cfg, 21);
        let (ec, es) = gradient_check(&samples, &bf, &t0, 1e-6).unwrap();
        assert!(ec <= 1e-5 && es <= 1e-5, "C {ec:e}, S {es:e}");
    }

    #[test]
    fn mirror_symmetry_of_config_gradient() {
        let (cfg, tables) = desk();
        let m = cfg.grid_side().unwrap();
        let (nb, ns, q, kf) = (cfg.n_bands(), cfg.n_subbands(), cfg.n_frames(), cfg.n_feeds());
        let s = (cfg.system.max_power / (ns * kf) as f64).sqrt();
        let bf = Beamforming {
            configs: (0..nb).map(|_| RMat::from_fn(q, m * m, |t, _| 0.3 + 0.4 * t as f64)).collect(),
            combiners: (0..nb)
                .map(|_| (0..ns).map(|_| CMat::from_element(q, kf, Complex64::new(s, 0.0))).collect())
                .collect(),
        };
        let g = grad_avg_crlb_c(&[Point::new(10.0, 1.5, 0.4)], &bf, &tables).unwrap();
        let g_mirror = grad_avg_crlb_c(&[Point::new(10.0, -1.5, 0.4)], &bf, &tables).unwrap();
        // element index = row * M + col with col along y
        for (a_band, b_band) in g.0.iter().zip(&g_mirror.0) {
            let scale = a_band.amax();
            for t in 0..q {
                for row in 0..m {
                    for c in 0..m {
                        let a = a_band[(t, row * m + c)];
                        let b = b_band[(t, row * m + (m - 1 - c))];
                        assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn index_errors() {
        let (cfg, tables) = desk();
        let bf = random_feasible(&cfg, 1);
        let eval = fim(&Point::new(10.0, 0.0, 0.5), &bf, &tables).unwrap();
        assert!(fim_partial_c(5, 0, 0, &eval, &bf, &tables).is_err());
        assert!(fim_partial_s(0, 9, 0, 0, &eval, &bf, &tables).is_err());
        assert!(zeta(0, 3, &eval).is_err());
    }
}
