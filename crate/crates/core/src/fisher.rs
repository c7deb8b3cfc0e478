//! Fisher information of the received signals with respect to the user
//! position, and the resulting CRLB.

use nalgebra::{Matrix3, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::{assemble_t, los_matrix_dgrad, los_matrix_grad, replicated_diag, Beamforming, ChannelTables};
use crate::error::{Error, Result};
use crate::linx::{CMat, CVec, HermFactor};
use crate::scene::Point;

/// FIMs with condition number above this are treated as singular.
pub const MAX_FIM_CONDITION: f64 = 1e12;

/// Per-band by-products of one FIM evaluation, reused by the gradients.
/// Derivatives are taken along the rows of [`FimEval::frame`].
#[derive(Clone, Debug)]
pub struct BandEval {
    pub t: CMat,
    /// `∂H^LoS/∂p_u`, `N_S x N_E`, for the three frame axes.
    pub hdot: [CMat; 3],
    pub dy: [CVec; 3],
    /// `Λ_i⁻¹ ∂ŷ_i/∂p_u`
    pub zeta: [CVec; 3],
    pub factor: HermFactor,
}

#[derive(Clone, Debug)]
pub struct FimEval {
    pub position: Point,
    /// Orthonormal rows: range direction from the board centre, then two
    /// transverse directions.
    pub frame: Matrix3<f64>,
    /// FIM in that frame. Its inverse has the same trace as in x, y, z but
    /// avoids the cancellation between the strongly coupled x and y entries.
    pub fim_local: Matrix3<f64>,
    /// FIM in x, y, z.
    pub fim: Matrix3<f64>,
    pub crlb: f64,
    pub bands: Vec<BandEval>,
}

/// `Λ_i = K_ft ⊙ (T V Tᴴ) + σ² I` for a given `T_i`.
pub(crate) fn lambda_from_t(band: usize, t: &CMat, tables: &ChannelTables) -> Result<CMat> {
    if !(tables.noise_var > 0.0) {
        return Err(Error::InvalidConfig(format!("noise variance must be > 0, got {}", tables.noise_var)));
    }
    let tvt = t * &tables.angular_cov[band] * t.adjoint();
    let mut l = tables.kernel_ft[band].component_mul(&tvt);
    let n = l.nrows();
    for r in 0..n {
        l[(r, r)] += Complex64::from(tables.noise_var);
    }
    // Exact Hermitian symmetry, removing product roundoff.
    Ok((&l + l.adjoint()).scale(0.5))
}

pub fn lambda(band: usize, bf: &Beamforming, tables: &ChannelTables) -> Result<CMat> {
    let t = assemble_t(band, bf, tables)?;
    let l = lambda_from_t(band, &t, tables)?;
    HermFactor::new(&l)?;
    Ok(l)
}

pub fn dy_dp(band: usize, axis: usize, bf: &Beamforming, tables: &ChannelTables, p: &Point) -> Result<CVec> {
    let hdot = los_matrix_grad(band, axis, tables, p)?;
    let t = assemble_t(band, bf, tables)?;
    Ok(replicated_diag(&hdot, &t, tables.n_frames))
}

/// Range/transverse frame at `p`, as rows.
pub fn local_frame(p: &Point) -> Matrix3<f64> {
    let r = p.norm();
    if r == 0.0 {
        return Matrix3::identity();
    }
    let er = p / r;
    let up = Point::new(0.0, 0.0, 1.0);
    let mut e1 = up.cross(&er);
    if e1.norm() < 1e-6 {
        e1 = Point::new(0.0, 1.0, 0.0).cross(&er);
    }
    let e1 = e1.normalize();
    let e2 = er.cross(&e1);
    Matrix3::from_rows(&[er.transpose(), e1.transpose(), e2.transpose()])
}

pub fn eval_band(band: usize, p: &Point, bf: &Beamforming, tables: &ChannelTables) -> Result<BandEval> {
    eval_band_in(band, p, &local_frame(p), bf, tables)
}

fn eval_band_in(band: usize, p: &Point, frame: &Matrix3<f64>, bf: &Beamforming, tables: &ChannelTables) -> Result<BandEval> {
    let t = assemble_t(band, bf, tables)?;
    let factor = HermFactor::new(&lambda_from_t(band, &t, tables)?)?;
    let q = tables.n_frames;
    let hdot = [0, 1, 2].map(|u| los_matrix_dgrad(band, &frame.row(u).transpose(), tables, p));
    let [h0, h1, h2] = hdot;
    let hdot = [h0?, h1?, h2?];
    let dy = [0, 1, 2].map(|u| replicated_diag(&hdot[u], &t, q));
    let zeta = [0, 1, 2].map(|u| factor.solve_vec(&dy[u]));
    Ok(BandEval { t, hdot, dy, zeta, factor })
}

/// `2 Re(∂ŷᴴ Λ⁻¹ ∂ŷ)` for one band.
pub fn band_fim(eval: &BandEval) -> Matrix3<f64> {
    let mut f = Matrix3::zeros();
    for u in 0..3 {
        for v in u..3 {
            let val = 2.0 * eval.dy[u].dotc(&eval.zeta[v]).re;
            f[(u, v)] = val;
            f[(v, u)] = val;
        }
    }
    f
}

fn condition(f: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*f).eigenvalues;
    let lo = eig.min();
    let hi = eig.max();
    if lo <= 0.0 || !lo.is_finite() || !hi.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Inverse of a FIM, refusing singular or ill-conditioned ones.
pub fn fim_inverse(f: &Matrix3<f64>, position: &Point) -> Result<Matrix3<f64>> {
    let cond = condition(f);
    if cond > MAX_FIM_CONDITION {
        return Err(Error::SingularFim { position: [position.x, position.y, position.z], condition: cond });
    }
    f.try_inverse().ok_or(Error::SingularFim {
        position: [position.x, position.y, position.z],
        condition: cond,
    })
}

/// `Σ_u [F⁻¹]_uu`
pub fn crlb_of(f: &Matrix3<f64>, position: &Point) -> Result<f64> {
    Ok(fim_inverse(f, position)?.trace())
}

pub fn fim(p: &Point, bf: &Beamforming, tables: &ChannelTables) -> Result<FimEval> {
    let frame = local_frame(p);
    let bands = (0..tables.n_bands())
        .map(|i| eval_band_in(i, p, &frame, bf, tables))
        .collect::<Result<Vec<_>>>()?;
    let fim_local = bands.iter().map(band_fim).fold(Matrix3::zeros(), |a, b| a + b);
    let xyz = frame.transpose() * fim_local * frame;
    let fim = (xyz + xyz.transpose()) * 0.5;
    let crlb = crlb_of(&fim_local, p)?;
    Ok(FimEval { position: *p, frame, fim_local, fim, crlb, bands })
}

pub fn crlb(eval: &FimEval) -> Result<f64> {
    crlb_of(&eval.fim_local, &eval.position)
}

/// Mean CRLB over `samples`. Per-sample work runs in parallel; the sum is
/// taken in sample order so the result does not depend on scheduling.
pub fn avg_crlb(samples: &[Point], bf: &Beamforming, tables: &ChannelTables) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty sample set".into()));
    }
    let per: Vec<f64> = samples
        .par_iter()
        .map(|p| fim(p, bf, tables).map(|e| e.crlb))
        .collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::test_support::random_feasible;
    use crate::channel::{mean_signal, synth_received};
    use crate::scene::{sample_positions, SystemConfig};

    fn desk() -> (SystemConfig, ChannelTables) {
        let cfg = SystemConfig::desk();
        let t = ChannelTables::build(&cfg).unwrap();
        (cfg, t)
    }

    #[test]
    fn lambda_without_multipath_is_noise() {
        let (cfg, tables) = desk();
        let t0 = tables.without_multipath();
        let bf = random_feasible(&cfg, 2);
        let l = lambda(0, &bf, &t0).unwrap();
        let n = l.nrows();
        assert_eq!(l, CMat::identity(n, n) * Complex64::from(t0.noise_var));
        let l = lambda(1, &bf, &tables).unwrap();
        crate::linx::check_hermitian(&l, 1e-12).unwrap();
    }

    #[test]
    fn lambda_rejects_zero_noise() {
        let (cfg, mut tables) = desk();
        tables.noise_var = 0.0;
        assert!(lambda(0, &random_feasible(&cfg, 1), &tables).is_err());
    }

    #[test]
    fn dy_dp_matches_fd_of_mean() {
        let (cfg, tables) = desk();
        let bf = random_feasible(&cfg, 4);
        let p = Point::new(11.0, -2.0, 0.7);
        let h = 1e-5;
        for band in 0..2 {
            for axis in 0..3 {
                let dy = dy_dp(band, axis, &bf, &tables, &p).unwrap();
                assert_eq!(dy.len(), cfg.n_subbands() * cfg.n_frames());
                let mut e = Point::zeros();
                e[axis] = h;
                let fd = (mean_signal(band, &(p + e), &bf, &tables).unwrap()
                    - mean_signal(band, &(p - e), &bf, &tables).unwrap())
                    / Complex64::from(2.0 * h);
                assert!((&dy - &fd).norm() / dy.norm() <= 1e-6);
                // agrees with the synthesized noiseless signal as well
                let y0 = synth_received(&(p + e), &bf, &tables, false, false, 0).unwrap();
                assert_eq!(y0.row(band).transpose(), mean_signal(band, &(p + e), &bf, &tables).unwrap());
            }
        }
        let mut zero = bf.clone();
        zero.configs[0].fill(0.0);
        assert!(dy_dp(0, 1, &zero, &tables, &p).unwrap().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn fim_is_symmetric_psd_and_additive() {
        let (cfg, tables) = desk();
        for seed in 0..5 {
            let bf = random_feasible(&cfg, seed);
            let p = Point::new(9.0, 3.0, -0.5);
            let e = fim(&p, &bf, &tables).unwrap();
            assert_eq!(e.fim, e.fim.transpose());
            let eig = SymmetricEigen::new(e.fim).eigenvalues;
            assert!(eig.min() >= -1e-10 * e.fim.norm());
            let summed = e.bands.iter().map(band_fim).fold(Matrix3::zeros(), |a, b| a + b);
            assert_eq!(summed, e.fim_local);
            let back = e.frame * e.fim * e.frame.transpose();
            assert!((back - e.fim_local).norm() <= 1e-12 * e.fim.norm());
            let xyz_crlb = e.fim.try_inverse().unwrap().trace();
            assert!((xyz_crlb - e.crlb).abs() <= 1e-8 * e.crlb);
            assert!(e.crlb > 0.0);
            assert_eq!(crlb(&e).unwrap(), e.crlb);
        }
    }

    #[test]
    fn local_frame_is_orthonormal() {
        for p in [Point::new(10.0, -3.0, 0.5), Point::new(0.0, 0.0, 4.0), Point::new(7.0, 0.0, 0.0)] {
            let r = local_frame(&p);
            assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-14);
            assert!((r.row(0).transpose() - p.normalize()).norm() < 1e-15);
            assert!((r.determinant() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn crlb_of_diagonal() {
        let f = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 2.0, 4.0));
        assert!((crlb_of(&f, &Point::zeros()).unwrap() - 1.75).abs() < 1e-15);
        let singular = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 0.0, 4.0));
        assert!(matches!(crlb_of(&singular, &Point::zeros()), Err(Error::SingularFim { .. })));
        let ill = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1e-13, 4.0));
        assert!(crlb_of(&ill, &Point::zeros()).is_err());
    }

    #[test]
    fn scaling_law_without_multipath() {
        let (cfg, tables) = desk();
        let t0 = tables.without_multipath();
        let bf = random_feasible(&cfg, 8);
        let p = Point::new(12.0, 1.0, 0.2);
        let base = fim(&p, &bf, &t0).unwrap();
        for alpha in [0.5, 2.0, 10.0] {
            let e = fim(&p, &bf.scale_combiners(alpha), &t0).unwrap();
            assert!((e.fim - base.fim * alpha * alpha).norm() <= 1e-10 * (base.fim.norm() * alpha * alpha));
            assert!((e.crlb - base.crlb / (alpha * alpha)).abs() <= 1e-10 * e.crlb);
        }
    }

    #[test]
    fn global_phase_invariance() {
        let (cfg, tables) = desk();
        let bf = random_feasible(&cfg, 9);
        let p = Point::new(8.0, -1.0, 0.0);
        let base = fim(&p, &bf, &tables).unwrap();
        let mut rot = bf.clone();
        for s in &mut rot.combiners[1] {
            *s *= Complex64::from_polar(1.0, 1.234);
        }
        let e = fim(&p, &rot, &tables).unwrap();
        assert!((e.fim - base.fim).norm() <= 1e-10 * base.fim.norm());
    }

    #[test]
    fn avg_crlb_properties() {
        let (cfg, tables) = desk();
        let bf = random_feasible(&cfg, 1);
        let samples = sample_positions(&cfg.roi_box(), 6, 4);
        let single = avg_crlb(&samples[..1], &bf, &tables).unwrap();
        assert_eq!(single, fim(&samples[0], &bf, &tables).unwrap().crlb);
        let avg = avg_crlb(&samples, &bf, &tables).unwrap();
        let manual: f64 = samples.iter().map(|p| fim(p, &bf, &tables).unwrap().crlb).sum::<f64>() / 6.0;
        assert!((avg - manual).abs() <= 1e-14 * avg);
        let mut rev = samples.clone();
        rev.reverse();
        assert!((avg_crlb(&rev, &bf, &tables).unwrap() - avg).abs() <= 1e-14 * avg);
        assert!(avg_crlb(&[], &bf, &tables).is_err());
    }

    #[test]
    fn singular_sample_reports_position() {
        let (cfg, tables) = desk();
        let mut bf = random_feasible(&cfg, 1);
        for c in &mut bf.configs {
            c.fill(0.0);
        }
        let samples = sample_positions(&cfg.roi_box(), 2, 1);
        match avg_crlb(&samples, &bf, &tables) {
            Err(Error::SingularFim { position, .. }) => {
                assert!(samples.iter().any(|p| p.x == position[0]));
            }
            other => panic!("expected singular FIM, got {other:?}"),
        }
    }
}
