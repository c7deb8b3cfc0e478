//! Dense complex matrix helpers and the special functions used by the
//! channel model.
//!
//! Products follow the usual conventions: [`kron`] is the Kronecker product,
//! [`hadamard`] the elementwise product. [`pface`] is the penetrating face
//! product, where a `p x n` matrix multiplies every `p x n` row-slab of a
//! `(k p) x n` matrix elementwise. [`reshape_block`] unstacks a vector
//! column-major into a `p x k` matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;
pub type RMat = DMatrix<f64>;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn hadamard(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op: "hadamard",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(a.component_mul(b))
}

/// Penetrating face product: `out[b*p + t, c] = a[t, c] * b[b*p + t, c]`.
pub fn pface(a: &CMat, b: &CMat) -> Result<CMat> {
    let (p, n) = a.shape();
    let (rows, cols) = b.shape();
    if cols != n || rows % p != 0 {
        return Err(Error::DimensionMismatch {
            op: "pface",
            detail: format!("{:?} cannot penetrate {:?}", a.shape(), b.shape()),
        });
    }
    Ok(CMat::from_fn(rows, cols, |r, c| a[(r % p, c)] * b[(r, c)]))
}

/// Column-major unstacking: element `b*p + t` of `v` lands at `(t, b)`.
pub fn reshape_block(v: &CVec, p: usize, k: usize) -> Result<CMat> {
    if v.len() != p * k {
        return Err(Error::DimensionMismatch {
            op: "reshape_block",
            detail: format!("length {} != {p} x {k}", v.len()),
        });
    }
    Ok(CMat::from_column_slice(p, k, v.as_slice()))
}

/// Cholesky factor `L Lᴴ = H` of a Hermitian positive-definite matrix, kept
/// around so a single factorization serves many right-hand sides.
#[derive(Clone, Debug)]
pub struct HermFactor {
    l: CMat,
}

impl HermFactor {
    pub fn new(h: &CMat) -> Result<Self> {
        check_hermitian(h, 1e-12)?;
        let n = h.nrows();
        let mut l = CMat::zeros(n, n);
        for j in 0..n {
            let mut d = h[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            // Complex sqrt never fails, so positivity is checked on the real pivot.
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite);
            }
            let d = d.sqrt();
            l[(j, j)] = Complex64::from(d);
            for i in j + 1..n {
                let mut acc = h[(i, j)];
                for k in 0..j {
                    acc -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = acc / d;
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, b: &CMat) -> CMat {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }

    pub fn solve_vec(&self, b: &CVec) -> CVec {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    fn solve_in_place(&self, x: &mut [Complex64]) {
        let n = self.l.nrows();
        let l = &self.l;
        for i in 0..n {
            let mut acc = x[i];
            for k in 0..i {
                acc -= l[(i, k)] * x[k];
            }
            x[i] = acc / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for k in i + 1..n {
                acc -= l[(k, i)].conj() * x[k];
            }
            x[i] = acc / l[(i, i)];
        }
    }

    pub fn lower(&self) -> &CMat {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }
}

pub fn herm_solve(h: &CMat, b: &CMat) -> Result<CMat> {
    if h.nrows() != h.ncols() || h.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            op: "herm_solve",
            detail: format!("{:?} vs rhs {:?}", h.shape(), b.shape()),
        });
    }
    Ok(HermFactor::new(h)?.solve(b))
}

fn max_abs(h: &CMat) -> f64 {
    h.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Entrywise Hermitian check, tolerance relative to the largest entry.
pub fn check_hermitian(h: &CMat, rel_tol: f64) -> Result<()> {
    if h.nrows() != h.ncols() {
        return Err(Error::DimensionMismatch {
            op: "hermitian check",
            detail: format!("{:?} is not square", h.shape()),
        });
    }
    let scale = max_abs(h).max(f64::MIN_POSITIVE);
    let n = h.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            let d = (h[(i, j)] - h[(j, i)].conj()).norm();
            if !d.is_finite() {
                return Err(Error::NonFinite("hermitian check"));
            }
            worst = worst.max(d);
        }
    }
    if worst > rel_tol * scale {
        return Err(Error::NotHermitian { asymmetry: worst });
    }
    Ok(())
}

/// Square-root factor `L` with `L Lᴴ = H`, after clipping eigenvalues in
/// `[-1e-10 ‖H‖, 0)` to zero.
pub fn psd_sqrt_factor(h: &CMat) -> Result<CMat> {
    check_hermitian(h, 1e-10)?;
    let norm = h.norm();
    // Symmetrize exactly before the eigensolver sees it.
    let sym = (h + h.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(sym);
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-10 * norm {
        return Err(Error::Indefinite { min_eig, norm });
    }
    let mut l = eig.eigenvectors;
    for (mut col, &lam) in l.column_iter_mut().zip(eig.eigenvalues.iter()) {
        col *= Complex64::from(lam.max(0.0).sqrt());
    }
    Ok(l)
}

const BESSEL_SERIES_LIMIT: f64 = 15.0;

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < BESSEL_SERIES_LIMIT {
        j0_series(ax)
    } else {
        j0_hankel(ax)
    }
}

fn j0_series(x: f64) -> f64 {
    let q = -0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for m in 1..200 {
        let mf = m as f64;
        term *= q / (mf * mf);
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-3) {
            break;
        }
    }
    sum
}

fn j0_hankel(x: f64) -> f64 {
    let eight_x = 8.0 * x;
    let mut p = 0.0;
    let mut q = 0.0;
    let mut term = 1.0_f64;
    let mut prev = f64::INFINITY;
    for k in 0..200_usize {
        if k > 0 {
            let odd = (2 * k - 1) as f64;
            term *= -(odd * odd) / (k as f64 * eight_x);
        }
        if term.abs() > prev || term.abs() < 1e-18 {
            break;
        }
        prev = term.abs();
        // Signs alternate within each of the even and odd subsequences.
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        if k % 2 == 0 {
            p += sign * term;
        } else {
            q += sign * term;
        }
    }
    let chi = x - std::f64::consts::FRAC_PI_4;
    (2.0 / (std::f64::consts::PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Gauss–Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = mid - half * z;
        nodes[n - 1 - i] = mid + half * z;
        weights[i] = half * w;
        weights[n - 1 - i] = half * w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn random_cmat(rng: &mut ChaCha8Rng, r: usize, cols: usize) -> CMat {
        CMat::from_fn(r, cols, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn random_hpd(rng: &mut ChaCha8Rng, n: usize) -> CMat {
        let a = random_cmat(rng, n, n);
        &a * a.adjoint() + CMat::identity(n, n).scale(0.5)
    }

    #[test]
    fn kron_identity_and_blocks() {
        let b = CMat::from_row_slice(2, 2, &[c(1.0), c(2.0), c(3.0), c(4.0)]);
        assert_eq!(kron(&CMat::from_element(1, 1, c(1.0)), &b), b);

        let swap = CMat::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]);
        let k = kron(&CMat::identity(2, 2), &swap);
        assert_eq!(k.shape(), (4, 4));
        assert_eq!(k[(0, 1)], c(1.0));
        assert_eq!(k[(2, 3)], c(1.0));
        assert_eq!(k[(0, 3)], c(0.0));
        assert_eq!(k[(1, 0)], c(1.0));

        let d = kron(&CMat::zeros(2, 3), &CMat::zeros(4, 5));
        assert_eq!(d.shape(), (8, 15));
    }

    #[test]
    fn hadamard_cases() {
        let a = CMat::from_row_slice(2, 2, &[c(1.0), c(2.0), c(3.0), c(4.0)]);
        assert_eq!(hadamard(&a, &CMat::from_element(2, 2, c(1.0))).unwrap(), a);
        assert_eq!(hadamard(&a, &CMat::zeros(2, 2)).unwrap(), CMat::zeros(2, 2));
        let b = CMat::from_row_slice(2, 2, &[c(2.0), c(0.0), c(0.0), c(2.0)]);
        let expect = CMat::from_row_slice(2, 2, &[c(2.0), c(0.0), c(0.0), c(8.0)]);
        assert_eq!(hadamard(&a, &b).unwrap(), expect);
        assert!(hadamard(&a, &CMat::zeros(2, 3)).is_err());
    }

    #[test]
    fn pface_examples() {
        let a = CMat::from_row_slice(1, 2, &[c(1.0), c(2.0)]);
        let b = CMat::from_row_slice(2, 2, &[c(1.0), c(1.0), c(3.0), c(3.0)]);
        // direct index formula
        let mut oracle = CMat::zeros(2, 2);
        for blk in 0..2 {
            for col in 0..2 {
                oracle[(blk, col)] = a[(0, col)] * b[(blk, col)];
            }
        }
        let out = pface(&a, &b).unwrap();
        assert_eq!(out, oracle);
        assert_eq!(out, CMat::from_row_slice(2, 2, &[c(1.0), c(2.0), c(3.0), c(6.0)]));

        let ones = CMat::from_element(1, 2, c(1.0));
        assert_eq!(pface(&ones, &b).unwrap(), b);
        assert!(pface(&CMat::zeros(3, 2), &b).is_err());
        assert!(pface(&a, &CMat::zeros(2, 3)).is_err());
    }

    #[test]
    fn reshape_examples() {
        let v = CVec::from_vec(vec![c(1.0), c(2.0), c(3.0), c(4.0)]);
        let m = reshape_block(&v, 2, 2).unwrap();
        assert_eq!(m, CMat::from_row_slice(2, 2, &[c(1.0), c(3.0), c(2.0), c(4.0)]));
        let row = reshape_block(&v, 1, 4).unwrap();
        assert_eq!(row.shape(), (1, 4));
        assert_eq!(row[(0, 2)], c(3.0));
        assert!(reshape_block(&v, 3, 2).is_err());
    }

    #[test]
    fn bessel_fixed_points() {
        assert_eq!(bessel_j0(0.0), 1.0);
        assert!(bessel_j0(2.404825557695773).abs() < 1e-9);
        assert!((bessel_j0(1.0) - 0.7651976866).abs() < 1e-9);
        assert_eq!(bessel_j0(-3.0), bessel_j0(3.0));
    }

    #[test]
    fn bessel_branches_agree_at_seam() {
        for &x in &[14.5, 15.0, 15.5] {
            assert!((j0_series(x) - j0_hankel(x)).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn herm_solve_cases() {
        let b = CMat::from_row_slice(2, 1, &[c(2.0), c(4.0)]);
        assert_eq!(herm_solve(&CMat::identity(2, 2), &b).unwrap(), b);
        let h = CMat::from_row_slice(2, 2, &[c(2.0), c(0.0), c(0.0), c(4.0)]);
        let x = herm_solve(&h, &b).unwrap();
        assert!((x[(0, 0)] - c(1.0)).norm() < 1e-15);
        assert!((x[(1, 0)] - c(1.0)).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_hpd(&mut rng, 8);
        let b = random_cmat(&mut rng, 8, 3);
        let x = herm_solve(&h, &b).unwrap();
        assert!((&h * &x - &b).norm() / b.norm() <= 1e-10);
    }

    #[test]
    fn herm_solve_rejects_bad_input() {
        let mut h = CMat::identity(2, 2);
        h[(0, 1)] = c(0.5);
        assert!(matches!(herm_solve(&h, &CMat::identity(2, 2)), Err(Error::NotHermitian { .. })));
        let indef = CMat::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)]);
        assert!(matches!(herm_solve(&indef, &CMat::identity(2, 2)), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn psd_sqrt_cases() {
        let l = psd_sqrt_factor(&CMat::identity(3, 3)).unwrap();
        assert!((&l * l.adjoint() - CMat::identity(3, 3)).norm() < 1e-14);
        let d = CMat::from_row_slice(2, 2, &[c(4.0), c(0.0), c(0.0), c(9.0)]);
        let l = psd_sqrt_factor(&d).unwrap();
        assert!((&l * l.adjoint() - &d).norm() < 1e-13);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_cmat(&mut rng, 6, 4);
        let h = &a * a.adjoint(); // rank 4 PSD
        let l = psd_sqrt_factor(&h).unwrap();
        assert!((&l * l.adjoint() - &h).norm() <= 1e-10 * h.norm());

        let indef = CMat::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)]);
        assert!(matches!(psd_sqrt_factor(&indef), Err(Error::Indefinite { .. })));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5, -1.0, 2.0);
        // exact up to degree 9
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        let exact = (2f64.powi(9) + 1.0) / 9.0;
        assert!((integral - exact).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-14);
    }

    fn series_f64(x: f64) -> f64 {
        let q = -0.25 * x * x;
        let mut t = 1.0;
        let mut s = 1.0;
        for m in 1..120 {
            t *= q / ((m * m) as f64);
            s += t;
        }
        s
    }

    proptest! {
        #[test]
        fn kron_dims(m in 1usize..5, n in 1usize..5, p in 1usize..5, q in 1usize..5) {
            let out = kron(&CMat::zeros(m, n), &CMat::zeros(p, q));
            prop_assert_eq!(out.shape(), (m * p, n * q));
        }

        #[test]
        fn pface_single_block_is_hadamard(seed in 0u64..1000, p in 1usize..6, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cmat(&mut rng, p, n);
            let b = random_cmat(&mut rng, p, n);
            prop_assert_eq!(pface(&a, &b).unwrap(), hadamard(&a, &b).unwrap());
        }

        #[test]
        fn pface_dims(p in 1usize..5, k in 1usize..5, n in 1usize..5) {
            let out = pface(&CMat::zeros(p, n), &CMat::zeros(k * p, n)).unwrap();
            prop_assert_eq!(out.shape(), (k * p, n));
        }

        #[test]
        fn reshape_roundtrip(p in 1usize..=16, k in 1usize..=16, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = CVec::from_fn(p * k, |_, _| Complex64::new(rng.random(), rng.random()));
            let m = reshape_block(&v, p, k).unwrap();
            let stacked = CVec::from_iterator(p * k, m.column_iter().flat_map(|c| c.iter().copied().collect::<Vec<_>>()));
            prop_assert_eq!(stacked, v);
        }

        #[test]
        fn bessel_matches_series(x in -12.0f64..12.0) {
            prop_assert!((bessel_j0(x) - series_f64(x)).abs() <= 1e-10);
        }

        #[test]
        fn bessel_bounded(x in -100.0f64..100.0) {
            prop_assert!(bessel_j0(x).abs() <= 1.0);
        }

        #[test]
        fn herm_solve_residual(seed in 0u64..200, n in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_hpd(&mut rng, n);
            let b = random_cmat(&mut rng, n, 2);
            let x = herm_solve(&h, &b).unwrap();
            prop_assert!((&h * &x - &b).norm() / b.norm() <= 1e-10);
        }

        #[test]
        fn psd_sqrt_reconstructs(seed in 0u64..200, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_hpd(&mut rng, n);
            let l = psd_sqrt_factor(&h).unwrap();
            prop_assert!((&l * l.adjoint() - &h).norm() <= 1e-10 * h.norm());
        }
    }
}
