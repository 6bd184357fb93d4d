//! Infinite-horizon LQR gains via Newton-type Riccati iterations.
//!
//! Continuous time uses Kleinman's iteration, discrete time Hewer's; both need a
//! stabilizing seed. The continuous seed comes from Bass's shifted Lyapunov equation,
//! the discrete one from Riccati value iteration. Control law convention: u = −Kx.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

#[derive(Debug, Clone)]
pub struct LqrGain {
    pub k: Mat,
    pub p: Mat,
}

const MAX_NEWTON: usize = 200;

pub fn lqr_gain(a: &Mat, b: &Mat, q: &Mat, r: &Mat, discrete: bool) -> Result<LqrGain> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension(format!("LQR data: A {:?}, B {:?}, Q {:?}, R {:?}", a.shape(), b.shape(), q.shape(), r.shape())));
    }
    if linalg::min_sym_eigenvalue(q) < -1e-12 * (1.0 + q.amax()) {
        return Err(Error::InvalidArgument("Q must be positive semidefinite".into()));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument("R must be positive definite".into()));
    }
    if discrete {
        hewer(a, b, q, r)
    } else {
        kleinman(a, b, q, r)
    }
}

pub fn care_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Mat {
    let rinv = r.clone().try_inverse().expect("R positive definite");
    a.transpose() * p + p * a - p * b * rinv * b.transpose() * p + q
}

pub fn dare_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Mat {
    let s = r + b.transpose() * p * b;
    let sinv = s.try_inverse().expect("R + BᵀPB positive definite");
    a.transpose() * p * a - p - a.transpose() * p * b * sinv * b.transpose() * p * a + q
}

fn bass_seed(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if linalg::spectral_abscissa(a) < -1e-9 {
        return Ok(Mat::zeros(b.ncols(), n));
    }
    // badly scaled Gramians make some shifts fail numerically; try a few
    let base = a.norm() + 1.0;
    for beta in [base, 0.1 * base, 10.0 * base, 0.01 * base] {
        if linalg::spectral_abscissa(&(-(a + Mat::identity(n, n) * beta))) >= 0.0 {
            continue;
        }
        let shifted = a + Mat::identity(n, n) * beta;
        // (A+βI)X + X(A+βI)ᵀ = 2BBᵀ, i.e. ÃᵀX + XÃ + 2BBᵀ = 0 with Ã = −(A+βI)ᵀ
        let x = linalg::lyapunov_continuous(&(-shifted.transpose()), &(b * b.transpose() * 2.0))?;
        let inverse = x.clone().cholesky().map(|c| c.inverse()).or_else(|| x.clone().pseudo_inverse(1e-12 * (1.0 + x.amax())).ok());
        if let Some(xinv) = inverse {
            let k = b.transpose() * xinv;
            if linalg::spectral_abscissa(&(a - b * &k)) < 0.0 {
                return Ok(k);
            }
        }
    }
    Err(Error::NotStabilizable("no stabilizing seed from the shifted Lyapunov equation".into()))
}

fn kleinman(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<LqrGain> {
    let mut k = bass_seed(a, b)?;
    let rinv = r.clone().try_inverse().expect("checked above");
    let mut p_prev: Option<Mat> = None;
    for _ in 0..MAX_NEWTON {
        let acl = a - b * &k;
        let p = linalg::lyapunov_continuous(&acl, &(q + k.transpose() * r * &k))?;
        k = &rinv * b.transpose() * &p;
        if let Some(pp) = &p_prev {
            if (&p - pp).amax() <= 1e-14 * (1.0 + p.amax()) {
                return finalize(a, b, q, r, p, k, false);
            }
        }
        p_prev = Some(p);
    }
    let p = p_prev.expect("at least one iteration");
    finalize(a, b, q, r, p, k, false)
}

fn hewer(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<LqrGain> {
    let n = a.nrows();
    let gain = |p: &Mat| -> Option<Mat> { (r + b.transpose() * p * b).try_inverse().map(|s| s * b.transpose() * p * a) };
    let mut k = if linalg::spectral_radius(a) < 1.0 - 1e-12 {
        Mat::zeros(b.ncols(), n)
    } else {
        // doubling iteration: H_k is the Riccati value after 2^k steps, so slow poles near
        // the unit circle cost log(iterations) rather than iterations
        let r_inv = r.clone().try_inverse().ok_or_else(|| Error::NotStabilizable("singular R".into()))?;
        let eye = Mat::identity(n, n);
        let (mut ak, mut gk, mut hk) = (a.clone(), b * r_inv * b.transpose(), q.clone() + &eye * 1e-9);
        let mut seed = None;
        for _ in 0..200 {
            let w = (&eye + &gk * &hk).try_inverse().ok_or_else(|| Error::NotStabilizable("singular doubling step".into()))?;
            let aw = &ak * &w;
            let h_next = linalg::symmetrize(&(&hk + ak.transpose() * &hk * &w * &ak));
            gk = linalg::symmetrize(&(&gk + &aw * &gk * ak.transpose()));
            ak = &aw * &ak;
            let res = (&h_next - &hk).amax() / (1.0 + h_next.amax());
            hk = h_next;
            if !linalg::all_finite(hk.as_slice()) {
                break;
            }
            if let Some(kk) = gain(&hk) {
                if linalg::spectral_radius(&(a - b * &kk)) < 1.0 - 1e-12 {
                    seed = Some(kk);
                    if res <= 1e-12 {
                        break;
                    }
                }
            }
        }
        seed.ok_or_else(|| Error::NotStabilizable("Riccati doubling found no stabilizing gain".into()))?
    };
    let mut p_prev: Option<Mat> = None;
    for _ in 0..MAX_NEWTON {
        let acl = a - b * &k;
        let p = linalg::lyapunov_discrete(&acl, &(q + k.transpose() * r * &k))?;
        k = gain(&p).ok_or_else(|| Error::NotStabilizable("singular R + BᵀPB".into()))?;
        if let Some(pp) = &p_prev {
            if (&p - pp).amax() <= 1e-14 * (1.0 + p.amax()) {
                return finalize(a, b, q, r, p, k, true);
            }
        }
        p_prev = Some(p);
    }
    let p = p_prev.expect("at least one iteration");
    finalize(a, b, q, r, p, k, true)
}

fn finalize(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: Mat, k: Mat, discrete: bool) -> Result<LqrGain> {
    let acl = a - b * &k;
    let (res, stable) = if discrete { (dare_residual(a, b, q, r, &p), linalg::spectral_radius(&acl) < 1.0) } else { (care_residual(a, b, q, r, &p), linalg::spectral_abscissa(&acl) < 0.0) };
    let rel = res.amax() / p.amax().max(1e-300);
    if !stable || rel > 1e-8 || !linalg::all_finite(p.as_slice()) {
        return Err(Error::NotStabilizable(format!("Riccati iteration stagnated (relative residual {rel:.2e}, stable closed loop: {stable})")));
    }
    Ok(LqrGain { k, p })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn scalar_continuous() {
        let g = lqr_gain(&s(0.0), &s(1.0), &s(1.0), &s(1.0), false).unwrap();
        assert!((g.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((g.k[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_discrete() {
        let g = lqr_gain(&s(0.0), &s(1.0), &s(1.0), &s(1.0), true).unwrap();
        assert!((g.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(g.k[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn unstable_scalar_discrete() {
        // a = 2, b = 1, q = r = 1: P² − 4P − 1 = 0 → P = 2 + √5
        let g = lqr_gain(&s(2.0), &s(1.0), &s(1.0), &s(1.0), true).unwrap();
        assert!((g.p[(0, 0)] - (2.0 + 5f64.sqrt())).abs() < 1e-10);
    }

    #[test]
    fn double_integrator() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let g = lqr_gain(&a, &b, &Mat::identity(2, 2), &s(1.0), false).unwrap();
        // known closed form: K = [1, √3]
        assert!((g.k[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((g.k[(0, 1)] - 3f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn uncontrollable_unstable_mode_is_rejected() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(lqr_gain(&a, &b, &Mat::identity(2, 2), &s(1.0), false).is_err());
        let ad = Mat::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.5]);
        assert!(lqr_gain(&ad, &b, &Mat::identity(2, 2), &s(1.0), true).is_err());
    }
}
