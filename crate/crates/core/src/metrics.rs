//! Fidelity figures of merit against a reference volume.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel::{convolve_zero, gaussian_kernel};
use crate::scalar::Real;
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityResult {
    pub rmse: f64,
    pub ssim: f64,
    /// `f64::INFINITY` when the test volume equals the reference.
    pub psnr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Window radius in voxels.
    pub radius: usize,
    /// Window standard deviation in voxels.
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            radius: 5,
            sigma: 1.5,
        }
    }
}

pub fn rmse<T: Real>(test: &Volume3D<T>, reference: &Volume3D<T>) -> Result<T> {
    test.ensure_same_grid(reference, "rmse")?;
    let n = T::from_usize_lossy(test.len());
    let sq: T = test
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok((sq / n).sqrt())
}

pub fn psnr<T: Real>(test: &Volume3D<T>, reference: &Volume3D<T>, peak: T) -> Result<T> {
    let e = rmse(test, reference)?;
    Ok(psnr_from_rmse(e, peak))
}

pub fn psnr_from_rmse<T: Real>(rmse: T, peak: T) -> T {
    if rmse == T::zero() {
        T::infinity()
    } else {
        T::lit(20.0) * (peak / rmse).log10()
    }
}

/// Default dynamic range: the reference's max − min, or 1 for a constant
/// reference.
pub fn default_dynamic_range<T: Real>(reference: &Volume3D<T>) -> T {
    let r = reference.max() - reference.min();
    if r > T::zero() {
        r
    } else {
        T::one()
    }
}

/// Mean local SSIM with a truncated 3-D Gaussian window. Near the border the
/// window is renormalized over the voxels that exist.
pub fn ssim<T: Real>(
    test: &Volume3D<T>,
    reference: &Volume3D<T>,
    dynamic_range: T,
    params: &SsimParams,
) -> Result<T> {
    test.ensure_same_grid(reference, "ssim")?;
    if !(dynamic_range > T::zero()) {
        return Err(crate::error::Error::Parameter("SSIM dynamic range must be positive".into()));
    }
    let dims = test.dims();
    let raw = gaussian_kernel(params.sigma, params.radius as f64 / params.sigma);
    let r = raw.len() / 2;
    let kernel: Vec<T> = raw[r.saturating_sub(params.radius)..=r + params.radius.min(r)]
        .iter()
        .map(|&w| T::lit(w))
        .collect();

    let x = test.data();
    let y = reference.data();
    let ones = vec![T::one(); x.len()];
    let xx: Vec<T> = x.iter().map(|&a| a * a).collect();
    let yy: Vec<T> = y.iter().map(|&b| b * b).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();

    let norm = window(&ones, dims, &kernel);
    let mx = window(x, dims, &kernel);
    let my = window(y, dims, &kernel);
    let mxx = window(&xx, dims, &kernel);
    let myy = window(&yy, dims, &kernel);
    let mxy = window(&xy, dims, &kernel);

    let c1 = (T::lit(params.k1) * dynamic_range).powi(2);
    let c2 = (T::lit(params.k2) * dynamic_range).powi(2);
    let two = T::lit(2.0);
    let mut acc = T::zero();
    for i in 0..x.len() {
        let w = norm[i];
        let (ux, uy) = (mx[i] / w, my[i] / w);
        let vx = mxx[i] / w - ux * ux;
        let vy = myy[i] / w - uy * uy;
        let cxy = mxy[i] / w - ux * uy;
        let s = ((two * ux * uy + c1) * (two * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        acc += s.max(-T::one()).min(T::one());
    }
    Ok(acc / T::from_usize_lossy(x.len()))
}

fn window<T: Real>(src: &[T], dims: [usize; 3], kernel: &[T]) -> Vec<T> {
    let mut cur = src.to_vec();
    let mut next = vec![T::zero(); cur.len()];
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        if dims[axis] == 1 {
            continue;
        }
        let (stride, n) = (strides[axis], dims[axis]);
        convolve_zero(&cur, &mut next, n, stride, (0..cur.len()).filter(|s| (s / stride) % n == 0), kernel);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// RMSE, SSIM (default window, reference dynamic range) and PSNR with the
/// reference maximum as peak.
pub fn fidelity<T: Real>(test: &Volume3D<T>, reference: &Volume3D<T>) -> Result<FidelityResult> {
    let e = rmse(test, reference)?;
    let s = ssim(test, reference, default_dynamic_range(reference), &SsimParams::default())?;
    let peak = if reference.max() > T::zero() { reference.max() } else { T::one() };
    Ok(FidelityResult {
        rmse: e.as_f64(),
        ssim: s.as_f64(),
        psnr: psnr_from_rmse(e, peak).as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<f64>, dims: [usize; 3]) -> Volume3D<f64> {
        Volume3D::from_data(dims, [1.0; 3], data).unwrap()
    }

    fn pattern(seed: u64) -> Volume3D<f64> {
        let mut s = seed;
        Volume3D::from_fn([10, 9, 7], [1.0; 3], |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 40) as f64 / 65536.0
        })
        .unwrap()
    }

    #[test]
    fn rmse_cases() {
        let a = vol(vec![0.0, 0.0], [2, 1, 1]);
        let b = vol(vec![1.0, 1.0], [2, 1, 1]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&a, &b).unwrap(), 1.0);
        let (x, y) = (pattern(1), pattern(2));
        let k = -2.5;
        let lhs = rmse(&x.scaled(k), &y.scaled(k)).unwrap();
        let rhs = k.abs() * rmse(&x, &y).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        assert!(rmse(&a, &vol(vec![0.0; 3], [3, 1, 1])).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let (x, y) = (pattern(3), pattern(4));
        let p = SsimParams::default();
        assert_eq!(ssim(&x, &x, 255.0, &p).unwrap(), 1.0);
        let s1 = ssim(&x, &y, 255.0, &p).unwrap();
        let s2 = ssim(&y, &x, 255.0, &p).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(s1 < 1.0 && s1 >= -1.0);

        let a = Volume3D::<f64>::filled([8, 8, 8], [1.0; 3], 100.0).unwrap();
        let b = Volume3D::<f64>::filled([8, 8, 8], [1.0; 3], 50.0).unwrap();
        let s = ssim(&a, &b, 255.0, &p).unwrap();
        assert!((s - 10006.5025 / 12506.5025).abs() < 1e-12);
    }

    #[test]
    fn psnr_cases() {
        let x = pattern(5);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr_from_rmse(2.0f64, 2.0).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for step in 1..10 {
            let y = x.map(|v| v + 0.1 * step as f64);
            let p = psnr(&y, &x, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn fidelity_bundle() {
        let x = pattern(6);
        let f = fidelity(&x, &x).unwrap();
        assert_eq!(f.rmse, 0.0);
        assert_eq!(f.ssim, 1.0);
        assert!(f.psnr.is_infinite());
    }
}
