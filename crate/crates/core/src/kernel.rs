//! Sampled 1-D Gaussian kernels and separable convolution helpers.

use crate::scalar::Real;

pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Normalized Gaussian sampled at integer offsets `-r..=r`, `r = ceil(truncate * sigma)`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let r = (truncate * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolves `n` strided lines with a centered kernel and zero boundaries.
///
/// `src` and `dst` use the same layout; element `m` of line `l` lives at
/// `l_offset(l) + m * stride`.
pub(crate) fn convolve_zero<T: Real>(
    src: &[T],
    dst: &mut [T],
    len: usize,
    stride: usize,
    starts: impl Iterator<Item = usize>,
    kernel: &[T],
) {
    let r = (kernel.len() / 2) as isize;
    for s in starts {
        for m in 0..len as isize {
            let lo = (m - r).max(0);
            let hi = (m + r).min(len as isize - 1);
            let mut acc = T::zero();
            for q in lo..=hi {
                acc += kernel[(q - m + r) as usize] * src[s + q as usize * stride];
            }
            dst[s + m as usize * stride] = acc;
        }
    }
}

/// Half-sample symmetric reflection of an out-of-range index.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Like [`convolve_zero`] but with reflective boundaries.
pub(crate) fn convolve_reflect<T: Real>(
    src: &[T],
    dst: &mut [T],
    len: usize,
    stride: usize,
    starts: impl Iterator<Item = usize>,
    kernel: &[T],
) {
    let r = (kernel.len() / 2) as isize;
    for s in starts {
        for m in 0..len as isize {
            let mut acc = T::zero();
            for (t, &w) in kernel.iter().enumerate() {
                let q = reflect(m + t as isize - r, len);
                acc += w * src[s + q * stride];
            }
            dst[s + m as usize * stride] = acc;
        }
    }
}
