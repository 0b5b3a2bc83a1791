//! ROI extraction, gray-level windowing, rotationally symmetric frequency
//! channels and the channelized Hotelling observer.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::eigen::{dot, eig_decompose, Matrix, EIGEN_FLOOR};
use crate::error::{Error, Result};
use crate::recon::{fft3d, fft_freqs};
use crate::scalar::Real;
use crate::volume::Volume3D;

pub const ROI_SIZE: usize = 32;
pub const GRAY_MAX: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    DefectPresent,
    DefectAbsent,
}

impl Truth {
    pub fn label(self) -> &'static str {
        match self {
            Truth::DefectPresent => "present",
            Truth::DefectAbsent => "absent",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiImage<T> {
    pub size: usize,
    /// Row-major, row = y, column = x.
    pub pixels: Vec<T>,
    pub case_id: String,
    pub truth: Truth,
}

/// Crops a `ROI_SIZE` square from axial slice `center[2]`, covering rows and
/// columns `[c - ROI_SIZE/2, c + ROI_SIZE/2)`.
pub fn extract_roi<T: Real>(
    v: &Volume3D<T>,
    center: [usize; 3],
    case_id: &str,
    truth: Truth,
) -> Result<RoiImage<T>> {
    extract_roi_sized(v, center, ROI_SIZE, case_id, truth)
}

pub fn extract_roi_sized<T: Real>(
    v: &Volume3D<T>,
    center: [usize; 3],
    size: usize,
    case_id: &str,
    truth: Truth,
) -> Result<RoiImage<T>> {
    let [nx, ny, nz] = v.dims();
    let half = size / 2;
    if center[2] >= nz {
        return Err(Error::Extraction(format!("slice {} outside a {nz}-slice volume", center[2])));
    }
    for (axis, (&c, n)) in center.iter().zip([nx, ny]).enumerate() {
        if c < half || c - half + size > n {
            return Err(Error::Extraction(format!(
                "{size}x{size} crop centered at {c} on axis {axis} leaves the {n}-voxel slice"
            )));
        }
    }
    let (x0, y0) = (center[0] - half, center[1] - half);
    let slice = v.axial_slice(center[2]);
    let pixels = (y0..y0 + size)
        .flat_map(|y| slice[y * nx + x0..y * nx + x0 + size].iter().copied())
        .collect();
    Ok(RoiImage {
        size,
        pixels,
        case_id: case_id.to_string(),
        truth,
    })
}

/// Affine map of the ROI's `[min, max]` onto `[0, 255]`; constant ROIs map to 0.
pub fn window_gray<T: Real>(roi: &RoiImage<T>) -> RoiImage<T> {
    let lo = roi.pixels.iter().copied().fold(T::infinity(), T::min);
    let hi = roi.pixels.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    let gray = T::lit(GRAY_MAX);
    let pixels = if range > T::zero() {
        roi.pixels.iter().map(|&p| ((p - lo) / range * gray).min(gray)).collect()
    } else {
        vec![T::zero(); roi.pixels.len()]
    };
    RoiImage {
        pixels,
        ..roi.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix<T> {
    pub size: usize,
    /// `L + 1` radial band edges, cycles/pixel.
    pub band_edges: Vec<f64>,
    /// `L` orthonormal rows of length `size * size`.
    pub rows: Vec<Vec<T>>,
    /// Frequency-grid oversampling used to populate the narrowest band.
    pub oversample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub count: usize,
    pub start: f64,
    pub width: f64,
    pub size: usize,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            count: 5,
            start: 1.0 / 64.0,
            width: 1.0 / 64.0,
            size: ROI_SIZE,
        }
    }
}

/// Band edges `f0, f0 + w0, f0 + w0 + 2 w0, ...` with doubling widths.
pub fn band_edges(count: usize, start: f64, width: f64) -> Vec<f64> {
    let mut edges = vec![start];
    let mut w = width;
    for _ in 0..count {
        let next = edges.last().copied().unwrap_or(start) + w;
        edges.push(next);
        w *= 2.0;
    }
    edges
}

const MAX_OVERSAMPLE: usize = 16;

/// Rotationally symmetric band-pass channels.
///
/// Each channel is the inverse DFT of the indicator of radial frequencies in
/// `[edge_m, edge_{m+1})`. On a `size x size` grid a band narrower than the
/// frequency spacing `1/size` may contain no samples, so the indicators are
/// laid out on the smallest power-of-two oversampled grid where every band is
/// populated, transformed, and cropped to `size x size` around the origin.
/// The cropped rows are made zero-mean and symmetrically orthonormalized
/// (`U ← (U Uᵀ)^(-1/2) U`), which leaves an already orthonormal set unchanged.
pub fn build_channels<T: Real>(params: &ChannelParams) -> Result<ChannelMatrix<T>> {
    let ChannelParams { count, start, width, size } = *params;
    if count == 0 || size < 2 || !(start > 0.0) || !(width > 0.0) {
        return Err(Error::Parameter(format!("invalid channel parameters {params:?}")));
    }
    let edges = band_edges(count, start, width);
    let top = *edges.last().expect("non-empty");
    if top > 0.5 + 1e-12 {
        return Err(Error::Parameter(format!("top band edge {top} exceeds Nyquist (0.5 cycles/pixel)")));
    }

    let mut oversample = 1;
    let radii = loop {
        let m = size * oversample;
        let f = fft_freqs(m, 1.0);
        let radii: Vec<f64> = (0..m * m).map(|i| f[i % m].hypot(f[i / m])).collect();
        let populated = edges
            .windows(2)
            .all(|b| radii.iter().any(|&r| r >= b[0] && r < b[1]));
        if populated {
            break radii;
        }
        oversample *= 2;
        if oversample > MAX_OVERSAMPLE {
            return Err(Error::Parameter(format!("a channel band in {edges:?} is too narrow to sample")));
        }
    };
    let m = size * oversample;

    let mut rows: Vec<Vec<T>> = edges
        .windows(2)
        .map(|b| {
            let mut buf: Vec<Complex<T>> = radii
                .iter()
                .map(|&r| Complex::new(if r >= b[0] && r < b[1] { T::one() } else { T::zero() }, T::zero()))
                .collect();
            fft3d(&mut buf, [m, m, 1], true);
            // Spatial origin goes to pixel (size/2, size/2) of the crop.
            let half = size / 2;
            let mut row = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let sx = (x + m - half) % m;
                    let sy = (y + m - half) % m;
                    row.push(buf[sx + m * sy].re);
                }
            }
            let mean = row.iter().copied().sum::<T>() / T::from_usize_lossy(row.len());
            row.iter_mut().for_each(|v| *v -= mean);
            row
        })
        .collect();

    let gram: Matrix<T> = rows.iter().map(|a| rows.iter().map(|b| dot(a, b)).collect()).collect();
    let eig = eig_decompose(&gram)?;
    if eig.values.iter().any(|&l| !(l > T::zero())) {
        return Err(Error::Numerical("channel rows are linearly dependent".into()));
    }
    let inv_sqrt = eig.spectral_map(|l| l.sqrt().recip());
    rows = inv_sqrt
        .iter()
        .map(|coef| {
            let mut out = vec![T::zero(); size * size];
            for (c, r) in coef.iter().zip(&rows) {
                out.iter_mut().zip(r).for_each(|(o, v)| *o += *c * *v);
            }
            out
        })
        .collect();

    Ok(ChannelMatrix {
        size,
        band_edges: edges,
        rows,
        oversample,
    })
}

impl<T: Real> ChannelMatrix<T> {
    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn apply(&self, pixels: &[T]) -> Result<Vec<T>> {
        if pixels.len() != self.size * self.size {
            return Err(Error::Parameter(format!(
                "image has {} pixels, channels expect {}x{}",
                pixels.len(),
                self.size,
                self.size
            )));
        }
        Ok(self.rows.iter().map(|r| dot(r, pixels)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T> {
    pub values: Vec<T>,
    pub case_id: String,
    pub truth: Truth,
}

pub fn apply_channels<T: Real>(u: &ChannelMatrix<T>, roi: &RoiImage<T>) -> Result<FeatureVector<T>> {
    if roi.size != u.size {
        return Err(Error::Parameter(format!("ROI size {} differs from channel size {}", roi.size, u.size)));
    }
    Ok(FeatureVector {
        values: u.apply(&roi.pixels)?,
        case_id: roi.case_id.clone(),
        truth: roi.truth,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats<T> {
    pub mean_present: Vec<T>,
    pub mean_absent: Vec<T>,
    pub delta_mean: Vec<T>,
    /// Equal-weight average of the two class covariances (`n - 1` divisor).
    pub cov: Matrix<T>,
}

fn class_moments<T: Real>(xs: &[&[T]]) -> (Vec<T>, Matrix<T>) {
    let l = xs[0].len();
    let n = T::from_usize_lossy(xs.len());
    let mut mean = vec![T::zero(); l];
    for x in xs {
        mean.iter_mut().zip(x.iter()).for_each(|(m, v)| *m += *v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![T::zero(); l]; l];
    for x in xs {
        for i in 0..l {
            let di = x[i] - mean[i];
            for j in 0..=i {
                cov[i][j] += di * (x[j] - mean[j]);
            }
        }
    }
    let denom = n - T::one();
    for i in 0..l {
        for j in 0..=i {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    (mean, cov)
}

fn stats_from_slices<T: Real>(present: &[&[T]], absent: &[&[T]]) -> Result<EnsembleStats<T>> {
    if present.len() < 2 || absent.len() < 2 {
        return Err(Error::Parameter(format!(
            "each class needs at least 2 feature vectors (got {} present, {} absent)",
            present.len(),
            absent.len()
        )));
    }
    let l = present[0].len();
    if l == 0 || present.iter().chain(absent).any(|x| x.len() != l) {
        return Err(Error::Parameter("feature vectors differ in length".into()));
    }
    let (mp, kp) = class_moments(present);
    let (ma, ka) = class_moments(absent);
    let half = T::lit(0.5);
    Ok(EnsembleStats {
        delta_mean: mp.iter().zip(&ma).map(|(p, a)| *p - *a).collect(),
        mean_present: mp,
        mean_absent: ma,
        cov: kp
            .iter()
            .zip(&ka)
            .map(|(rp, ra)| rp.iter().zip(ra).map(|(p, a)| (*p + *a) * half).collect())
            .collect(),
    })
}

pub fn ensemble_stats<T: Real>(
    present: &[FeatureVector<T>],
    absent: &[FeatureVector<T>],
) -> Result<EnsembleStats<T>> {
    let p: Vec<&[T]> = present.iter().map(|f| f.values.as_slice()).collect();
    let a: Vec<&[T]> = absent.iter().map(|f| f.values.as_slice()).collect();
    stats_from_slices(&p, &a)
}

/// `K⁻¹` by eigen-inversion with eigenvalues floored at
/// `EIGEN_FLOOR * λ_max`.
pub fn regularized_inverse<T: Real>(cov: &[Vec<T>]) -> Result<Matrix<T>> {
    let eig = eig_decompose(cov)?;
    let lmax = eig.values[0];
    if !(lmax > T::zero()) {
        return Err(Error::Numerical("feature covariance has no positive eigenvalue".into()));
    }
    let floor = T::lit(EIGEN_FLOOR) * lmax;
    Ok(eig.spectral_map(|l| l.max(floor).recip()))
}

/// Hotelling template `w = K⁻¹ Δv̄`.
pub fn hotelling_template<T: Real>(stats: &EnsembleStats<T>) -> Result<Vec<T>> {
    if stats.delta_mean.iter().all(|d| *d == T::zero()) {
        return Ok(vec![T::zero(); stats.delta_mean.len()]);
    }
    let inv = regularized_inverse(&stats.cov)?;
    Ok(inv.iter().map(|row| dot(row, &stats.delta_mean)).collect())
}

/// `SNR = sqrt(Δv̄ᵀ K⁻¹ Δv̄)`.
pub fn cho_snr<T: Real>(stats: &EnsembleStats<T>) -> Result<T> {
    let w = hotelling_template(stats)?;
    Ok(dot(&w, &stats.delta_mean).max(T::zero()).sqrt())
}

/// Leave-one-out test statistics: each case is scored with the template
/// estimated from every other case. Output order matches input order.
pub fn cho_loo_test_statistics<T: Real>(
    present: &[FeatureVector<T>],
    absent: &[FeatureVector<T>],
) -> Result<(Vec<T>, Vec<T>)> {
    if present.len() < 3 || absent.len() < 3 {
        return Err(Error::Parameter("leave-one-out needs at least 3 cases per class".into()));
    }
    let p: Vec<&[T]> = present.iter().map(|f| f.values.as_slice()).collect();
    let a: Vec<&[T]> = absent.iter().map(|f| f.values.as_slice()).collect();

    let score = |held: &[T], keep_p: Vec<&[T]>, keep_a: Vec<&[T]>, id: &str| -> Result<T> {
        let stats = stats_from_slices(&keep_p, &keep_a)?;
        let w = hotelling_template(&stats)
            .map_err(|e| Error::Numerical(format!("leave-one-out template without case {id}: {e}")))?;
        Ok(dot(&w, held))
    };

    let tp = (0..p.len())
        .into_par_iter()
        .map(|i| score(p[i], without(&p, i), a.clone(), &present[i].case_id))
        .collect::<Result<Vec<T>>>()?;
    let ta = (0..a.len())
        .into_par_iter()
        .map(|i| score(a[i], p.clone(), without(&a, i), &absent[i].case_id))
        .collect::<Result<Vec<T>>>()?;
    Ok((tp, ta))
}

fn without<'a, T>(set: &[&'a [T]], i: usize) -> Vec<&'a [T]> {
    set.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| *x).collect()
}
