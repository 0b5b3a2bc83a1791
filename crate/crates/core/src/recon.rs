//! Ordered-subsets EM reconstruction and post-processing.

use num_traits::Zero;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ProjectionSet, Projector, SystemMatrix, SystemModel};
use crate::scalar::Real;
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub n_iterations: usize,
    pub n_subsets: usize,
    pub model_attenuation: bool,
    pub model_blur: bool,
    pub epsilon: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_iterations: 4,
            n_subsets: 4,
            model_attenuation: true,
            model_blur: true,
            epsilon: 1e-12,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self, n_views: usize) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::Parameter("n_iterations must be at least 1".into()));
        }
        if self.n_subsets == 0 || n_views % self.n_subsets != 0 {
            return Err(Error::Parameter(format!(
                "{n_views} views cannot be split into {} equal subsets",
                self.n_subsets
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Round-robin subsets: view `i` belongs to subset `i % n_subsets`.
pub fn subsets(n_views: usize, n_subsets: usize) -> Vec<Vec<usize>> {
    (0..n_subsets)
        .map(|s| (s..n_views).step_by(n_subsets).collect())
        .collect()
}

/// Subsets and per-subset sensitivity images for one system matrix, reusable
/// across data sets.
pub struct OsemPlan<'a, T: Real, S: SystemMatrix<T>> {
    system: &'a S,
    cfg: ReconConfig,
    subsets: Vec<Vec<usize>>,
    sensitivity: Vec<Vec<T>>,
}

impl<'a, T: Real, S: SystemMatrix<T>> OsemPlan<'a, T, S> {
    pub fn new(system: &'a S, cfg: &ReconConfig) -> Result<Self> {
        cfg.validate(system.n_views())?;
        let subsets = subsets(system.n_views(), cfg.n_subsets);
        let ones = vec![T::one(); system.bins_per_view()];
        let sensitivity = subsets
            .iter()
            .map(|views| {
                let items: Vec<(usize, &[T])> = views.iter().map(|&v| (v, ones.as_slice())).collect();
                system.back_views(&items)
            })
            .collect();
        Ok(Self {
            system,
            cfg: cfg.clone(),
            subsets,
            sensitivity,
        })
    }

    /// Runs OSEM from a uniform unit image.
    pub fn run(&self, data: &[Vec<T>]) -> Result<Vec<T>> {
        self.run_with(data, |_, _| {})
    }

    /// Runs OSEM, calling `observe(iteration, image)` after each full iteration.
    pub fn run_with(&self, data: &[Vec<T>], mut observe: impl FnMut(usize, &[T])) -> Result<Vec<T>> {
        let sys = self.system;
        if data.len() != sys.n_views() || data.iter().any(|v| v.len() != sys.bins_per_view()) {
            return Err(Error::Geometry(format!(
                "projection data shape does not match the {}-view system",
                sys.n_views()
            )));
        }
        let eps = T::lit(self.cfg.epsilon);
        let mut image = vec![T::one(); sys.image_len()];
        for iter in 0..self.cfg.n_iterations {
            for (views, sens) in self.subsets.iter().zip(&self.sensitivity) {
                let est = sys.forward_views(&image, views);
                let ratios: Vec<Vec<T>> = views
                    .iter()
                    .zip(&est)
                    .map(|(&v, e)| {
                        data[v]
                            .iter()
                            .zip(e)
                            .map(|(&y, &m)| if m > eps { y / m } else { T::zero() })
                            .collect()
                    })
                    .collect();
                let items: Vec<(usize, &[T])> = views.iter().copied().zip(ratios.iter().map(Vec::as_slice)).collect();
                let corr = sys.back_views(&items);
                for ((f, c), s) in image.iter_mut().zip(&corr).zip(sens) {
                    *f = if *s > eps { *f * *c / *s } else { T::zero() };
                }
            }
            observe(iter + 1, &image);
        }
        Ok(image)
    }
}

/// Poisson log-likelihood `Σ y ln ŷ − ŷ` (data-only constant dropped).
pub fn poisson_log_likelihood<T: Real, S: SystemMatrix<T>>(system: &S, image: &[T], data: &[Vec<T>]) -> f64 {
    let views: Vec<usize> = (0..system.n_views()).collect();
    let est = system.forward_views(image, &views);
    est.iter()
        .zip(data)
        .flat_map(|(e, y)| e.iter().zip(y))
        .map(|(&m, &y)| {
            let (m, y) = (m.as_f64(), y.as_f64());
            if y > 0.0 {
                y * m.ln() - m
            } else {
                -m
            }
        })
        .sum()
}

/// OSEM reconstruction with the same forward model used for simulation.
pub fn osem<T: Real>(
    p: &ProjectionSet<T>,
    attenuation: &Volume3D<T>,
    system: &SystemModel,
    cfg: &ReconConfig,
) -> Result<Volume3D<T>> {
    if &p.system != system {
        return Err(Error::Geometry("projection data were acquired with a different system model".into()));
    }
    let projector = recon_projector(system, attenuation, cfg)?;
    reconstruct(&projector, p, cfg, attenuation.pitch())
}

/// Builds the projector used by reconstruction for a given attenuation map.
pub fn recon_projector<T: Real>(
    system: &SystemModel,
    attenuation: &Volume3D<T>,
    cfg: &ReconConfig,
) -> Result<Projector<T>> {
    cfg.validate(system.n_views)?;
    Projector::new(
        system,
        attenuation.dims(),
        attenuation.pitch(),
        cfg.model_attenuation.then_some(attenuation),
        cfg.model_blur,
    )
}

pub fn reconstruct<T: Real>(
    projector: &Projector<T>,
    p: &ProjectionSet<T>,
    cfg: &ReconConfig,
    pitch: [f64; 3],
) -> Result<Volume3D<T>> {
    let plan = OsemPlan::new(projector, cfg)?;
    let image = plan.run(p.views())?;
    Volume3D::from_data(projector.dims(), pitch, image)
}

/// Transfer-function convention for the Butterworth filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ButterworthResponse {
    /// `|H| = (1 + (f/fc)^(2n))^(-1/2)`; the cutoff is the half-power point.
    #[default]
    Amplitude,
    /// `H = (1 + (f/fc)^(2n))^(-1)`.
    SquaredMagnitude,
}

impl ButterworthResponse {
    pub fn gain(self, f: f64, order: u32, cutoff: f64) -> f64 {
        let q = 1.0 + (f / cutoff).powi(2 * order as i32);
        match self {
            ButterworthResponse::Amplitude => q.sqrt().recip(),
            ButterworthResponse::SquaredMagnitude => q.recip(),
        }
    }
}

pub const BUTTERWORTH_ORDER: u32 = 5;
pub const BUTTERWORTH_CUTOFF: f64 = 0.4;

pub fn butterworth_filter<T: Real>(v: &Volume3D<T>, order: u32, cutoff: f64) -> Result<Volume3D<T>> {
    butterworth_filter_with(v, order, cutoff, ButterworthResponse::default())
}

/// 3-D radial Butterworth low-pass applied in the DFT domain (periodic
/// boundaries). Frequencies are in cycles/cm from the voxel pitch.
pub fn butterworth_filter_with<T: Real>(
    v: &Volume3D<T>,
    order: u32,
    cutoff: f64,
    response: ButterworthResponse,
) -> Result<Volume3D<T>> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(Error::Parameter(format!("Butterworth cutoff must be positive, got {cutoff}")));
    }
    if order == 0 {
        return Err(Error::Parameter("Butterworth order must be at least 1".into()));
    }
    let dims = v.dims();
    let pitch = v.pitch();
    let mut buf: Vec<Complex<T>> = v.data().iter().map(|&x| Complex::new(x, T::zero())).collect();
    fft3d(&mut buf, dims, false);
    let freqs: Vec<Vec<f64>> = (0..3).map(|a| fft_freqs(dims[a], pitch[a])).collect();
    let scale = T::from_usize_lossy(buf.len()).recip();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let f = (freqs[0][i].powi(2) + freqs[1][j].powi(2) + freqs[2][k].powi(2)).sqrt();
                let g = T::lit(response.gain(f, order, cutoff)) * scale;
                let idx = i + dims[0] * (j + dims[1] * k);
                buf[idx] = buf[idx] * g;
            }
        }
    }
    fft3d(&mut buf, dims, true);
    Volume3D::from_data(dims, pitch, buf.into_iter().map(|c| c.re).collect())
}

/// DFT sample frequencies in cycles per unit length, standard wraparound order.
pub(crate) fn fft_freqs(n: usize, d: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let kk = if k <= (n - 1) / 2 { k as f64 } else { k as f64 - n as f64 };
            kk / (n as f64 * d)
        })
        .collect()
}

/// In-place unnormalized 3-D FFT over an x-fastest buffer.
pub(crate) fn fft3d<T: Real>(buf: &mut [Complex<T>], dims: [usize; 3], inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let stride = strides[axis];
        let mut line = vec![Complex::zero(); n];
        let total = buf.len();
        for start in 0..total {
            // Line starts are indices whose coordinate along `axis` is zero.
            if (start / stride) % n != 0 {
                continue;
            }
            for (m, l) in line.iter_mut().enumerate() {
                *l = buf[start + m * stride];
            }
            fft.process(&mut line);
            for (m, l) in line.iter().enumerate() {
                buf[start + m * stride] = *l;
            }
        }
    }
}

pub fn clip_negative<T: Real>(v: &Volume3D<T>) -> Volume3D<T> {
    v.map(|x| x.max(T::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{add_poisson_noise, project, DenseSystem, ProjectionSet};

    #[test]
    fn round_robin_subsets() {
        assert_eq!(subsets(8, 4), vec![vec![0, 4], vec![1, 5], vec![2, 6], vec![3, 7]]);
        assert_eq!(subsets(3, 1), vec![vec![0, 1, 2]]);
        let bad = ReconConfig { n_subsets: 7, ..ReconConfig::default() };
        assert!(bad.validate(60).is_err());
        let bad = ReconConfig { n_iterations: 0, ..ReconConfig::default() };
        assert!(bad.validate(60).is_err());
    }

    #[test]
    fn identity_system_reaches_data() {
        let sys = DenseSystem::<f64>::identity(2).unwrap();
        let cfg = ReconConfig { n_iterations: 1, n_subsets: 1, ..ReconConfig::default() };
        let plan = OsemPlan::new(&sys, &cfg).unwrap();
        assert_eq!(plan.run(&[vec![3.0, 5.0]]).unwrap(), vec![3.0, 5.0]);
    }

    #[test]
    fn zero_data_reconstructs_to_zero() {
        let sys = SystemModel {
            n_views: 8,
            detector_dims: [12, 2],
            bin_pitch: 0.5,
            orbit_radius: 10.0,
            ..SystemModel::default()
        };
        let mu = Volume3D::<f64>::filled([8, 8, 2], [0.5; 3], 0.1).unwrap();
        let p = ProjectionSet::zeros(sys.clone()).unwrap();
        let cfg = ReconConfig { n_iterations: 1, ..ReconConfig::default() };
        let out = osem(&p, &mu, &sys, &cfg).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn osem_stays_nonnegative_and_rejects_foreign_data() {
        let sys = SystemModel {
            n_views: 8,
            detector_dims: [12, 2],
            bin_pitch: 0.5,
            orbit_radius: 10.0,
            ..SystemModel::default()
        };
        let dims = [8, 8, 2];
        let act = Volume3D::<f64>::from_fn(dims, [0.5; 3], |i, j, _| if (2..6).contains(&i) && j > 3 { 4.0 } else { 1.0 })
            .unwrap();
        let mu = Volume3D::filled(dims, [0.5; 3], 0.1).unwrap();
        let clean = project(&act, &mu, &sys).unwrap();
        let noisy = add_poisson_noise(&clean, 4).unwrap();
        let cfg = ReconConfig { n_subsets: 2, ..ReconConfig::default() };
        let out = osem(&noisy, &mu, &sys, &cfg).unwrap();
        assert!(out.data().iter().all(|&x| x >= 0.0 && x.is_finite()));
        let other = SystemModel { n_views: 4, ..sys.clone() };
        assert!(matches!(osem(&noisy, &mu, &other, &cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn butterworth_preserves_constants() {
        let v = Volume3D::<f64>::filled([8, 6, 4], [0.44; 3], 3.25).unwrap();
        let out = butterworth_filter(&v, 5, 0.4).unwrap();
        for x in out.data() {
            assert!((x - 3.25).abs() <= 1e-9 * 3.25);
        }
        assert!(butterworth_filter(&v, 5, 0.0).is_err());
    }

    #[test]
    fn butterworth_gain_at_cutoff() {
        // 4 cycles over 32 voxels of 0.3125 cm is exactly 0.4 cycles/cm.
        let v = Volume3D::<f64>::from_fn([32, 4, 4], [0.3125; 3], |i, _, _| {
            (std::f64::consts::TAU * 4.0 * i as f64 / 32.0).cos()
        })
        .unwrap();
        let out = butterworth_filter(&v, 5, 0.4).unwrap();
        let gain = out.get(0, 0, 0) / v.get(0, 0, 0);
        assert!((gain - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.02 * std::f64::consts::FRAC_1_SQRT_2);
        let sq = butterworth_filter_with(&v, 5, 0.4, ButterworthResponse::SquaredMagnitude).unwrap();
        assert!((sq.get(0, 0, 0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn clip_negative_behaviour() {
        let v = Volume3D::<f64>::from_data([3, 1, 1], [1.0; 3], vec![-0.5, 0.0, 2.0]).unwrap();
        let c = clip_negative(&v);
        assert_eq!(c.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(clip_negative(&c), c);
        assert!(c.sum() > v.sum());
        let pos = Volume3D::<f64>::from_data([2, 1, 1], [1.0; 3], vec![1.0, 2.0]).unwrap();
        assert_eq!(clip_negative(&pos), pos);
    }
}
