//! Pluggable denoising stage.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::load_volume;
use crate::kernel::{convolve_reflect, gaussian_kernel};
use crate::recon::{butterworth_filter, clip_negative, BUTTERWORTH_ORDER};
use crate::scalar::Real;
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Identity,
    Gaussian,
    Butterworth,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub name: String,
    pub kind: DenoiserKind,
    /// Gaussian standard deviation, cm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Butterworth cutoff, cycles/cm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<u32>,
    /// Directory holding `<case_id>.vol` files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dir: Option<PathBuf>,
}

impl DenoiserSpec {
    pub fn identity() -> Self {
        Self::bare("none", DenoiserKind::Identity)
    }

    pub fn gaussian(name: &str, sigma: f64) -> Self {
        Self {
            sigma: Some(sigma),
            ..Self::bare(name, DenoiserKind::Gaussian)
        }
    }

    /// Heavy smoothing reference (sigma = 1 cm).
    pub fn strong_smoothing() -> Self {
        Self::gaussian("strong_smoothing", 1.0)
    }

    pub fn butterworth(name: &str, cutoff: f64) -> Self {
        Self {
            cutoff: Some(cutoff),
            ..Self::bare(name, DenoiserKind::Butterworth)
        }
    }

    pub fn external(name: &str, source_dir: impl Into<PathBuf>) -> Self {
        Self {
            source_dir: Some(source_dir.into()),
            ..Self::bare(name, DenoiserKind::External)
        }
    }

    fn bare(name: &str, kind: DenoiserKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            sigma: None,
            cutoff: None,
            order: None,
            source_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: Option<f64>, what: &str| match v {
            Some(x) if x > 0.0 && x.is_finite() => Ok(()),
            _ => Err(Error::Parameter(format!("denoiser {}: {what} must be a positive number", self.name))),
        };
        if self.name.is_empty() || self.name.contains([',', '=', '/', ' ']) {
            return Err(Error::Parameter(format!("invalid denoiser name {:?}", self.name)));
        }
        match self.kind {
            DenoiserKind::Identity => Ok(()),
            DenoiserKind::Gaussian => positive(self.sigma, "sigma"),
            DenoiserKind::Butterworth => {
                if self.order == Some(0) {
                    return Err(Error::Parameter(format!("denoiser {}: order must be positive", self.name)));
                }
                positive(self.cutoff, "cutoff")
            }
            DenoiserKind::External => match &self.source_dir {
                Some(_) => Ok(()),
                None => Err(Error::Parameter(format!("denoiser {}: source_dir is required", self.name))),
            },
        }
    }
}

pub fn denoise<T: Real>(v: &Volume3D<T>, spec: &DenoiserSpec, case_id: &str) -> Result<Volume3D<T>> {
    spec.validate()?;
    match spec.kind {
        DenoiserKind::Identity => Ok(v.clone()),
        DenoiserKind::Gaussian => Ok(clip_negative(&gaussian_smooth(v, spec.sigma.unwrap_or_default()))),
        DenoiserKind::Butterworth => {
            let order = spec.order.unwrap_or(BUTTERWORTH_ORDER);
            Ok(clip_negative(&butterworth_filter(v, order, spec.cutoff.unwrap_or_default())?))
        }
        DenoiserKind::External => {
            let dir = spec.source_dir.as_ref().expect("validated");
            let path = dir.join(format!("{case_id}.vol"));
            let ingest_err = |reason: String| Error::Ingestion {
                case_id: case_id.to_string(),
                reason,
            };
            if !path.is_file() {
                return Err(ingest_err(format!("missing {}", path.display())));
            }
            let loaded: Volume3D<T> = load_volume(&path).map_err(|e| ingest_err(e.to_string()))?;
            if loaded.dims() != v.dims() {
                return Err(ingest_err(format!(
                    "{} has dims {:?}, expected {:?}",
                    path.display(),
                    loaded.dims(),
                    v.dims()
                )));
            }
            Ok(clip_negative(&loaded))
        }
    }
}

/// Separable Gaussian smoothing with reflective boundaries; `sigma` in cm.
pub fn gaussian_smooth<T: Real>(v: &Volume3D<T>, sigma: f64) -> Volume3D<T> {
    let dims = v.dims();
    let pitch = v.pitch();
    let mut cur = v.data().to_vec();
    let mut next = vec![T::zero(); cur.len()];
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let k: Vec<T> = gaussian_kernel(sigma / pitch[axis], 4.0).into_iter().map(T::lit).collect();
        if k.len() == 1 || dims[axis] == 1 {
            continue;
        }
        let stride = strides[axis];
        let n = dims[axis];
        let starts = (0..cur.len()).filter(|s| (s / stride) % n == 0);
        convolve_reflect(&cur, &mut next, n, stride, starts, &k);
        std::mem::swap(&mut cur, &mut next);
    }
    Volume3D::from_data(dims, pitch, cur).expect("smoothing preserves the grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::save_volume;

    fn bumpy() -> Volume3D<f64> {
        Volume3D::from_fn([12, 10, 6], [0.44; 3], |i, j, k| ((i * 7 + j * 3 + k * 11) % 13) as f64).unwrap()
    }

    #[test]
    fn identity_is_bitwise() {
        let v = bumpy();
        assert_eq!(denoise(&v, &DenoiserSpec::identity(), "c0").unwrap(), v);
    }

    #[test]
    fn gaussian_preserves_sum_and_never_raises_max() {
        let v = bumpy();
        let out = denoise(&v, &DenoiserSpec::gaussian("g", 0.8), "c0").unwrap();
        assert!(((out.sum() - v.sum()) / v.sum()).abs() < 1e-6);
        assert!(out.max() <= v.max());
        let big = denoise(&v, &DenoiserSpec::strong_smoothing(), "c0").unwrap();
        assert!(((big.sum() - v.sum()) / v.sum()).abs() < 1e-6);
    }

    #[test]
    fn built_ins_are_positively_homogeneous() {
        let v = bumpy();
        for spec in [DenoiserSpec::identity(), DenoiserSpec::gaussian("g", 0.6), DenoiserSpec::butterworth("b", 0.4)] {
            let a = 3.7;
            let lhs = denoise(&v.scaled(a), &spec, "c").unwrap();
            let rhs = denoise(&v, &spec, "c").unwrap().scaled(a);
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{}", spec.name);
            }
        }
    }

    #[test]
    fn external_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::<f32>::from_fn([6, 5, 4], [0.44; 3], |i, j, k| (i + j * k) as f32 * 0.25).unwrap();
        save_volume(&v, &dir.path().join("case_7.vol")).unwrap();
        let spec = DenoiserSpec::external("cnn", dir.path());
        let out = denoise(&Volume3D::<f32>::zeros([6, 5, 4], [0.44; 3]).unwrap(), &spec, "case_7").unwrap();
        assert!(out.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let missing = denoise(&v, &spec, "case_8").unwrap_err();
        assert!(matches!(&missing, Error::Ingestion { case_id, .. } if case_id == "case_8"));
        let wrong = Volume3D::<f32>::zeros([6, 5, 3], [0.44; 3]).unwrap();
        assert!(matches!(denoise(&wrong, &spec, "case_7"), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn invalid_specs() {
        assert!(DenoiserSpec::gaussian("g", 0.0).validate().is_err());
        assert!(DenoiserSpec::butterworth("b", -1.0).validate().is_err());
        let mut e = DenoiserSpec::external("e", "/tmp");
        e.source_dir = None;
        assert!(e.validate().is_err());
        assert!(DenoiserSpec::gaussian("bad name", 1.0).validate().is_err());
    }
}
