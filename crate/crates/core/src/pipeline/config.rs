use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoise::DenoiserSpec;
use crate::eigen::AucConvention;
use crate::error::{Error, Result};
use crate::imaging::SystemModel;
use crate::observer::ChannelParams;
use crate::phantom::{AnatomyParams, ContrastConvention, DefectSpec, UptakeParams};
use crate::recon::{ButterworthResponse, ReconConfig, BUTTERWORTH_CUTOFF, BUTTERWORTH_ORDER};
use crate::roc::{DEFAULT_LEVEL, DEFAULT_N_BOOT};

pub const DESK_TEST_PAIRS: usize = 50;
pub const PAPER_TEST_PAIRS: usize = 400;
pub const TRAIN_PAIRS: usize = 200;
pub const NORMAL_DOSE_COUNTS: f64 = 12e6;
/// Detector bins the normal-dose count total refers to (128x114).
pub const COUNT_REFERENCE_BINS: usize = 128 * 114;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Population {
    pub male: AnatomyParams,
    pub female: AnatomyParams,
    pub uptake: UptakeParams,
}

impl Default for Population {
    fn default() -> Self {
        Self {
            male: AnatomyParams::male(),
            female: AnatomyParams::female(),
            uptake: UptakeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [usize; 3],
    /// Voxel size, cm.
    pub pitch: [f64; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 32],
            pitch: [0.44; 3],
        }
    }
}

/// Post-reconstruction low-pass filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub order: u32,
    /// Cycles/cm.
    pub cutoff: f64,
    pub response: ButterworthResponse,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            order: BUTTERWORTH_ORDER,
            cutoff: BUTTERWORTH_CUTOFF,
            response: ButterworthResponse::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverConfig {
    pub channels: ChannelParams,
    pub n_boot: usize,
    pub ci_level: f64,
    pub auc_convention: AucConvention,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            channels: ChannelParams::default(),
            n_boot: DEFAULT_N_BOOT,
            ci_level: DEFAULT_LEVEL,
            auc_convention: AucConvention::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub n_train_pairs: usize,
    pub n_test_pairs: usize,
    /// Also simulate and reconstruct the training split (for external denoisers).
    pub export_train: bool,
    pub dose_fractions: Vec<f64>,
    pub normal_dose_counts: f64,
    /// Bin count over which `normal_dose_counts` is spread. Smaller
    /// detectors receive a proportional share so count density matches.
    pub count_reference_bins: usize,
    pub contrast_convention: ContrastConvention,
    pub population: Population,
    pub defects: Vec<DefectSpec>,
    pub grid: GridConfig,
    pub system: SystemModel,
    pub recon: ReconConfig,
    pub filter: FilterConfig,
    pub observer: ObserverConfig,
    pub denoisers: Vec<DenoiserSpec>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            master_seed: 20_240_601,
            output_dir: PathBuf::from("obsbench-out"),
            n_train_pairs: TRAIN_PAIRS,
            n_test_pairs: DESK_TEST_PAIRS,
            export_train: false,
            dose_fractions: vec![1.0, 0.20, 0.15, 0.10, 0.05],
            normal_dose_counts: NORMAL_DOSE_COUNTS,
            count_reference_bins: COUNT_REFERENCE_BINS,
            contrast_convention: ContrastConvention::default(),
            population: Population::default(),
            defects: DefectSpec::standard_set(),
            grid: GridConfig::default(),
            system: SystemModel::default(),
            recon: ReconConfig::default(),
            filter: FilterConfig::default(),
            observer: ObserverConfig::default(),
            denoisers: vec![DenoiserSpec::identity(), DenoiserSpec::strong_smoothing()],
        }
    }
}

impl StudyConfig {
    /// Full case count, 128x128x114 grid and clinical detector.
    pub fn paper_scale() -> Self {
        Self::default().into_paper_scale()
    }

    pub fn into_paper_scale(mut self) -> Self {
        self.n_test_pairs = PAPER_TEST_PAIRS;
        self.grid = GridConfig {
            dims: [128, 128, 114],
            pitch: [0.44; 3],
        };
        self.system = SystemModel::paper_scale();
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Normal-dose projection total for the configured detector.
    pub fn effective_normal_counts(&self) -> f64 {
        let [nu, nv] = self.system.detector_dims;
        self.normal_dose_counts * (nu * nv) as f64 / self.count_reference_bins as f64
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_test_pairs < 3 {
            return Err(Error::Config(format!("n_test_pairs must be at least 3, got {}", self.n_test_pairs)));
        }
        if self.dose_fractions.is_empty() {
            return Err(Error::Config("dose_fractions is empty".into()));
        }
        for f in &self.dose_fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(Error::Config(format!("dose fraction {f} is outside (0, 1]")));
            }
        }
        if !(self.normal_dose_counts > 0.0 && self.normal_dose_counts.is_finite()) {
            return Err(Error::Config("normal_dose_counts must be positive".into()));
        }
        if self.count_reference_bins == 0 {
            return Err(Error::Config("count_reference_bins must be positive".into()));
        }
        if self.defects.is_empty() {
            return Err(Error::Config("at least one defect type is required".into()));
        }
        for d in &self.defects {
            d.validate()?;
        }
        if self.denoisers.is_empty() {
            return Err(Error::Config("at least one denoiser is required".into()));
        }
        for (i, d) in self.denoisers.iter().enumerate() {
            d.validate()?;
            if self.denoisers[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::Config(format!("duplicate denoiser name {:?}", d.name)));
            }
        }
        if self.grid.dims.iter().any(|&n| n == 0) || self.grid.pitch.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config(format!("invalid grid {:?}", self.grid)));
        }
        if !(self.filter.cutoff > 0.0) || self.filter.order == 0 {
            return Err(Error::Config("filter order and cutoff must be positive".into()));
        }
        if self.observer.n_boot == 0 || !(self.observer.ci_level > 0.0 && self.observer.ci_level < 1.0) {
            return Err(Error::Config("observer n_boot must be positive and ci_level in (0, 1)".into()));
        }
        self.population.male.validate()?;
        self.population.female.validate()?;
        self.population.uptake.validate()?;
        self.system.validate()?;
        self.recon.validate(self.system.n_views)?;
        Ok(())
    }

    /// SHA-256 of the canonical serialization, ignoring `output_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml_string()?.as_bytes())))
    }

    pub fn denoiser(&self, name: &str) -> Option<&DenoiserSpec> {
        self.denoisers.iter().find(|d| d.name == name)
    }
}

/// One `--cell` filter; unset keys match everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellFilter {
    /// 1-based position in `defects`.
    pub defect: Option<usize>,
    pub dose: Option<f64>,
    pub denoiser: Option<String>,
}

impl std::str::FromStr for CellFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut f = CellFilter::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("cell filter term {part:?} is not key=value")))?;
            let bad = |what: &str| Error::Config(format!("bad {what} in cell filter: {v:?}"));
            match k.trim() {
                "defect" => f.defect = Some(v.trim().parse().map_err(|_| bad("defect"))?),
                "dose" => f.dose = Some(v.trim().parse().map_err(|_| bad("dose"))?),
                "denoiser" => f.denoiser = Some(v.trim().to_string()),
                other => return Err(Error::Config(format!("unknown cell filter key {other:?}"))),
            }
        }
        Ok(f)
    }
}

impl CellFilter {
    pub fn matches(&self, defect: usize, dose: f64, denoiser: &str) -> bool {
        self.defect.is_none_or(|d| d == defect)
            && self.dose.is_none_or(|f| (f - dose).abs() <= 1e-9)
            && self.denoiser.as_deref().is_none_or(|n| n == denoiser)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = StudyConfig::default();
        c.validate().unwrap();
        assert_eq!(c.defects.len(), 4);
        assert_eq!(c.dose_fractions, vec![1.0, 0.2, 0.15, 0.1, 0.05]);
        let back = StudyConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        StudyConfig::paper_scale().validate().unwrap();
        assert_eq!(StudyConfig::paper_scale().n_test_pairs, 400);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = StudyConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.master_seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn invalid_configs() {
        let mut c = StudyConfig { n_test_pairs: 2, ..StudyConfig::default() };
        assert!(c.validate().is_err());
        c.n_test_pairs = 3;
        c.dose_fractions = vec![1.5];
        assert!(c.validate().is_err());
        c.dose_fractions = vec![0.5];
        c.defects.clear();
        assert!(c.validate().is_err());
        assert!(StudyConfig::from_toml_str("no_such_key = 1").is_err());
    }

    #[test]
    fn cell_filters() {
        let f: CellFilter = "defect=1,dose=0.1,denoiser=none".parse().unwrap();
        assert!(f.matches(1, 0.1, "none"));
        assert!(!f.matches(2, 0.1, "none"));
        assert!(!f.matches(1, 0.05, "none"));
        let any: CellFilter = "dose=0.05".parse().unwrap();
        assert!(any.matches(3, 0.05, "strong_smoothing"));
        assert!("defect=x".parse::<CellFilter>().is_err());
        assert!("color=red".parse::<CellFilter>().is_err());
    }
}
