use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::{fragment_hash, VolumeCache};
use super::config::{CellFilter, StudyConfig};
use crate::denoise::denoise;
use crate::eigen::{auc_from_snr, delta_mean_image, eigen_report, AucConvention, EigenReport};
use crate::error::{Error, Result};
use crate::imaging::{add_poisson_noise, project_with, scale_to_dose, ProjectionSet, Projector};
use crate::metrics::{fidelity, FidelityResult};
use crate::observer::{
    apply_channels, build_channels, cho_loo_test_statistics, cho_snr, ensemble_stats, extract_roi_sized,
    window_gray, ChannelMatrix, Truth,
};
use crate::phantom::{
    build_phantom, defect_center_voxel, insert_defect, sample_anatomy, sample_uptake, AnatomySample, DefectSpec, Sex,
};
use crate::recon::{butterworth_filter_with, clip_negative, recon_projector, OsemPlan};
use crate::rng::{label_key, seed_path};
use crate::roc::{binormal_fit, bootstrap_ci, empirical_roc, AucEstimate, BinormalFit, RocCurve};
use crate::Volume;

const KEY_ANATOMY: u64 = 1;
const KEY_UPTAKE: u64 = 2;
const KEY_NOISE: u64 = 3;
const KEY_BOOTSTRAP: u64 = 4;

const TRUTHS: [Truth; 2] = [Truth::DefectAbsent, Truth::DefectPresent];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One simulated patient: a defect-present/absent pair sharing anatomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CaseRef {
    /// 1-based position in `StudyConfig::defects`.
    pub defect: usize,
    pub split: Split,
    pub index: usize,
}

impl CaseRef {
    pub fn name(&self) -> String {
        format!("d{}-{}{:04}", self.defect, self.split.label(), self.index)
    }

    pub fn sex(&self) -> Sex {
        if self.index % 2 == 0 {
            Sex::Male
        } else {
            Sex::Female
        }
    }

    fn seed(&self, master: u64, stage: u64) -> u64 {
        seed_path(master, &[stage, self.defect as u64, self.split.key(), self.index as u64])
    }
}

pub fn dose_label(dose: f64) -> String {
    format!("{dose}")
}

/// Identifier used for external denoiser inputs and outputs.
pub fn case_id(case: &CaseRef, dose: f64, truth: Truth) -> String {
    format!("{}-f{}-{}", case.name(), dose_label(dose), truth.label())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub defect: usize,
    pub dose: f64,
    pub denoiser: String,
}

impl CellId {
    pub fn label(&self) -> String {
        format!("d{}_f{}_{}", self.defect, dose_label(self.dose), self.denoiser)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.iter().all(|x| *x == xs[0]) || xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityAggregate {
    pub n: usize,
    pub rmse: MeanSd,
    pub ssim: MeanSd,
    pub psnr: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub case_id: String,
    pub truth: Truth,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub id: CellId,
    pub n_pairs: usize,
    pub fidelity: FidelityAggregate,
    pub auc: AucEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binormal: Option<BinormalFit>,
    /// Hotelling SNR from the direct quadratic form.
    pub snr: f64,
    pub auc_from_snr_paper: f64,
    pub auc_from_snr_textbook: f64,
    pub eigen: EigenReport,
    pub delta_f_profile: Vec<f64>,
    pub delta_v: Vec<f64>,
    pub roc: RocCurve,
    pub scores: Vec<Score>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub id: CellId,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub version: String,
    pub auc_convention: AucConvention,
    pub cells: Vec<CellResult>,
    pub errors: Vec<CellError>,
}

impl StudyReport {
    pub fn is_complete(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Work units finished and failed by one stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutcome {
    pub completed: usize,
    pub failures: Vec<String>,
}

impl StageOutcome {
    fn from_results(results: Vec<std::result::Result<(), String>>) -> Self {
        let mut out = StageOutcome::default();
        for r in results {
            match r {
                Ok(()) => out.completed += 1,
                Err(e) => out.failures.push(e),
            }
        }
        out
    }

    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    config_hash: String,
    result: CellResult,
}

#[derive(Serialize, Deserialize)]
struct CellErrorRecord {
    config_hash: String,
    error: CellError,
}

/// A configured study bound to its output directory.
pub struct Study {
    cfg: StudyConfig,
    cache: VolumeCache,
    config_hash: String,
    sim_hash: String,
    recon_hash: String,
}

impl Study {
    pub fn new(cfg: StudyConfig) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        let cache = VolumeCache::open(&cfg.output_dir)?;
        let sim_hash = fragment_hash(&(
            cfg.master_seed,
            &cfg.population,
            &cfg.grid,
            &cfg.system,
            cfg.contrast_convention,
        ))?;
        let recon_hash = fragment_hash(&(&sim_hash, &cfg.recon, &cfg.filter, cfg.effective_normal_counts()))?;
        Ok(Self {
            config_hash: cfg.hash()?,
            cfg,
            cache,
            sim_hash,
            recon_hash,
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn output_dir(&self) -> &Path {
        &self.cfg.output_dir
    }

    /// Cells in defect, dose, denoiser order; with filters, the union of matches.
    pub fn plan(&self, filters: &[CellFilter]) -> Vec<CellId> {
        let mut cells = Vec::new();
        for defect in 1..=self.cfg.defects.len() {
            for &dose in &self.cfg.dose_fractions {
                for d in &self.cfg.denoisers {
                    if filters.is_empty() || filters.iter().any(|f| f.matches(defect, dose, &d.name)) {
                        cells.push(CellId {
                            defect,
                            dose,
                            denoiser: d.name.clone(),
                        });
                    }
                }
            }
        }
        cells
    }

    fn defect(&self, defect: usize) -> &DefectSpec {
        &self.cfg.defects[defect - 1]
    }

    fn cases(&self, cells: &[CellId]) -> Vec<CaseRef> {
        let defects: BTreeSet<usize> = cells.iter().map(|c| c.defect).collect();
        let mut out = Vec::new();
        for defect in defects {
            let mut push = |split, n| {
                out.extend((0..n).map(|index| CaseRef { defect, split, index }));
            };
            if self.cfg.export_train {
                push(Split::Train, self.cfg.n_train_pairs);
            }
            push(Split::Test, self.cfg.n_test_pairs);
        }
        out
    }

    /// Doses needed per defect: the requested ones plus the normal-dose reference.
    fn doses_for(&self, cells: &[CellId], defect: usize) -> Vec<f64> {
        let mut doses: Vec<f64> = vec![1.0];
        for c in cells.iter().filter(|c| c.defect == defect) {
            if !doses.contains(&c.dose) {
                doses.push(c.dose);
            }
        }
        doses
    }

    pub fn anatomy(&self, case: &CaseRef) -> Result<AnatomySample> {
        let sex = case.sex();
        let params = match sex {
            Sex::Male => &self.cfg.population.male,
            Sex::Female => &self.cfg.population.female,
        };
        sample_anatomy(sex, params, case.seed(self.cfg.master_seed, KEY_ANATOMY))
    }

    fn sim_recipe(&self, case: &CaseRef, what: &str) -> Result<String> {
        Ok(format!(
            "sim|{}|{}|{}|{}",
            self.sim_hash,
            fragment_hash(self.defect(case.defect))?,
            case.name(),
            what
        ))
    }

    fn recon_recipe(&self, case: &CaseRef, dose: f64, truth: Truth) -> Result<String> {
        Ok(format!(
            "recon|{}|{}|{}|{:016x}|{}",
            self.recon_hash,
            fragment_hash(self.defect(case.defect))?,
            case.name(),
            dose.to_bits(),
            truth.label()
        ))
    }

    fn projection_volume(&self, p: &ProjectionSet<f64>) -> Result<Volume> {
        let [nu, nv] = self.cfg.system.detector_dims;
        let bp = self.cfg.system.bin_pitch;
        let data = p.views().iter().flatten().copied().collect();
        Volume::from_data([nu, nv, self.cfg.system.n_views], [bp, bp, 1.0], data)
    }

    fn projection_set(&self, v: &Volume) -> Result<ProjectionSet<f64>> {
        let bins = self.cfg.system.bins_per_view();
        if v.len() != bins * self.cfg.system.n_views {
            return Err(Error::Format {
                path: PathBuf::new(),
                reason: "cached projections do not match the system model".into(),
            });
        }
        let views = v.data().chunks(bins).map(<[f64]>::to_vec).collect();
        ProjectionSet::new(self.cfg.system.clone(), views, false)
    }

    fn simulate_case(&self, case: &CaseRef) -> Result<()> {
        let recipes = [
            self.sim_recipe(case, "mu")?,
            self.sim_recipe(case, "proj-absent")?,
            self.sim_recipe(case, "proj-present")?,
        ];
        if recipes.iter().all(|r| self.cache.contains(r)) {
            return Ok(());
        }
        let (dims, pitch) = (self.cfg.grid.dims, self.cfg.grid.pitch);
        let anatomy = self.anatomy(case)?;
        let uptake = sample_uptake(&self.cfg.population.uptake, case.seed(self.cfg.master_seed, KEY_UPTAKE))?;
        let phantom = build_phantom::<f64>(&anatomy, &uptake, dims, pitch)?;
        let present = insert_defect(
            &phantom.activity,
            &anatomy,
            self.defect(case.defect),
            self.cfg.contrast_convention,
        )?;
        let mu = self.cache.store(&recipes[0], &phantom.attenuation)?;
        let projector = Projector::new(&self.cfg.system, dims, pitch, Some(&mu), true)?;
        for (recipe, activity) in recipes[1..].iter().zip([&phantom.activity, &present]) {
            let p = project_with(&projector, activity)?;
            self.cache.store(recipe, &self.projection_volume(&p)?)?;
        }
        Ok(())
    }

    /// Phantoms and noiseless projections for every case the cells need.
    pub fn simulate(&self, cells: &[CellId]) -> StageOutcome {
        let cases = self.cases(cells);
        info!("simulating {} cases", cases.len());
        let results = cases
            .par_iter()
            .map(|c| self.simulate_case(c).map_err(|e| format!("simulate {}: {e}", c.name())))
            .collect();
        StageOutcome::from_results(results)
    }

    fn reconstruct_case(&self, case: &CaseRef, doses: &[f64]) -> Result<()> {
        let pending: Vec<(f64, Truth, String)> = doses
            .iter()
            .flat_map(|&d| TRUTHS.map(|t| (d, t)))
            .map(|(d, t)| Ok((d, t, self.recon_recipe(case, d, t)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|(_, _, r)| !self.cache.contains(r))
            .collect();
        if pending.is_empty() {
            return Ok(());
        }
        let load = |what: &str| -> Result<Volume> {
            let recipe = self.sim_recipe(case, what)?;
            if !self.cache.contains(&recipe) {
                return Err(Error::Config(format!("no simulated {what} volume; run `simulate` first")));
            }
            self.cache.load(&recipe)
        };
        let mu = load("mu")?;
        let absent = self.projection_set(&load("proj-absent")?)?;
        let present = self.projection_set(&load("proj-present")?)?;
        // Both members of a pair share the absent case's count scale, so the
        // defect remains the only difference after dose scaling.
        let absent_total = absent.total();
        let present_total = present.total();
        let projector = recon_projector(&self.cfg.system, &mu, &self.cfg.recon)?;
        let plan = OsemPlan::new(&projector, &self.cfg.recon)?;
        let f = &self.cfg.filter;
        let normal = self.cfg.effective_normal_counts();
        for (dose, truth, recipe) in pending {
            let noise_seed = seed_path(case.seed(self.cfg.master_seed, KEY_NOISE), &[dose.to_bits()]);
            let scaled = match truth {
                Truth::DefectAbsent => scale_to_dose(&absent, normal, dose)?,
                Truth::DefectPresent => scale_to_dose(
                    &present,
                    normal * present_total / absent_total,
                    dose,
                )?,
            };
            let noisy = add_poisson_noise(&scaled, noise_seed)?;
            let image = plan.run(noisy.views())?;
            // Rescaled to the normal-dose intensity scale so fidelity against
            // the normal-dose reference measures noise, not count level.
            let v = Volume::from_data(self.cfg.grid.dims, self.cfg.grid.pitch, image)?.scaled(1.0 / dose);
            let v = clip_negative(&butterworth_filter_with(&v, f.order, f.cutoff, f.response)?);
            self.cache.store(&recipe, &v)?;
        }
        Ok(())
    }

    /// Dose scaling, noise, OSEM, post-filter and clipping for every case and
    /// dose the cells need (always including normal dose).
    pub fn reconstruct(&self, cells: &[CellId]) -> StageOutcome {
        let cases = self.cases(cells);
        info!("reconstructing {} cases", cases.len());
        let results = cases
            .par_iter()
            .map(|c| {
                let doses = self.doses_for(cells, c.defect);
                self.reconstruct_case(c, &doses)
                    .map_err(|e| format!("reconstruct {}: {e}", c.name()))
            })
            .collect();
        let outcome = StageOutcome::from_results(results);
        if let Err(e) = self.write_lowdose_index(cells, &cases) {
            let mut o = outcome;
            o.failures.push(format!("writing low-dose index: {e}"));
            return o;
        }
        outcome
    }

    /// `lowdose_index.csv`: where each reconstructed case lives in the cache,
    /// keyed by the case id external denoisers must use for their outputs.
    fn write_lowdose_index(&self, cells: &[CellId], cases: &[CaseRef]) -> Result<()> {
        let mut text = String::from("case_id,split,defect,dose,truth,path\n");
        for case in cases {
            for dose in self.doses_for(cells, case.defect) {
                for truth in TRUTHS {
                    let recipe = self.recon_recipe(case, dose, truth)?;
                    if !self.cache.contains(&recipe) {
                        continue;
                    }
                    let path = self.cache.path(&recipe);
                    let rel = path.strip_prefix(&self.cfg.output_dir).unwrap_or(&path);
                    text.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        case_id(case, dose, truth),
                        case.split.label(),
                        case.defect,
                        dose_label(dose),
                        truth.label(),
                        rel.display()
                    ));
                }
            }
        }
        let path = self.cfg.output_dir.join("lowdose_index.csv");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn evaluate_cell(&self, cell: &CellId, channels: &ChannelMatrix<f64>) -> Result<CellResult> {
        let spec = self
            .cfg
            .denoiser(&cell.denoiser)
            .ok_or_else(|| Error::Config(format!("unknown denoiser {:?}", cell.denoiser)))?;
        let defect = self.defect(cell.defect);
        let (dims, pitch) = (self.cfg.grid.dims, self.cfg.grid.pitch);
        let cases: Vec<CaseRef> = (0..self.cfg.n_test_pairs)
            .map(|index| CaseRef {
                defect: cell.defect,
                split: Split::Test,
                index,
            })
            .collect();

        // Index 0 is defect-absent, 1 defect-present.
        struct CaseOut {
            fid: Vec<FidelityResult>,
            rois: Vec<Vec<f64>>,
            feats: Vec<Vec<f64>>,
            ids: Vec<String>,
        }

        let per_case = cases
            .par_iter()
            .map(|case| -> Result<CaseOut> {
                let anatomy = self.anatomy(case)?;
                let center = defect_center_voxel(&anatomy, defect, dims, pitch)?;
                let mut fid = Vec::with_capacity(2);
                let mut rois = Vec::with_capacity(2);
                let mut feats = Vec::with_capacity(2);
                let mut ids = Vec::with_capacity(2);
                for truth in TRUTHS {
                    let id = case_id(case, cell.dose, truth);
                    let load = |dose: f64| -> Result<Volume> {
                        let recipe = self.recon_recipe(case, dose, truth)?;
                        if !self.cache.contains(&recipe) {
                            return Err(Error::Config("no reconstruction; run `reconstruct` first".into()));
                        }
                        self.cache.load(&recipe)
                    };
                    let (f, roi, v) = (|| -> Result<_> {
                        let low = load(cell.dose)?;
                        let reference = load(1.0)?;
                        let out = denoise(&low, spec, &id)?;
                        let f = fidelity(&out, &reference)?;
                        let roi = window_gray(&extract_roi_sized(&out, center, channels.size, &id, truth)?);
                        let v = apply_channels(channels, &roi)?.values;
                        Ok((f, roi, v))
                    })()
                    .map_err(Error::in_case(&id))?;
                    fid.push(f);
                    feats.push(v);
                    rois.push(roi.pixels);
                    ids.push(id);
                }
                Ok(CaseOut { fid, rois, feats, ids })
            })
            .collect::<Result<Vec<CaseOut>>>()?;

        let fids: Vec<&FidelityResult> = per_case.iter().flat_map(|c| c.fid.iter()).collect();
        let agg = |f: fn(&FidelityResult) -> f64| MeanSd::of(&fids.iter().map(|r| f(r)).collect::<Vec<_>>());
        let fidelity = FidelityAggregate {
            n: fids.len(),
            rmse: agg(|r| r.rmse),
            ssim: agg(|r| r.ssim),
            psnr: agg(|r| r.psnr),
        };

        let to_fv = |slot: usize, truth: Truth| -> Vec<crate::observer::FeatureVector<f64>> {
            per_case
                .iter()
                .map(|c| crate::observer::FeatureVector {
                    values: c.feats[slot].clone(),
                    case_id: c.ids[slot].clone(),
                    truth,
                })
                .collect()
        };
        let absent = to_fv(0, Truth::DefectAbsent);
        let present = to_fv(1, Truth::DefectPresent);
        let stats = ensemble_stats(&present, &absent)?;
        let (tp, ta) = cho_loo_test_statistics(&present, &absent)?;
        let roc = empirical_roc(&tp, &ta)?;
        let boot_seed = seed_path(
            self.cfg.master_seed,
            &[KEY_BOOTSTRAP, cell.defect as u64, cell.dose.to_bits(), label_key(&cell.denoiser)],
        );
        let auc = bootstrap_ci(&tp, &ta, self.cfg.observer.n_boot, self.cfg.observer.ci_level, boot_seed)?;
        let snr = cho_snr(&stats)?;
        let eigen = eigen_report(&stats.cov, &stats.delta_mean)?;
        let rp: Vec<&[f64]> = per_case.iter().map(|c| c.rois[1].as_slice()).collect();
        let ra: Vec<&[f64]> = per_case.iter().map(|c| c.rois[0].as_slice()).collect();
        let delta = delta_mean_image(&rp, &ra, channels.size)?;

        let scores = present
            .iter()
            .zip(&tp)
            .chain(absent.iter().zip(&ta))
            .map(|(f, &t)| Score {
                case_id: f.case_id.clone(),
                truth: f.truth,
                t,
            })
            .collect();

        Ok(CellResult {
            id: cell.clone(),
            n_pairs: cases.len(),
            fidelity,
            auc,
            binormal: binormal_fit(&tp, &ta).ok(),
            snr,
            auc_from_snr_paper: auc_from_snr(snr, AucConvention::Paper)?,
            auc_from_snr_textbook: auc_from_snr(snr, AucConvention::Textbook)?,
            eigen,
            delta_f_profile: delta.profile,
            delta_v: stats.delta_mean,
            roc,
            scores,
        })
    }

    fn cells_dir(&self) -> PathBuf {
        self.cfg.output_dir.join("cells")
    }

    fn cell_paths(&self, cell: &CellId) -> (PathBuf, PathBuf) {
        let dir = self.cells_dir();
        let label = cell.label();
        (dir.join(format!("{label}.toml")), dir.join(format!("{label}.error.toml")))
    }

    /// Fidelity and observer analysis per cell; each cell's result or error
    /// is persisted under `cells/`.
    pub fn evaluate(&self, cells: &[CellId]) -> Result<StageOutcome> {
        let channels = build_channels::<f64>(&self.cfg.observer.channels)?;
        let dir = self.cells_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        info!("evaluating {} cells", cells.len());
        let results: Vec<std::result::Result<(), String>> = cells
            .par_iter()
            .map(|cell| -> Result<std::result::Result<(), String>> {
                let (ok_path, err_path) = self.cell_paths(cell);
                for p in [&ok_path, &err_path] {
                    if p.exists() {
                        std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                    }
                }
                match self.evaluate_cell(cell, &channels) {
                    Ok(result) => {
                        let rec = CellRecord {
                            config_hash: self.config_hash.clone(),
                            result,
                        };
                        write_toml(&ok_path, &rec)?;
                        Ok(Ok(()))
                    }
                    Err(e) => {
                        let message = format!(
                            "defect={} dose={} denoiser={}: {e}",
                            cell.defect,
                            dose_label(cell.dose),
                            cell.denoiser
                        );
                        let rec = CellErrorRecord {
                            config_hash: self.config_hash.clone(),
                            error: CellError {
                                id: cell.clone(),
                                message: message.clone(),
                            },
                        };
                        write_toml(&err_path, &rec)?;
                        Ok(Err(message))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StageOutcome::from_results(results))
    }

    /// Gathers persisted cell results. Cells without a current result are
    /// reported as errors.
    pub fn collect(&self, cells: &[CellId]) -> Result<StudyReport> {
        let mut report = StudyReport {
            config_hash: self.config_hash.clone(),
            master_seed: self.cfg.master_seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            auc_convention: self.cfg.observer.auc_convention,
            cells: Vec::new(),
            errors: Vec::new(),
        };
        for cell in cells {
            let (ok_path, err_path) = self.cell_paths(cell);
            let stale = |what: &str| CellError {
                id: cell.clone(),
                message: format!("{what} result for {} belongs to a different configuration", cell.label()),
            };
            if ok_path.is_file() {
                let rec: CellRecord = read_toml(&ok_path)?;
                if rec.config_hash == self.config_hash {
                    report.cells.push(rec.result);
                } else {
                    report.errors.push(stale("stored"));
                }
            } else if err_path.is_file() {
                let rec: CellErrorRecord = read_toml(&err_path)?;
                if rec.config_hash == self.config_hash {
                    report.errors.push(rec.error);
                } else {
                    report.errors.push(stale("stored error"));
                }
            } else {
                report.errors.push(CellError {
                    id: cell.clone(),
                    message: format!("cell {} has not been evaluated", cell.label()),
                });
            }
        }
        Ok(report)
    }
}

fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_toml<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Simulate, reconstruct, evaluate and collect. Stage failures surface as
/// cell errors in the report; only configuration and I/O problems abort.
pub fn run_study(cfg: StudyConfig, filters: &[CellFilter]) -> Result<StudyReport> {
    let study = Study::new(cfg)?;
    let cells = study.plan(filters);
    for f in study.simulate(&cells).failures {
        log::warn!("{f}");
    }
    for f in study.reconstruct(&cells).failures {
        log::warn!("{f}");
    }
    study.evaluate(&cells)?;
    study.collect(&cells)
}
