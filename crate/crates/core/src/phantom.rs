//! Virtual patient sampling and voxelization of a parametric thorax.
//!
//! Coordinates are in cm with the origin at the grid center: `x` runs to the
//! patient's left, `y` anterior, `z` superior. The left ventricle is a
//! half-ellipsoidal shell whose long axis is parallel to `z` with the apex
//! pointing inferiorly, so axial slices are short-axis slices.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::volume::{voxel_center, Volume3D};

/// Narrow-beam linear attenuation coefficients at 140 keV, cm^-1.
pub const MU_SOFT_TISSUE: f64 = 0.154;
pub const MU_LUNG: f64 = 0.04;

/// Fixed myocardial wall thickness, cm.
pub const LV_WALL_CM: f64 = 1.0;

/// Reference subcutaneous layer thickness scaled by `skin_scale`, cm.
pub const SKIN_BASE_CM: f64 = 0.5;

pub const BODY_RATIO_MALE: f64 = 1.36;
pub const BODY_RATIO_FEMALE: f64 = 1.47;
pub const LV_RATIO_MALE: f64 = 3.2;
pub const LV_RATIO_FEMALE: f64 = 3.17;

const MAX_REJECTIONS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormParams {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl TruncNormParams {
    pub const fn new(mean: f64, sd: f64, min: f64, max: f64) -> Self {
        Self { mean, sd, min, max }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = [self.mean, self.sd, self.min, self.max].iter().all(|v| v.is_finite())
            && self.min < self.max
            && self.sd >= 0.0
            && self.min <= self.mean
            && self.mean <= self.max;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("{name}: invalid truncated normal {self:?}")))
        }
    }

    /// Rejection sampling from the untruncated normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.sample_within(rng, self.min, self.max)
    }

    fn sample_within<R: Rng + ?Sized>(&self, rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
        if self.sd == 0.0 {
            return Ok(self.mean);
        }
        let normal = Normal::new(self.mean, self.sd)
            .map_err(|e| Error::Parameter(format!("normal({}, {}): {e}", self.mean, self.sd)))?;
        for _ in 0..MAX_REJECTIONS {
            let x = normal.sample(rng);
            if (lo..=hi).contains(&x) {
                return Ok(x);
            }
        }
        Err(Error::Parameter(format!(
            "rejection sampling of {self:?} on [{lo}, {hi}] did not terminate"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn body_ratio(self) -> f64 {
        match self {
            Sex::Male => BODY_RATIO_MALE,
            Sex::Female => BODY_RATIO_FEMALE,
        }
    }

    pub fn lv_ratio(self) -> f64 {
        match self {
            Sex::Male => LV_RATIO_MALE,
            Sex::Female => LV_RATIO_FEMALE,
        }
    }
}

/// Per-sex anatomical distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnatomyParams {
    pub body_lat: TruncNormParams,
    pub body_ap: TruncNormParams,
    pub lv_length: TruncNormParams,
    pub lv_radius: TruncNormParams,
    pub height: TruncNormParams,
}

impl AnatomyParams {
    pub const fn male() -> Self {
        Self {
            body_lat: TruncNormParams::new(34.84, 2.15, 29.40, 38.40),
            body_ap: TruncNormParams::new(25.70, 2.44, 20.00, 31.40),
            lv_length: TruncNormParams::new(8.31, 0.93, 6.60, 11.60),
            lv_radius: TruncNormParams::new(2.67, 0.47, 1.90, 4.00),
            height: TruncNormParams::new(175.68, 6.80, 154.94, 187.96),
        }
    }

    pub const fn female() -> Self {
        Self {
            body_lat: TruncNormParams::new(34.37, 3.25, 26.70, 40.90),
            body_ap: TruncNormParams::new(23.50, 2.08, 19.60, 28.80),
            lv_length: TruncNormParams::new(7.39, 0.92, 5.70, 10.50),
            lv_radius: TruncNormParams::new(2.32, 0.33, 1.60, 3.50),
            height: TruncNormParams::new(163.45, 7.34, 149.86, 177.80),
        }
    }

    pub fn for_sex(sex: Sex) -> Self {
        match sex {
            Sex::Male => Self::male(),
            Sex::Female => Self::female(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.body_lat.validate("body_lat")?;
        self.body_ap.validate("body_ap")?;
        self.lv_length.validate("lv_length")?;
        self.lv_radius.validate("lv_radius")?;
        self.height.validate("height")
    }
}

/// Tracer uptake ratio distributions relative to the heart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UptakeParams {
    pub liver_heart: TruncNormParams,
    pub lung_heart: TruncNormParams,
    pub bg_heart: TruncNormParams,
}

impl Default for UptakeParams {
    fn default() -> Self {
        Self {
            liver_heart: TruncNormParams::new(0.44, 0.19, 0.16, 1.3),
            lung_heart: TruncNormParams::new(0.14, 0.04, 0.05, 0.25),
            bg_heart: TruncNormParams::new(0.11, 0.05, 0.02, 0.29),
        }
    }
}

impl UptakeParams {
    pub fn validate(&self) -> Result<()> {
        self.liver_heart.validate("liver_heart")?;
        self.lung_heart.validate("lung_heart")?;
        self.bg_heart.validate("bg_heart")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnatomySample {
    pub sex: Sex,
    pub body_lat: f64,
    pub body_ap: f64,
    pub lv_length: f64,
    pub lv_radius: f64,
    pub height: f64,
    pub skin_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UptakeRatios {
    pub liver_heart: f64,
    pub lung_heart: f64,
    pub bg_heart: f64,
    pub heart: f64,
}

/// Samples one patient's anatomy.
///
/// Lateral body width and LV length are drawn from their truncated normals;
/// the AP width and LV radius follow from the fixed per-sex ratios. A draw is
/// rejected unless the derived value also lies inside its own bounds.
pub fn sample_anatomy(sex: Sex, params: &AnatomyParams, seed: u64) -> Result<AnatomySample> {
    params.validate()?;
    let mut rng = rng::stream(seed);
    let body_ratio = sex.body_ratio();
    let lv_ratio = sex.lv_ratio();

    let body_lat = sample_with_derived(&mut rng, &params.body_lat, &params.body_ap, body_ratio, "body")?;
    let lv_length = sample_with_derived(&mut rng, &params.lv_length, &params.lv_radius, lv_ratio, "LV")?;
    let height = params.height.sample(&mut rng)?;
    let skin_scale = rng.random_range(0.5..=1.5);

    Ok(AnatomySample {
        sex,
        body_lat,
        body_ap: body_lat / body_ratio,
        lv_length,
        lv_radius: lv_length / lv_ratio,
        height,
        skin_scale,
    })
}

fn sample_with_derived<R: Rng + ?Sized>(
    rng: &mut R,
    primary: &TruncNormParams,
    derived: &TruncNormParams,
    ratio: f64,
    what: &str,
) -> Result<f64> {
    let lo = primary.min.max(derived.min * ratio);
    let hi = primary.max.min(derived.max * ratio);
    if lo > hi {
        return Err(Error::Parameter(format!(
            "{what}: bounds {primary:?} and {derived:?} are incompatible with ratio {ratio}"
        )));
    }
    if primary.sd == 0.0 && !(lo..=hi).contains(&primary.mean) {
        return Err(Error::Parameter(format!(
            "{what}: degenerate mean {} violates derived bounds",
            primary.mean
        )));
    }
    primary.sample_within(rng, lo, hi)
}

pub fn sample_uptake(params: &UptakeParams, seed: u64) -> Result<UptakeRatios> {
    params.validate()?;
    let mut rng = rng::stream(seed);
    Ok(UptakeRatios {
        liver_heart: params.liver_heart.sample(&mut rng)?,
        lung_heart: params.lung_heart.sample(&mut rng)?,
        bg_heart: params.bg_heart.sample(&mut rng)?,
        heart: 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectLocation {
    Anterior,
    Inferior,
}

impl DefectLocation {
    /// Angle of the defect center in the short-axis plane, measured from the
    /// anterior (+y) direction toward the patient's left (+x).
    pub fn center_angle(self) -> f64 {
        match self {
            DefectLocation::Anterior => 0.0,
            DefectLocation::Inferior => std::f64::consts::PI,
        }
    }
}

/// How `contrast_pct` maps onto defect uptake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastConvention {
    /// Defect uptake = contrast × healthy uptake.
    #[default]
    UptakeRatio,
    /// Defect uptake = (1 − contrast) × healthy uptake.
    Reduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub contrast_pct: f64,
    pub extent_deg: f64,
    pub location: DefectLocation,
}

impl DefectSpec {
    /// The four standard defect types (1-based).
    pub fn standard(kind: u8) -> Option<Self> {
        let (contrast_pct, extent_deg, location) = match kind {
            1 => (50.0, 120.0, DefectLocation::Anterior),
            2 => (25.0, 90.0, DefectLocation::Anterior),
            3 => (50.0, 120.0, DefectLocation::Inferior),
            4 => (25.0, 90.0, DefectLocation::Inferior),
            _ => return None,
        };
        Some(Self {
            contrast_pct,
            extent_deg,
            location,
        })
    }

    pub fn standard_set() -> Vec<Self> {
        (1..=4).filter_map(Self::standard).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_pct > 0.0 && self.contrast_pct <= 100.0) {
            return Err(Error::Parameter(format!(
                "defect contrast must be in (0, 100], got {}",
                self.contrast_pct
            )));
        }
        if !(self.extent_deg > 0.0 && self.extent_deg < 360.0) {
            return Err(Error::Parameter(format!(
                "defect extent must be in (0, 360), got {}",
                self.extent_deg
            )));
        }
        Ok(())
    }

    /// Multiplier applied to healthy myocardial uptake inside the defect.
    pub fn uptake_factor(&self, convention: ContrastConvention) -> f64 {
        let c = self.contrast_pct / 100.0;
        match convention {
            ContrastConvention::UptakeRatio => c,
            ContrastConvention::Reduction => 1.0 - c,
        }
    }
}

/// Placement of the organs for one anatomy on one grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThoraxGeometry {
    pub body_semi: [f64; 2],
    pub fov_radius: f64,
    pub fov_half_height: f64,
    pub lungs: [Ellipsoid; 2],
    pub liver: Ellipsoid,
    pub lv: LvGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q: f64 = (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum();
        q <= 1.0
    }
}

/// Half-ellipsoidal LV shell, open at the base plane `z = base_z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LvGeometry {
    pub center_xy: [f64; 2],
    pub base_z: f64,
    pub inner_radius: f64,
    pub inner_length: f64,
    pub wall: f64,
}

impl LvGeometry {
    /// Longitudinal midpoint of the cavity.
    pub fn mid_z(&self) -> f64 {
        self.base_z - self.inner_length / 2.0
    }

    pub fn apex_z(&self) -> f64 {
        self.base_z - self.inner_length - self.wall
    }

    pub fn outer_radius(&self) -> f64 {
        self.inner_radius + self.wall
    }

    fn quad(&self, p: [f64; 3], radial: f64, axial: f64) -> f64 {
        let dx = p[0] - self.center_xy[0];
        let dy = p[1] - self.center_xy[1];
        let dz = p[2] - self.base_z;
        (dx * dx + dy * dy) / (radial * radial) + dz * dz / (axial * axial)
    }

    pub fn in_cavity(&self, p: [f64; 3]) -> bool {
        p[2] <= self.base_z && self.quad(p, self.inner_radius, self.inner_length) < 1.0
    }

    pub fn in_wall(&self, p: [f64; 3]) -> bool {
        p[2] <= self.base_z
            && self.quad(p, self.inner_radius, self.inner_length) >= 1.0
            && self.quad(p, self.outer_radius(), self.inner_length + self.wall) <= 1.0
    }

    /// Wall voxel inside the defect sector and axial span.
    pub fn in_defect(&self, p: [f64; 3], defect: &DefectSpec) -> bool {
        if !self.in_wall(p) {
            return false;
        }
        if (p[2] - self.mid_z()).abs() > self.inner_length / 4.0 {
            return false;
        }
        let phi = (p[0] - self.center_xy[0]).atan2(p[1] - self.center_xy[1]);
        let half = defect.extent_deg.to_radians() / 2.0;
        angular_distance(phi, defect.location.center_angle()) <= half
    }
}

fn angular_distance(a: f64, b: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let d = (a - b).rem_euclid(tau);
    d.min(tau - d)
}

impl ThoraxGeometry {
    pub fn new(anatomy: &AnatomySample, dims: [usize; 3], pitch: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || pitch.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Geometry(format!("invalid grid {dims:?} @ {pitch:?}")));
        }
        let a0 = anatomy.body_lat / 2.0;
        let b0 = anatomy.body_ap / 2.0;
        let thicken = (anatomy.skin_scale - 1.0) * SKIN_BASE_CM;
        let body_semi = [a0 + thicken, b0 + thicken];
        let fov_radius = (dims[0] as f64 * pitch[0]).min(dims[1] as f64 * pitch[1]) / 2.0;
        let fov_half_height = dims[2] as f64 * pitch[2] / 2.0;

        let lungs = [1.0, -1.0].map(|side| Ellipsoid {
            center: [side * 0.45 * a0, -0.05 * b0, 3.0],
            semi: [0.33 * a0, 0.62 * b0, 12.0],
        });
        let liver = Ellipsoid {
            center: [-0.3 * a0, -0.05 * b0, -9.0],
            semi: [0.5 * a0, 0.6 * b0, 7.0],
        };
        // Cavity midpoint sits on the center of axial slice nz / 2.
        let mid_z = voxel_center(dims, pitch, [0, 0, dims[2] / 2])[2];
        let lv = LvGeometry {
            center_xy: [0.15 * a0, 0.12 * b0],
            base_z: mid_z + anatomy.lv_length / 2.0,
            inner_radius: anatomy.lv_radius,
            inner_length: anatomy.lv_length,
            wall: LV_WALL_CM,
        };

        let lv_reach = lv.center_xy[0].hypot(lv.center_xy[1]) + lv.outer_radius();
        if lv_reach > fov_radius {
            return Err(Error::Geometry(format!(
                "LV extends {lv_reach:.2} cm from the axis, beyond the {fov_radius:.2} cm field of view"
            )));
        }
        if lv.base_z > fov_half_height || lv.apex_z() < -fov_half_height {
            return Err(Error::Geometry(format!(
                "LV spans z in [{:.2}, {:.2}] cm, outside the axial field of view ±{fov_half_height:.2} cm",
                lv.apex_z(),
                lv.base_z
            )));
        }
        Ok(Self {
            body_semi,
            fov_radius,
            fov_half_height,
            lungs,
            liver,
            lv,
        })
    }

    #[inline]
    pub fn in_fov(&self, p: [f64; 3]) -> bool {
        p[0].hypot(p[1]) <= self.fov_radius
    }

    #[inline]
    pub fn in_body(&self, p: [f64; 3]) -> bool {
        (p[0] / self.body_semi[0]).powi(2) + (p[1] / self.body_semi[1]).powi(2) <= 1.0
    }

    pub fn region(&self, p: [f64; 3]) -> Region {
        if !self.in_fov(p) || !self.in_body(p) {
            Region::Air
        } else if self.lv.in_wall(p) {
            Region::Myocardium
        } else if self.lv.in_cavity(p) {
            Region::BloodPool
        } else if self.liver.contains(p) {
            Region::Liver
        } else if self.lungs.iter().any(|l| l.contains(p)) {
            Region::Lung
        } else {
            Region::SoftTissue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Air,
    SoftTissue,
    Lung,
    Liver,
    BloodPool,
    Myocardium,
}

impl Region {
    pub fn activity(self, uptake: &UptakeRatios) -> f64 {
        match self {
            Region::Air => 0.0,
            Region::SoftTissue | Region::BloodPool => uptake.bg_heart,
            Region::Lung => uptake.lung_heart,
            Region::Liver => uptake.liver_heart,
            Region::Myocardium => uptake.heart,
        }
    }

    pub fn attenuation(self) -> f64 {
        match self {
            Region::Air => 0.0,
            Region::Lung => MU_LUNG,
            _ => MU_SOFT_TISSUE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T> {
    pub activity: Volume3D<T>,
    pub attenuation: Volume3D<T>,
}

/// Voxelizes activity and attenuation by point-sampling region membership at
/// voxel centers. Everything outside the cylinder inscribed in the transverse
/// grid is air.
pub fn build_phantom<T: Real>(
    anatomy: &AnatomySample,
    uptake: &UptakeRatios,
    dims: [usize; 3],
    pitch: [f64; 3],
) -> Result<Phantom<T>> {
    let geo = ThoraxGeometry::new(anatomy, dims, pitch)?;
    let regions: Vec<Region> = grid_points(dims, pitch).map(|p| geo.region(p)).collect();
    let activity = Volume3D::from_data(
        dims,
        pitch,
        regions.iter().map(|r| T::lit(r.activity(uptake))).collect(),
    )?;
    let attenuation = Volume3D::from_data(
        dims,
        pitch,
        regions.iter().map(|r| T::lit(r.attenuation())).collect(),
    )?;
    Ok(Phantom {
        activity,
        attenuation,
    })
}

/// Sets myocardial voxels inside the defect to the reduced uptake.
pub fn insert_defect<T: Real>(
    activity: &Volume3D<T>,
    anatomy: &AnatomySample,
    defect: &DefectSpec,
    convention: ContrastConvention,
) -> Result<Volume3D<T>> {
    defect.validate()?;
    let geo = ThoraxGeometry::new(anatomy, activity.dims(), activity.pitch())?;
    let factor = T::lit(defect.uptake_factor(convention));
    let mut out = activity.clone();
    for (v, p) in out
        .data_mut()
        .iter_mut()
        .zip(grid_points(activity.dims(), activity.pitch()))
    {
        if geo.region(p) == Region::Myocardium && geo.lv.in_defect(p, defect) {
            // Healthy myocardium has unit uptake, so the defect value is the factor.
            *v = factor;
        }
    }
    Ok(out)
}

/// Voxel index of the defect centroid within the axial slice containing the
/// LV longitudinal midpoint.
pub fn defect_center_voxel(
    anatomy: &AnatomySample,
    defect: &DefectSpec,
    dims: [usize; 3],
    pitch: [f64; 3],
) -> Result<[usize; 3]> {
    defect.validate()?;
    let geo = ThoraxGeometry::new(anatomy, dims, pitch)?;
    let k = dims[2] / 2;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for j in 0..dims[1] {
        for i in 0..dims[0] {
            let p = voxel_center(dims, pitch, [i, j, k]);
            if geo.in_fov(p) && geo.lv.in_defect(p, defect) {
                sx += p[0];
                sy += p[1];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Geometry("defect covers no voxels in its midpoint slice".into()));
    }
    let to_index = |c: f64, d: usize, dx: f64| -> usize {
        let f = (c / dx + d as f64 / 2.0).floor();
        f.clamp(0.0, (d - 1) as f64) as usize
    };
    Ok([
        to_index(sx / n as f64, dims[0], pitch[0]),
        to_index(sy / n as f64, dims[1], pitch[1]),
        k,
    ])
}

fn grid_points(dims: [usize; 3], pitch: [f64; 3]) -> impl Iterator<Item = [f64; 3]> {
    (0..dims[2]).flat_map(move |k| {
        (0..dims[1]).flat_map(move |j| (0..dims[0]).map(move |i| voxel_center(dims, pitch, [i, j, k])))
    })
}
