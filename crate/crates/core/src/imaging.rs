//! Analytic parallel-hole projection with attenuation and depth-dependent
//! collimator blur, plus dose scaling and Poisson noise.
//!
//! The projector is voxel driven. For each view the transverse plane is
//! splatted onto a rotated `(u, t)` grid with bilinear weights (`u` along the
//! detector row, `t` toward the detector), each depth plane is attenuated,
//! blurred with its depth's Gaussian and summed onto the detector. The
//! backprojector applies the exact transpose of every step, so the pair forms
//! a matched system matrix.

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gaussian_kernel, FWHM_PER_SIGMA};
use crate::rng;
use crate::scalar::Real;
use crate::volume::{voxel_center, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemModel {
    pub n_views: usize,
    /// Total angular range, degrees.
    pub arc_deg: f64,
    /// Angle of the first view, degrees. Detector direction is
    /// `(cos a, sin a)` in the `(x, y)` plane; -45 is left posterior oblique.
    pub start_angle_deg: f64,
    /// Distance from the rotation axis to the collimator face, cm.
    pub orbit_radius: f64,
    pub bin_pitch: f64,
    /// `(nu, nv)`: bins along the detector row and along the axis.
    pub detector_dims: [usize; 2],
    pub intrinsic_fwhm: f64,
    pub fwhm_at_10cm: f64,
    pub depth_blur: bool,
}

impl Default for SystemModel {
    fn default() -> Self {
        Self {
            n_views: 60,
            arc_deg: 180.0,
            start_angle_deg: -45.0,
            orbit_radius: 22.0,
            bin_pitch: 0.44,
            detector_dims: [64, 32],
            intrinsic_fwhm: 0.4,
            fwhm_at_10cm: 0.74,
            depth_blur: true,
        }
    }
}

impl SystemModel {
    /// Full clinical detector matrix (128 x 114 bins).
    pub fn paper_scale() -> Self {
        Self {
            detector_dims: [128, 114],
            orbit_radius: 30.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lengths = [self.arc_deg, self.orbit_radius, self.bin_pitch, self.intrinsic_fwhm, self.fwhm_at_10cm];
        if self.n_views == 0 {
            return Err(Error::Parameter("n_views must be at least 1".into()));
        }
        if lengths.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !self.start_angle_deg.is_finite() {
            return Err(Error::Parameter(format!("system lengths and angles must be positive: {self:?}")));
        }
        if self.detector_dims.contains(&0) {
            return Err(Error::Parameter("detector dims must be positive".into()));
        }
        if self.fwhm_at_10cm < self.intrinsic_fwhm {
            return Err(Error::Parameter(format!(
                "fwhm_at_10cm {} is below the intrinsic fwhm {}",
                self.fwhm_at_10cm, self.intrinsic_fwhm
            )));
        }
        Ok(())
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        (self.start_angle_deg + view as f64 * self.arc_deg / self.n_views as f64).to_radians()
    }

    /// Collimator FWHM growth per cm of depth.
    pub fn blur_slope(&self) -> f64 {
        (self.fwhm_at_10cm.powi(2) - self.intrinsic_fwhm.powi(2)).max(0.0).sqrt() / 10.0
    }

    /// System FWHM at a source-to-collimator distance, cm.
    pub fn fwhm_at(&self, depth: f64) -> f64 {
        let d = depth.max(0.0);
        (self.intrinsic_fwhm.powi(2) + (self.blur_slope() * d).powi(2)).sqrt()
    }

    pub fn bins_per_view(&self) -> usize {
        self.detector_dims[0] * self.detector_dims[1]
    }
}

/// Projection data, one `nu x nv` array per view stored `u + nu * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet<T> {
    pub system: SystemModel,
    data: Vec<Vec<T>>,
    is_noisy: bool,
}

impl<T: Real> ProjectionSet<T> {
    pub fn new(system: SystemModel, data: Vec<Vec<T>>, is_noisy: bool) -> Result<Self> {
        system.validate()?;
        if data.len() != system.n_views {
            return Err(Error::Geometry(format!(
                "{} views supplied for a {}-view system",
                data.len(),
                system.n_views
            )));
        }
        let n = system.bins_per_view();
        for (i, v) in data.iter().enumerate() {
            if v.len() != n {
                return Err(Error::Geometry(format!("view {i} has {} bins, expected {n}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite() || *x < T::zero()) {
                return Err(Error::Domain(format!("view {i} has negative or non-finite bins")));
            }
        }
        Ok(Self { system, data, is_noisy })
    }

    pub fn zeros(system: SystemModel) -> Result<Self> {
        let n = system.bins_per_view();
        let data = vec![vec![T::zero(); n]; system.n_views];
        Self::new(system, data, false)
    }

    pub fn views(&self) -> &[Vec<T>] {
        &self.data
    }

    pub fn view(&self, i: usize) -> &[T] {
        &self.data[i]
    }

    pub fn is_noisy(&self) -> bool {
        self.is_noisy
    }

    pub fn total(&self) -> T {
        self.data.iter().flat_map(|v| v.iter().copied()).sum()
    }

    pub fn into_views(self) -> Vec<Vec<T>> {
        self.data
    }
}

/// A linear system matrix organised by projection view.
pub trait SystemMatrix<T: Real>: Sync {
    fn n_views(&self) -> usize;
    fn bins_per_view(&self) -> usize;
    fn image_len(&self) -> usize;
    /// Writes the projection of `image` for one view into `out`.
    fn forward_view(&self, view: usize, image: &[T], out: &mut [T]);
    /// Adds the backprojection of one view's data into `image`.
    fn back_view_add(&self, view: usize, proj: &[T], image: &mut [T]);

    /// Projects the listed views in parallel; output order follows `views`.
    fn forward_views(&self, image: &[T], views: &[usize]) -> Vec<Vec<T>> {
        views
            .par_iter()
            .map(|&v| {
                let mut out = vec![T::zero(); self.bins_per_view()];
                self.forward_view(v, image, &mut out);
                out
            })
            .collect()
    }

    /// Backprojects `(view, data)` pairs. Per-view images are summed in the
    /// order given so the result is independent of thread scheduling.
    fn back_views(&self, items: &[(usize, &[T])]) -> Vec<T> {
        let partials: Vec<Vec<T>> = items
            .par_iter()
            .map(|&(v, p)| {
                let mut img = vec![T::zero(); self.image_len()];
                self.back_view_add(v, p, &mut img);
                img
            })
            .collect();
        let mut acc = vec![T::zero(); self.image_len()];
        for part in &partials {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += *b;
            }
        }
        acc
    }
}

/// Explicit dense system matrix, rows grouped by view.
///
/// Useful for small oracle problems; `rows[v][b]` is the row of bin `b` in
/// view `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSystem<T> {
    rows: Vec<Vec<Vec<T>>>,
    image_len: usize,
}

impl<T: Real> DenseSystem<T> {
    pub fn new(rows: Vec<Vec<Vec<T>>>, image_len: usize) -> Result<Self> {
        let bins = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || bins == 0 {
            return Err(Error::Geometry("dense system needs at least one view and bin".into()));
        }
        for view in &rows {
            if view.len() != bins || view.iter().any(|r| r.len() != image_len) {
                return Err(Error::Geometry("dense system rows are ragged".into()));
            }
            if view.iter().flatten().any(|a| !a.is_finite() || *a < T::zero()) {
                return Err(Error::Domain("system matrix entries must be finite and nonnegative".into()));
            }
        }
        Ok(Self { rows, image_len })
    }

    /// Identity system with one view.
    pub fn identity(n: usize) -> Result<Self> {
        let rows = (0..n)
            .map(|i| (0..n).map(|j| if i == j { T::one() } else { T::zero() }).collect())
            .collect();
        Self::new(vec![rows], n)
    }
}

impl<T: Real> SystemMatrix<T> for DenseSystem<T> {
    fn n_views(&self) -> usize {
        self.rows.len()
    }

    fn bins_per_view(&self) -> usize {
        self.rows[0].len()
    }

    fn image_len(&self) -> usize {
        self.image_len
    }

    fn forward_view(&self, view: usize, image: &[T], out: &mut [T]) {
        for (o, row) in out.iter_mut().zip(&self.rows[view]) {
            *o = row.iter().zip(image).map(|(a, x)| *a * *x).sum();
        }
    }

    fn back_view_add(&self, view: usize, proj: &[T], image: &mut [T]) {
        for (row, &y) in self.rows[view].iter().zip(proj) {
            for (x, a) in image.iter_mut().zip(row) {
                *x += *a * y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    index: usize,
    weight: T,
}

#[derive(Debug, Clone)]
struct ViewTable<T> {
    /// Per transverse voxel `i + nx * j`: up to four `(t, u)` cells as
    /// offsets `t * nv * nu + u` into the rotated grid.
    splat: Vec<[Tap<T>; 4]>,
    /// `dt * exp(-attenuation toward the detector)` on the rotated grid, or
    /// `None` when attenuation is not modelled.
    weight: Option<Vec<T>>,
    /// Depth planes reached by at least one voxel.
    active: Vec<usize>,
}

/// Matched forward/back projector for one grid, system and attenuation map.
#[derive(Debug, Clone)]
pub struct Projector<T> {
    system: SystemModel,
    dims: [usize; 3],
    nu: usize,
    nv: usize,
    nt: usize,
    dt: T,
    views: Vec<ViewTable<T>>,
    z_taps: Vec<[Tap<T>; 2]>,
    blur: Vec<Vec<T>>,
}

impl<T: Real> Projector<T> {
    /// `attenuation` may be `None` to model an attenuation-free system.
    /// `model_blur` is combined with `system.depth_blur`.
    pub fn new(
        system: &SystemModel,
        dims: [usize; 3],
        pitch: [f64; 3],
        attenuation: Option<&Volume3D<T>>,
        model_blur: bool,
    ) -> Result<Self> {
        system.validate()?;
        if let Some(mu) = attenuation {
            if mu.dims() != dims || mu.pitch() != pitch {
                return Err(Error::Geometry(format!(
                    "attenuation grid {:?} @ {:?} differs from activity grid {dims:?} @ {pitch:?}",
                    mu.dims(),
                    mu.pitch()
                )));
            }
        }
        let [nu, nv] = system.detector_dims;
        let bp = system.bin_pitch;
        let dt = pitch[0].min(pitch[1]);
        let nt = ((dims[0] as f64 * pitch[0]).hypot(dims[1] as f64 * pitch[1]) / dt).ceil() as usize + 2;
        let t_center = |it: usize| (it as f64 + 0.5 - nt as f64 / 2.0) * dt;

        let z_taps = (0..dims[2])
            .map(|k| {
                let z = voxel_center(dims, pitch, [0, 0, k])[2];
                let f = z / bp + nv as f64 / 2.0 - 0.5;
                let v0 = f.floor();
                let a = f - v0;
                let tap = |v: f64, w: f64| {
                    if v >= 0.0 && (v as usize) < nv && w > 0.0 {
                        Tap { index: v as usize * nu, weight: T::lit(w) }
                    } else {
                        Tap { index: 0, weight: T::zero() }
                    }
                };
                [tap(v0, 1.0 - a), tap(v0 + 1.0, a)]
            })
            .collect();

        let blur = (0..nt)
            .map(|it| {
                if !(model_blur && system.depth_blur) {
                    return vec![T::one()];
                }
                let depth = system.orbit_radius - t_center(it);
                let sigma = system.fwhm_at(depth) / FWHM_PER_SIGMA / bp;
                gaussian_kernel(sigma, 3.0).into_iter().map(T::lit).collect()
            })
            .collect();

        let views = (0..system.n_views)
            .into_par_iter()
            .map(|view| {
                let theta = system.view_angle(view);
                let (s, c) = theta.sin_cos();
                let mut splat = Vec::with_capacity(dims[0] * dims[1]);
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let p = voxel_center(dims, pitch, [i, j, 0]);
                        let u = -p[0] * s + p[1] * c;
                        let t = p[0] * c + p[1] * s;
                        let fu = u / bp + nu as f64 / 2.0 - 0.5;
                        let ft = t / dt + nt as f64 / 2.0 - 0.5;
                        let (u0, t0) = (fu.floor(), ft.floor());
                        let (au, at) = (fu - u0, ft - t0);
                        let mut taps = [Tap { index: 0, weight: T::zero() }; 4];
                        for (n, (du, dtt)) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)].into_iter().enumerate() {
                            let (uu, tt) = (u0 + du, t0 + dtt);
                            let w = (if du == 0.0 { 1.0 - au } else { au }) * (if dtt == 0.0 { 1.0 - at } else { at });
                            if uu >= 0.0 && (uu as usize) < nu && tt >= 0.0 && (tt as usize) < nt && w > 0.0 {
                                taps[n] = Tap {
                                    index: tt as usize * nv * nu + uu as usize,
                                    weight: T::lit(w),
                                };
                            }
                        }
                        splat.push(taps);
                    }
                }
                let weight = attenuation.map(|mu| attenuation_weights(mu, system, theta, nu, nv, nt, dt));
                let mut hit = vec![false; nt];
                for taps in &splat {
                    for tap in taps.iter().filter(|t| t.weight != T::zero()) {
                        hit[tap.index / (nu * nv)] = true;
                    }
                }
                let active = (0..nt).filter(|&it| hit[it]).collect();
                ViewTable { splat, weight, active }
            })
            .collect();

        Ok(Self {
            system: system.clone(),
            dims,
            nu,
            nv,
            nt,
            dt: T::lit(dt),
            views,
            z_taps,
            blur,
        })
    }

    pub fn system(&self) -> &SystemModel {
        &self.system
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn plane_len(&self) -> usize {
        self.nu * self.nv
    }

    /// Separable blur of one `nv x nu` plane with zero boundaries. The `u`
    /// pass runs along contiguous rows; the `v` pass accumulates whole rows.
    fn blur_plane(&self, it: usize, plane: &[T], tmp: &mut [T], out: &mut [T]) {
        let k = &self.blur[it];
        if k.len() == 1 {
            out.copy_from_slice(plane);
            return;
        }
        let (nu, nv) = (self.nu, self.nv);
        let r = k.len() / 2;
        for (src, dst) in plane.chunks_exact(nu).zip(tmp.chunks_exact_mut(nu)) {
            dst.iter_mut().for_each(|d| *d = T::zero());
            for (q, &w) in k.iter().enumerate() {
                // dst[m] += w * src[m + q - r]
                let (d0, s0) = if q >= r { (0, q - r) } else { (r - q, 0) };
                if d0 >= nu || s0 >= nu {
                    continue;
                }
                let n = nu - d0.max(s0);
                dst[d0..d0 + n].iter_mut().zip(&src[s0..s0 + n]).for_each(|(d, s)| *d += w * *s);
            }
        }
        out.iter_mut().for_each(|o| *o = T::zero());
        for v in 0..nv {
            let dst = &mut out[v * nu..(v + 1) * nu];
            let lo = v.saturating_sub(r);
            let hi = (v + r).min(nv - 1);
            for q in lo..=hi {
                let w = k[q + r - v];
                dst.iter_mut().zip(&tmp[q * nu..(q + 1) * nu]).for_each(|(d, s)| *d += w * *s);
            }
        }
    }
}

/// `dt * exp(-∫ mu)` from each rotated-grid sample to the detector, using
/// half the local sample's own path.
fn attenuation_weights<T: Real>(
    mu: &Volume3D<T>,
    system: &SystemModel,
    theta: f64,
    nu: usize,
    nv: usize,
    nt: usize,
    dt: f64,
) -> Vec<T> {
    let (s, c) = theta.sin_cos();
    let bp = system.bin_pitch;
    let plane = nu * nv;
    let mut out = vec![T::zero(); nt * plane];
    for iv in 0..nv {
        let z = (iv as f64 + 0.5 - nv as f64 / 2.0) * bp;
        for iu in 0..nu {
            let u = (iu as f64 + 0.5 - nu as f64 / 2.0) * bp;
            let mut beyond = 0.0;
            for it in (0..nt).rev() {
                let t = (it as f64 + 0.5 - nt as f64 / 2.0) * dt;
                let p = [t * c - u * s, t * s + u * c, z];
                let m = trilinear(mu, p);
                out[it * plane + iv * nu + iu] = T::lit(dt * (-(dt * (beyond + 0.5 * m))).exp());
                beyond += m;
            }
        }
    }
    out
}

/// Trilinear interpolation at a point in cm; zero outside the grid.
fn trilinear<T: Real>(v: &Volume3D<T>, p: [f64; 3]) -> f64 {
    let dims = v.dims();
    let pitch = v.pitch();
    let mut base = [0isize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let f = p[a] / pitch[a] + dims[a] as f64 / 2.0 - 0.5;
        let f0 = f.floor();
        base[a] = f0 as isize;
        frac[a] = f - f0;
    }
    let mut acc = 0.0;
    for dz in 0..2 {
        let k = base[2] + dz;
        if k < 0 || k >= dims[2] as isize {
            continue;
        }
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        for dy in 0..2 {
            let j = base[1] + dy;
            if j < 0 || j >= dims[1] as isize {
                continue;
            }
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            for dx in 0..2 {
                let i = base[0] + dx;
                if i < 0 || i >= dims[0] as isize {
                    continue;
                }
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                let w = wx * wy * wz;
                if w > 0.0 {
                    acc += w * v.get(i as usize, j as usize, k as usize).as_f64();
                }
            }
        }
    }
    acc
}

impl<T: Real> SystemMatrix<T> for Projector<T> {
    fn n_views(&self) -> usize {
        self.system.n_views
    }

    fn bins_per_view(&self) -> usize {
        self.plane_len()
    }

    fn image_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn forward_view(&self, view: usize, image: &[T], out: &mut [T]) {
        let table = &self.views[view];
        let plane = self.plane_len();
        let nxy = self.dims[0] * self.dims[1];
        let mut rot = vec![T::zero(); self.nt * plane];
        let mut occupied = vec![false; self.nt];
        for (k, zt) in self.z_taps.iter().enumerate() {
            let slab = &image[k * nxy..(k + 1) * nxy];
            for (val, taps) in slab.iter().zip(&table.splat) {
                if *val == T::zero() {
                    continue;
                }
                for z in zt.iter().filter(|z| z.weight != T::zero()) {
                    let vz = *val * z.weight;
                    for tap in taps.iter().filter(|t| t.weight != T::zero()) {
                        rot[tap.index + z.index] += vz * tap.weight;
                        occupied[tap.index / plane] = true;
                    }
                }
            }
        }
        match &table.weight {
            Some(w) => rot.iter_mut().zip(w).for_each(|(r, w)| *r *= *w),
            None => rot.iter_mut().for_each(|r| *r *= self.dt),
        }
        out.iter_mut().for_each(|o| *o = T::zero());
        let mut tmp = vec![T::zero(); plane];
        let mut blurred = vec![T::zero(); plane];
        for it in (0..self.nt).filter(|&it| occupied[it]) {
            self.blur_plane(it, &rot[it * plane..(it + 1) * plane], &mut tmp, &mut blurred);
            out.iter_mut().zip(&blurred).for_each(|(o, b)| *o += *b);
        }
    }

    fn back_view_add(&self, view: usize, proj: &[T], image: &mut [T]) {
        let table = &self.views[view];
        let plane = self.plane_len();
        let nxy = self.dims[0] * self.dims[1];
        let mut rot = vec![T::zero(); self.nt * plane];
        let mut tmp = vec![T::zero(); plane];
        for &it in &table.active {
            let range = it * plane..(it + 1) * plane;
            self.blur_plane(it, proj, &mut tmp, &mut rot[range.clone()]);
            match &table.weight {
                Some(w) => rot[range.clone()].iter_mut().zip(&w[range]).for_each(|(r, w)| *r *= *w),
                None => rot[range].iter_mut().for_each(|r| *r *= self.dt),
            }
        }
        for (k, zt) in self.z_taps.iter().enumerate() {
            let slab = &mut image[k * nxy..(k + 1) * nxy];
            for (val, taps) in slab.iter_mut().zip(&table.splat) {
                let mut acc = T::zero();
                for z in zt.iter().filter(|z| z.weight != T::zero()) {
                    let mut s = T::zero();
                    for tap in taps.iter().filter(|t| t.weight != T::zero()) {
                        s += tap.weight * rot[tap.index + z.index];
                    }
                    acc += z.weight * s;
                }
                *val += acc;
            }
        }
    }
}

/// Noiseless projection of `activity` through `attenuation`.
pub fn project<T: Real>(
    activity: &Volume3D<T>,
    attenuation: &Volume3D<T>,
    system: &SystemModel,
) -> Result<ProjectionSet<T>> {
    activity.ensure_same_grid(attenuation, "project")?;
    let projector = Projector::new(system, activity.dims(), activity.pitch(), Some(attenuation), true)?;
    project_with(&projector, activity)
}

pub fn project_with<T: Real>(projector: &Projector<T>, activity: &Volume3D<T>) -> Result<ProjectionSet<T>> {
    if activity.dims() != projector.dims() {
        return Err(Error::Geometry(format!(
            "activity dims {:?} differ from projector dims {:?}",
            activity.dims(),
            projector.dims()
        )));
    }
    let views: Vec<usize> = (0..projector.n_views()).collect();
    let data = projector.forward_views(activity.data(), &views);
    ProjectionSet::new(projector.system().clone(), data, false)
}

/// Rescales noiseless projections so the total expected count equals
/// `normal_total * fraction`.
pub fn scale_to_dose<T: Real>(p: &ProjectionSet<T>, normal_total: f64, fraction: f64) -> Result<ProjectionSet<T>> {
    if p.is_noisy() {
        return Err(Error::Scaling("dose scaling requires noiseless projections".into()));
    }
    if !(normal_total > 0.0 && normal_total.is_finite()) {
        return Err(Error::Scaling(format!("normal_total must be positive, got {normal_total}")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Scaling(format!("dose fraction must be in (0, 1], got {fraction}")));
    }
    let total = p.total().as_f64();
    if !(total > 0.0) {
        return Err(Error::Scaling("cannot scale projections with zero total counts".into()));
    }
    let factor = T::lit(normal_total * fraction / total);
    let data = p
        .views()
        .iter()
        .map(|v| v.iter().map(|x| *x * factor).collect())
        .collect();
    ProjectionSet::new(p.system.clone(), data, false)
}

/// Independent Poisson draw per bin. View `i` uses the substream
/// `(seed, i)`, so the result is independent of thread scheduling.
pub fn add_poisson_noise<T: Real>(p: &ProjectionSet<T>, seed: u64) -> Result<ProjectionSet<T>> {
    if p.is_noisy() {
        return Err(Error::Domain("projections already carry Poisson noise".into()));
    }
    let data: Result<Vec<Vec<T>>> = p
        .views()
        .par_iter()
        .enumerate()
        .map(|(view, bins)| {
            let mut rng = rng::stream(rng::derive_seed(seed, view as u64));
            bins.iter()
                .map(|&m| {
                    let mean = m.as_f64();
                    if mean < 0.0 || !mean.is_finite() {
                        return Err(Error::Domain(format!("negative or non-finite mean {mean} in view {view}")));
                    }
                    if mean == 0.0 {
                        return Ok(T::zero());
                    }
                    let dist = Poisson::new(mean).map_err(|e| Error::Domain(format!("Poisson({mean}): {e}")))?;
                    Ok(T::lit(dist.sample(&mut rng)))
                })
                .collect()
        })
        .collect();
    ProjectionSet::new(p.system.clone(), data?, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_system(n_views: usize, blur: bool) -> SystemModel {
        SystemModel {
            n_views,
            bin_pitch: 0.5,
            detector_dims: [24, 4],
            orbit_radius: 15.0,
            depth_blur: blur,
            ..SystemModel::default()
        }
    }

    const DIMS: [usize; 3] = [16, 16, 4];
    const PITCH: [f64; 3] = [0.5; 3];

    fn lcg_volume(seed: u64) -> Volume3D<f64> {
        let mut s = seed;
        Volume3D::from_fn(DIMS, PITCH, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64
        })
        .unwrap()
    }

    #[test]
    fn zero_activity_projects_to_zero() {
        let a = Volume3D::<f64>::zeros(DIMS, PITCH).unwrap();
        let mu = Volume3D::filled(DIMS, PITCH, 0.15).unwrap();
        let p = project(&a, &mu, &small_system(8, true)).unwrap();
        assert_eq!(p.total(), 0.0);
        assert!(!p.is_noisy());
    }

    #[test]
    fn centered_point_counts_equal_in_every_view() {
        let mut a = Volume3D::<f64>::zeros([17, 17, 4], PITCH).unwrap();
        a.set(8, 8, 1, 1.0);
        let mu = Volume3D::zeros([17, 17, 4], PITCH).unwrap();
        let p = project(&a, &mu, &small_system(12, false)).unwrap();
        let first: f64 = p.view(0).iter().sum();
        assert!((first - 0.5).abs() < 1e-12, "total {first} should be the path length");
        for v in p.views() {
            let s: f64 = v.iter().sum();
            assert!((s - first).abs() < 1e-12);
        }
    }

    #[test]
    fn projector_and_backprojector_are_adjoint() {
        let mu = lcg_volume(3).scaled(0.2);
        let proj = Projector::new(&small_system(6, true), DIMS, PITCH, Some(&mu), true).unwrap();
        let x = lcg_volume(5);
        let y: Vec<Vec<f64>> = (0..6)
            .map(|v| {
                let vol = lcg_volume(100 + v as u64);
                vol.data()[..proj.bins_per_view()].to_vec()
            })
            .collect();
        let ax = proj.forward_views(x.data(), &(0..6).collect::<Vec<_>>());
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>()).sum();
        let items: Vec<(usize, &[f64])> = y.iter().enumerate().map(|(i, v)| (i, v.as_slice())).collect();
        let aty = proj.back_views(&items);
        let rhs: f64 = aty.iter().zip(x.data()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs(), "{lhs} vs {rhs}");
    }

    #[test]
    fn projection_is_linear() {
        let mu = lcg_volume(1).scaled(0.1);
        let sys = small_system(5, true);
        let f = lcg_volume(11);
        let g = lcg_volume(12);
        let combo = Volume3D::from_data(
            DIMS,
            PITCH,
            f.data().iter().zip(g.data()).map(|(a, b)| 2.5 * a + 0.75 * b).collect(),
        )
        .unwrap();
        let pf = project(&f, &mu, &sys).unwrap();
        let pg = project(&g, &mu, &sys).unwrap();
        let pc = project(&combo, &mu, &sys).unwrap();
        for v in 0..5 {
            for b in 0..sys.bins_per_view() {
                let expect = 2.5 * pf.view(v)[b] + 0.75 * pg.view(v)[b];
                assert!((pc.view(v)[b] - expect).abs() <= 1e-9 * expect.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = Volume3D::<f64>::zeros(DIMS, PITCH).unwrap();
        let mu = Volume3D::zeros([8, 8, 4], PITCH).unwrap();
        assert!(matches!(project(&a, &mu, &small_system(2, true)), Err(Error::Geometry(_))));
    }

    #[test]
    fn fwhm_model_hits_calibration_points() {
        let s = SystemModel::default();
        assert!((s.fwhm_at(10.0) - 0.74).abs() < 1e-12);
        assert!((s.fwhm_at(0.0) - 0.4).abs() < 1e-12);
        assert!(s.fwhm_at(20.0) > s.fwhm_at(10.0));
    }

    #[test]
    fn dose_scaling() {
        let data = vec![vec![1.0f64, 2.0, 3.0, 4.0]; 2];
        let sys = SystemModel {
            n_views: 2,
            detector_dims: [2, 2],
            ..SystemModel::default()
        };
        let p = ProjectionSet::new(sys.clone(), data, false).unwrap();
        let s = scale_to_dose(&p, 12e6, 0.05).unwrap();
        assert!((s.total() / 6e5 - 1.0).abs() < 1e-10);
        let same = scale_to_dose(&p, 20.0, 1.0).unwrap();
        assert_eq!(same, p);
        let two_step = scale_to_dose(&scale_to_dose(&p, 100.0, 0.5).unwrap(), 100.0, 0.1).unwrap();
        let one_step = scale_to_dose(&p, 100.0, 0.1).unwrap();
        for (a, b) in two_step.views().iter().flatten().zip(one_step.views().iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = ProjectionSet::<f64>::zeros(sys).unwrap();
        assert!(matches!(scale_to_dose(&zero, 1.0, 1.0), Err(Error::Scaling(_))));
        assert!(scale_to_dose(&p, 1.0, 0.0).is_err());
    }

    #[test]
    fn poisson_noise_is_reproducible_integer_and_zero_safe() {
        let sys = SystemModel {
            n_views: 3,
            detector_dims: [4, 1],
            ..SystemModel::default()
        };
        let p = ProjectionSet::new(sys, vec![vec![0.0, 0.5, 10.0, 250.0]; 3], false).unwrap();
        let a = add_poisson_noise(&p, 99).unwrap();
        let b = add_poisson_noise(&p, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.is_noisy());
        for v in a.views() {
            assert_eq!(v[0], 0.0);
            assert!(v.iter().all(|x: &f64| x.fract() == 0.0 && *x >= 0.0));
        }
        assert!(add_poisson_noise(&a, 1).is_err());
    }
}
