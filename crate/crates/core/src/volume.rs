//! Dense 3-D scalar grid with voxel pitch.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense volume stored x-fastest: `index = x + nx * (y + ny * z)`.
///
/// Geometry (pitch, coordinates) is always `f64` cm; only the voxel values
/// are generic. The grid is centered on the origin, so voxel `(i, j, k)` has
/// center `((i + 0.5) - nx / 2) * dx` and similarly for y and z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T> {
    dims: [usize; 3],
    pitch: [f64; 3],
    data: Vec<T>,
}

impl<T: Real> Volume3D<T> {
    pub fn zeros(dims: [usize; 3], pitch: [f64; 3]) -> Result<Self> {
        Self::filled(dims, pitch, T::zero())
    }

    pub fn filled(dims: [usize; 3], pitch: [f64; 3], value: T) -> Result<Self> {
        check_grid(dims, pitch)?;
        Ok(Self {
            dims,
            pitch,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        })
    }

    pub fn from_data(dims: [usize; 3], pitch: [f64; 3], data: Vec<T>) -> Result<Self> {
        check_grid(dims, pitch)?;
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Geometry(format!(
                "volume data length {} does not match dims {:?} ({n} voxels)",
                data.len(),
                dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite voxel value at index {i}")));
        }
        Ok(Self { dims, pitch, data })
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        pitch: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        check_grid(dims, pitch)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::from_data(dims, pitch, data)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn pitch(&self) -> [f64; 3] {
        self.pitch
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Center of voxel `(i, j, k)` in cm, origin at the grid center.
    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        voxel_center(self.dims, self.pitch, [i, j, k])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.pitch[0] * self.pitch[1] * self.pitch[2]
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.dims == other.dims && self.pitch == other.pitch
    }

    pub fn ensure_same_grid(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "{what}: grids differ ({:?} @ {:?} vs {:?} @ {:?})",
                self.dims, self.pitch, other.dims, other.pitch
            )))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            pitch: self.pitch,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    /// Axial slice `k` as a row-major `ny x nx` image (row = y, column = x).
    pub fn axial_slice(&self, k: usize) -> &[T] {
        let n = self.dims[0] * self.dims[1];
        &self.data[k * n..(k + 1) * n]
    }

    /// Converts voxel values to another scalar type.
    pub fn cast<U: Real>(&self) -> Volume3D<U> {
        Volume3D {
            dims: self.dims,
            pitch: self.pitch,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[inline]
pub(crate) fn voxel_center(dims: [usize; 3], pitch: [f64; 3], idx: [usize; 3]) -> [f64; 3] {
    [
        (idx[0] as f64 + 0.5 - dims[0] as f64 / 2.0) * pitch[0],
        (idx[1] as f64 + 0.5 - dims[1] as f64 / 2.0) * pitch[1],
        (idx[2] as f64 + 0.5 - dims[2] as f64 / 2.0) * pitch[2],
    ]
}

fn check_grid(dims: [usize; 3], pitch: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Geometry(format!("volume dims must be positive, got {dims:?}")));
    }
    if pitch.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
        return Err(Error::Geometry(format!("voxel pitch must be positive, got {pitch:?}")));
    }
    Ok(())
}
