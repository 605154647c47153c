//! Voxel images and detector-bin measurements.
//!
//! Images are stored row-major with `x` fastest, then `y`, then `z`
//! (slice-major), i.e. `index = (z * ny + y) * nx + x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along each axis; `nz == 1` for 2D images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn planar(nx: usize, ny: usize) -> Self {
        Self { nx, ny, nz: 1 }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

/// A 2D or 3D voxel image with its physical voxel spacing (mm).
///
/// Holds tracer distributions (non-negative) as well as signed fields such
/// as scores; the non-negativity check lives in [`ImageGrid::check_tracer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

pub const DEFAULT_SPACING: [f64; 3] = [2.0, 2.0, 2.0];

impl ImageGrid {
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(dims.nx >= 1 && dims.ny >= 1 && dims.nz >= 1, "dims must be >= 1");
        Self { dims, spacing: DEFAULT_SPACING, data: vec![value; dims.len()] }
    }

    /// Builds an image, validating length and finiteness.
    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(Error::Shape(format!("dims must all be >= 1, got {dims:?}")));
        }
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} values for dims {}x{}x{}",
                data.len(),
                dims.nx,
                dims.ny,
                dims.nz
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, spacing: DEFAULT_SPACING, data })
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    /// Same dims and spacing, new values.
    pub fn like(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self { dims: self.dims, spacing: self.spacing, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.like(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        self.assert_same_dims(other);
        self.like(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn scaled(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Self) {
        self.assert_same_dims(other);
        for (s, &o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.assert_same_dims(other);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Non-negativity projection.
    pub fn clamp_nonneg(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.assert_same_dims(other);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn check_tracer(&self) -> Result<()> {
        match self.data.iter().position(|&v| !(v >= 0.0)) {
            Some(i) => Err(Error::InvalidValue(format!("negative tracer value {} at {i}", self.data[i]))),
            None => Ok(()),
        }
    }

    pub fn slice_z(&self, z: usize) -> ImageGrid {
        let n = self.dims.slice_len();
        Self {
            dims: Dims::planar(self.dims.nx, self.dims.ny),
            spacing: self.spacing,
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn set_slice_z(&mut self, z: usize, slice: &ImageGrid) {
        let n = self.dims.slice_len();
        assert_eq!(slice.len(), n);
        self.data[z * n..(z + 1) * n].copy_from_slice(slice.data());
    }

    /// Stacks equally-sized planar slices into a volume.
    pub fn stack(slices: &[ImageGrid]) -> ImageGrid {
        assert!(!slices.is_empty());
        let d = slices[0].dims;
        let mut data = Vec::with_capacity(d.slice_len() * slices.len());
        for s in slices {
            assert_eq!(s.dims, d);
            data.extend_from_slice(&s.data);
        }
        Self { dims: Dims::new(d.nx, d.ny, slices.len()), spacing: slices[0].spacing, data }
    }

    pub fn assert_same_dims(&self, other: &Self) {
        assert_eq!(self.dims, other.dims, "image dims differ");
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("image dims {:?} and {:?} differ", self.dims, other.dims)));
        }
        Ok(())
    }
}

/// Detector bin layout `(n_angles, n_radial, n_planes)`, angle-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_angles: usize,
    pub n_radial: usize,
    pub n_planes: usize,
}

impl Layout {
    pub const fn new(n_angles: usize, n_radial: usize, n_planes: usize) -> Self {
        Self { n_angles, n_radial, n_planes }
    }

    pub const fn len(&self) -> usize {
        self.n_angles * self.n_radial * self.n_planes
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of bins belonging to one angle; angles are contiguous blocks.
    pub const fn bins_per_angle(&self) -> usize {
        self.n_radial * self.n_planes
    }

    #[inline]
    pub const fn index(&self, angle: usize, radial: usize, plane: usize) -> usize {
        (angle * self.n_radial + radial) * self.n_planes + plane
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementKind {
    /// Detected counts: non-negative integers.
    Counts,
    /// Expected values (forward projections, backgrounds).
    Expected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    layout: Layout,
    kind: MeasurementKind,
    bins: Vec<f64>,
}

impl Measurements {
    pub fn zeros(layout: Layout, kind: MeasurementKind) -> Self {
        Self { layout, kind, bins: vec![0.0; layout.len()] }
    }

    pub fn filled(layout: Layout, kind: MeasurementKind, value: f64) -> Self {
        Self { layout, kind, bins: vec![value; layout.len()] }
    }

    pub fn new(layout: Layout, kind: MeasurementKind, bins: Vec<f64>) -> Result<Self> {
        if bins.len() != layout.len() {
            return Err(Error::Shape(format!("{} bins for layout {layout:?}", bins.len())));
        }
        if let Some(i) = bins.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        if kind == MeasurementKind::Counts {
            if let Some(i) = bins.iter().position(|&v| v < 0.0 || v.fract() != 0.0) {
                return Err(Error::InvalidValue(format!("bin {i} holds {} which is not a count", bins[i])));
            }
        }
        Ok(Self { layout, kind, bins })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn kind(&self) -> MeasurementKind {
        self.kind
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [f64] {
        &mut self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.layout, other.layout);
        self.bins.iter().zip(&other.bins).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { layout: self.layout, kind: MeasurementKind::Expected, bins: self.bins.iter().map(|v| a * v).collect() }
    }

    /// Bin-wise sum, as expected values.
    pub fn plus(&self, other: &Self) -> Self {
        assert_eq!(self.layout, other.layout);
        Self {
            layout: self.layout,
            kind: MeasurementKind::Expected,
            bins: self.bins.iter().zip(&other.bins).map(|(a, b)| a + b).collect(),
        }
    }
}
