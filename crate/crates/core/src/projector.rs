//! Parallel-beam emission system model.
//!
//! Rays are traced once with a Joseph-style sampler (bilinear, or trilinear
//! for tilted rays, at half-voxel steps on a lattice shared by all rays) and
//! kept as a sparse row matrix of geometric weights in mm. Attenuation and
//! per-bin sensitivity fold into one multiplicative factor per bin, so the
//! back projection uses exactly the same weights as the forward projection.

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Dims, ImageGrid, Layout, MeasurementKind, Measurements};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Parallel2d,
    Parallel3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub mode: Mode,
    pub n_angles: usize,
    pub n_radial: usize,
    /// Radial bin width in mm.
    pub radial_spacing: f64,
    /// Number of polar tilts, odd so that the direct plane is included.
    pub n_polar: usize,
    /// Tilt between neighbouring polar angles, in degrees.
    pub polar_step_deg: f64,
}

impl Geometry {
    pub fn parallel2d(n_angles: usize, n_radial: usize, radial_spacing: f64) -> Self {
        Self { mode: Mode::Parallel2d, n_angles, n_radial, radial_spacing, n_polar: 1, polar_step_deg: 0.0 }
    }

    pub fn parallel3d(n_angles: usize, n_radial: usize, radial_spacing: f64, n_polar: usize, polar_step_deg: f64) -> Self {
        Self { mode: Mode::Parallel3d, n_angles, n_radial, radial_spacing, n_polar, polar_step_deg }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_angles == 0 || self.n_radial == 0 {
            return Err(Error::Config("geometry needs at least one angle and one radial bin".into()));
        }
        if !(self.radial_spacing > 0.0 && self.radial_spacing.is_finite()) {
            return Err(Error::Config(format!("radial spacing must be positive, got {}", self.radial_spacing)));
        }
        if self.mode == Mode::Parallel3d {
            if self.n_polar == 0 || self.n_polar % 2 == 0 {
                return Err(Error::Config(format!("n_polar must be odd, got {}", self.n_polar)));
            }
            let max_tilt = self.polar_step_deg.abs() * (self.n_polar / 2) as f64;
            if !(max_tilt < 90.0) {
                return Err(Error::Config(format!("polar tilt {max_tilt} deg is not below 90")));
            }
        }
        Ok(())
    }

    pub fn n_polar(&self) -> usize {
        match self.mode {
            Mode::Parallel2d => 1,
            Mode::Parallel3d => self.n_polar,
        }
    }

    pub fn layout(&self, dims: Dims) -> Layout {
        Layout::new(self.n_angles, self.n_radial, self.n_polar() * dims.nz)
    }

    pub fn angle(&self, a: usize) -> f64 {
        a as f64 * std::f64::consts::PI / self.n_angles as f64
    }

    /// Polar tilt of polar index `k`, in radians; tilt-major plane order.
    pub fn polar(&self, k: usize) -> f64 {
        let c = (self.n_polar() as f64 - 1.0) / 2.0;
        (k as f64 - c) * self.polar_step_deg.to_radians()
    }
}

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, Default)]
struct Csr {
    ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl Csr {
    #[inline]
    fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (s, e) = (self.ptr[i], self.ptr[i + 1]);
        (&self.col[s..e], &self.val[s..e])
    }

    #[inline]
    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (c, v) = self.row(i);
        c.iter().zip(v).map(|(&j, &w)| w * x[j as usize]).sum()
    }

    fn push_row(&mut self, entries: &mut Vec<(u32, f64)>) {
        entries.sort_unstable_by_key(|e| e.0);
        let mut last = None;
        for &(j, w) in entries.iter() {
            if w == 0.0 {
                continue;
            }
            if last == Some(j) {
                *self.val.last_mut().unwrap() += w;
            } else {
                self.col.push(j);
                self.val.push(w);
                last = Some(j);
            }
        }
        self.ptr.push(self.col.len());
        entries.clear();
    }
}

struct Tracer {
    dims: Dims,
    spacing: [f64; 3],
    step: f64,
}

impl Tracer {
    fn new(dims: Dims, spacing: [f64; 3], tilted: bool) -> Self {
        let mut step = spacing[0].min(spacing[1]);
        if tilted && dims.nz > 1 {
            step = step.min(spacing[2]);
        }
        Self { dims, spacing, step: step / 2.0 }
    }

    fn center(&self, axis: usize) -> f64 {
        let n = [self.dims.nx, self.dims.ny, self.dims.nz][axis];
        (n as f64 - 1.0) / 2.0
    }

    /// Parameter interval where the ray `o + tau d` can meet nonzero
    /// interpolation weights.
    fn clip(&self, o: [f64; 3], d: [f64; 3], axes: usize) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for ax in 0..axes {
            let half = (self.center(ax) + 1.0) * self.spacing[ax];
            if d[ax].abs() < 1e-15 {
                if o[ax].abs() >= half {
                    return None;
                }
            } else {
                let (t0, t1) = ((-half - o[ax]) / d[ax], (half - o[ax]) / d[ax]);
                lo = lo.max(t0.min(t1));
                hi = hi.min(t0.max(t1));
            }
        }
        (lo < hi).then_some((lo, hi))
    }

    /// In-plane ray through slice `iz`.
    fn trace_planar(&self, o: [f64; 2], d: [f64; 2], iz: usize, out: &mut Vec<(u32, f64)>) {
        let Some((lo, hi)) = self.clip([o[0], o[1], 0.0], [d[0], d[1], 0.0], 2) else { return };
        let (nx, ny) = (self.dims.nx as isize, self.dims.ny as isize);
        let (cx, cy) = (self.center(0), self.center(1));
        let base = iz * self.dims.slice_len();
        let (m0, m1) = ((lo / self.step).ceil() as i64, (hi / self.step).floor() as i64);
        for m in m0..=m1 {
            let tau = m as f64 * self.step;
            let fx = (o[0] + tau * d[0]) / self.spacing[0] + cx;
            let fy = (o[1] + tau * d[1]) / self.spacing[1] + cy;
            let (x0, y0) = (fx.floor(), fy.floor());
            let (wx, wy) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for (dy, ky) in [(0, 1.0 - wy), (1, wy)] {
                let y = y0 + dy;
                if y < 0 || y >= ny || ky == 0.0 {
                    continue;
                }
                for (dx, kx) in [(0, 1.0 - wx), (1, wx)] {
                    let x = x0 + dx;
                    if x < 0 || x >= nx || kx == 0.0 {
                        continue;
                    }
                    let j = base + (y * nx + x) as usize;
                    out.push((j as u32, self.step * kx * ky));
                }
            }
        }
    }

    fn trace_volume(&self, o: [f64; 3], d: [f64; 3], out: &mut Vec<(u32, f64)>) {
        let Some((lo, hi)) = self.clip(o, d, 3) else { return };
        let n = [self.dims.nx as isize, self.dims.ny as isize, self.dims.nz as isize];
        let c = [self.center(0), self.center(1), self.center(2)];
        let (m0, m1) = ((lo / self.step).ceil() as i64, (hi / self.step).floor() as i64);
        for m in m0..=m1 {
            let tau = m as f64 * self.step;
            let mut i0 = [0isize; 3];
            let mut w = [0.0; 3];
            for ax in 0..3 {
                let f = (o[ax] + tau * d[ax]) / self.spacing[ax] + c[ax];
                let fl = f.floor();
                i0[ax] = fl as isize;
                w[ax] = f - fl;
            }
            for dz in 0..2 {
                let z = i0[2] + dz;
                let kz = if dz == 0 { 1.0 - w[2] } else { w[2] };
                if z < 0 || z >= n[2] || kz == 0.0 {
                    continue;
                }
                for dy in 0..2 {
                    let y = i0[1] + dy;
                    let ky = if dy == 0 { 1.0 - w[1] } else { w[1] };
                    if y < 0 || y >= n[1] || ky == 0.0 {
                        continue;
                    }
                    for dx in 0..2 {
                        let x = i0[0] + dx;
                        let kx = if dx == 0 { 1.0 - w[0] } else { w[0] };
                        if x < 0 || x >= n[0] || kx == 0.0 {
                            continue;
                        }
                        let j = ((z * n[1] + y) * n[0] + x) as usize;
                        out.push((j as u32, self.step * kx * ky * kz));
                    }
                }
            }
        }
    }
}

fn trace_geometry(g: &Geometry, dims: Dims, spacing: [f64; 3]) -> Csr {
    let layout = g.layout(dims);
    let tracer = Tracer::new(dims, spacing, g.n_polar() > 1);
    let cr = (g.n_radial as f64 - 1.0) / 2.0;
    let cz = (dims.nz as f64 - 1.0) / 2.0;
    let mut csr = Csr { ptr: vec![0], ..Default::default() };
    let mut buf = Vec::new();
    for a in 0..g.n_angles {
        let (st, ct) = g.angle(a).sin_cos();
        for r in 0..g.n_radial {
            let u = (r as f64 - cr) * g.radial_spacing;
            for p in 0..layout.n_planes {
                let (k, iz) = (p / dims.nz, p % dims.nz);
                let phi = g.polar(k);
                if phi == 0.0 {
                    tracer.trace_planar([u * ct, u * st], [-st, ct], iz, &mut buf);
                } else {
                    let (sp, cp) = phi.sin_cos();
                    let v = (iz as f64 - cz) * spacing[2];
                    let eu = [ct, st, 0.0];
                    let ev = [st * sp, -ct * sp, cp];
                    let d = [-st * cp, ct * cp, sp];
                    let o = [u * eu[0] + v * ev[0], u * eu[1] + v * ev[1], v * ev[2]];
                    tracer.trace_volume(o, d, &mut buf);
                }
                csr.push_row(&mut buf);
            }
        }
    }
    csr
}

/// Emission system: projector, attenuation, sensitivity and background.
#[derive(Debug, Clone)]
pub struct SystemModel {
    geometry: Option<Geometry>,
    dims: Dims,
    spacing: [f64; 3],
    layout: Layout,
    weights: Csr,
    sensitivity: Vec<f64>,
    attenuation: Option<ImageGrid>,
    factor: Vec<f64>,
    background: Measurements,
    sens_image: ImageGrid,
}

/// Angles per partial image in the back projection; fixed so that the
/// summation order does not depend on the thread count.
const BACK_CHUNK: usize = 4;

impl SystemModel {
    /// Ray-traced model with no attenuation, unit sensitivity, no background.
    pub fn new(geometry: Geometry, dims: Dims, spacing: [f64; 3]) -> Result<Self> {
        geometry.validate()?;
        if dims.is_empty() {
            return Err(Error::Shape("empty image dims".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let weights = trace_geometry(&geometry, dims, spacing);
        Ok(Self::assemble(Some(geometry), dims, spacing, geometry.layout(dims), weights))
    }

    /// Explicit row-major matrix, rows grouped by angle as in `layout`.
    pub fn from_matrix(layout: Layout, dims: Dims, matrix: &[f64]) -> Result<Self> {
        let (m, n) = (layout.len(), dims.len());
        if matrix.len() != m * n {
            return Err(Error::Shape(format!("matrix has {} entries, expected {m}x{n}", matrix.len())));
        }
        if let Some(i) = matrix.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidValue(format!("system matrix entry {i} is {}", matrix[i])));
        }
        let mut csr = Csr { ptr: vec![0], ..Default::default() };
        let mut buf = Vec::new();
        for row in matrix.chunks(n) {
            buf.extend(row.iter().enumerate().map(|(j, &w)| (j as u32, w)));
            csr.push_row(&mut buf);
        }
        Ok(Self::assemble(None, dims, [1.0; 3], layout, csr))
    }

    fn assemble(geometry: Option<Geometry>, dims: Dims, spacing: [f64; 3], layout: Layout, weights: Csr) -> Self {
        let m = layout.len();
        let mut sm = Self {
            geometry,
            dims,
            spacing,
            layout,
            weights,
            sensitivity: vec![1.0; m],
            attenuation: None,
            factor: vec![1.0; m],
            background: Measurements::zeros(layout, MeasurementKind::Expected),
            sens_image: ImageGrid::zeros(dims).with_spacing(spacing),
        };
        sm.refresh();
        sm
    }

    fn refresh(&mut self) {
        self.factor = match &self.attenuation {
            None => self.sensitivity.clone(),
            Some(mu) => (0..self.layout.len())
                .map(|i| self.sensitivity[i] * (-self.weights.row_dot(i, mu.data())).exp())
                .collect(),
        };
        let ones = Measurements::filled(self.layout, MeasurementKind::Expected, 1.0);
        self.sens_image = self.back_unchecked(ones.bins(), &self.all_angles());
    }

    /// Linear attenuation coefficients in 1/mm on the image grid.
    pub fn with_attenuation(mut self, mu: &ImageGrid) -> Result<Self> {
        self.check_dims(mu)?;
        if let Some(i) = mu.data().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidValue(format!("negative attenuation at voxel {i}")));
        }
        self.attenuation = Some(mu.clone());
        self.refresh();
        Ok(self)
    }

    pub fn with_sensitivity(mut self, sensitivity: Vec<f64>) -> Result<Self> {
        if sensitivity.len() != self.layout.len() {
            return Err(Error::Shape(format!("{} sensitivity factors for {} bins", sensitivity.len(), self.layout.len())));
        }
        if let Some(i) = sensitivity.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidValue(format!("sensitivity factor {i} is {}", sensitivity[i])));
        }
        self.sensitivity = sensitivity;
        self.refresh();
        Ok(self)
    }

    pub fn with_background(mut self, background: Measurements) -> Result<Self> {
        self.check_layout(&background)?;
        if background.kind() != MeasurementKind::Expected {
            return Err(Error::InvalidValue("background must hold expected values".into()));
        }
        if let Some(i) = background.bins().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidValue(format!("negative background at bin {i}")));
        }
        self.background = background;
        Ok(self)
    }

    pub fn geometry(&self) -> Option<&Geometry> {
        self.geometry.as_ref()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn n_angles(&self) -> usize {
        self.layout.n_angles
    }

    pub fn background(&self) -> &Measurements {
        &self.background
    }

    pub fn attenuation(&self) -> Option<&ImageGrid> {
        self.attenuation.as_ref()
    }

    /// Cached `A^T 1`.
    pub fn sensitivity_image(&self) -> &ImageGrid {
        &self.sens_image
    }

    /// Voxels reached by at least one ray.
    pub fn support(&self) -> Vec<bool> {
        self.sens_image.data().iter().map(|&s| s > 0.0).collect()
    }

    pub fn all_angles(&self) -> Vec<usize> {
        (0..self.layout.n_angles).collect()
    }

    pub fn check_dims(&self, x: &ImageGrid) -> Result<()> {
        if x.dims() != self.dims {
            return Err(Error::Shape(format!("image dims {:?} do not match system dims {:?}", x.dims(), self.dims)));
        }
        Ok(())
    }

    pub fn check_layout(&self, q: &Measurements) -> Result<()> {
        if q.layout() != self.layout {
            return Err(Error::Shape(format!("layout {:?} does not match system layout {:?}", q.layout(), self.layout)));
        }
        Ok(())
    }

    /// `A x` (no background).
    pub fn forward(&self, x: &ImageGrid) -> Result<Measurements> {
        self.forward_angles(x, &self.all_angles())
    }

    /// `A x` restricted to the bins of `angles`; other bins are zero.
    pub fn forward_angles(&self, x: &ImageGrid, angles: &[usize]) -> Result<Measurements> {
        self.check_dims(x)?;
        let bpa = self.layout.bins_per_angle();
        let blocks: Vec<Vec<f64>> = angles
            .par_iter()
            .map(|&a| (a * bpa..(a + 1) * bpa).map(|i| self.factor[i] * self.weights.row_dot(i, x.data())).collect())
            .collect();
        let mut out = Measurements::zeros(self.layout, MeasurementKind::Expected);
        for (&a, block) in angles.iter().zip(blocks) {
            out.bins_mut()[a * bpa..(a + 1) * bpa].copy_from_slice(&block);
        }
        Ok(out)
    }

    /// `A x + b̄`.
    pub fn expected(&self, x: &ImageGrid) -> Result<Measurements> {
        Ok(self.forward(x)?.plus(&self.background))
    }

    /// `A^T q`.
    pub fn back(&self, q: &Measurements) -> Result<ImageGrid> {
        self.back_angles(q, &self.all_angles())
    }

    /// `A^T q` using only the bins of `angles`.
    pub fn back_angles(&self, q: &Measurements, angles: &[usize]) -> Result<ImageGrid> {
        self.check_layout(q)?;
        Ok(self.back_unchecked(q.bins(), angles))
    }

    fn back_unchecked(&self, q: &[f64], angles: &[usize]) -> ImageGrid {
        let bpa = self.layout.bins_per_angle();
        let n = self.dims.len();
        let partials: Vec<Vec<f64>> = angles
            .par_chunks(BACK_CHUNK)
            .map(|chunk| {
                let mut img = vec![0.0; n];
                for &a in chunk {
                    for i in a * bpa..(a + 1) * bpa {
                        let qi = self.factor[i] * q[i];
                        if qi == 0.0 {
                            continue;
                        }
                        let (c, v) = self.weights.row(i);
                        for (&j, &w) in c.iter().zip(v) {
                            img[j as usize] += w * qi;
                        }
                    }
                }
                img
            })
            .collect();
        let mut out = vec![0.0; n];
        for p in partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        ImageGrid::from_vec(self.dims, out).expect("finite back projection").with_spacing(self.spacing)
    }

    /// Bin index range of one angle.
    pub fn angle_bins(&self, a: usize) -> std::ops::Range<usize> {
        let bpa = self.layout.bins_per_angle();
        a * bpa..(a + 1) * bpa
    }
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut f = 2;
    while f * f <= n {
        while n % f == 0 {
            out.push(f);
            n /= f;
        }
        f += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// Herman-Meyer access order: mixed-radix digit reversal over the
/// ascending prime factors of `n`.
pub fn herman_meyer_order(n: usize) -> Vec<usize> {
    assert!(n >= 1, "herman_meyer_order needs n >= 1");
    let factors = prime_factors(n);
    (0..n)
        .map(|i| {
            let (mut rem, mut mult, mut v) = (i, n, 0);
            for &f in &factors {
                mult /= f;
                v += (rem % f) * mult;
                rem /= f;
            }
            v
        })
        .collect()
}

/// Staggered angle subsets with their access order and sensitivities.
#[derive(Debug, Clone)]
pub struct SubsetSchedule {
    pub n_sub: usize,
    pub subsets: Vec<Vec<usize>>,
    pub order: Vec<usize>,
    /// `A_j^T 1` for each subset `j`.
    pub sensitivity: Vec<ImageGrid>,
}

impl SubsetSchedule {
    pub fn angles(&self, j: usize) -> &[usize] {
        &self.subsets[j]
    }

    /// Subset visited at overall sub-iteration `i`.
    pub fn at(&self, i: usize) -> usize {
        self.order[i % self.n_sub]
    }
}

pub fn partition_subsets(sm: &SystemModel, n_sub: usize) -> Result<SubsetSchedule> {
    let n_angles = sm.n_angles();
    if n_sub == 0 || n_angles % n_sub != 0 {
        return Err(Error::Config(format!("{n_sub} subsets do not divide {n_angles} angles")));
    }
    let subsets: Vec<Vec<usize>> = (0..n_sub).map(|k| (k..n_angles).step_by(n_sub).collect()).collect();
    let ones = Measurements::filled(sm.layout(), MeasurementKind::Expected, 1.0);
    let sensitivity = subsets.iter().map(|s| sm.back_unchecked(ones.bins(), s)).collect();
    Ok(SubsetSchedule { n_sub, subsets, order: herman_meyer_order(n_sub), sensitivity })
}

/// Scale such that `sum(scale * A x) = level * #{x > 0}`.
pub fn scale_to_noise_level(sm: &SystemModel, x_true: &ImageGrid, level: f64) -> Result<f64> {
    x_true.check_tracer()?;
    if !(level > 0.0 && level.is_finite()) {
        return Err(Error::Config(format!("noise level must be positive, got {level}")));
    }
    let n_emit = x_true.data().iter().filter(|&&v| v > 0.0).count();
    let total = sm.forward(x_true)?.sum();
    if n_emit == 0 || !(total > 0.0) {
        return Err(Error::Degenerate("phantom has zero forward projection".into()));
    }
    Ok(level * n_emit as f64 / total)
}

/// Constant background equal to `fraction` of the mean of `trues`.
pub fn constant_background(trues: &Measurements, fraction: f64) -> Measurements {
    let mean = trues.sum() / trues.len() as f64;
    Measurements::filled(trues.layout(), MeasurementKind::Expected, fraction * mean)
}

/// Poisson counts around `A x + b̄`.
pub fn simulate_measurements(sm: &SystemModel, x_true: &ImageGrid, seed: u64) -> Result<Measurements> {
    let ybar = sm.expected(x_true)?;
    poisson_counts(&ybar, seed)
}

pub fn poisson_counts(ybar: &Measurements, seed: u64) -> Result<Measurements> {
    let mut rng = SeedStream::new(seed).rng("poisson", 0);
    let mut bins = Vec::with_capacity(ybar.len());
    for (i, &lam) in ybar.bins().iter().enumerate() {
        if !(lam >= 0.0 && lam.is_finite()) {
            return Err(Error::InvalidValue(format!("expected value {lam} at bin {i}")));
        }
        bins.push(if lam == 0.0 { 0.0 } else { Poisson::new(lam).expect("positive mean").sample(&mut rng) });
    }
    Measurements::new(ybar.layout(), MeasurementKind::Counts, bins)
}
