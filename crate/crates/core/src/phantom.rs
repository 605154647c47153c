//! Ellipse brain phantoms with paired pseudo-MR images and hot lesions.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Dims, ImageGrid, DEFAULT_SPACING};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compartment {
    Gray,
    White,
}

/// Per-compartment intensities for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intensities {
    pub gray: f64,
    pub white: f64,
}

impl Intensities {
    pub fn of(&self, c: Compartment) -> f64 {
        match c {
            Compartment::Gray => self.gray,
            Compartment::White => self.white,
        }
    }
}

pub const PET_INTENSITIES: Intensities = Intensities { gray: 1.0, white: 0.25 };
pub const MR_INTENSITIES: Intensities = Intensities { gray: 0.3, white: 1.0 };

/// Ellipse (ellipsoid in 3D) in normalized coordinates, where the image
/// spans `[-1, 1]` along every axis. Later ellipses paint over earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub center: [f64; 3],
    pub axes: [f64; 3],
    /// In-plane rotation in degrees.
    pub angle_deg: f64,
    pub compartment: Compartment,
}

impl Ellipse {
    fn contains(&self, p: [f64; 3], planar: bool) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let u = (c * dx + s * dy) / self.axes[0];
        let v = (-s * dx + c * dy) / self.axes[1];
        let w = if planar { 0.0 } else { (p[2] - self.center[2]) / self.axes[2] };
        u * u + v * v + w * w <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    pub count: usize,
    /// Semi-axis range in voxels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Lesion intensity over its host compartment.
    pub contrast: f64,
    /// Place lesions in gray matter only; otherwise in either compartment.
    pub soft_tissue_only: bool,
}

impl Default for LesionSpec {
    fn default() -> Self {
        Self { count: 1, radius_min: 1.0, radius_max: 2.0, contrast: 4.0, soft_tissue_only: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    pub ellipses: Vec<Ellipse>,
    #[serde(default = "default_pet")]
    pub pet: Intensities,
    #[serde(default = "default_mr")]
    pub mr: Intensities,
    #[serde(default)]
    pub lesions: Option<LesionSpec>,
    /// Relative perturbation of ellipse centers, axes and angles.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_spacing() -> [f64; 3] {
    DEFAULT_SPACING
}
fn default_pet() -> Intensities {
    PET_INTENSITIES
}
fn default_mr() -> Intensities {
    MR_INTENSITIES
}

impl PhantomSpec {
    /// Gray cortex around white matter with two deep gray nuclei.
    pub fn brain(dims: Dims) -> Self {
        use Compartment::*;
        let e = |c: [f64; 3], a: [f64; 3], ang: f64, comp| Ellipse { center: c, axes: a, angle_deg: ang, compartment: comp };
        Self {
            dims,
            spacing: DEFAULT_SPACING,
            ellipses: vec![
                e([0.0, 0.0, 0.0], [0.78, 0.90, 0.95], 0.0, Gray),
                e([0.0, 0.02, 0.0], [0.56, 0.68, 0.75], 0.0, White),
                e([-0.22, 0.06, 0.0], [0.18, 0.28, 0.7], 15.0, Gray),
                e([0.22, 0.06, 0.0], [0.18, 0.28, 0.7], -15.0, Gray),
            ],
            pet: PET_INTENSITIES,
            mr: MR_INTENSITIES,
            lesions: None,
            jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("phantom dims must be >= 1".into()));
        }
        for v in [self.pet.gray, self.pet.white, self.mr.gray, self.mr.white] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("compartment intensity {v} must be non-negative")));
            }
        }
        for e in &self.ellipses {
            if e.axes.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Config(format!("ellipse axes must be positive: {:?}", e.axes)));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return Err(Error::Config(format!("jitter must lie in [0, 1), got {}", self.jitter)));
        }
        if let Some(l) = &self.lesions {
            if !(l.radius_min > 0.0 && l.radius_min <= l.radius_max) || !(l.contrast >= 0.0) {
                return Err(Error::Config(format!("invalid lesion spec {l:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub pet: ImageGrid,
    pub mr: ImageGrid,
    pub lesion_mask: ImageGrid,
    /// Pure host-compartment voxels away from lesions (pure gray matter
    /// without lesions), for contrast and noise ROIs.
    pub background_mask: ImageGrid,
    /// Voxels touched by any ellipse.
    pub head_mask: ImageGrid,
}

const MAX_PLACEMENT_TRIES: usize = 500;

/// Per-voxel coverage fractions `(gray, white)` from 3x3(x3) supersampling.
fn coverage(dims: Dims, ellipses: &[Ellipse]) -> Vec<[f64; 2]> {
    let planar = dims.nz == 1;
    let offs = [-1.0 / 3.0, 0.0, 1.0 / 3.0];
    let zoffs: &[f64] = if planar { &[0.0] } else { &offs };
    let n_sub = (offs.len() * offs.len() * zoffs.len()) as f64;
    let norm = |i: usize, n: usize, o: f64| (i as f64 - (n as f64 - 1.0) / 2.0 + o) / (n as f64 / 2.0);
    let mut out = vec![[0.0; 2]; dims.len()];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let mut cnt = [0usize; 2];
                for &oz in zoffs {
                    for &oy in &offs {
                        for &ox in &offs {
                            let p = [norm(x, dims.nx, ox), norm(y, dims.ny, oy), if planar { 0.0 } else { norm(z, dims.nz, oz) }];
                            let label = ellipses.iter().rev().find(|e| e.contains(p, planar)).map(|e| e.compartment);
                            match label {
                                Some(Compartment::Gray) => cnt[0] += 1,
                                Some(Compartment::White) => cnt[1] += 1,
                                None => {}
                            }
                        }
                    }
                }
                out[dims.index(x, y, z)] = [cnt[0] as f64 / n_sub, cnt[1] as f64 / n_sub];
            }
        }
    }
    out
}

fn jittered(spec: &PhantomSpec) -> Vec<Ellipse> {
    if spec.jitter == 0.0 {
        return spec.ellipses.clone();
    }
    let mut rng = SeedStream::new(spec.seed).rng("jitter", 0);
    let j = spec.jitter;
    spec.ellipses
        .iter()
        .map(|e| {
            let mut e = *e;
            for a in 0..3 {
                e.center[a] += j * rng.random_range(-1.0..1.0);
                e.axes[a] *= 1.0 + j * rng.random_range(-1.0..1.0);
            }
            e.angle_deg += 90.0 * j * rng.random_range(-1.0..1.0);
            e
        })
        .collect()
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PairedSample> {
    spec.validate()?;
    let dims = spec.dims;
    let ellipses = jittered(spec);
    let cov = coverage(dims, &ellipses);
    let paint = |t: &Intensities| cov.iter().map(|c| c[0] * t.gray + c[1] * t.white).collect::<Vec<_>>();
    let mut pet = paint(&spec.pet);
    let mr = paint(&spec.mr);
    let head: Vec<f64> = cov.iter().map(|c| if c[0] + c[1] > 0.0 { 1.0 } else { 0.0 }).collect();
    let pure = |c: &[f64; 2], comp: Compartment| match comp {
        Compartment::Gray => c[0] == 1.0,
        Compartment::White => c[1] == 1.0,
    };

    let mut lesion = vec![0.0; dims.len()];
    let mut blocked = vec![false; dims.len()];
    let mut hosts = Vec::new();
    if let Some(ls) = spec.lesions.filter(|l| l.count > 0) {
        let mut rng = SeedStream::new(spec.seed).rng("lesion", 0);
        let allowed: &[Compartment] =
            if ls.soft_tissue_only { &[Compartment::Gray] } else { &[Compartment::Gray, Compartment::White] };
        for n in 0..ls.count {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let c = [rng.random_range(0..dims.nx), rng.random_range(0..dims.ny), rng.random_range(0..dims.nz)];
                let ci = dims.index(c[0], c[1], c[2]);
                let Some(&host) = allowed.iter().find(|&&h| pure(&cov[ci], h)) else { continue };
                let mut r = [0.0; 3];
                for v in r.iter_mut() {
                    *v = rng.random_range(ls.radius_min..=ls.radius_max);
                }
                let voxels = ellipsoid_voxels(dims, c, r);
                let ok = voxels.iter().all(|&v| pure(&cov[v], host) && !blocked[v]);
                if !ok {
                    continue;
                }
                let value = ls.contrast * spec.pet.of(host);
                for &v in &voxels {
                    lesion[v] = 1.0;
                    pet[v] = value;
                }
                for v in neighbours(dims, &voxels) {
                    blocked[v] = true;
                }
                hosts.push(host);
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Degenerate(format!("could not place lesion {n} after {MAX_PLACEMENT_TRIES} tries")));
            }
        }
    }

    // lesion-free phantoms still get a soft-tissue background ROI
    if hosts.is_empty() {
        hosts.push(Compartment::Gray);
    }
    let background: Vec<f64> = (0..dims.len())
        .map(|v| {
            let host_ok = hosts.iter().any(|&h| pure(&cov[v], h));
            if host_ok && !blocked[v] && lesion[v] == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let img = |v: Vec<f64>| ImageGrid::from_vec(dims, v).map(|g| g.with_spacing(spec.spacing));
    Ok(PairedSample { pet: img(pet)?, mr: img(mr)?, lesion_mask: img(lesion)?, background_mask: img(background)?, head_mask: img(head)? })
}

fn ellipsoid_voxels(dims: Dims, c: [usize; 3], r: [f64; 3]) -> Vec<usize> {
    let mut out = Vec::new();
    let rz = if dims.nz == 1 { f64::INFINITY } else { r[2] };
    let span = |ci: usize, ri: f64, n: usize| {
        let e = if ri.is_finite() { ri.floor() as usize } else { 0 };
        ci.saturating_sub(e)..(ci + e + 1).min(n)
    };
    for z in span(c[2], rz, dims.nz) {
        for y in span(c[1], r[1], dims.ny) {
            for x in span(c[0], r[0], dims.nx) {
                let d = |a: usize, b: usize, ri: f64| if ri.is_finite() { (a as f64 - b as f64) / ri } else { 0.0 };
                let q = d(x, c[0], r[0]).powi(2) + d(y, c[1], r[1]).powi(2) + d(z, c[2], rz).powi(2);
                if q <= 1.0 {
                    out.push(dims.index(x, y, z));
                }
            }
        }
    }
    out
}

/// Voxels sharing a face, edge or corner with `set` but not in it.
fn neighbours(dims: Dims, set: &[usize]) -> Vec<usize> {
    let mut mark = vec![false; dims.len()];
    for &v in set {
        mark[v] = true;
    }
    let mut out = Vec::new();
    let mut seen = vec![false; dims.len()];
    for &v in set {
        let (z, rem) = (v / dims.slice_len(), v % dims.slice_len());
        let (y, x) = (rem / dims.nx, rem % dims.nx);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= dims.nx as i64 || yy >= dims.ny as i64 || zz >= dims.nz as i64 {
                        continue;
                    }
                    let j = dims.index(xx as usize, yy as usize, zz as usize);
                    if !mark[j] && !seen[j] {
                        seen[j] = true;
                        out.push(j);
                    }
                }
            }
        }
    }
    out
}

/// `n` phantoms with sub-seeds derived from `(seed, i)`.
pub fn build_dataset(n: usize, base: &PhantomSpec, seed: u64) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let stream = SeedStream::new(seed);
    (0..n)
        .map(|i| {
            let mut spec = base.clone();
            spec.seed = stream.derive("phantom", i as u64);
            generate_phantom(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    #[test]
    fn empty_spec_gives_empty_images() {
        let mut spec = PhantomSpec::brain(Dims::planar(16, 16));
        spec.ellipses.clear();
        let s = generate_phantom(&spec).unwrap();
        assert!(s.pet.data().iter().all(|&v| v == 0.0));
        assert!(s.mr.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lesion_free_spec_has_empty_mask_and_bounded_values() {
        let s = generate_phantom(&PhantomSpec::brain(Dims::planar(32, 32))).unwrap();
        assert_eq!(s.lesion_mask.sum(), 0.0);
        assert!(s.pet.max() <= 1.0 && s.pet.min() >= 0.0);
        for ((p, m), h) in s.pet.data().iter().zip(s.mr.data()).zip(s.head_mask.data()) {
            assert_eq!(*p > 0.0, *h > 0.0);
            assert_eq!(*m > 0.0, *h > 0.0);
        }
    }

    #[test]
    fn lesion_contrast_is_exact() {
        let mut spec = PhantomSpec::brain(Dims::planar(32, 32));
        spec.lesions = Some(LesionSpec { count: 2, ..Default::default() });
        spec.seed = 5;
        let s = generate_phantom(&spec).unwrap();
        let mean_over = |mask: &ImageGrid| {
            let n = mask.sum();
            assert!(n >= 1.0);
            s.pet.dot(mask) / n
        };
        let ratio = mean_over(&s.lesion_mask) / mean_over(&s.background_mask);
        assert!((ratio - 4.0).abs() < 1e-6, "{ratio}");
        assert_eq!(s.lesion_mask.dot(&s.background_mask), 0.0);
        // lesions are a PET-only feature
        let clean = generate_phantom(&PhantomSpec { lesions: None, ..spec }).unwrap();
        assert_eq!(clean.mr, s.mr);
    }

    #[test]
    fn lesions_in_3d() {
        let mut spec = PhantomSpec::brain(Dims::new(24, 24, 8));
        spec.lesions = Some(LesionSpec { count: 1, radius_min: 1.0, radius_max: 1.2, ..Default::default() });
        let s = generate_phantom(&spec).unwrap();
        assert!(s.lesion_mask.sum() >= 1.0);
    }

    #[test]
    fn impossible_lesion_fails() {
        let mut spec = PhantomSpec::brain(Dims::planar(16, 16));
        spec.lesions = Some(LesionSpec { count: 1, radius_min: 20.0, radius_max: 20.0, ..Default::default() });
        assert!(matches!(generate_phantom(&spec), Err(Error::Degenerate(_))));
    }

    fn digest(img: &ImageGrid) -> Vec<u8> {
        let mut h = Sha256::new();
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
        h.finalize().to_vec()
    }

    #[test]
    fn dataset_determinism_and_distinctness() {
        let mut base = PhantomSpec::brain(Dims::planar(16, 16));
        base.jitter = 0.05;
        let one = build_dataset(1, &base, 3).unwrap();
        let mut spec = base.clone();
        spec.seed = SeedStream::new(3).derive("phantom", 0);
        assert_eq!(one[0], generate_phantom(&spec).unwrap());

        let a = build_dataset(64, &base, 9).unwrap();
        assert_eq!(a, build_dataset(64, &base, 9).unwrap());
        let mut hashes: Vec<_> = a.iter().map(|s| digest(&s.pet)).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 64);
    }
}
