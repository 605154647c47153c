//! Simulated reconstruction problems: phantom, scanner, calibrated counts
//! and the normalized priors built from phantom datasets.

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{Dims, ImageGrid, Measurements};
use crate::phantom::{build_dataset, generate_phantom, PairedSample, PhantomSpec};
use crate::projector::{constant_background, scale_to_noise_level, simulate_measurements, Geometry, SystemModel};
use crate::rng::SeedStream;
use crate::score::{c_train, ConditionalMixture, MixtureScore};

/// Default polar tilt between neighbouring 3D ray planes.
pub const DEFAULT_POLAR_STEP_DEG: f64 = 10.0;

fn default_background_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerSpec {
    pub geometry: Geometry,
    /// Constant background as a fraction of the mean scaled trues.
    #[serde(default = "default_background_fraction")]
    pub background_fraction: f64,
    /// Linear attenuation (1/mm) inside the head; 0 disables attenuation.
    #[serde(default)]
    pub attenuation_mu: f64,
}

impl ScannerSpec {
    /// As many angles as image columns and radial bins covering the
    /// inscribed circle; three polar tilts in 3D.
    pub fn for_image(dims: Dims, spacing: [f64; 3]) -> Self {
        let geometry = if dims.nz == 1 {
            Geometry::parallel2d(dims.nx, dims.nx.max(dims.ny), spacing[0])
        } else {
            Geometry::parallel3d(dims.nx, dims.nx.max(dims.ny), spacing[0], 3, DEFAULT_POLAR_STEP_DEG)
        };
        Self { geometry, background_fraction: 0.2, attenuation_mu: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(self.background_fraction >= 0.0 && self.background_fraction.is_finite()) {
            return Err(Error::Config(format!("background fraction must be >= 0, got {}", self.background_fraction)));
        }
        if !(self.attenuation_mu >= 0.0 && self.attenuation_mu.is_finite()) {
            return Err(Error::Config(format!("attenuation must be >= 0, got {}", self.attenuation_mu)));
        }
        Ok(())
    }
}

/// Ground truth and calibrated system for one phantom.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub sample: PairedSample,
    /// Phantom PET image times the noise-level scale.
    pub truth: ImageGrid,
    pub scale: f64,
    pub level: f64,
    /// System with the calibrated background.
    pub sm: SystemModel,
}

impl Scenario {
    pub fn new(sample: PairedSample, scanner: &ScannerSpec, level: f64) -> Result<Self> {
        scanner.validate()?;
        let pet = &sample.pet;
        let mut sm = SystemModel::new(scanner.geometry, pet.dims(), pet.spacing())?;
        if scanner.attenuation_mu > 0.0 {
            let mu = sample.head_mask.map(|h| if h > 0.0 { scanner.attenuation_mu } else { 0.0 });
            sm = sm.with_attenuation(&mu)?;
        }
        let scale = scale_to_noise_level(&sm, pet, level)?;
        let truth = pet.scaled(scale);
        let bg = constant_background(&sm.forward(&truth)?, scanner.background_fraction);
        let sm = sm.with_background(bg)?;
        Ok(Self { sample, truth, scale, level, sm })
    }

    pub fn from_spec(spec: &PhantomSpec, scanner: &ScannerSpec, level: f64) -> Result<Self> {
        spec.validate()?;
        Self::new(generate_phantom(spec)?, scanner, level)
    }

    /// Poisson realization `r` of the scenario under master seed `seed`.
    pub fn realization(&self, seed: u64, r: usize) -> Result<Measurements> {
        simulate_measurements(&self.sm, &self.truth, SeedStream::new(seed).derive("realization", r as u64))
    }

    pub fn realizations(&self, seed: u64, n: usize) -> Result<Vec<Measurements>> {
        (0..n).map(|r| self.realization(seed, r)).collect()
    }
}

/// PET images of a lesion-free dataset, each divided by its `c_train`.
pub fn normalized_pet(samples: &[PairedSample]) -> Result<Vec<ImageGrid>> {
    samples.iter().map(|s| Ok(s.pet.scaled(1.0 / c_train(&s.pet)?))).collect()
}

/// Lesion-free training set around `base`.
pub fn prior_dataset(base: &PhantomSpec, n: usize, seed: u64) -> Result<Vec<PairedSample>> {
    let mut spec = base.clone();
    spec.lesions = None;
    build_dataset(n, &spec, seed)
}

/// Uniform mixture over the normalized PET images of a dataset.
pub fn mixture_prior(samples: &[PairedSample], sched: DiffusionSchedule) -> Result<MixtureScore> {
    MixtureScore::new(normalized_pet(samples)?, sched)
}

/// Mixture whose components are tagged by their MR images.
pub fn conditional_prior(samples: &[PairedSample], sched: DiffusionSchedule) -> Result<ConditionalMixture> {
    ConditionalMixture::new(normalized_pet(samples)?, samples.iter().map(|s| s.mr.clone()).collect(), sched)
}

/// Mixture over the axial slices of a 3D dataset. Each slice is divided
/// by the `c_train` of its volume, which is the normalization a 3D
/// reconstruction applies; empty slices are dropped.
pub fn slice_prior(samples: &[PairedSample], sched: DiffusionSchedule) -> Result<MixtureScore> {
    let mut slices = Vec::new();
    for x in normalized_pet(samples)? {
        for z in 0..x.dims().nz {
            let s = x.slice_z(z);
            if s.max() > 0.0 {
                slices.push(s);
            }
        }
    }
    MixtureScore::new(slices, sched)
}

/// PET variants sharing one anatomy: the compartments of `anatomy` with
/// gray/white activities rescaled by independent factors in
/// `[1 − spread, 1 + spread]`. The MR image is unchanged.
pub fn pet_variants(anatomy: &PhantomSpec, n: usize, spread: f64, seed: u64) -> Result<Vec<PairedSample>> {
    if !(0.0..1.0).contains(&spread) {
        return Err(Error::Config(format!("activity spread must lie in [0, 1), got {spread}")));
    }
    let stream = SeedStream::new(seed);
    (0..n)
        .map(|i| {
            use rand::Rng as _;
            let mut rng = stream.rng("variant", i as u64);
            let mut spec = anatomy.clone();
            spec.pet.gray *= 1.0 + spread * rng.random_range(-1.0..1.0);
            spec.pet.white *= 1.0 + spread * rng.random_range(-1.0..1.0);
            generate_phantom(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_hits_the_noise_level() {
        let spec = PhantomSpec::brain(Dims::planar(16, 16));
        let sc = Scenario::from_spec(&spec, &ScannerSpec::for_image(spec.dims, spec.spacing), 10.0).unwrap();
        let n_emit = sc.truth.data().iter().filter(|&&v| v > 0.0).count() as f64;
        let trues = sc.sm.forward(&sc.truth).unwrap().sum();
        assert!((trues - 10.0 * n_emit).abs() < 1e-9 * trues);
        let bg = sc.sm.background().bins()[0];
        assert!((bg - 0.2 * trues / sc.sm.layout().len() as f64).abs() < 1e-12 * bg);
        assert_eq!(sc.realization(3, 1).unwrap(), sc.realization(3, 1).unwrap());
        assert_ne!(sc.realization(3, 0).unwrap(), sc.realization(3, 1).unwrap());
    }

    #[test]
    fn attenuation_lowers_counts() {
        let spec = PhantomSpec::brain(Dims::planar(16, 16));
        let mut scanner = ScannerSpec::for_image(spec.dims, spec.spacing);
        let plain = Scenario::from_spec(&spec, &scanner, 5.0).unwrap();
        scanner.attenuation_mu = 0.01;
        let att = Scenario::from_spec(&spec, &scanner, 5.0).unwrap();
        // same count level is reached with a larger activity scale
        assert!(att.scale > plain.scale);
    }

    #[test]
    fn priors_are_normalized_and_lesion_free() {
        let mut spec = PhantomSpec::brain(Dims::planar(16, 16));
        spec.jitter = 0.05;
        spec.lesions = Some(Default::default());
        let ds = prior_dataset(&spec, 4, 1).unwrap();
        assert!(ds.iter().all(|s| s.lesion_mask.sum() == 0.0));
        for x in normalized_pet(&ds).unwrap() {
            assert!((c_train(&x).unwrap() - 1.0).abs() < 1e-12);
        }
        let cm = conditional_prior(&ds, DiffusionSchedule::default()).unwrap();
        assert_eq!(cm.restricted(Some(&ds[2].mr)).unwrap().components().len(), 1);
    }

    #[test]
    fn variants_share_anatomy() {
        let spec = PhantomSpec::brain(Dims::planar(16, 16));
        let v = pet_variants(&spec, 3, 0.3, 2).unwrap();
        assert!(v.iter().all(|s| s.mr == v[0].mr));
        assert_ne!(v[0].pet, v[1].pet);
        assert!(pet_variants(&spec, 1, 1.5, 0).is_err());
    }
}
