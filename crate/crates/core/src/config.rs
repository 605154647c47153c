//! Run configuration: one TOML document describing phantom, scanner,
//! noise level, prior and algorithm settings. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{Dims, ImageGrid};
use crate::net::{NetShape, TinyScoreNet, TrainOptions};
use crate::phantom::{PairedSample, PhantomSpec};
use crate::projector::Mode;
use crate::recon::{BsremParams, RdpParams};
use crate::sampler::{Method, SamplerConfig};
use crate::scenario::{conditional_prior, mixture_prior, prior_dataset, slice_prior, ScannerSpec, Scenario};
use crate::score::{ConditionalMixture, MixtureScore, ScoreModel};
use crate::sweep::SweepSpec;

fn default_noise_level() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// Exact score of the lesion-free dataset.
    Mixture,
    /// Mixture whose components are tagged by their MR images.
    Conditional,
    /// A trained [`TinyScoreNet`] loaded from `network`.
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub kind: PriorKind,
    /// Number of lesion-free phantoms in the dataset.
    pub n: usize,
    /// Jitter of the dataset phantoms around the configured phantom.
    pub jitter: f64,
    pub seed: u64,
    pub schedule: DiffusionSchedule,
    pub network: Option<PathBuf>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { kind: PriorKind::Mixture, n: 16, jitter: 0.08, seed: 11, schedule: DiffusionSchedule::default(), network: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub channels: usize,
    pub conditional: bool,
    pub options: TrainOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { channels: 8, conditional: false, options: TrainOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsremConfig {
    pub params: BsremParams,
    pub prior: RdpParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for the measurement realizations.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise_level")]
    pub noise_level: f64,
    /// Defaults to the 32x32 brain phantom.
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    /// Defaults to [`ScannerSpec::for_image`].
    #[serde(default)]
    pub scanner: Option<ScannerSpec>,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
    #[serde(default)]
    pub bsrem: BsremConfig,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise_level: default_noise_level(),
            phantom: None,
            scanner: None,
            prior: PriorConfig::default(),
            train: TrainConfig::default(),
            sampler: None,
            bsrem: BsremConfig::default(),
            sweep: None,
        }
    }
}

/// Prior built from a [`PriorConfig`].
#[derive(Debug, Clone)]
pub enum Prior {
    Mixture(MixtureScore),
    Conditional(ConditionalMixture),
    Network(TinyScoreNet),
}

impl Prior {
    pub fn model(&self) -> &dyn ScoreModel {
        match self {
            Prior::Mixture(m) => m,
            Prior::Conditional(m) => m,
            Prior::Network(n) => n,
        }
    }

    pub fn schedule(&self) -> DiffusionSchedule {
        match self {
            Prior::Mixture(m) => *m.schedule(),
            Prior::Conditional(m) => *m.unconditional().schedule(),
            Prior::Network(n) => *n.schedule(),
        }
    }

    /// Image dimensions the model scores.
    pub fn dims(&self) -> Dims {
        match self {
            Prior::Mixture(m) => m.dims(),
            Prior::Conditional(m) => m.unconditional().dims(),
            Prior::Network(n) => Dims::planar(n.shape().nx, n.shape().ny),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills in the default phantom and scanner.
    pub fn resolved(mut self) -> Self {
        let phantom = self.phantom.unwrap_or_else(|| PhantomSpec::brain(Dims::planar(32, 32)));
        self.scanner = Some(self.scanner.unwrap_or_else(|| ScannerSpec::for_image(phantom.dims, phantom.spacing)));
        self.phantom = Some(phantom);
        self
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        self.phantom.clone().unwrap_or_else(|| PhantomSpec::brain(Dims::planar(32, 32)))
    }

    pub fn scanner_spec(&self) -> ScannerSpec {
        let p = self.phantom_spec();
        self.scanner.unwrap_or_else(|| ScannerSpec::for_image(p.dims, p.spacing))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_level > 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config(format!("noise_level must be > 0, got {}", self.noise_level)));
        }
        let phantom = self.phantom_spec();
        phantom.validate()?;
        let scanner = self.scanner_spec();
        scanner.validate()?;
        if (scanner.geometry.mode == Mode::Parallel2d) != (phantom.dims.nz == 1) {
            return Err(Error::Config(format!(
                "{:?} geometry does not fit a phantom with {} slices",
                scanner.geometry.mode, phantom.dims.nz
            )));
        }
        let p = &self.prior;
        p.schedule.validate()?;
        if p.n == 0 || !(p.jitter >= 0.0) {
            return Err(Error::Config(format!("prior needs n >= 1 and jitter >= 0, got {} and {}", p.n, p.jitter)));
        }
        if (p.kind == PriorKind::Network) != p.network.is_some() {
            return Err(Error::Config("prior.network is required exactly when prior.kind = \"network\"".into()));
        }
        if self.train.channels == 0 {
            return Err(Error::Config("train.channels must be >= 1".into()));
        }
        self.train.options.validate()?;
        if let Some(s) = &self.sampler {
            s.validate()?;
        }
        self.bsrem.params.validate()?;
        self.bsrem.prior.validate()?;
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::from_spec(&self.phantom_spec(), &self.scanner_spec(), self.noise_level)
    }

    /// The lesion-free training set of the prior.
    pub fn prior_samples(&self) -> Result<Vec<PairedSample>> {
        let mut base = self.phantom_spec();
        base.jitter = self.prior.jitter;
        prior_dataset(&base, self.prior.n, self.prior.seed)
    }

    /// Builds the configured prior. Mixtures over 3D phantoms use the
    /// axial slices as components.
    pub fn build_prior(&self) -> Result<Prior> {
        let sched = self.prior.schedule;
        match self.prior.kind {
            PriorKind::Network => {
                let path = self.prior.network.as_ref().ok_or_else(|| Error::Config("prior.network missing".into()))?;
                Ok(Prior::Network(TinyScoreNet::load(path)?))
            }
            PriorKind::Mixture => {
                let samples = self.prior_samples()?;
                if self.phantom_spec().dims.nz > 1 {
                    Ok(Prior::Mixture(slice_prior(&samples, sched)?))
                } else {
                    Ok(Prior::Mixture(mixture_prior(&samples, sched)?))
                }
            }
            PriorKind::Conditional => {
                if self.phantom_spec().dims.nz > 1 {
                    return Err(Error::Config("the conditional prior is 2D only".into()));
                }
                Ok(Prior::Conditional(conditional_prior(&self.prior_samples()?, sched)?))
            }
        }
    }

    /// Untrained network sized for the phantom's axial slices.
    pub fn new_network(&self) -> Result<TinyScoreNet> {
        let d = self.phantom_spec().dims;
        let shape = NetShape { nx: d.nx, ny: d.ny, channels: self.train.channels, conditional: self.train.conditional };
        TinyScoreNet::new(shape, self.prior.schedule, self.train.options.seed)
    }

    /// Sampler settings, defaulting to `method` with its usual step count.
    pub fn sampler_or(&self, method: Method) -> SamplerConfig {
        self.sampler.clone().unwrap_or_else(|| SamplerConfig::new(method))
    }
}

/// Training images for [`crate::net::train_score`]: PET slices and their
/// MR slices.
pub fn training_slices(samples: &[PairedSample]) -> (Vec<ImageGrid>, Vec<ImageGrid>) {
    let mut pet = Vec::new();
    let mut mr = Vec::new();
    for s in samples {
        for z in 0..s.pet.dims().nz {
            let p = s.pet.slice_z(z);
            if p.max() > 0.0 {
                pet.push(p);
                mr.push(s.mr.slice_z(z));
            }
        }
    }
    (pet, mr)
}
