//! Desk-scale PET reconstruction toolkit.
//!
//! The crate covers the whole pipeline from synthetic phantoms to
//! reconstructions:
//!
//! + [`projector`]: parallel-beam emission system model, subsets and Poisson simulation
//! + [`phantom`]: brain-like ellipse phantoms with paired pseudo-MR images
//! + [`recon`]: Poisson log-likelihood, relative difference prior, MLEM/OSEM/BSREM
//! + [`diffusion`]: variance-preserving SDE schedule and denoising score matching
//! + [`score`]: score models (analytic Gaussian mixture, guidance, a tiny network)
//! + [`sampler`]: unconditional samplers and the PET-adapted conditional samplers
//! + [`metrics`]: image-quality metrics and the sensitivity sweep harness

pub mod config;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod rng;
pub mod sampler;
pub mod scenario;
pub mod score;
pub mod sweep;

pub use error::{Error, Result};
pub use image::{Dims, ImageGrid, Layout, MeasurementKind, Measurements};
