//! Unconditional and measurement-conditioned samplers.
//!
//! All samplers work in the normalized intensity domain of the score model.
//! Reconstructions map back with the one-epoch OSEM scale `c_OSEM`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{Dims, ImageGrid, Measurements};
use crate::metrics::kldiv_of_expected;
use crate::projector::{partition_subsets, SubsetSchedule, SystemModel};
use crate::recon::{constant_init, mean_nonzero, osem, pll_grad, pll_grad_angles, preconditioned_step, rdp_grad, RdpParams};
use crate::rng::{standard_normal, SeedStream};
use crate::score::{Guided, ScoreModel};

/// Floor on the data discrepancy that normalizes the DPS step.
pub const KL_FLOOR: f64 = 1e-8;
/// Subset count of the normalizing OSEM epoch (reduced to a divisor of the
/// angle count when needed).
pub const C_OSEM_SUBSETS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Em,
    Ddim,
    PetNaive,
    PetDps,
    PetDds,
    NaiveOsemDenoise,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Em, Method::Ddim, Method::PetNaive, Method::PetDps, Method::PetDds, Method::NaiveOsemDenoise];

    pub fn name(self) -> &'static str {
        match self {
            Method::Em => "em",
            Method::Ddim => "ddim",
            Method::PetNaive => "pet-naive",
            Method::PetDps => "pet-dps",
            Method::PetDds => "pet-dds",
            Method::NaiveOsemDenoise => "naive-osem-denoise",
        }
    }

    /// Default number of time points.
    pub fn default_steps(self) -> usize {
        match self {
            Method::Ddim | Method::PetDds => 100,
            _ => 1000,
        }
    }

    pub fn uses_measurements(self) -> bool {
        !matches!(self, Method::Em | Method::Ddim)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: Method,
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    /// Likelihood weight for PET-Naive / PET-DPS, Tweedie anchor for PET-DDS.
    #[serde(default = "one")]
    pub lambda: f64,
    /// Inner MAP steps per outer PET-DDS step.
    #[serde(default = "four")]
    pub p: usize,
    #[serde(default = "one_usize")]
    pub n_sub: usize,
    /// Axial RDP weight (3D PET-DDS).
    #[serde(default)]
    pub lambda_rdp: f64,
    #[serde(default = "one")]
    pub sigma_d: f64,
    /// Guidance strength; only used with a condition.
    #[serde(default)]
    pub w: f64,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the OSEM-derived intensity scale.
    #[serde(default)]
    pub c_osem: Option<f64>,
}

fn one() -> f64 {
    1.0
}
fn four() -> usize {
    4
}
fn one_usize() -> usize {
    1
}

impl SamplerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            schedule: DiffusionSchedule::default().with_steps(method.default_steps()),
            lambda: 1.0,
            p: 4,
            n_sub: 1,
            lambda_rdp: 0.0,
            sigma_d: 1.0,
            w: 0.0,
            seed: 0,
            c_osem: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |what: &str| Err(Error::Config(format!("{} needs {what}", self.method)));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda >= 0");
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return bad("guidance w >= 0");
        }
        if self.c_osem.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("c_osem > 0");
        }
        match self.method {
            Method::PetDds => {
                if self.n_sub == 0 {
                    return bad("n_sub >= 1");
                }
                if !(self.lambda_rdp >= 0.0 && self.lambda_rdp.is_finite()) {
                    return bad("lambda_rdp >= 0");
                }
            }
            Method::NaiveOsemDenoise => {
                if !(self.sigma_d > 0.0 && self.sigma_d.is_finite()) {
                    return bad("sigma_d > 0");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// normalization

/// `sum(x) / #{x > 0, x >= Q_0.01(x)}` with the linearly interpolated 1%
/// quantile over all voxels.
pub fn c_osem_of(x: &ImageGrid) -> Result<f64> {
    x.check_tracer()?;
    let mut v = x.data().to_vec();
    v.sort_by(f64::total_cmp);
    let pos = 0.01 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let q = v[lo] + (pos - lo as f64) * (v[hi] - v[lo]);
    let n = v.iter().filter(|&&u| u > 0.0 && u >= q).count();
    if n == 0 {
        return Err(Error::Degenerate("OSEM image is all zero".into()));
    }
    Ok(x.sum() / n as f64)
}

fn osem_subsets(n_angles: usize) -> usize {
    (1..=C_OSEM_SUBSETS.min(n_angles)).rev().find(|k| n_angles % k == 0).unwrap_or(1)
}

/// One OSEM epoch from the count-matched constant image, and its scale.
pub fn osem_normalization(y: &Measurements, sm: &SystemModel) -> Result<(f64, ImageGrid)> {
    let sched = partition_subsets(sm, osem_subsets(sm.n_angles()))?;
    let x = osem(y, sm, &sched, &constant_init(y, sm)?, 1)?;
    Ok((c_osem_of(&x)?, x))
}

pub fn compute_c_osem(y: &Measurements, sm: &SystemModel) -> Result<f64> {
    Ok(osem_normalization(y, sm)?.0)
}

fn resolve_c(cfg: &SamplerConfig, y: &Measurements, sm: &SystemModel) -> Result<f64> {
    match cfg.c_osem {
        Some(c) => Ok(c),
        None => compute_c_osem(y, sm),
    }
}

// ---------------------------------------------------------------------------
// per-slice score evaluation

fn check_condition(x: &ImageGrid, cond: Option<&ImageGrid>) -> Result<()> {
    match cond {
        Some(c) => x.check_same_dims(c),
        None => Ok(()),
    }
}

/// Score of a 2D image, or of every axial slice of a volume independently.
pub fn score_field(model: &dyn ScoreModel, x: &ImageGrid, t: f64, cond: Option<&ImageGrid>) -> Result<ImageGrid> {
    check_condition(x, cond)?;
    let nz = x.dims().nz;
    if nz == 1 {
        return model.evaluate(x, t, cond);
    }
    let slices: Result<Vec<ImageGrid>> = (0..nz)
        .into_par_iter()
        .map(|z| model.evaluate(&x.slice_z(z), t, cond.map(|c| c.slice_z(z)).as_ref()))
        .collect();
    Ok(restack(x, &slices?))
}

/// Slice-wise `vᵀ ∂s/∂x`.
pub fn score_vjp_field(
    model: &dyn ScoreModel,
    x: &ImageGrid,
    t: f64,
    cond: Option<&ImageGrid>,
    v: &ImageGrid,
) -> Result<ImageGrid> {
    check_condition(x, cond)?;
    x.check_same_dims(v)?;
    let nz = x.dims().nz;
    if nz == 1 {
        return model.vjp(x, t, cond, v);
    }
    let slices: Result<Vec<ImageGrid>> = (0..nz)
        .into_par_iter()
        .map(|z| model.vjp(&x.slice_z(z), t, cond.map(|c| c.slice_z(z)).as_ref(), &v.slice_z(z)))
        .collect();
    Ok(restack(x, &slices?))
}

fn restack(like: &ImageGrid, slices: &[ImageGrid]) -> ImageGrid {
    ImageGrid::stack(slices).with_spacing(like.spacing())
}

/// Tweedie's estimate `(x_t + ν_t² s) / γ_t` from a precomputed score.
pub fn tweedie_from(sched: &DiffusionSchedule, xt: &ImageGrid, t: f64, s: &ImageGrid) -> Result<ImageGrid> {
    let (g, n) = sched.coeffs(t)?;
    Ok(xt.zip_map(s, |x, s| (x + n * n * s) / g))
}

pub fn tweedie(
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
    xt: &ImageGrid,
    t: f64,
    cond: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    if t < sched.t_min {
        return Err(Error::InvalidValue(format!("Tweedie estimate needs t >= {}, got {t}", sched.t_min)));
    }
    tweedie_from(sched, xt, t, &score_field(model, xt, t, cond)?)
}

// ---------------------------------------------------------------------------
// DDIM

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoeffs {
    pub gamma_prev: f64,
    pub nu: f64,
    pub nu_prev: f64,
    pub eta: f64,
}

impl DdimCoeffs {
    /// Step from grid point `k` to `k − 1` (1-based, `k >= 2`).
    pub fn at(sched: &DiffusionSchedule, grid: &[f64], k: usize) -> Result<Self> {
        if k < 2 || k > grid.len() {
            return Err(Error::OutOfRange { index: k, limit: grid.len() });
        }
        let (g, nu) = sched.coeffs(grid[k - 1])?;
        let (gamma_prev, nu_prev) = sched.coeffs(grid[k - 2])?;
        let eta = sched.eta * (nu_prev / nu) * (1.0 - g / gamma_prev).max(0.0).sqrt();
        if eta * eta > nu_prev * nu_prev {
            return Err(Error::InvalidValue(format!("DDIM noise {eta} exceeds the target noise level {nu_prev}")));
        }
        Ok(Self { gamma_prev, nu, nu_prev, eta })
    }

    /// `γ_{k−1} x̂₀ − ν_k sqrt(ν_{k−1}² − η_k²) s + η_k z`.
    pub fn combine(&self, x0: &ImageGrid, s: &ImageGrid, z: Option<&ImageGrid>) -> Result<ImageGrid> {
        x0.check_same_dims(s)?;
        let a = self.nu * (self.nu_prev * self.nu_prev - self.eta * self.eta).sqrt();
        let mut out = x0.zip_map(s, |x, s| self.gamma_prev * x - a * s);
        if self.eta > 0.0 {
            let z = z.ok_or_else(|| Error::InvalidValue("stochastic DDIM step needs noise".into()))?;
            out.axpy(self.eta, z);
        }
        Ok(out)
    }
}

pub fn ddim_step(
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
    x: &ImageGrid,
    k: usize,
    z: Option<&ImageGrid>,
    cond: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    let grid = sched.ddim_grid();
    let c = DdimCoeffs::at(sched, &grid, k)?;
    let t = grid[k - 1];
    let s = score_field(model, x, t, cond)?;
    c.combine(&tweedie_from(sched, x, t, &s)?, &s, z)
}

fn gaussian(stream: &SeedStream, label: &str, k: usize, like: &ImageGrid) -> ImageGrid {
    like.like(standard_normal(&mut stream.rng(label, k as u64), like.len()))
}

fn initial_noise(stream: &SeedStream, dims: Dims) -> ImageGrid {
    gaussian(stream, "init", 0, &ImageGrid::zeros(dims))
}

fn step_noise(stream: &SeedStream, k: usize, like: &ImageGrid) -> ImageGrid {
    gaussian(stream, "noise", k, like)
}

fn check_finite(x: &ImageGrid, what: &str, t: f64) -> Result<()> {
    match x.data().iter().position(|v| !v.is_finite()) {
        Some(j) => Err(Error::Diverged(format!("{what}: non-finite value at voxel {j}, t = {t}"))),
        None => Ok(()),
    }
}

/// Hook called with the outer step index and the current iterate.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &ImageGrid);

fn ddim_loop(
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
    dims: Dims,
    seed: u64,
    cond: Option<&ImageGrid>,
    hook: StepHook<'_>,
    mut refine: impl FnMut(usize, &ImageGrid) -> Result<ImageGrid>,
) -> Result<ImageGrid> {
    let stream = SeedStream::new(seed);
    let grid = sched.ddim_grid();
    let mut x = initial_noise(&stream, dims);
    for k in (2..=grid.len()).rev() {
        let t = grid[k - 1];
        let c = DdimCoeffs::at(sched, &grid, k)?;
        let s = score_field(model, &x, t, cond)?;
        let x0 = refine(k, &tweedie_from(sched, &x, t, &s)?)?;
        let z = (c.eta > 0.0).then(|| step_noise(&stream, k, &x));
        x = c.combine(&x0, &s, z.as_ref())?;
        check_finite(&x, "DDIM", t)?;
        hook(k, &x);
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Euler-Maruyama

/// Reverse-time prior update `x + (½βx + βs) h + sqrt(βh) z`.
fn em_prior_step(sched: &DiffusionSchedule, x: &ImageGrid, s: &ImageGrid, t: f64, h: f64, z: &ImageGrid) -> ImageGrid {
    let b = sched.beta(t);
    let sd = (b * h).sqrt();
    let v = x
        .data()
        .iter()
        .zip(s.data())
        .zip(z.data())
        .map(|((&x, &s), &z)| x + (0.5 * b * x + b * s) * h + sd * z)
        .collect();
    x.like(v)
}

/// Euler-Maruyama from `t = 1` to `t_min`; `data` receives
/// `(k, t, h, x_k, s_k, x̃_{k−1})` and returns `x_{k−1}`.
fn em_loop(
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
    dims: Dims,
    seed: u64,
    cond: Option<&ImageGrid>,
    hook: StepHook<'_>,
    mut data: impl FnMut(usize, f64, f64, &ImageGrid, &ImageGrid, ImageGrid) -> Result<ImageGrid>,
) -> Result<ImageGrid> {
    let stream = SeedStream::new(seed);
    let grid = sched.em_grid();
    let mut x = initial_noise(&stream, dims);
    for k in (1..grid.len()).rev() {
        let (t, h) = (grid[k], grid[k] - grid[k - 1]);
        let s = score_field(model, &x, t, cond)?;
        let prior = em_prior_step(sched, &x, &s, t, h, &step_noise(&stream, k, &x));
        x = data(k, t, h, &x, &s, prior)?;
        check_finite(&x, "Euler-Maruyama", t)?;
        hook(k, &x);
    }
    Ok(x)
}

/// Draw from the model prior, ending at `t = 0` (DDIM) or `t_min` (EM).
pub fn sample(
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
    dims: Dims,
    seed: u64,
    method: Method,
    cond: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    sched.validate()?;
    match method {
        Method::Ddim => ddim_loop(model, sched, dims, seed, cond, &mut |_, _| {}, |_, x0| Ok(x0.clone())),
        Method::Em => em_loop(model, sched, dims, seed, cond, &mut |_, _| {}, |_, _, _, _, _, xt| Ok(xt)),
        m => Err(Error::Config(format!("{m} is not an unconditional sampler"))),
    }
}

pub fn sample_unconditional(
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
    dims: Dims,
    seed: u64,
    method: Method,
) -> Result<ImageGrid> {
    sample(model, sched, dims, seed, method, None)
}

// ---------------------------------------------------------------------------
// PET-Naive and PET-DPS

/// `λ(1−t) c ∇L(y | c P₊[x_t])`.
pub fn pet_naive_grad(
    y: &Measurements,
    xt: &ImageGrid,
    t: f64,
    sm: &SystemModel,
    c: f64,
    lambda: f64,
) -> Result<ImageGrid> {
    let lt = lambda * (1.0 - t);
    if lt == 0.0 {
        return Ok(ImageGrid::zeros(xt.dims()).with_spacing(xt.spacing()));
    }
    let g = pll_grad(y, &xt.map(|v| c * v.max(0.0)), sm)?;
    Ok(g.scaled(lt * c))
}

/// DPS step weight `λ / max(KL(A c P₊[x̂₀] + b̄, y), 1e-8)`.
pub fn dps_weight(y: &Measurements, x0: &ImageGrid, sm: &SystemModel, c: f64, lambda: f64) -> Result<f64> {
    let kl = kldiv_of_expected(y, &sm.expected(&x0.map(|v| c * v.max(0.0)))?)?;
    Ok(lambda / kl.max(KL_FLOOR))
}

/// `λ_t ∇_{x_t} L(y | c P₊[x̂₀(x_t)])`, differentiated through Tweedie's
/// estimate with the score's vector-Jacobian product. `s` is the score
/// at `x_t`.
#[allow(clippy::too_many_arguments)]
pub fn pet_dps_grad(
    y: &Measurements,
    xt: &ImageGrid,
    t: f64,
    s: &ImageGrid,
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
    sm: &SystemModel,
    c: f64,
    lambda: f64,
    cond: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    if lambda == 0.0 {
        return Ok(ImageGrid::zeros(xt.dims()).with_spacing(xt.spacing()));
    }
    let (g, n) = sched.coeffs(t)?;
    let x0 = tweedie_from(sched, xt, t, s)?;
    let lt = dps_weight(y, &x0, sm, c, lambda)?;
    let grad_l = pll_grad(y, &x0.map(|v| c * v.max(0.0)), sm)?;
    // chain through c and the projection
    let w = x0.zip_map(&grad_l, |x, gl| if x > 0.0 { c * gl } else { 0.0 });
    let jw = score_vjp_field(model, xt, t, cond, &w)?;
    Ok(w.zip_map(&jw, |a, b| lt * (a + n * n * b) / g))
}

pub fn reconstruct_sde(
    y: &Measurements,
    sm: &SystemModel,
    model: &dyn ScoreModel,
    cfg: &SamplerConfig,
    cond: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    reconstruct_sde_with(y, sm, model, cfg, cond, &mut |_, _| {})
}

pub fn reconstruct_sde_with(
    y: &Measurements,
    sm: &SystemModel,
    model: &dyn ScoreModel,
    cfg: &SamplerConfig,
    cond: Option<&ImageGrid>,
    hook: StepHook<'_>,
) -> Result<ImageGrid> {
    cfg.validate()?;
    let guided = Guided { inner: model, w: cfg.w };
    let c = resolve_c(cfg, y, sm)?;
    let sched = &cfg.schedule;
    let x = match cfg.method {
        Method::PetNaive => em_loop(&guided, sched, sm.dims(), cfg.seed, cond, hook, |_, t, h, xk, _, mut xt| {
            if cfg.lambda != 0.0 {
                xt.axpy(sched.beta(t) * h, &pet_naive_grad(y, xk, t, sm, c, cfg.lambda)?);
            }
            Ok(xt)
        })?,
        Method::PetDps => em_loop(&guided, sched, sm.dims(), cfg.seed, cond, hook, |_, t, _, xk, s, mut xt| {
            if cfg.lambda != 0.0 {
                xt.axpy(1.0, &pet_dps_grad(y, xk, t, s, &guided, sched, sm, c, cfg.lambda, cond)?);
            }
            Ok(xt)
        })?,
        m => return Err(Error::Config(format!("{m} is not an SDE reconstruction method"))),
    };
    Ok(x.map(|v| c * v.max(0.0)))
}

// ---------------------------------------------------------------------------
// PET-DDS

/// Data-consistency sub-problem of one PET-DDS outer step.
pub struct DdsInner<'a> {
    pub y: &'a Measurements,
    pub sm: &'a SystemModel,
    pub subsets: &'a SubsetSchedule,
    pub c: f64,
    /// Preconditioner floor in normalized units.
    pub delta: f64,
    pub lambda_dds: f64,
    pub lambda_rdp: f64,
    pub rdp: RdpParams,
}

impl DdsInner<'_> {
    /// One preconditioned projected ascent step on
    /// `L_j(y | c x) + (λ_RDP R_z(x) − λ_DDS ‖x − x̂₀‖²) / n_sub`.
    ///
    /// The anchor is taken implicitly, `x⁺ = x + D(g + κ(x̂₀ − x⁺))` with
    /// `κ = 2λ_DDS/n_sub`, so large anchors stay stable; without it the step
    /// is exactly the classical preconditioned update.
    pub fn step(&self, x: &ImageGrid, x0: &ImageGrid, j: usize) -> Result<ImageGrid> {
        let n_sub = self.subsets.n_sub as f64;
        let mut g = pll_grad_angles(self.y, &x.scaled(self.c), self.sm, self.subsets.angles(j))?.scaled(self.c);
        if self.lambda_rdp != 0.0 {
            g.axpy(self.lambda_rdp / n_sub, &rdp_grad(x, &self.rdp));
        }
        let sens = self.subsets.sensitivity[j].scaled(self.c);
        if self.lambda_dds == 0.0 {
            return Ok(preconditioned_step(x, &g, &sens, 1.0, self.delta));
        }
        let kappa = 2.0 * self.lambda_dds / n_sub;
        let v = x
            .data()
            .iter()
            .zip(g.data())
            .zip(sens.data())
            .zip(x0.data())
            .map(|(((&xj, &gj), &sj), &aj)| {
                if sj > 0.0 {
                    let d = xj.max(self.delta) / sj;
                    ((xj + d * gj + d * kappa * aj) / (1.0 + d * kappa)).max(0.0)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(x.like(v))
    }
}

pub fn reconstruct_pet_dds(
    y: &Measurements,
    sm: &SystemModel,
    model: &dyn ScoreModel,
    cfg: &SamplerConfig,
    cond: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    reconstruct_pet_dds_with(y, sm, model, cfg, cond, &mut |_, _| {})
}

pub fn reconstruct_pet_dds_with(
    y: &Measurements,
    sm: &SystemModel,
    model: &dyn ScoreModel,
    cfg: &SamplerConfig,
    cond: Option<&ImageGrid>,
    hook: StepHook<'_>,
) -> Result<ImageGrid> {
    cfg.validate()?;
    if cfg.method != Method::PetDds {
        return Err(Error::Config(format!("{} is not PET-DDS", cfg.method)));
    }
    let subsets = partition_subsets(sm, cfg.n_sub)?;
    let (c, delta) = match cfg.c_osem {
        Some(c) => (c, 1e-4 * mean_nonzero(&constant_init(y, sm)?) / c),
        None => {
            let (c, x) = osem_normalization(y, sm)?;
            (c, 1e-4 * mean_nonzero(&x) / c)
        }
    };
    if !(delta > 0.0) {
        return Err(Error::Degenerate("normalizing reconstruction is all zero".into()));
    }
    let inner = DdsInner {
        y,
        sm,
        subsets: &subsets,
        c,
        delta,
        lambda_dds: cfg.lambda,
        lambda_rdp: cfg.lambda_rdp,
        rdp: RdpParams::z_only(),
    };
    let guided = Guided { inner: model, w: cfg.w };
    let n = cfg.schedule.n_steps;
    let x = ddim_loop(&guided, &cfg.schedule, sm.dims(), cfg.seed, cond, hook, |k, x0| {
        if cfg.p == 0 {
            return Ok(x0.clone());
        }
        // the ascent starts from the feasible point nearest to Tweedie
        let mut xi = x0.clamp_nonneg();
        for i in 0..cfg.p {
            xi = inner.step(&xi, x0, subsets.at(cfg.p * (n - k) + i))?;
        }
        Ok(xi)
    })?;
    Ok(x.map(|v| c * v.max(0.0)))
}

// ---------------------------------------------------------------------------
// denoising baseline

/// Euler-Maruyama with the Gaussian likelihood `N(x_noisy; x, σ_d² I)`,
/// whose drift `(x_noisy − x)/σ_d²` is integrated implicitly.
pub fn denoise_naive_osem(
    x_noisy: &ImageGrid,
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
    sigma_d: f64,
    seed: u64,
    cond: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    if !(sigma_d > 0.0) {
        return Err(Error::InvalidValue(format!("sigma_d must be positive, got {sigma_d}")));
    }
    sched.validate()?;
    let kappa = 1.0 / (sigma_d * sigma_d);
    let x = em_loop(model, sched, x_noisy.dims(), seed, cond, &mut |_, _| {}, |_, t, h, _, _, xt| {
        let a = sched.beta(t) * h * kappa;
        Ok(xt.zip_map(x_noisy, |x, m| (x + a * m) / (1.0 + a)))
    })?;
    Ok(x.clamp_nonneg())
}

/// Denoises one normalized OSEM epoch and restores its scale.
pub fn reconstruct_denoise(
    y: &Measurements,
    sm: &SystemModel,
    model: &dyn ScoreModel,
    cfg: &SamplerConfig,
    cond: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    cfg.validate()?;
    let (c_est, x_osem) = osem_normalization(y, sm)?;
    let c = cfg.c_osem.unwrap_or(c_est);
    let guided = Guided { inner: model, w: cfg.w };
    let out = denoise_naive_osem(&x_osem.scaled(1.0 / c), &guided, &cfg.schedule, cfg.sigma_d, cfg.seed, cond)?;
    Ok(out.scaled(c))
}

/// Dispatches to the reconstruction named by `cfg.method`.
pub fn reconstruct(
    y: &Measurements,
    sm: &SystemModel,
    model: &dyn ScoreModel,
    cfg: &SamplerConfig,
    cond: Option<&ImageGrid>,
    hook: StepHook<'_>,
) -> Result<ImageGrid> {
    match cfg.method {
        Method::PetNaive | Method::PetDps => reconstruct_sde_with(y, sm, model, cfg, cond, hook),
        Method::PetDds => reconstruct_pet_dds_with(y, sm, model, cfg, cond, hook),
        Method::NaiveOsemDenoise => reconstruct_denoise(y, sm, model, cfg, cond),
        m => Err(Error::Config(format!("{m} does not reconstruct from measurements"))),
    }
}
