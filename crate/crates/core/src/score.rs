//! Score models: the interface, the exact Gaussian-mixture score of an
//! empirical prior, its MR-conditional variant and classifier-free guidance.

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{Dims, ImageGrid};

/// `∇ log p_t(x_t | condition)`. A missing condition selects the
/// unconditional branch.
pub trait ScoreModel: Send + Sync {
    fn evaluate(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>) -> Result<ImageGrid>;

    /// `vᵀ ∂s/∂x_t`, the vector-Jacobian product of the score.
    fn vjp(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>, v: &ImageGrid) -> Result<ImageGrid>;
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn evaluate(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>) -> Result<ImageGrid> {
        (**self).evaluate(xt, t, condition)
    }
    fn vjp(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>, v: &ImageGrid) -> Result<ImageGrid> {
        (**self).vjp(xt, t, condition, v)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Score of `p_t = Σ w_i N(γ_t x_i, ν_t² I)`, the optimum of denoising
/// score matching over the training set `{x_i}`.
#[derive(Debug, Clone)]
pub struct MixtureScore {
    components: Vec<ImageGrid>,
    log_weights: Vec<f64>,
    sched: DiffusionSchedule,
}

impl MixtureScore {
    /// Uniform weights.
    pub fn new(components: Vec<ImageGrid>, sched: DiffusionSchedule) -> Result<Self> {
        let n = components.len();
        Self::with_log_weights(components, vec![0.0; n], sched)
    }

    pub fn with_weights(components: Vec<ImageGrid>, weights: &[f64], sched: DiffusionSchedule) -> Result<Self> {
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidValue("mixture weights must be positive and finite".into()));
        }
        Self::with_log_weights(components, weights.iter().map(|w| w.ln()).collect(), sched)
    }

    /// Unnormalized log-weights; normalized internally.
    pub fn with_log_weights(components: Vec<ImageGrid>, log_weights: Vec<f64>, sched: DiffusionSchedule) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidValue("mixture needs at least one component".into()));
        }
        if log_weights.len() != components.len() || log_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidValue("one finite log-weight per component required".into()));
        }
        for c in &components[1..] {
            components[0].check_same_dims(c)?;
        }
        let z = log_sum_exp(&log_weights);
        let log_weights = log_weights.iter().map(|w| w - z).collect();
        Ok(Self { components, log_weights, sched })
    }

    pub fn dims(&self) -> Dims {
        self.components[0].dims()
    }

    pub fn components(&self) -> &[ImageGrid] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    fn check(&self, xt: &ImageGrid, t: f64) -> Result<(f64, f64)> {
        self.components[0].check_same_dims(xt)?;
        let (g, n) = self.sched.coeffs(t)?;
        if n == 0.0 {
            return Err(Error::InvalidValue("mixture score is singular at t = 0".into()));
        }
        Ok((g, n))
    }

    fn log_terms(&self, xt: &ImageGrid, g: f64, n: f64) -> Vec<f64> {
        let v2 = 2.0 * n * n;
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw - xt.data().iter().zip(c.data()).map(|(a, b)| (a - g * b).powi(2)).sum::<f64>() / v2)
            .collect()
    }

    /// Posterior component probabilities given `x_t`.
    pub fn responsibilities(&self, xt: &ImageGrid, t: f64) -> Result<Vec<f64>> {
        let (g, n) = self.check(xt, t)?;
        let l = self.log_terms(xt, g, n);
        let z = log_sum_exp(&l);
        Ok(l.iter().map(|v| (v - z).exp()).collect())
    }

    pub fn log_density(&self, xt: &ImageGrid, t: f64) -> Result<f64> {
        let (g, n) = self.check(xt, t)?;
        let d = xt.len() as f64;
        Ok(log_sum_exp(&self.log_terms(xt, g, n)) - 0.5 * d * (2.0 * std::f64::consts::PI * n * n).ln())
    }

    fn mean_of(&self, r: &[f64]) -> ImageGrid {
        let mut m = vec![0.0; self.components[0].len()];
        for (c, &ri) in self.components.iter().zip(r) {
            if ri == 0.0 {
                continue;
            }
            for (mj, &cj) in m.iter_mut().zip(c.data()) {
                *mj += ri * cj;
            }
        }
        self.components[0].like(m)
    }

    /// `E[x₀ | x_t] = Σ r_i x_i`.
    pub fn posterior_mean(&self, xt: &ImageGrid, t: f64) -> Result<ImageGrid> {
        Ok(self.mean_of(&self.responsibilities(xt, t)?))
    }
}

impl ScoreModel for MixtureScore {
    fn evaluate(&self, xt: &ImageGrid, t: f64, _condition: Option<&ImageGrid>) -> Result<ImageGrid> {
        let (g, n) = self.check(xt, t)?;
        let m = self.posterior_mean(xt, t)?;
        let v = n * n;
        Ok(xt.zip_map(&m, |a, b| -(a - g * b) / v))
    }

    /// The Jacobian is the Hessian of `log p_t`,
    /// `−I/ν² + (γ²/ν⁴) Cov_r[x_i]`, which is symmetric.
    fn vjp(&self, xt: &ImageGrid, t: f64, _condition: Option<&ImageGrid>, v: &ImageGrid) -> Result<ImageGrid> {
        let (g, n) = self.check(xt, t)?;
        xt.check_same_dims(v)?;
        let r = self.responsibilities(xt, t)?;
        let m = self.mean_of(&r);
        let n2 = n * n;
        let k = g * g / (n2 * n2);
        let mut out: Vec<f64> = v.data().iter().map(|a| -a / n2).collect();
        for (c, &ri) in self.components.iter().zip(&r) {
            if ri == 0.0 {
                continue;
            }
            let proj: f64 = c.data().iter().zip(m.data()).zip(v.data()).map(|((a, b), w)| (a - b) * w).sum();
            let f = k * ri * proj;
            for ((o, a), b) in out.iter_mut().zip(c.data()).zip(m.data()) {
                *o += f * (a - b);
            }
        }
        Ok(xt.like(out))
    }
}

/// Mixture conditioned on a paired MR image: only components whose MR tag
/// equals the query contribute. An absent or all-zero condition selects
/// every component.
#[derive(Debug, Clone)]
pub struct ConditionalMixture {
    full: MixtureScore,
    tags: Vec<ImageGrid>,
}

impl ConditionalMixture {
    pub fn new(components: Vec<ImageGrid>, tags: Vec<ImageGrid>, sched: DiffusionSchedule) -> Result<Self> {
        if tags.len() != components.len() {
            return Err(Error::InvalidValue("one MR tag per component required".into()));
        }
        for (c, m) in components.iter().zip(&tags) {
            c.check_same_dims(m)?;
        }
        Ok(Self { full: MixtureScore::new(components, sched)?, tags })
    }

    pub fn unconditional(&self) -> &MixtureScore {
        &self.full
    }

    /// The mixture restricted to components tagged by `condition`.
    pub fn restricted(&self, condition: Option<&ImageGrid>) -> Result<MixtureScore> {
        let Some(c) = condition.filter(|c| c.data().iter().any(|&v| v != 0.0)) else {
            return Ok(self.full.clone());
        };
        let (comps, logw): (Vec<_>, Vec<_>) = self
            .full
            .components
            .iter()
            .zip(&self.full.log_weights)
            .zip(&self.tags)
            .filter(|(_, tag)| tag.data() == c.data())
            .map(|((x, w), _)| (x.clone(), *w))
            .unzip();
        if comps.is_empty() {
            return Err(Error::InvalidValue("no mixture component matches the condition".into()));
        }
        MixtureScore::with_log_weights(comps, logw, self.full.sched)
    }
}

impl ScoreModel for ConditionalMixture {
    fn evaluate(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>) -> Result<ImageGrid> {
        self.restricted(condition)?.evaluate(xt, t, None)
    }
    fn vjp(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>, v: &ImageGrid) -> Result<ImageGrid> {
        self.restricted(condition)?.vjp(xt, t, None, v)
    }
}

/// `(1 + w) s_cond − w s_uncond`.
pub fn cfg_combine(s_cond: &ImageGrid, s_uncond: &ImageGrid, w: f64) -> Result<ImageGrid> {
    s_cond.check_same_dims(s_uncond)?;
    Ok(s_cond.zip_map(s_uncond, |c, u| (1.0 + w) * c - w * u))
}

/// Classifier-free guidance around a model with both branches.
pub struct Guided<'a> {
    pub inner: &'a dyn ScoreModel,
    pub w: f64,
}

impl ScoreModel for Guided<'_> {
    fn evaluate(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>) -> Result<ImageGrid> {
        let cond = self.inner.evaluate(xt, t, condition)?;
        if self.w == 0.0 || condition.is_none() {
            return Ok(cond);
        }
        cfg_combine(&cond, &self.inner.evaluate(xt, t, None)?, self.w)
    }

    fn vjp(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>, v: &ImageGrid) -> Result<ImageGrid> {
        let cond = self.inner.vjp(xt, t, condition, v)?;
        if self.w == 0.0 || condition.is_none() {
            return Ok(cond);
        }
        cfg_combine(&cond, &self.inner.vjp(xt, t, None, v)?, self.w)
    }
}

/// Average emission per emitting voxel, `sum(x)/#{x > 0}`.
pub fn c_train(x0: &ImageGrid) -> Result<f64> {
    x0.check_tracer()?;
    let n = x0.data().iter().filter(|&&v| v > 0.0).count();
    if n == 0 {
        return Err(Error::Degenerate("image has no emitting voxel".into()));
    }
    Ok(x0.sum() / n as f64)
}
