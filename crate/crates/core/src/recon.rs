//! Poisson log-likelihood, relative difference prior and the classical
//! MLEM / OSEM / BSREM solvers.
//!
//! The log-likelihood drops the `-log(y!)` term, so values differ from the
//! textbook PLL by a constant that does not depend on the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Dims, ImageGrid, MeasurementKind, Measurements};
use crate::projector::{partition_subsets, SubsetSchedule, SystemModel};

/// Expected counts below this are treated as zero.
pub const YBAR_FLOOR: f64 = 1e-12;

fn check_counts(sm: &SystemModel, y: &Measurements) -> Result<()> {
    sm.check_layout(y)
}

/// `y_i / ȳ_i` on the given bins, zero elsewhere; `ȳ` holds `A x` there.
fn ratio_on(y: &Measurements, ax: &Measurements, sm: &SystemModel, angles: &[usize], minus_one: bool) -> Result<Measurements> {
    let b = sm.background().bins();
    let mut out = Measurements::zeros(y.layout(), MeasurementKind::Expected);
    let o = out.bins_mut();
    for &a in angles {
        for i in sm.angle_bins(a) {
            let ybar = ax.bins()[i] + b[i];
            let yi = y.bins()[i];
            let r = if ybar < YBAR_FLOOR {
                if yi > 0.0 {
                    return Err(Error::ZeroExpectation { bin: i, count: yi });
                }
                0.0
            } else {
                yi / ybar
            };
            o[i] = if minus_one { r - 1.0 } else { r };
        }
    }
    Ok(out)
}

/// `Σ y log ȳ − ȳ` for given expected counts.
pub fn pll_of_expected(y: &Measurements, ybar: &Measurements) -> Result<f64> {
    let mut acc = 0.0;
    for (i, (&yi, &yb)) in y.bins().iter().zip(ybar.bins()).enumerate() {
        if yb < YBAR_FLOOR {
            if yi > 0.0 {
                return Err(Error::ZeroExpectation { bin: i, count: yi });
            }
            acc -= yb.max(0.0);
        } else {
            acc += if yi > 0.0 { yi * yb.ln() } else { 0.0 } - yb;
        }
    }
    Ok(acc)
}

pub fn pll(y: &Measurements, x: &ImageGrid, sm: &SystemModel) -> Result<f64> {
    check_counts(sm, y)?;
    pll_of_expected(y, &sm.expected(x)?)
}

/// `A^T (y / (A x + b̄) − 1)`.
pub fn pll_grad(y: &Measurements, x: &ImageGrid, sm: &SystemModel) -> Result<ImageGrid> {
    pll_grad_angles(y, x, sm, &sm.all_angles())
}

/// Gradient of the sub-likelihood over the bins of `angles`.
pub fn pll_grad_angles(y: &Measurements, x: &ImageGrid, sm: &SystemModel, angles: &[usize]) -> Result<ImageGrid> {
    check_counts(sm, y)?;
    let ax = sm.forward_angles(x, angles)?;
    let q = ratio_on(y, &ax, sm, angles, true)?;
    sm.back_angles(&q, angles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// 3x3 in 2D, 3x3x3 in 3D.
    Full,
    /// Axial neighbours only (3x1x1).
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdpParams {
    pub xi: f64,
    pub neighborhood: Neighborhood,
    pub epsilon: f64,
}

impl Default for RdpParams {
    fn default() -> Self {
        Self { xi: 1.0, neighborhood: Neighborhood::Full, epsilon: 1e-9 }
    }
}

impl RdpParams {
    pub fn z_only() -> Self {
        Self { neighborhood: Neighborhood::Z, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("RDP needs xi > 0 and epsilon > 0, got {self:?}")));
        }
        Ok(())
    }
}

fn neighbour_offsets(dims: Dims, nb: Neighborhood) -> Vec<[i64; 3]> {
    match nb {
        Neighborhood::Z => vec![[0, 0, -1], [0, 0, 1]],
        Neighborhood::Full => {
            let zr = if dims.nz > 1 { -1..=1 } else { 0..=0 };
            let mut v = Vec::new();
            for dz in zr {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if (dx, dy, dz) != (0, 0, 0) {
                            v.push([dx, dy, dz]);
                        }
                    }
                }
            }
            v
        }
    }
}

/// Visits every in-domain ordered neighbour pair `(j, k)`.
fn for_each_pair(dims: Dims, nb: Neighborhood, mut f: impl FnMut(usize, usize)) {
    let offs = neighbour_offsets(dims, nb);
    let (nx, ny, nz) = (dims.nx as i64, dims.ny as i64, dims.nz as i64);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let j = dims.index(x as usize, y as usize, z as usize);
                for o in &offs {
                    let (xx, yy, zz) = (x + o[0], y + o[1], z + o[2]);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx || yy >= ny || zz >= nz {
                        continue;
                    }
                    f(j, dims.index(xx as usize, yy as usize, zz as usize));
                }
            }
        }
    }
}

/// Log-prior `-½ Σ_j Σ_{k∈N_j} (x_j − x_k)² / (x_j + x_k + ξ|x_j − x_k|)`,
/// i.e. every unordered neighbour pair counted once.
pub fn rdp(x: &ImageGrid, p: &RdpParams) -> f64 {
    let v = x.data();
    let mut acc = 0.0;
    for_each_pair(x.dims(), p.neighborhood, |j, k| {
        let d = v[j] - v[k];
        let den = v[j] + v[k] + p.xi * d.abs();
        let den = if den == 0.0 { p.epsilon } else { den };
        acc += d * d / den;
    });
    -0.5 * acc
}

pub fn rdp_grad(x: &ImageGrid, p: &RdpParams) -> ImageGrid {
    let v = x.data();
    let mut g = vec![0.0; v.len()];
    for_each_pair(x.dims(), p.neighborhood, |j, k| {
        let d = v[j] - v[k];
        let den = v[j] + v[k] + p.xi * d.abs();
        if den == 0.0 {
            return;
        }
        let sgn = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        g[j] -= d * (2.0 * den - d * (1.0 + p.xi * sgn)) / (den * den);
    });
    x.like(g)
}

/// Constant image whose forward projection matches the net counts.
pub fn constant_init(y: &Measurements, sm: &SystemModel) -> Result<ImageGrid> {
    check_counts(sm, y)?;
    let sens = sm.sensitivity_image();
    let total_sens = sens.sum();
    if !(total_sens > 0.0) {
        return Err(Error::Degenerate("system has an empty sensitivity image".into()));
    }
    let net = y.sum() - sm.background().sum();
    let level = if net > 0.0 {
        net / total_sens
    } else if y.sum() > 0.0 {
        y.sum() / total_sens
    } else {
        1.0
    };
    Ok(sens.map(|s| if s > 0.0 { level } else { 0.0 }))
}

fn check_init(sm: &SystemModel, init: &ImageGrid) -> Result<()> {
    sm.check_dims(init)?;
    init.check_tracer()
}

/// One EM update restricted to the bins of `angles`.
pub fn em_update(y: &Measurements, sm: &SystemModel, x: &ImageGrid, angles: &[usize], sens: &ImageGrid) -> Result<ImageGrid> {
    let ax = sm.forward_angles(x, angles)?;
    let q = ratio_on(y, &ax, sm, angles, false)?;
    let bp = sm.back_angles(&q, angles)?;
    let out = x
        .data()
        .iter()
        .zip(sens.data())
        .zip(bp.data())
        .map(|((&xj, &sj), &bj)| if sj > 0.0 { xj / sj * bj } else { 0.0 })
        .collect();
    Ok(x.like(out))
}

/// OSEM with a callback after every epoch.
pub fn osem_with(
    y: &Measurements,
    sm: &SystemModel,
    sched: &SubsetSchedule,
    init: &ImageGrid,
    n_epochs: usize,
    mut on_epoch: impl FnMut(usize, &ImageGrid),
) -> Result<ImageGrid> {
    check_counts(sm, y)?;
    check_init(sm, init)?;
    let mut x = init.clone();
    for e in 0..n_epochs {
        for &j in &sched.order {
            x = em_update(y, sm, &x, sched.angles(j), &sched.sensitivity[j])?;
        }
        on_epoch(e, &x);
    }
    Ok(x)
}

pub fn osem(y: &Measurements, sm: &SystemModel, sched: &SubsetSchedule, init: &ImageGrid, n_epochs: usize) -> Result<ImageGrid> {
    osem_with(y, sm, sched, init, n_epochs, |_, _| {})
}

pub fn mlem(y: &Measurements, sm: &SystemModel, init: &ImageGrid, n_iters: usize) -> Result<ImageGrid> {
    osem(y, sm, &partition_subsets(sm, 1)?, init, n_iters)
}

pub fn mlem_with(
    y: &Measurements,
    sm: &SystemModel,
    init: &ImageGrid,
    n_iters: usize,
    on_iter: impl FnMut(usize, &ImageGrid),
) -> Result<ImageGrid> {
    osem_with(y, sm, &partition_subsets(sm, 1)?, init, n_iters, on_iter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsremParams {
    pub n_sub: usize,
    pub alpha0: f64,
    pub zeta: f64,
    /// Preconditioner floor; `None` uses 1e-4 times the mean nonzero init.
    pub delta: Option<f64>,
    pub lambda: f64,
    pub max_epochs: usize,
    /// Relative mean absolute voxel change that ends the iteration.
    pub tol: f64,
}

impl Default for BsremParams {
    fn default() -> Self {
        Self { n_sub: 1, alpha0: 1.0, zeta: 0.1, delta: None, lambda: 0.0, max_epochs: 500, tol: 1e-4 }
    }
}

impl BsremParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0) || self.delta.is_some_and(|d| !(d > 0.0)) || !(self.alpha0 > 0.0) {
            return Err(Error::Config(format!("BSREM needs zeta, delta and alpha0 > 0, got {self:?}")));
        }
        if !(self.lambda >= 0.0) || self.n_sub == 0 || !(self.tol > 0.0) {
            return Err(Error::Config(format!("invalid BSREM parameters {self:?}")));
        }
        Ok(())
    }

    pub fn step_size(&self, i: usize) -> f64 {
        self.alpha0 / (self.zeta * (i / self.n_sub) as f64 + 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct BsremOutcome {
    pub image: ImageGrid,
    pub epochs: usize,
    pub converged: bool,
    /// MAP objective after every epoch.
    pub objective: Vec<f64>,
}

/// `L(y|x) + λ R(x)`.
pub fn map_objective(y: &Measurements, x: &ImageGrid, sm: &SystemModel, prior: &RdpParams, lambda: f64) -> Result<f64> {
    let r = if lambda == 0.0 { 0.0 } else { lambda * rdp(x, prior) };
    Ok(pll(y, x, sm)? + r)
}

pub fn map_gradient(y: &Measurements, x: &ImageGrid, sm: &SystemModel, prior: &RdpParams, lambda: f64) -> Result<ImageGrid> {
    let mut g = pll_grad(y, x, sm)?;
    if lambda != 0.0 {
        g.axpy(lambda, &rdp_grad(x, prior));
    }
    Ok(g)
}

/// Gradient mapping `P₊[x + g] − x` on the support: equals `g` away from
/// the bound and vanishes exactly at points satisfying the KKT conditions
/// of `max Φ(x)` subject to `x ≥ 0`.
pub fn projected_gradient(g: &ImageGrid, x: &ImageGrid, support: &[bool]) -> ImageGrid {
    let v = g
        .data()
        .iter()
        .zip(x.data())
        .zip(support)
        .map(|((&gj, &xj), &s)| if s { (xj + gj).max(0.0) - xj } else { 0.0 })
        .collect();
    g.like(v)
}

/// Mean absolute change over voxels nonzero in either iterate, relative to
/// the mean of the nonzero voxels of `new`.
pub fn relative_mean_change(old: &ImageGrid, new: &ImageGrid) -> f64 {
    let (mut diff, mut n_diff, mut sum, mut n) = (0.0, 0usize, 0.0, 0usize);
    for (&a, &b) in old.data().iter().zip(new.data()) {
        if a != 0.0 || b != 0.0 {
            diff += (a - b).abs();
            n_diff += 1;
        }
        if b != 0.0 {
            sum += b;
            n += 1;
        }
    }
    if n == 0 {
        return if n_diff == 0 { 0.0 } else { f64::INFINITY };
    }
    (diff / n_diff as f64) / (sum / n as f64)
}

/// One preconditioned projected ascent step on a sub-objective:
/// `P₊[x + α D(x) g]` with `D = max(x, δ) / s_j` (zero off the support).
pub fn preconditioned_step(x: &ImageGrid, g: &ImageGrid, sens: &ImageGrid, alpha: f64, delta: f64) -> ImageGrid {
    let v = x
        .data()
        .iter()
        .zip(g.data())
        .zip(sens.data())
        .map(|((&xj, &gj), &sj)| if sj > 0.0 { (xj + alpha * xj.max(delta) / sj * gj).max(0.0) } else { 0.0 })
        .collect();
    x.like(v)
}

pub fn mean_nonzero(x: &ImageGrid) -> f64 {
    let (s, n) = x.data().iter().filter(|&&v| v != 0.0).fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One OSEM epoch from the count-matched constant image.
pub fn default_bsrem_init(y: &Measurements, sm: &SystemModel, sched: &SubsetSchedule) -> Result<ImageGrid> {
    osem(y, sm, sched, &constant_init(y, sm)?, 1)
}

const DIVERGENCE_EPOCHS: usize = 3;

pub fn bsrem(
    y: &Measurements,
    sm: &SystemModel,
    prior: &RdpParams,
    params: &BsremParams,
    init: Option<&ImageGrid>,
) -> Result<BsremOutcome> {
    params.validate()?;
    prior.validate()?;
    check_counts(sm, y)?;
    let sched = partition_subsets(sm, params.n_sub)?;
    let mut x = match init {
        Some(x0) => {
            check_init(sm, x0)?;
            x0.clone()
        }
        None => default_bsrem_init(y, sm, &sched)?,
    };
    let delta = params.delta.unwrap_or(1e-4 * mean_nonzero(&x));
    if !(delta > 0.0) {
        return Err(Error::Degenerate("initial image is all zero".into()));
    }
    let support = sm.support();
    for (v, &s) in x.data_mut().iter_mut().zip(&support) {
        if !s {
            *v = 0.0;
        }
    }
    let mut objective = Vec::new();
    let mut prev_obj = map_objective(y, &x, sm, prior, params.lambda)?;
    let mut decreasing = 0;
    let mut i = 0;
    for epoch in 0..params.max_epochs {
        let start = x.clone();
        for &j in &sched.order {
            let mut g = pll_grad_angles(y, &x, sm, sched.angles(j))?;
            if params.lambda != 0.0 {
                g.axpy(params.lambda / params.n_sub as f64, &rdp_grad(&x, prior));
            }
            x = preconditioned_step(&x, &g, &sched.sensitivity[j], params.step_size(i), delta);
            i += 1;
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("non-finite BSREM iterate in epoch {epoch}")));
        }
        let obj = map_objective(y, &x, sm, prior, params.lambda)?;
        objective.push(obj);
        // changes at round-off level near the optimum are not divergence
        decreasing = if obj < prev_obj - 1e-12 * prev_obj.abs() { decreasing + 1 } else { 0 };
        if decreasing >= DIVERGENCE_EPOCHS {
            return Err(Error::Diverged(format!(
                "MAP objective decreased for {DIVERGENCE_EPOCHS} consecutive epochs (epoch {epoch}, value {obj})"
            )));
        }
        prev_obj = obj;
        if relative_mean_change(&start, &x) < params.tol {
            return Ok(BsremOutcome { image: x, epochs: epoch + 1, converged: true, objective });
        }
    }
    Ok(BsremOutcome { image: x, epochs: params.max_epochs, converged: false, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Layout, DEFAULT_SPACING};
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::projector::{constant_background, scale_to_noise_level, simulate_measurements, Geometry};
    use crate::rng::SeedStream;
    use rand::Rng;

    fn scalar(b: f64) -> SystemModel {
        let l = Layout::new(1, 1, 1);
        SystemModel::from_matrix(l, Dims::new(1, 1, 1), &[1.0])
            .unwrap()
            .with_background(Measurements::filled(l, MeasurementKind::Expected, b))
            .unwrap()
    }

    fn scalar_img(v: f64) -> ImageGrid {
        ImageGrid::filled(Dims::new(1, 1, 1), v)
    }

    fn counts(l: Layout, v: &[f64]) -> Measurements {
        Measurements::new(l, MeasurementKind::Counts, v.to_vec()).unwrap()
    }

    /// 16x16 brain phantom at the given noise level with 20% background.
    pub(crate) fn problem(n: usize, level: f64, seed: u64) -> (SystemModel, Measurements, ImageGrid) {
        let dims = Dims::planar(n, n);
        let sm = SystemModel::new(Geometry::parallel2d(2 * n, n, 2.0), dims, DEFAULT_SPACING).unwrap();
        let truth = generate_phantom(&PhantomSpec::brain(dims)).unwrap().pet;
        let s = scale_to_noise_level(&sm, &truth, level).unwrap();
        let truth = truth.scaled(s);
        let bg = constant_background(&sm.forward(&truth).unwrap(), 0.2);
        let sm = sm.with_background(bg).unwrap();
        let y = simulate_measurements(&sm, &truth, seed).unwrap();
        (sm, y, truth)
    }

    #[test]
    fn scalar_pll_and_gradient() {
        let sm = scalar(0.5);
        let y = counts(sm.layout(), &[2.0]);
        let v = pll(&y, &scalar_img(1.0), &sm).unwrap();
        assert!((v - (2.0 * 1.5f64.ln() - 1.5)).abs() < 1e-15);
        assert!((v + 0.6891).abs() < 1e-4);
        let g = pll_grad(&y, &scalar_img(1.0), &sm).unwrap();
        assert!((g.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        // background only
        let v0 = pll(&y, &scalar_img(0.0), &sm).unwrap();
        assert!((v0 - (2.0 * 0.5f64.ln() - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_expectation_with_counts_is_an_error() {
        let sm = scalar(0.0);
        let y = counts(sm.layout(), &[1.0]);
        assert!(matches!(pll(&y, &scalar_img(0.0), &sm), Err(Error::ZeroExpectation { .. })));
        assert!(matches!(pll_grad(&y, &scalar_img(0.0), &sm), Err(Error::ZeroExpectation { .. })));
        let y0 = counts(sm.layout(), &[0.0]);
        assert_eq!(pll(&y0, &scalar_img(0.0), &sm).unwrap(), 0.0);
    }

    #[test]
    fn pll_is_maximal_at_the_data() {
        let (sm, y, truth) = problem(8, 10.0, 1);
        let ybar = sm.expected(&truth).unwrap();
        // with y = ȳ the gradient in ȳ vanishes: check perturbations of ȳ
        let yy = Measurements::new(ybar.layout(), MeasurementKind::Expected, ybar.bins().to_vec()).unwrap();
        let best = pll_of_expected(&yy, &ybar).unwrap();
        for s in [0.9, 0.99, 1.01, 1.1] {
            assert!(pll_of_expected(&yy, &ybar.scaled(s)).unwrap() < best);
        }
        let _ = y;
    }

    #[test]
    fn gradient_vanishes_at_consistent_data() {
        let (sm, _, truth) = problem(8, 10.0, 1);
        let ybar = sm.expected(&truth).unwrap();
        let y = Measurements::new(ybar.layout(), MeasurementKind::Expected, ybar.bins().to_vec()).unwrap();
        let g = pll_grad(&y, &truth, &sm).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn pll_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (sm, y, truth) = problem(8, 10.0, seed);
            let mut rng = SeedStream::new(seed).rng("fd", 0);
            let x = truth.like(truth.data().iter().map(|v| v + 0.2 + rng.random::<f64>()).collect());
            let g = pll_grad(&y, &x, &sm).unwrap();
            for j in [0, 9, 27, 36, 63] {
                let h = 1e-4 * x.data()[j];
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[j] += h;
                xm.data_mut()[j] -= h;
                let fd = (pll(&y, &xp, &sm).unwrap() - pll(&y, &xm, &sm).unwrap()) / (2.0 * h);
                assert!((fd - g.data()[j]).abs() <= 1e-5 * g.data()[j].abs().max(1e-3), "{fd} vs {}", g.data()[j]);
            }
        }
    }

    #[test]
    fn rdp_constant_and_pair() {
        let p = RdpParams::default();
        let c = ImageGrid::filled(Dims::planar(5, 4), 3.0);
        assert_eq!(rdp(&c, &p), 0.0);
        assert!(rdp_grad(&c, &p).data().iter().all(|&v| v == 0.0));

        let two = ImageGrid::from_vec(Dims::planar(2, 1), vec![2.0, 1.0]).unwrap();
        let g = rdp_grad(&two, &p);
        assert_eq!(g.data()[0], -0.375);
        // ratio form with r = x_j / x_k
        let r: f64 = 0.5;
        let ratio = -(r - 1.0) * ((r - 1.0).abs() + r + 3.0) / (r + 1.0 + (r - 1.0).abs()).powi(2);
        assert!((g.data()[1] - ratio).abs() < 1e-15);
        assert!((rdp(&two, &p) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn rdp_handles_zeros() {
        let p = RdpParams::default();
        let z = ImageGrid::zeros(Dims::new(3, 3, 3));
        assert_eq!(rdp(&z, &p), 0.0);
        assert!(rdp_grad(&z, &p).data().iter().all(|v| v.is_finite() && *v == 0.0));
        let mut x = z.clone();
        x.set(1, 1, 1, 1.0);
        assert!(rdp(&x, &p).is_finite());
    }

    fn positive_image(dims: Dims, seed: u64) -> ImageGrid {
        let mut rng = SeedStream::new(seed).rng("rdp", 0);
        ImageGrid::from_vec(dims, (0..dims.len()).map(|_| 0.1 + rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn rdp_gradient_matches_finite_differences() {
        for (dims, nb) in [
            (Dims::planar(6, 5), Neighborhood::Full),
            (Dims::new(4, 4, 3), Neighborhood::Full),
            (Dims::new(3, 3, 4), Neighborhood::Z),
        ] {
            let p = RdpParams { neighborhood: nb, ..Default::default() };
            let x = positive_image(dims, 3);
            let g = rdp_grad(&x, &p);
            for j in 0..x.len() {
                let h = 1e-6;
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[j] += h;
                xm.data_mut()[j] -= h;
                let fd = (rdp(&xp, &p) - rdp(&xm, &p)) / (2.0 * h);
                assert!((fd - g.data()[j]).abs() <= 1e-5 * g.data()[j].abs().max(1e-2), "{fd} vs {}", g.data()[j]);
            }
        }
    }

    #[test]
    fn rdp_gradient_is_scale_invariant() {
        let p = RdpParams::default();
        let x = positive_image(Dims::new(5, 5, 3), 8);
        let g = rdp_grad(&x, &p);
        for a in [0.25, 2.0, 1024.0] {
            assert_eq!(rdp_grad(&x.scaled(a), &p), g);
        }
        for a in [0.3, 7.0, 1e4] {
            let ga = rdp_grad(&x.scaled(a), &p);
            for (u, v) in ga.data().iter().zip(g.data()) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn z_neighbourhood_ignores_in_plane_edges() {
        let p = RdpParams::z_only();
        let mut x = ImageGrid::filled(Dims::new(4, 4, 3), 1.0);
        for y in 0..4 {
            for z in 0..3 {
                x.set(0, y, z, 5.0);
            }
        }
        assert_eq!(rdp(&x, &p), 0.0);
    }

    #[test]
    fn scalar_mlem_is_exact_mle() {
        let sm = scalar(0.0);
        let y = counts(sm.layout(), &[2.0]);
        let x = mlem(&y, &sm, &scalar_img(1.0), 1).unwrap();
        assert_eq!(x.data(), &[2.0]);
        // count balance holds exactly in the scalar case
        assert_eq!(sm.expected(&x).unwrap().sum(), y.sum());
    }

    #[test]
    fn mlem_fixed_point() {
        let (sm, _, truth) = problem(8, 10.0, 0);
        let l = sm.layout();
        let sm = sm.with_background(Measurements::zeros(l, MeasurementKind::Expected)).unwrap();
        let y = sm.forward(&truth).unwrap();
        let x = mlem(&y, &sm, &truth, 1).unwrap();
        for (a, b) in x.data().iter().zip(truth.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn mlem_likelihood_is_monotone() {
        let (sm, y, _) = problem(16, 10.0, 4);
        let init = constant_init(&y, &sm).unwrap();
        let mut values = vec![pll(&y, &init, &sm).unwrap()];
        mlem_with(&y, &sm, &init, 50, |_, x| {
            assert!(x.data().iter().all(|&v| v >= 0.0));
            values.push(pll(&y, x, &sm).unwrap());
        })
        .unwrap();
        for w in values.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn osem_single_subset_is_mlem() {
        let (sm, y, _) = problem(12, 2.5, 2);
        let init = constant_init(&y, &sm).unwrap();
        let a = mlem(&y, &sm, &init, 7).unwrap();
        let b = osem(&y, &sm, &partition_subsets(&sm, 1).unwrap(), &init, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn osem_reaches_mlem_likelihood() {
        let (sm, y, _) = problem(16, 100.0, 5);
        let init = constant_init(&y, &sm).unwrap();
        let m = pll(&y, &mlem(&y, &sm, &init, 40).unwrap(), &sm).unwrap();
        let o = pll(&y, &osem(&y, &sm, &partition_subsets(&sm, 4).unwrap(), &init, 10).unwrap(), &sm).unwrap();
        assert!((o - m).abs() <= 1e-3 * m.abs(), "{o} vs {m}");
    }

    #[test]
    fn bsrem_step_equals_mlem_step_on_scalar_system() {
        let sm = scalar(0.5);
        let y = counts(sm.layout(), &[3.0]);
        let x0 = scalar_img(1.5);
        let g = pll_grad(&y, &x0, &sm).unwrap();
        let step = preconditioned_step(&x0, &g, sm.sensitivity_image(), 1.0, 1e-3);
        let em = mlem(&y, &sm, &x0, 1).unwrap();
        assert!((step.data()[0] - em.data()[0]).abs() <= 1e-15);
    }

    /// Dense, well-conditioned system with an interior MLE.
    fn dense_problem(seed: u64) -> (SystemModel, Measurements) {
        let (n_bins, n_vox) = (64, 8);
        let l = Layout::new(n_bins, 1, 1);
        let mut rng = SeedStream::new(seed).rng("dense", 0);
        let a: Vec<f64> = (0..n_bins * n_vox)
            .map(|k| if k / n_vox % n_vox == k % n_vox { 1.0 } else { 0.0 } + 0.1 * rng.random::<f64>())
            .collect();
        let sm = SystemModel::from_matrix(l, Dims::new(n_vox, 1, 1), &a)
            .unwrap()
            .with_background(Measurements::filled(l, MeasurementKind::Expected, 5.0))
            .unwrap();
        let truth = ImageGrid::from_vec(Dims::new(n_vox, 1, 1), (0..n_vox).map(|j| 50.0 + 10.0 * j as f64).collect()).unwrap();
        let y = crate::projector::poisson_counts(&sm.expected(&truth).unwrap(), seed).unwrap();
        (sm, y)
    }

    #[test]
    fn bsrem_without_prior_matches_mlem() {
        for seed in 0..3 {
            let (sm, y) = dense_problem(seed);
            let init = constant_init(&y, &sm).unwrap();
            let budget = 300;
            let params = BsremParams { max_epochs: budget, tol: 1e-15, ..Default::default() };
            let out = bsrem(&y, &sm, &RdpParams::default(), &params, Some(&init)).unwrap();
            let pb = pll(&y, &out.image, &sm).unwrap();
            let pm = pll(&y, &mlem(&y, &sm, &init, out.epochs).unwrap(), &sm).unwrap();
            assert!(pb >= pm - 1e-6 * pm.abs(), "{pb} vs {pm}");
        }
    }

    #[test]
    fn strong_prior_flattens_to_constant() {
        let (sm, y, _) = problem(8, 10.0, 7);
        let lambda = 1e5;
        // the preconditioned prior curvature is about 8 λ / s; keep the step inside it
        let s_min = sm.sensitivity_image().data().iter().cloned().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
        let alpha0 = 0.5 / (1.0 + 8.0 * lambda / s_min);
        let params = BsremParams { lambda, alpha0, zeta: 1e-3, max_epochs: 2000, tol: 1e-9, ..Default::default() };
        let out = bsrem(&y, &sm, &RdpParams::default(), &params, None).unwrap();
        let support = sm.support();
        let vals: Vec<f64> = out.image.data().iter().zip(&support).filter(|(_, &s)| s).map(|(&v, _)| v).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let spread = vals.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        assert!(spread < 1e-2 * mean, "spread {spread}, mean {mean}");
    }

    #[test]
    fn bsrem_stop_rule_fires_and_objective_rises() {
        let (sm, y, _) = problem(16, 10.0, 20);
        let prior = RdpParams::default();
        let params = BsremParams { lambda: 1.0, n_sub: 4, ..Default::default() };
        let sched = partition_subsets(&sm, params.n_sub).unwrap();
        let init = default_bsrem_init(&y, &sm, &sched).unwrap();
        let support = sm.support();
        let phi0 = map_objective(&y, &init, &sm, &prior, 1.0).unwrap();
        let g0 = projected_gradient(&map_gradient(&y, &init, &sm, &prior, 1.0).unwrap(), &init, &support).norm();
        let out = bsrem(&y, &sm, &prior, &params, Some(&init)).unwrap();
        assert!(out.converged && out.epochs < params.max_epochs);
        assert!(*out.objective.last().unwrap() > phi0);
        let g = projected_gradient(&map_gradient(&y, &out.image, &sm, &prior, 1.0).unwrap(), &out.image, &support).norm();
        assert!(g < g0, "{g} vs {g0} after {} epochs", out.epochs);
    }

    #[test]
    fn gradient_mapping_vanishes_at_active_bound() {
        let x = ImageGrid::from_vec(Dims::planar(3, 1), vec![0.0, 2.0, 0.0]).unwrap();
        let g = x.like(vec![-5.0, 0.0, 1.0]);
        let p = projected_gradient(&g, &x, &[true, true, false]);
        assert_eq!(p.data(), &[0.0, 0.0, 0.0]);
        let p = projected_gradient(&x.like(vec![-1.0, -3.0, 0.0]), &x, &[true; 3]);
        assert_eq!(p.data(), &[0.0, -2.0, 0.0]);
    }

    #[test]
    fn iterates_stay_non_negative() {
        let (sm, y, _) = problem(12, 2.5, 9);
        let params = BsremParams { lambda: 0.5, n_sub: 4, max_epochs: 20, ..Default::default() };
        let out = bsrem(&y, &sm, &RdpParams::default(), &params, None).unwrap();
        assert!(out.image.data().iter().all(|&v| v >= 0.0));
    }
}
