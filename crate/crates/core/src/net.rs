//! A small convolutional score network with hand-written backpropagation,
//! trained by denoising score matching with plain stochastic gradient.
//!
//! The network predicts the denoised image
//! `D = a(σ) x̃ + F(c_in x̃, cond; σ)` with `x̃ = x_t/γ_t`, `σ = ν_t/γ_t`,
//! a learned time-gated skip gain `a` and a learned base image inside `F`.
//! The score follows as `(γ_t D − x_t)/ν_t²`.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{Dims, ImageGrid};
use crate::rng::{standard_normal, SeedStream};
use crate::score::{c_train, ScoreModel};

const N_FEAT: usize = 3;
const K: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub conditional: bool,
}

impl NetShape {
    fn in_channels(&self) -> usize {
        if self.conditional {
            2
        } else {
            1
        }
    }

    fn pixels(&self) -> usize {
        self.nx * self.ny
    }

    /// `(name, shape)` of every parameter block, in storage order.
    pub fn blocks(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = self.channels;
        vec![
            ("conv1", vec![c, self.in_channels(), 3, 3]),
            ("time1", vec![c, N_FEAT]),
            ("conv2", vec![c, c, 3, 3]),
            ("time2", vec![c, N_FEAT]),
            ("conv3", vec![1, c, 3, 3]),
            ("time3", vec![N_FEAT]),
            ("base", vec![self.ny, self.nx]),
            ("base_gain", vec![N_FEAT]),
            ("skip_gain", vec![N_FEAT]),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

struct Offsets {
    w1: usize,
    t1: usize,
    w2: usize,
    t2: usize,
    w3: usize,
    t3: usize,
    base: usize,
    bg: usize,
    skip: usize,
    end: usize,
}

impl Offsets {
    fn of(shape: &NetShape) -> Self {
        let mut o = [0usize; 10];
        for (i, (_, s)) in shape.blocks().iter().enumerate() {
            o[i + 1] = o[i] + s.iter().product::<usize>();
        }
        Self { w1: o[0], t1: o[1], w2: o[2], t2: o[3], w3: o[4], t3: o[5], base: o[6], bg: o[7], skip: o[8], end: o[9] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetSidecar {
    kind: String,
    shape: NetShape,
    sigma_data: f64,
    schedule: DiffusionSchedule,
    blocks: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyScoreNet {
    shape: NetShape,
    sigma_data: f64,
    sched: DiffusionSchedule,
    params: Vec<f64>,
}

/// Zero-padded 3x3 convolution, `input` of `cin` planes, `w` of shape
/// `[cout, cin, 3, 3]`.
fn conv(input: &[f64], cin: usize, w: &[f64], cout: usize, nx: usize, ny: usize, out: &mut [f64]) {
    let n = nx * ny;
    out[..cout * n].iter_mut().for_each(|v| *v = 0.0);
    for o in 0..cout {
        let dst = &mut out[o * n..(o + 1) * n];
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for k in 0..K {
                let wv = w[(o * cin + i) * K + k];
                if wv == 0.0 {
                    continue;
                }
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                for y in 0..ny {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let (x0, x1) = ((-dx).max(0) as usize, (nx as isize - dx.max(0)) as usize);
                    let row = &src[sy as usize * nx..(sy as usize + 1) * nx];
                    let drow = &mut dst[y * nx..(y + 1) * nx];
                    for x in x0..x1 {
                        drow[x] += wv * row[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to its input and weights.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    cin: usize,
    w: &[f64],
    cout: usize,
    nx: usize,
    ny: usize,
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
) {
    let n = nx * ny;
    let mut grad_in = grad_in;
    if let Some(gi) = grad_in.as_deref_mut() {
        gi[..cin * n].iter_mut().for_each(|v| *v = 0.0);
    }
    let mut grad_w = grad_w;
    for o in 0..cout {
        let go = &grad_out[o * n..(o + 1) * n];
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for k in 0..K {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                let wv = w[(o * cin + i) * K + k];
                let mut acc = 0.0;
                for y in 0..ny {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let (x0, x1) = ((-dx).max(0) as usize, (nx as isize - dx.max(0)) as usize);
                    let srow = sy as usize * nx;
                    for x in x0..x1 {
                        let s = srow + (x as isize + dx) as usize;
                        let g = go[y * nx + x];
                        acc += g * src[s];
                        if let Some(gi) = grad_in.as_deref_mut() {
                            gi[i * n + s] += wv * g;
                        }
                    }
                }
                if let Some(gw) = grad_w.as_deref_mut() {
                    gw[(o * cin + i) * K + k] += acc;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct Pre {
    g: f64,
    nu: f64,
    sigma: f64,
    c_in: f64,
    feat: [f64; N_FEAT],
}

struct Cache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    xs: Vec<f64>,
    skip: f64,
    base_gain: f64,
}

fn dotf(a: &[f64], f: &[f64; N_FEAT]) -> f64 {
    a.iter().zip(f).map(|(x, y)| x * y).sum()
}

impl TinyScoreNet {
    pub fn new(shape: NetShape, sched: DiffusionSchedule, seed: u64) -> Result<Self> {
        if shape.nx == 0 || shape.ny == 0 || shape.channels == 0 {
            return Err(Error::Config(format!("invalid network shape {shape:?}")));
        }
        sched.validate()?;
        let off = Offsets::of(&shape);
        let mut params = vec![0.0; off.end];
        let mut rng = SeedStream::new(seed).rng("net-init", 0);
        let c = shape.channels;
        for (start, end, fan_in) in [
            (off.w1, off.t1, shape.in_channels() * K),
            (off.w2, off.t2, c * K),
            (off.w3, off.t3, c * K),
        ] {
            let k = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[start..end] {
                *p = k * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        // unit base gain so the base image receives gradient from the start
        params[off.bg] = 1.0;
        Ok(Self { shape, sigma_data: 1.0, sched, params })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check(&self, xt: &ImageGrid, condition: Option<&ImageGrid>) -> Result<()> {
        let d = xt.dims();
        if d != Dims::planar(self.shape.nx, self.shape.ny) {
            return Err(Error::Shape(format!(
                "network expects {}x{} slices, got {:?}",
                self.shape.nx, self.shape.ny, d
            )));
        }
        if let Some(c) = condition {
            xt.check_same_dims(c)?;
        }
        Ok(())
    }

    fn pre(&self, t: f64) -> Result<Pre> {
        let (g, nu) = self.sched.coeffs(t)?;
        if nu == 0.0 {
            return Err(Error::InvalidValue("network score is singular at t = 0".into()));
        }
        let sigma = nu / g;
        let c_in = 1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt();
        let u = sigma.ln() / 4.0;
        Ok(Pre { g, nu, sigma, c_in, feat: [1.0, u, u * u] })
    }

    fn forward(&self, xt: &ImageGrid, condition: Option<&ImageGrid>, p: &Pre) -> (Vec<f64>, Cache) {
        let off = Offsets::of(&self.shape);
        let (nx, ny, c, n) = (self.shape.nx, self.shape.ny, self.shape.channels, self.shape.pixels());
        let cin = self.shape.in_channels();
        let w = &self.params;
        let xs: Vec<f64> = xt.data().iter().map(|v| v / p.g).collect();
        let mut input: Vec<f64> = xs.iter().map(|v| p.c_in * v).collect();
        if self.shape.conditional {
            match condition {
                Some(m) => input.extend_from_slice(m.data()),
                None => input.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        let mut pre1 = vec![0.0; c * n];
        conv(&input, cin, &w[off.w1..off.t1], c, nx, ny, &mut pre1);
        for o in 0..c {
            let b = dotf(&w[off.t1 + o * N_FEAT..off.t1 + (o + 1) * N_FEAT], &p.feat);
            pre1[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
        }
        let h1: Vec<f64> = pre1.iter().map(|&v| silu(v)).collect();
        let mut pre2 = vec![0.0; c * n];
        conv(&h1, c, &w[off.w2..off.t2], c, nx, ny, &mut pre2);
        for o in 0..c {
            let b = dotf(&w[off.t2 + o * N_FEAT..off.t2 + (o + 1) * N_FEAT], &p.feat);
            pre2[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
        }
        let h2: Vec<f64> = pre2.iter().map(|&v| silu(v)).collect();
        let mut out = vec![0.0; n];
        conv(&h2, c, &w[off.w3..off.t3], 1, nx, ny, &mut out);
        let b3 = dotf(&w[off.t3..off.base], &p.feat);
        let base_gain = dotf(&w[off.bg..off.skip], &p.feat);
        let skip = dotf(&w[off.skip..off.end], &p.feat);
        let base = &w[off.base..off.bg];
        for j in 0..n {
            out[j] += b3 + base_gain * base[j] + skip * xs[j];
        }
        (out, Cache { input, pre1, h1, pre2, h2, xs, skip, base_gain })
    }

    /// Backpropagates `grad_d = ∂loss/∂D`; accumulates parameter gradients
    /// into `grad_p` when given and returns `∂loss/∂x̃` through both paths.
    fn backward(&self, cache: &Cache, p: &Pre, grad_d: &[f64], grad_p: Option<&mut [f64]>) -> Vec<f64> {
        let off = Offsets::of(&self.shape);
        let (nx, ny, c, n) = (self.shape.nx, self.shape.ny, self.shape.channels, self.shape.pixels());
        let cin = self.shape.in_channels();
        let w = &self.params;
        let mut gp = grad_p;
        if let Some(g) = gp.as_deref_mut() {
            let base = &w[off.base..off.bg];
            let (mut s_b3, mut s_bg, mut s_skip) = (0.0, 0.0, 0.0);
            for j in 0..n {
                s_b3 += grad_d[j];
                s_bg += grad_d[j] * base[j];
                s_skip += grad_d[j] * cache.xs[j];
                g[off.base + j] += grad_d[j] * cache.base_gain;
            }
            for f in 0..N_FEAT {
                g[off.t3 + f] += s_b3 * p.feat[f];
                g[off.bg + f] += s_bg * p.feat[f];
                g[off.skip + f] += s_skip * p.feat[f];
            }
        }
        let mut g_h2 = vec![0.0; c * n];
        conv_backward(
            &cache.h2,
            c,
            &w[off.w3..off.t3],
            1,
            nx,
            ny,
            grad_d,
            Some(&mut g_h2),
            gp.as_deref_mut().map(|g| &mut g[off.w3..off.t3]),
        );
        let g_pre2: Vec<f64> = g_h2.iter().zip(&cache.pre2).map(|(g, &x)| g * silu_grad(x)).collect();
        if let Some(g) = gp.as_deref_mut() {
            for o in 0..c {
                let s: f64 = g_pre2[o * n..(o + 1) * n].iter().sum();
                for f in 0..N_FEAT {
                    g[off.t2 + o * N_FEAT + f] += s * p.feat[f];
                }
            }
        }
        let mut g_h1 = vec![0.0; c * n];
        conv_backward(
            &cache.h1,
            c,
            &w[off.w2..off.t2],
            c,
            nx,
            ny,
            &g_pre2,
            Some(&mut g_h1),
            gp.as_deref_mut().map(|g| &mut g[off.w2..off.t2]),
        );
        let g_pre1: Vec<f64> = g_h1.iter().zip(&cache.pre1).map(|(g, &x)| g * silu_grad(x)).collect();
        if let Some(g) = gp.as_deref_mut() {
            for o in 0..c {
                let s: f64 = g_pre1[o * n..(o + 1) * n].iter().sum();
                for f in 0..N_FEAT {
                    g[off.t1 + o * N_FEAT + f] += s * p.feat[f];
                }
            }
        }
        let mut g_in = vec![0.0; cin * n];
        conv_backward(
            &cache.input,
            cin,
            &w[off.w1..off.t1],
            c,
            nx,
            ny,
            &g_pre1,
            Some(&mut g_in),
            gp.as_deref_mut().map(|g| &mut g[off.w1..off.t1]),
        );
        (0..n).map(|j| p.c_in * g_in[j] + cache.skip * grad_d[j]).collect()
    }

    /// Denoised estimate `D(x_t)`.
    pub fn denoise(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>) -> Result<ImageGrid> {
        self.check(xt, condition)?;
        let p = self.pre(t)?;
        Ok(xt.like(self.forward(xt, condition, &p).0))
    }

    /// DSM loss of one draw and its parameter gradient, accumulated with
    /// weight `scale`.
    fn sample_grad(&self, x0: &ImageGrid, cond: Option<&ImageGrid>, t: f64, z: &ImageGrid, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let p = self.pre(t)?;
        let xt = x0.zip_map(z, |a, b| p.g * a + p.nu * b);
        let (d, cache) = self.forward(&xt, cond, &p);
        // ν²‖s + z/ν‖² = (γ/ν)² ‖D − x₀‖²
        let w = 1.0 / (p.sigma * p.sigma);
        let diff: Vec<f64> = d.iter().zip(x0.data()).map(|(a, b)| a - b).collect();
        let loss = w * diff.iter().map(|v| v * v).sum::<f64>();
        let grad_d: Vec<f64> = diff.iter().map(|v| scale * 2.0 * w * v).collect();
        self.backward(&cache, &p, &grad_d, Some(grad));
        Ok(loss)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let blob: Vec<u8> = self.params.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(path, blob).map_err(|e| Error::io(path, e))?;
        let side = NetSidecar {
            kind: "tiny-score-net".into(),
            shape: self.shape,
            sigma_data: self.sigma_data,
            schedule: self.sched,
            blocks: self.shape.blocks().into_iter().map(|(n, s)| (n.to_string(), s)).collect(),
        };
        let sp = crate::io::sidecar_path(path);
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes") + "\n";
        fs::write(&sp, text).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sp = crate::io::sidecar_path(path);
        if !sp.exists() {
            return Err(Error::MissingSidecar(sp));
        }
        let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: NetSidecar =
            serde_json::from_str(&text).map_err(|e| Error::Sidecar { path: sp.clone(), msg: e.to_string() })?;
        if side.kind != "tiny-score-net" {
            return Err(Error::Sidecar { path: sp, msg: format!("unexpected kind {}", side.kind) });
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let n = side.shape.n_params();
        if bytes.len() != 4 * n {
            return Err(Error::Shape(format!("{}: expected {n} parameters, found {} bytes", path.display(), bytes.len())));
        }
        let params: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        side.schedule.validate()?;
        Ok(Self { shape: side.shape, sigma_data: side.sigma_data, sched: side.schedule, params })
    }
}

impl ScoreModel for TinyScoreNet {
    fn evaluate(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>) -> Result<ImageGrid> {
        self.check(xt, condition)?;
        let p = self.pre(t)?;
        let (d, _) = self.forward(xt, condition, &p);
        let v = p.nu * p.nu;
        Ok(xt.like(xt.data().iter().zip(&d).map(|(x, dj)| (p.g * dj - x) / v).collect()))
    }

    fn vjp(&self, xt: &ImageGrid, t: f64, condition: Option<&ImageGrid>, v: &ImageGrid) -> Result<ImageGrid> {
        self.check(xt, condition)?;
        xt.check_same_dims(v)?;
        let p = self.pre(t)?;
        let (_, cache) = self.forward(xt, condition, &p);
        // s = (γ D(x_t/γ) − x_t)/ν², so vᵀ∂s/∂x_t = (vᵀ∂D/∂x̃ − v)/ν²
        let gx = self.backward(&cache, &p, v.data(), None);
        let n2 = p.nu * p.nu;
        Ok(xt.like(gx.iter().zip(v.data()).map(|(a, b)| (a - b) / n2).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Step size on the per-voxel loss.
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for the reported loss.
    pub held_out_fraction: f64,
    /// Per-sample normalization jitter `c ~ U[c_train/2, 3 c_train/2]`.
    pub scale_jitter: bool,
    /// Probability of keeping the condition during conditional training.
    pub q: f64,
    pub eval_draws: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 0,
            held_out_fraction: 0.25,
            scale_jitter: true,
            q: 0.9,
            eval_draws: 256,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_draws == 0 {
            return Err(Error::Config("training needs steps, batch size and eval draws >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.held_out_fraction) || !(0.0..=1.0).contains(&self.q) {
            return Err(Error::Config(format!("invalid training options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_held_out: f64,
    pub final_held_out: f64,
    /// Mean minibatch loss per step.
    pub losses: Vec<f64>,
    /// Draws that saw their real condition.
    pub n_conditioned: usize,
    /// Draws with the condition replaced by the zero image.
    pub n_dropped: usize,
}

/// Importance sampler for `t` on `[t_min, 1]`: half uniform, half
/// proportional to `γ_t²/ν_t²`. Draws carry the weight `1/q(t)` so the
/// estimated objective is the uniform-in-time one, while the per-draw
/// weight `(γ/ν)²/q(t)` stays bounded.
struct TimeSampler {
    t: Vec<f64>,
    cdf: Vec<f64>,
    z: f64,
    t_min: f64,
    sched: DiffusionSchedule,
}

impl TimeSampler {
    fn new(sched: &DiffusionSchedule) -> Result<Self> {
        let n = 4096;
        let t_min = sched.t_min;
        let t: Vec<f64> = (0..=n).map(|k| t_min * ((1.0 / t_min).ln() * k as f64 / n as f64).exp()).collect();
        let f = |t: f64| -> Result<f64> {
            let (g, nu) = sched.coeffs(t)?;
            Ok((g / nu).powi(2))
        };
        let mut cdf = vec![0.0];
        for w in t.windows(2) {
            let area = 0.5 * (f(w[0])? + f(w[1])?) * (w[1] - w[0]);
            cdf.push(cdf.last().unwrap() + area);
        }
        let z = *cdf.last().unwrap();
        Ok(Self { t, cdf, z, t_min, sched: *sched })
    }

    fn density(&self, t: f64) -> Result<f64> {
        let (g, nu) = self.sched.coeffs(t)?;
        Ok(0.5 / (1.0 - self.t_min) + 0.5 * (g / nu).powi(2) / self.z)
    }

    fn draw(&self, u_mix: f64, u: f64) -> f64 {
        if u_mix < 0.5 {
            return self.t_min + (1.0 - self.t_min) * u;
        }
        let target = u * self.z;
        let k = self.cdf.partition_point(|&c| c < target).clamp(1, self.t.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let f = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
        (self.t[k - 1] + f * (self.t[k] - self.t[k - 1])).clamp(self.t_min, 1.0)
    }
}

/// Held-out DSM loss with fixed draws.
fn held_out_loss(net: &TinyScoreNet, images: &[(ImageGrid, Option<ImageGrid>)], opts: &TrainOptions) -> Result<f64> {
    let stream = SeedStream::new(opts.seed);
    let mut total = 0.0;
    for d in 0..opts.eval_draws {
        let (x0, cond) = &images[d % images.len()];
        let mut rng = stream.rng("held-out", d as u64);
        let t = net.sched.t_min + (1.0 - net.sched.t_min) * rng.random::<f64>();
        let z = x0.like(standard_normal(&mut rng, x0.len()));
        let xt = crate::diffusion::perturb(&net.sched, x0, t, &z)?;
        let (_, nu) = net.sched.coeffs(t)?;
        let s = net.evaluate(&xt, t, cond.as_ref())?;
        total += s.data().iter().zip(z.data()).map(|(a, b)| (nu * a + b).powi(2)).sum::<f64>();
    }
    Ok(total / opts.eval_draws as f64)
}

/// Trains on PET images, each divided by its own `c_train`. With
/// `conditions` the paired MR images are fed as a second channel and
/// replaced by the zero image with probability `1 − q`.
pub fn train_score(
    net: &mut TinyScoreNet,
    images: &[ImageGrid],
    conditions: Option<&[ImageGrid]>,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    opts.validate()?;
    if images.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if net.shape.conditional != conditions.is_some() {
        return Err(Error::Config("conditions must be given exactly for a conditional network".into()));
    }
    if let Some(c) = conditions {
        if c.len() != images.len() {
            return Err(Error::Config("one condition per training image required".into()));
        }
    }
    let scales: Vec<f64> = images.iter().map(c_train).collect::<Result<_>>()?;
    let n_held = if images.len() == 1 { 0 } else { ((images.len() as f64 * opts.held_out_fraction).ceil() as usize).min(images.len() - 1) };
    let n_train = images.len() - n_held;
    let pair = |i: usize| (images[i].scaled(1.0 / scales[i]), conditions.map(|c| c[i].clone()));
    let held: Vec<_> = if n_held == 0 { (0..images.len()).map(pair).collect() } else { (n_train..images.len()).map(pair).collect() };

    let sampler = TimeSampler::new(&net.sched)?;
    let initial_held_out = held_out_loss(net, &held, opts)?;
    let stream = SeedStream::new(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    let (mut n_conditioned, mut n_dropped) = (0, 0);
    let mut grad = vec![0.0; net.params.len()];
    for step in 0..opts.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut rng = stream.rng("train", step as u64);
        let mut batch_loss = 0.0;
        for _ in 0..opts.batch_size {
            let i = rng.random_range(0..n_train);
            let c = if opts.scale_jitter { scales[i] * (0.5 + rng.random::<f64>()) } else { scales[i] };
            let x0 = images[i].scaled(1.0 / c);
            let cond = match conditions {
                Some(cs) => {
                    if rng.random::<f64>() < opts.q {
                        n_conditioned += 1;
                        Some(cs[i].clone())
                    } else {
                        n_dropped += 1;
                        None
                    }
                }
                None => None,
            };
            let t = sampler.draw(rng.random(), rng.random());
            let weight = 1.0 / (sampler.density(t)? * (1.0 - net.sched.t_min)) / opts.batch_size as f64;
            let z = x0.like(standard_normal(&mut rng, x0.len()));
            // the step size applies to the per-voxel loss
            batch_loss += weight * net.sample_grad(&x0, cond.as_ref(), t, &z, weight / x0.len() as f64, &mut grad)?;
        }
        if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("training loss became non-finite at step {step}")));
        }
        for (p, g) in net.params.iter_mut().zip(&grad) {
            *p -= opts.learning_rate * g;
        }
        losses.push(batch_loss);
    }
    let final_held_out = held_out_loss(net, &held, opts)?;
    if !final_held_out.is_finite() {
        return Err(Error::Diverged("held-out loss is non-finite after training".into()));
    }
    Ok(TrainReport { initial_held_out, final_held_out, losses, n_conditioned, n_dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::MixtureScore;

    fn shape(n: usize, conditional: bool) -> NetShape {
        NetShape { nx: n, ny: n, channels: 8, conditional }
    }

    fn image(n: usize, seed: u64) -> ImageGrid {
        let mut rng = SeedStream::new(seed).rng("img", 0);
        let d = Dims::planar(n, n);
        ImageGrid::from_vec(d, (0..d.len()).map(|j| if (j * 7 + seed as usize) % 5 == 0 { 0.0 } else { 0.5 + rng.random::<f64>() }).collect()).unwrap()
    }

    #[test]
    fn parameter_budget() {
        let s = NetShape { nx: 32, ny: 32, channels: 16, conditional: true };
        assert!(s.n_params() <= 50_000);
        assert_eq!(s.blocks().len(), 9);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = {
            let mut n = TinyScoreNet::new(shape(5, true), DiffusionSchedule::default(), 3).unwrap();
            let mut rng = SeedStream::new(1).rng("perturb", 0);
            for p in n.params.iter_mut() {
                *p += 0.1 * (rng.random::<f64>() - 0.5);
            }
            n
        };
        let x0 = image(5, 2);
        let cond = Some(image(5, 4));
        let z = x0.like(standard_normal(&mut SeedStream::new(2).rng("z", 0), 25));
        let t = 0.35;
        let mut grad = vec![0.0; net.params.len()];
        net.sample_grad(&x0, cond.as_ref(), t, &z, 1.0, &mut grad).unwrap();
        let loss = |n: &TinyScoreNet| {
            let mut g = vec![0.0; n.params.len()];
            n.sample_grad(&x0, cond.as_ref(), t, &z, 1.0, &mut g).unwrap()
        };
        let off = Offsets::of(&net.shape);
        for k in [off.w1, off.w1 + 100, off.t1 + 1, off.w2 + 17, off.t2 + 5, off.w3 + 3, off.t3 + 2, off.base + 6, off.bg + 1, off.skip + 2] {
            let h = 1e-6;
            let (mut p, mut m) = (net.clone(), net.clone());
            p.params[k] += h;
            m.params[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-5 * grad[k].abs().max(1e-2), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn score_vjp_matches_finite_differences() {
        let mut net = TinyScoreNet::new(shape(4, false), DiffusionSchedule::default(), 5).unwrap();
        let mut rng = SeedStream::new(5).rng("perturb", 0);
        for p in net.params.iter_mut() {
            *p += 0.2 * (rng.random::<f64>() - 0.5);
        }
        let xt = image(4, 6);
        let v = xt.like(standard_normal(&mut rng, 16));
        let t = 0.5;
        let jv = net.vjp(&xt, t, None, &v).unwrap();
        for j in [0, 5, 15] {
            let h = 1e-6;
            let (mut p, mut m) = (xt.clone(), xt.clone());
            p.data_mut()[j] += h;
            m.data_mut()[j] -= h;
            let fd = (net.evaluate(&p, t, None).unwrap().dot(&v) - net.evaluate(&m, t, None).unwrap().dot(&v)) / (2.0 * h);
            assert!((fd - jv.data()[j]).abs() <= 1e-5 * jv.data()[j].abs().max(1.0), "{fd} vs {}", jv.data()[j]);
        }
    }

    #[test]
    fn singleton_training_approaches_point_mass_floor() {
        let x = image(8, 1);
        let mut net = TinyScoreNet::new(shape(8, false), DiffusionSchedule::default(), 0).unwrap();
        let opts = TrainOptions { steps: 300, scale_jitter: false, ..Default::default() };
        let r = train_score(&mut net, &[x], None, &opts).unwrap();
        assert!(r.final_held_out < 0.1 * r.initial_held_out, "{} -> {}", r.initial_held_out, r.final_held_out);
    }

    #[test]
    fn training_is_deterministic() {
        let xs = vec![image(6, 1), image(6, 2), image(6, 3)];
        let opts = TrainOptions { steps: 20, ..Default::default() };
        let run = || {
            let mut net = TinyScoreNet::new(shape(6, false), DiffusionSchedule::default(), 9).unwrap();
            train_score(&mut net, &xs, None, &opts).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn q_one_never_drops_the_condition() {
        let xs = vec![image(6, 1), image(6, 2)];
        let ms = vec![image(6, 7), image(6, 8)];
        let mut net = TinyScoreNet::new(shape(6, true), DiffusionSchedule::default(), 9).unwrap();
        let opts = TrainOptions { steps: 10, q: 1.0, ..Default::default() };
        let r = train_score(&mut net, &xs, Some(&ms), &opts).unwrap();
        assert_eq!(r.n_dropped, 0);
        assert_eq!(r.n_conditioned, 10 * opts.batch_size);
        let opts = TrainOptions { steps: 10, q: 0.5, ..Default::default() };
        let r = train_score(&mut net, &xs, Some(&ms), &opts).unwrap();
        assert!(r.n_dropped > 0 && r.n_conditioned > 0);
    }

    #[test]
    fn trained_net_agrees_with_mixture_score() {
        let sched = DiffusionSchedule::default();
        let mut spec = crate::phantom::PhantomSpec::brain(Dims::planar(8, 8));
        spec.jitter = 0.1;
        let xs: Vec<ImageGrid> = crate::phantom::build_dataset(6, &spec, 1).unwrap().into_iter().map(|s| s.pet).collect();
        let mut net = TinyScoreNet::new(NetShape { nx: 8, ny: 8, channels: 16, conditional: false }, sched, 1).unwrap();
        let opts = TrainOptions { scale_jitter: false, held_out_fraction: 0.0, ..Default::default() };
        let r = train_score(&mut net, &xs, None, &opts).unwrap();
        assert!(r.final_held_out < 0.7 * r.initial_held_out);
        let normalized: Vec<ImageGrid> = xs.iter().map(|x| x.scaled(1.0 / c_train(x).unwrap())).collect();
        let mix = MixtureScore::new(normalized.clone(), sched).unwrap();
        let mut rng = SeedStream::new(3).rng("cos", 0);
        let mut total = 0.0;
        let mut count = 0;
        for k in 0..9 {
            let t = 0.1 + 0.1 * k as f64;
            for c in &normalized {
                let xt = crate::diffusion::perturb(&sched, c, t, &c.like(standard_normal(&mut rng, c.len()))).unwrap();
                let a = net.evaluate(&xt, t, None).unwrap();
                let b = mix.evaluate(&xt, t, None).unwrap();
                total += a.dot(&b) / (a.norm() * b.norm());
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(mean > 0.9, "mean cosine {mean}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.f32");
        let net = TinyScoreNet::new(shape(5, true), DiffusionSchedule::default(), 2).unwrap();
        net.save(&p).unwrap();
        let back = TinyScoreNet::load(&p).unwrap();
        assert_eq!(back.shape, net.shape);
        for (a, b) in back.params.iter().zip(&net.params) {
            assert_eq!(*a, (*b as f32) as f64);
        }
        fs::write(&p, [0u8; 8]).unwrap();
        assert!(matches!(TinyScoreNet::load(&p), Err(Error::Shape(_))));
    }

    #[test]
    fn time_sampler_density_integrates_to_one() {
        let s = TimeSampler::new(&DiffusionSchedule::default()).unwrap();
        let n = 200_000;
        let (a, b) = (1e-3f64, 1.0f64);
        let mut total = 0.0;
        for k in 0..n {
            let t = a * ((b / a).ln() * (k as f64 + 0.5) / n as f64).exp();
            let dt = t * (b / a).ln() / n as f64;
            total += s.density(t).unwrap() * dt;
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }
}
