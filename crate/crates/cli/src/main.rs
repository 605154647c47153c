//! `petsgm` command-line driver.
//!
//! Every subcommand reads an optional TOML run configuration, applies its
//! flags on top (flags win), and writes its outputs plus `manifest.json`
//! and `config.resolved.toml` into one run directory. Without `--out` the
//! run directory is `$PETSGM_OUT/<subcommand>`, or `runs/<subcommand>`.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! failures while running.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use petsgm::config::{training_slices, Prior, RunConfig};
use petsgm::image::ImageGrid;
use petsgm::io::{export_graymap, read_image, read_measurements, write_image, write_measurements};
use petsgm::metrics::{crc, kldiv, psnr, ssim, RoiSet};
use petsgm::net::train_score;
use petsgm::recon::BsremParams;
use petsgm::rng::SeedStream;
use petsgm::sampler::{reconstruct, sample, Method, SamplerConfig};
use petsgm::sweep::{run_algorithm, run_sweep, write_sweep, AlgoSpec};
use petsgm::Error as CoreError;

#[derive(Parser, Debug)]
#[command(name = "petsgm", version, about = "Desk-scale PET reconstruction with score-based priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// TOML run configuration; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// Master seed for measurement realizations.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_level: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Phantom, calibrated system and Poisson realizations.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        realizations: usize,
    },
    /// Trains the small score network on the prior dataset.
    TrainScore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Unconditional draws from the configured prior.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long, default_value = "ddim")]
        method: Method,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Reconstructs one measurement file (or a fresh realization).
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        algo: String,
        /// Measured counts; realization 0 of the configured scenario otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// MLEM iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// OSEM epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Condition the sampler on the scenario's MR image.
        #[arg(long)]
        guided: bool,
        /// Posterior draws; mean and STD images are written when > 1.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Dump the sampler iterate every k outer steps.
        #[arg(long)]
        snapshot_every: Option<usize>,
    },
    /// Image-quality metrics of a reconstruction.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        recon: PathBuf,
        /// Reference image; the configured scenario's truth otherwise.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Measured counts, for the data-fit KL divergence.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Multi-realization sweep from the `[sweep]` section.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        realizations: Option<usize>,
    },
}

#[derive(Args, Debug, Clone, Default, Serialize)]
struct SamplerFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Penalty strength of the chosen algorithm.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    n_sub: Option<usize>,
    #[arg(long)]
    lambda_rdp: Option<f64>,
    #[arg(long)]
    sigma_d: Option<f64>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    sampler_seed: Option<u64>,
}

impl SamplerFlags {
    fn apply(&self, cfg: &mut SamplerConfig) {
        if let Some(v) = self.steps {
            cfg.schedule.n_steps = v;
        }
        if let Some(v) = self.eta {
            cfg.schedule.eta = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.p {
            cfg.p = v;
        }
        if let Some(v) = self.n_sub {
            cfg.n_sub = v;
        }
        if let Some(v) = self.lambda_rdp {
            cfg.lambda_rdp = v;
        }
        if let Some(v) = self.sigma_d {
            cfg.sigma_d = v;
        }
        if let Some(v) = self.w {
            cfg.w = v;
        }
        if let Some(v) = self.sampler_seed {
            cfg.seed = v;
        }
    }
}

/// Marks errors that come from configuration rather than from running.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    ConfigError(e.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some() || matches!(c.downcast_ref::<CoreError>(), Some(CoreError::Config(_)))
    });
    if config {
        1
    } else {
        2
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    /// Parsed flags; the run directory is omitted so that manifests of
    /// identical runs match.
    flags: serde_json::Value,
    config: RunConfig,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

struct Run {
    command: &'static str,
    dir: PathBuf,
    cfg: RunConfig,
    flags: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Run {
    fn start(command: &'static str, common: &Common, flags: serde_json::Value) -> anyhow::Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p).map_err(config_err)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(l) = common.noise_level {
            cfg.noise_level = l;
        }
        cfg.validate().map_err(config_err)?;
        let cfg = cfg.resolved();
        let dir = match &common.out {
            Some(d) => d.clone(),
            None => std::env::var_os("PETSGM_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(command),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut run = Run { command, dir, cfg, flags, seeds: BTreeMap::new(), inputs: BTreeMap::new(), outputs: Vec::new() };
        run.seeds.insert("master".into(), run.cfg.seed);
        if let Some(p) = &common.config {
            run.input("config", p)?;
        }
        Ok(run)
    }

    fn input(&mut self, name: &str, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(name.into(), sha256_file(path)?);
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn image(&mut self, img: &ImageGrid, stem: &str) -> anyhow::Result<()> {
        let p = self.path(&format!("{stem}.f32"));
        write_image(img, &p)?;
        let g = self.path(&format!("{stem}.pgm"));
        export_graymap(img, img.dims().nz / 2, &g)?;
        self.outputs.extend([p.clone(), petsgm::io::sidecar_path(&p), g]);
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.outputs.push(p);
        Ok(())
    }

    fn finish(mut self) -> anyhow::Result<()> {
        let toml = self.cfg.to_toml()?;
        self.text("config.resolved.toml", &toml)?;
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let name = p.strip_prefix(&self.dir).unwrap_or(p).display().to_string();
            outputs.insert(name, sha256_file(p)?);
        }
        let m = Manifest {
            command: self.command.into(),
            flags: self.flags,
            config: self.cfg,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs,
        };
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        info!("run written to {}", self.dir.display());
        Ok(())
    }
}

fn metrics_csv(rows: &[(String, f64)]) -> String {
    let head: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
    let vals: Vec<String> = rows.iter().map(|(_, v)| format!("{v}")).collect();
    format!("{}\n{}\n", head.join(","), vals.join(","))
}

fn simulate(common: Common, realizations: usize) -> anyhow::Result<()> {
    if realizations == 0 {
        bail!(config_err(anyhow!("--realizations must be >= 1")));
    }
    let mut run = Run::start("simulate", &common, json!({"common": &common, "realizations": realizations}))?;
    let sc = run.cfg.scenario()?;
    run.image(&sc.truth, "truth")?;
    run.image(&sc.sample.mr, "mr")?;
    run.image(&sc.sample.lesion_mask, "lesion_mask")?;
    let bg = run.path("background.f32");
    write_measurements(sc.sm.background(), &bg)?;
    run.outputs.extend([bg.clone(), petsgm::io::sidecar_path(&bg)]);
    let stream = SeedStream::new(run.cfg.seed);
    for r in 0..realizations {
        let y = sc.realization(run.cfg.seed, r)?;
        let p = run.path(&format!("counts_{r:03}.f32"));
        write_measurements(&y, &p)?;
        run.outputs.extend([p.clone(), petsgm::io::sidecar_path(&p)]);
        run.seeds.insert(format!("realization_{r:03}"), stream.derive("realization", r as u64));
    }
    run.text("scale.csv", &metrics_csv(&[("scale".into(), sc.scale), ("noise_level".into(), sc.level)]))?;
    run.finish()
}

fn train(common: Common, steps: Option<usize>) -> anyhow::Result<()> {
    let mut run = Run::start("train-score", &common, json!({"common": &common, "steps": steps}))?;
    if let Some(s) = steps {
        run.cfg.train.options.steps = s;
    }
    run.cfg.train.options.validate().map_err(config_err)?;
    run.seeds.insert("train".into(), run.cfg.train.options.seed);
    run.seeds.insert("prior_dataset".into(), run.cfg.prior.seed);
    let (pet, mr) = training_slices(&run.cfg.prior_samples()?);
    let mut net = run.cfg.new_network()?;
    let cond = run.cfg.train.conditional.then_some(mr.as_slice());
    let report = train_score(&mut net, &pet, cond, &run.cfg.train.options)?;
    info!("held-out loss {:.4} -> {:.4}", report.initial_held_out, report.final_held_out);
    let p = run.path("network.f32");
    net.save(&p)?;
    run.outputs.extend([p.clone(), petsgm::io::sidecar_path(&p)]);
    let mut losses = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        losses += &format!("{i},{l}\n");
    }
    run.text("losses.csv", &losses)?;
    run.text(
        "train.csv",
        &metrics_csv(&[
            ("initial_held_out".into(), report.initial_held_out),
            ("final_held_out".into(), report.final_held_out),
            ("n_conditioned".into(), report.n_conditioned as f64),
            ("n_dropped".into(), report.n_dropped as f64),
        ]),
    )?;
    run.finish()
}

fn build_prior(run: &mut Run) -> anyhow::Result<Prior> {
    if let Some(p) = run.cfg.prior.network.clone() {
        run.input("network", &p)?;
    }
    run.seeds.insert("prior_dataset".into(), run.cfg.prior.seed);
    Ok(run.cfg.build_prior()?)
}

fn sample_cmd(common: Common, flags: SamplerFlags, method: Method, n: usize) -> anyhow::Result<()> {
    if !matches!(method, Method::Em | Method::Ddim) {
        bail!(config_err(anyhow!("sample takes --method em or ddim, got {method}")));
    }
    let mut run = Run::start("sample", &common, json!({"common": &common, "sampler": &flags, "method": method.name(), "n": n}))?;
    let mut cfg = run.cfg.sampler_or(method);
    cfg.method = method;
    flags.apply(&mut cfg);
    cfg.validate().map_err(config_err)?;
    let prior = build_prior(&mut run)?;
    let stream = SeedStream::new(cfg.seed);
    for i in 0..n {
        let seed = stream.derive("sample", i as u64);
        run.seeds.insert(format!("sample_{i:03}"), seed);
        let x = sample(prior.model(), &cfg.schedule, prior.dims(), seed, method, None)?;
        run.image(&x, &format!("sample_{i:03}"))?;
    }
    run.cfg.sampler = Some(cfg);
    run.finish()
}

fn algo_spec(run: &RunConfig, algo: &str, flags: &SamplerFlags, iterations: Option<usize>, epochs: Option<usize>) -> anyhow::Result<(AlgoSpec, f64)> {
    let n_sub = flags.n_sub;
    Ok(match algo {
        "mlem" => (AlgoSpec::Mlem { iterations: iterations.unwrap_or(200) }, 0.0),
        "osem" => (AlgoSpec::Osem { n_sub: n_sub.unwrap_or(4), epochs: epochs.unwrap_or(1) }, 0.0),
        "bsrem" => {
            let mut params: BsremParams = run.bsrem.params;
            if let Some(s) = n_sub {
                params.n_sub = s;
            }
            let lambda = flags.lambda.unwrap_or(params.lambda);
            (AlgoSpec::Bsrem { params, prior: run.bsrem.prior }, lambda)
        }
        other => {
            let method: Method = other.parse().map_err(|e: CoreError| config_err(e))?;
            if !method.uses_measurements() {
                bail!(config_err(anyhow!("{method} does not reconstruct from measurements")));
            }
            let mut cfg = run.sampler_or(method);
            if cfg.method != method {
                cfg = SamplerConfig { method, ..cfg };
            }
            flags.apply(&mut cfg);
            let lambda = cfg.lambda;
            (AlgoSpec::Sampler(cfg), lambda)
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn reconstruct_cmd(
    common: Common,
    flags: SamplerFlags,
    algo: String,
    data: Option<PathBuf>,
    iterations: Option<usize>,
    epochs: Option<usize>,
    guided: bool,
    samples: usize,
    snapshot_every: Option<usize>,
) -> anyhow::Result<()> {
    let flag_doc = json!({
        "common": &common,
        "sampler": &flags,
        "algo": &algo,
        "data": &data,
        "iterations": iterations,
        "epochs": epochs,
        "guided": guided,
        "samples": samples,
        "snapshot_every": snapshot_every,
    });
    let mut run = Run::start("reconstruct", &common, flag_doc)?;
    let (spec, lambda) = algo_spec(&run.cfg, &algo, &flags, iterations, epochs)?;
    spec.validate().map_err(config_err)?;
    if samples == 0 || snapshot_every == Some(0) {
        bail!(config_err(anyhow!("--samples and --snapshot-every must be >= 1")));
    }
    let sc = run.cfg.scenario()?;
    let y = match &data {
        Some(p) => {
            run.input("data", p)?;
            read_measurements(p)?
        }
        None => {
            run.seeds.insert("realization_000".into(), SeedStream::new(run.cfg.seed).derive("realization", 0));
            sc.realization(run.cfg.seed, 0)?
        }
    };
    let prior = if spec.needs_score() { Some(build_prior(&mut run)?) } else { None };
    let cond = guided.then_some(&sc.sample.mr);
    if guided && !matches!(prior, Some(Prior::Conditional(_))) {
        bail!(config_err(anyhow!("--guided needs prior.kind = \"conditional\"")));
    }
    let mut draws = Vec::new();
    for i in 0..samples {
        let base_seed = match &spec {
            AlgoSpec::Sampler(c) => c.seed,
            _ => 0,
        };
        let seed = if samples == 1 { base_seed } else { SeedStream::new(base_seed).derive("posterior", i as u64) };
        let x = match (&spec, snapshot_every) {
            (AlgoSpec::Sampler(cfg), Some(k)) if i == 0 => {
                let cfg = SamplerConfig { lambda, seed, ..cfg.clone() };
                let mut snaps = Vec::new();
                let model = prior.as_ref().map(|p| p.model()).ok_or_else(|| anyhow!("no score model"))?;
                let x = reconstruct(&y, &sc.sm, model, &cfg, cond, &mut |step, xk| {
                    if step % k == 0 {
                        snaps.push((step, xk.clone()));
                    }
                })?;
                for (step, s) in snaps {
                    run.image(&s, &format!("snapshot_{step:04}"))?;
                }
                x
            }
            _ => run_algorithm(&spec, lambda, &y, &sc, prior.as_ref().map(|p| p.model()), cond, seed)?,
        };
        run.seeds.insert(format!("sampler_{i:03}"), seed);
        draws.push(x);
    }
    let x = if samples == 1 {
        draws[0].clone()
    } else {
        let n = samples as f64;
        let mean = draws[0].like((0..draws[0].len()).map(|j| draws.iter().map(|d| d.data()[j]).sum::<f64>() / n).collect());
        let std = mean.like(
            (0..mean.len())
                .map(|j| (draws.iter().map(|d| (d.data()[j] - mean.data()[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
                .collect(),
        );
        run.image(&std, "recon_std")?;
        mean
    };
    run.image(&x, "recon")?;
    let mut rows = vec![("psnr".to_string(), psnr(&x, &sc.truth)?)];
    if x.dims().nx >= 7 && x.dims().ny >= 7 {
        rows.push(("ssim".into(), ssim(&x, &sc.truth)?));
    }
    rows.push(("kldiv".into(), kldiv(&y, &x, &sc.sm)?));
    if sc.sample.lesion_mask.sum() > 0.0 {
        rows.push(("crc".into(), crc(std::slice::from_ref(&x), &sc.truth, &RoiSet::from_sample(&sc.sample)?)?));
    }
    rows.insert(0, ("lambda".into(), lambda));
    let csv = metrics_csv(&rows);
    print!("{csv}");
    run.text("metrics.csv", &format!("algo,{}", csv.replacen('\n', &format!("\n{algo},"), 1)))?;
    if let AlgoSpec::Sampler(c) = spec {
        run.cfg.sampler = Some(SamplerConfig { lambda, ..c });
    }
    run.finish()
}

fn evaluate(common: Common, recon: PathBuf, truth: Option<PathBuf>, data: Option<PathBuf>) -> anyhow::Result<()> {
    let mut run = Run::start("evaluate", &common, json!({"common": &common, "recon": &recon, "truth": &truth, "data": &data}))?;
    run.input("recon", &recon)?;
    let x = read_image(&recon)?;
    let sc = run.cfg.scenario()?;
    let t = match &truth {
        Some(p) => {
            run.input("truth", p)?;
            read_image(p)?
        }
        None => sc.truth.clone(),
    };
    let mut rows = vec![("psnr".to_string(), psnr(&x, &t)?)];
    if x.dims().nx >= 7 && x.dims().ny >= 7 {
        rows.push(("ssim".into(), ssim(&x, &t)?));
    }
    if let Some(p) = &data {
        run.input("data", p)?;
        rows.push(("kldiv".into(), kldiv(&read_measurements(p)?, &x, &sc.sm)?));
    }
    if truth.is_none() && sc.sample.lesion_mask.sum() > 0.0 {
        rows.push(("crc".into(), crc(std::slice::from_ref(&x), &t, &RoiSet::from_sample(&sc.sample)?)?));
    }
    let csv = metrics_csv(&rows);
    print!("{csv}");
    run.text("metrics.csv", &csv)?;
    run.finish()
}

fn sweep(common: Common, realizations: Option<usize>) -> anyhow::Result<()> {
    let mut run = Run::start("sweep", &common, json!({"common": &common, "realizations": realizations}))?;
    let mut spec = run.cfg.sweep.clone().ok_or_else(|| config_err(anyhow!("the configuration has no [sweep] section")))?;
    if let Some(r) = realizations {
        spec.realizations = r;
    }
    spec.validate().map_err(config_err)?;
    run.seeds.insert("sweep".into(), spec.seed);
    let sc = run.cfg.scenario()?;
    let prior = if spec.algos.iter().any(AlgoSpec::needs_score) { Some(build_prior(&mut run)?) } else { None };
    let res = run_sweep(&sc, &spec, prior.as_ref().map(|p| p.model()), None)?;
    for f in &res.failures {
        log::warn!("{} at lambda {} (seed {}) failed: {}", f.algo, f.lambda, f.seed, f.error);
    }
    let files = write_sweep(&res, &run.dir, "sweep")?;
    run.outputs.extend(files);
    run.cfg.sweep = Some(spec);
    run.finish()
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate { common, realizations } => simulate(common, realizations),
        Command::TrainScore { common, steps } => train(common, steps),
        Command::Sample { common, sampler, method, n } => sample_cmd(common, sampler, method, n),
        Command::Reconstruct { common, sampler, algo, data, iterations, epochs, guided, samples, snapshot_every } => {
            reconstruct_cmd(common, sampler, algo, data, iterations, epochs, guided, samples, snapshot_every)
        }
        Command::Evaluate { common, recon, truth, data } => evaluate(common, recon, truth, data),
        Command::Sweep { common, realizations } => sweep(common, realizations),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
