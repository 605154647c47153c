//! Multi-realization sensitivity sweeps over algorithms and penalty
//! strengths, with CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, Measurements};
use crate::metrics::{crc, ensemble_std, kldiv, psnr, ssim, RoiSet};
use crate::projector::partition_subsets;
use crate::recon::{bsrem, constant_init, mlem, osem, BsremParams, RdpParams};
use crate::rng::SeedStream;
use crate::sampler::{reconstruct, SamplerConfig};
use crate::scenario::Scenario;
use crate::score::ScoreModel;

fn default_iterations() -> usize {
    200
}

/// One reconstruction algorithm; the sweep's λ replaces the algorithm's
/// own penalty (RDP weight for BSREM, `lambda` for samplers) and is
/// ignored by MLEM and OSEM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "kebab-case")]
pub enum AlgoSpec {
    Mlem {
        #[serde(default = "default_iterations")]
        iterations: usize,
    },
    Osem {
        n_sub: usize,
        epochs: usize,
    },
    Bsrem {
        #[serde(default)]
        params: BsremParams,
        #[serde(default)]
        prior: RdpParams,
    },
    Sampler(SamplerConfig),
}

impl AlgoSpec {
    pub fn name(&self) -> String {
        match self {
            AlgoSpec::Mlem { .. } => "mlem".into(),
            AlgoSpec::Osem { .. } => "osem".into(),
            AlgoSpec::Bsrem { .. } => "bsrem".into(),
            AlgoSpec::Sampler(c) => c.method.name().into(),
        }
    }

    pub fn needs_score(&self) -> bool {
        matches!(self, AlgoSpec::Sampler(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AlgoSpec::Mlem { iterations } if *iterations == 0 => Err(Error::Config("MLEM needs iterations >= 1".into())),
            AlgoSpec::Osem { n_sub, epochs } if *n_sub == 0 || *epochs == 0 => {
                Err(Error::Config("OSEM needs n_sub >= 1 and epochs >= 1".into()))
            }
            AlgoSpec::Bsrem { params, prior } => {
                params.validate()?;
                prior.validate()
            }
            AlgoSpec::Sampler(c) => {
                if !c.method.uses_measurements() {
                    return Err(Error::Config(format!("{} does not reconstruct from measurements", c.method)));
                }
                c.validate()
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub algos: Vec<AlgoSpec>,
    pub lambdas: Vec<f64>,
    pub realizations: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.algos.is_empty() || self.lambdas.is_empty() || self.realizations == 0 {
            return Err(Error::Config("sweep needs at least one algorithm, lambda and realization".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("sweep lambda {l} must be >= 0")));
        }
        self.algos.iter().try_for_each(AlgoSpec::validate)
    }
}

/// Reconstructs one realization with `algo` at penalty `lambda`.
pub fn run_algorithm(
    algo: &AlgoSpec,
    lambda: f64,
    y: &Measurements,
    sc: &Scenario,
    model: Option<&dyn ScoreModel>,
    cond: Option<&ImageGrid>,
    sampler_seed: u64,
) -> Result<ImageGrid> {
    let sm = &sc.sm;
    match algo {
        AlgoSpec::Mlem { iterations } => mlem(y, sm, &constant_init(y, sm)?, *iterations),
        AlgoSpec::Osem { n_sub, epochs } => osem(y, sm, &partition_subsets(sm, *n_sub)?, &constant_init(y, sm)?, *epochs),
        AlgoSpec::Bsrem { params, prior } => {
            let p = BsremParams { lambda, ..*params };
            Ok(bsrem(y, sm, prior, &p, None)?.image)
        }
        AlgoSpec::Sampler(cfg) => {
            let model = model.ok_or_else(|| Error::Config(format!("{} needs a score model", cfg.method)))?;
            let cfg = SamplerConfig { lambda, seed: sampler_seed, ..cfg.clone() };
            reconstruct(y, sm, model, &cfg, cond, &mut |_, _| {})
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub algo: String,
    pub lambda: f64,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    /// Absent without lesions.
    pub crc: Option<f64>,
    pub kldiv: f64,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAggregate {
    pub group: usize,
    pub algo: String,
    pub lambda: f64,
    pub n: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub crc: Option<f64>,
    pub kldiv: f64,
    /// Ensemble STD over background voxels; needs two successful cells.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub algo: String,
    pub lambda: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    pub aggregates: Vec<SweepAggregate>,
    pub failures: Vec<SweepFailure>,
}

impl SweepResult {
    pub fn aggregate(&self, algo: &str, lambda: f64) -> Option<&SweepAggregate> {
        self.aggregates.iter().find(|a| a.algo == algo && a.lambda == lambda)
    }
}

/// Cross product of algorithms, penalties and realizations. Cells run
/// concurrently; records keep the grid order. Failing cells are recorded
/// and left out of the aggregates.
pub fn run_sweep(
    sc: &Scenario,
    spec: &SweepSpec,
    model: Option<&dyn ScoreModel>,
    cond: Option<&ImageGrid>,
) -> Result<SweepResult> {
    spec.validate()?;
    let stream = SeedStream::new(spec.seed);
    let seeds: Vec<u64> = (0..spec.realizations).map(|r| stream.derive("realization", r as u64)).collect();
    let ys = seeds
        .iter()
        .map(|&s| crate::projector::simulate_measurements(&sc.sm, &sc.truth, s))
        .collect::<Result<Vec<_>>>()?;
    let rois = if sc.sample.lesion_mask.sum() > 0.0 { Some(RoiSet::from_sample(&sc.sample)?) } else { None };
    let background = RoiSet::background_of(&sc.sample);

    let mut cells = Vec::new();
    for algo in &spec.algos {
        for &lambda in &spec.lambdas {
            for r in 0..spec.realizations {
                cells.push((algo, lambda, r));
            }
        }
    }
    let outputs: Vec<Result<ImageGrid>> = cells
        .par_iter()
        .map(|&(algo, lambda, r)| {
            let x = run_algorithm(algo, lambda, &ys[r], sc, model, cond, stream.derive("sampler", r as u64))?;
            x.check_tracer()?;
            Ok(x)
        })
        .collect();

    let mut result = SweepResult::default();
    let per_group = spec.realizations;
    for (g, chunk) in outputs.chunks(per_group).enumerate() {
        let (algo, lambda, _) = cells[g * per_group];
        let name = algo.name();
        let mut ok = Vec::new();
        let mut rows = Vec::new();
        for (r, out) in chunk.iter().enumerate() {
            let scored = out.as_ref().map_err(|e| e.to_string()).and_then(|x| {
                let rec = SweepRecord {
                    algo: name.clone(),
                    lambda,
                    seed: seeds[r],
                    psnr: psnr(x, &sc.truth).map_err(|e| e.to_string())?,
                    ssim: ssim(x, &sc.truth).map_err(|e| e.to_string())?,
                    crc: match &rois {
                        Some(ro) => Some(crc(std::slice::from_ref(x), &sc.truth, ro).map_err(|e| e.to_string())?),
                        None => None,
                    },
                    kldiv: kldiv(&ys[r], x, &sc.sm).map_err(|e| e.to_string())?,
                    group: g,
                };
                Ok((rec, x.clone()))
            });
            match scored {
                Ok((rec, x)) => {
                    rows.push(rec);
                    ok.push(x);
                }
                Err(error) => {
                    warn!("sweep cell {name} lambda={lambda} seed={} failed: {error}", seeds[r]);
                    result.failures.push(SweepFailure { algo: name.clone(), lambda, seed: seeds[r], error });
                }
            }
        }
        if !rows.is_empty() {
            let n = rows.len() as f64;
            let mean = |f: fn(&SweepRecord) -> f64| rows.iter().map(f).sum::<f64>() / n;
            result.aggregates.push(SweepAggregate {
                group: g,
                algo: name.clone(),
                lambda,
                n: rows.len(),
                psnr: mean(|r| r.psnr),
                ssim: mean(|r| r.ssim),
                crc: match &rois {
                    Some(ro) => Some(crc(&ok, &sc.truth, ro)?),
                    None => None,
                },
                kldiv: mean(|r| r.kldiv),
                std: if ok.len() >= 2 { Some(ensemble_std(&ok, &background)?) } else { None },
            });
        }
        result.records.extend(rows);
    }
    Ok(result)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn records_csv(res: &SweepResult) -> String {
    let mut s = String::from("algo,lambda,seed,psnr,ssim,crc,kldiv,std_group_id\n");
    for r in &res.records {
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.algo, r.lambda, r.seed, r.psnr, r.ssim, opt(r.crc), r.kldiv, r.group);
    }
    s
}

pub fn aggregate_csv(res: &SweepResult) -> String {
    let mut s = String::from("std_group_id,algo,lambda,n,psnr,ssim,crc,kldiv,std\n");
    for a in &res.aggregates {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            a.group,
            a.algo,
            a.lambda,
            a.n,
            a.psnr,
            a.ssim,
            opt(a.crc),
            a.kldiv,
            opt(a.std)
        );
    }
    s
}

pub fn failures_csv(res: &SweepResult) -> String {
    let mut s = String::from("algo,lambda,seed,error\n");
    for f in &res.failures {
        let _ = writeln!(s, "{},{},{},\"{}\"", f.algo, f.lambda, f.seed, f.error.replace('"', "'"));
    }
    s
}

/// Writes `<stem>.csv`, `<stem>.aggregate.csv` and, when cells failed,
/// `<stem>.failures.csv`; returns the written paths.
pub fn write_sweep(res: &SweepResult, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![(dir.join(format!("{stem}.csv")), records_csv(res))];
    files.push((dir.join(format!("{stem}.aggregate.csv")), aggregate_csv(res)));
    if !res.failures.is_empty() {
        files.push((dir.join(format!("{stem}.failures.csv")), failures_csv(res)));
    }
    for (p, text) in &files {
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
