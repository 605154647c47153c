//! Image-quality and data-consistency metrics.

use log::warn;

use crate::error::{Error, Result};
use crate::image::{ImageGrid, Measurements};
use crate::phantom::PairedSample;
use crate::projector::SystemModel;

pub const PSNR_CAP: f64 = 200.0;
pub const SSIM_WINDOW: usize = 7;

/// Lesion and background regions of interest, as voxel index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSet {
    pub lesion: Vec<usize>,
    pub background: Vec<usize>,
    pub support: Vec<usize>,
}

fn indices(mask: &ImageGrid) -> Vec<usize> {
    mask.data().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(j, _)| j).collect()
}

impl RoiSet {
    pub fn new(lesion: Vec<usize>, background: Vec<usize>, support: Vec<usize>) -> Result<Self> {
        if lesion.is_empty() || background.is_empty() {
            return Err(Error::InvalidValue("lesion and background ROIs need at least one voxel".into()));
        }
        if lesion.iter().any(|j| background.contains(j)) {
            return Err(Error::InvalidValue("lesion and background ROIs overlap".into()));
        }
        Ok(Self { lesion, background, support })
    }

    pub fn from_sample(s: &PairedSample) -> Result<Self> {
        Self::new(indices(&s.lesion_mask), indices(&s.background_mask), indices(&s.head_mask))
    }

    /// Background-only ROIs for lesion-free phantoms.
    pub fn background_of(s: &PairedSample) -> Vec<usize> {
        indices(&s.background_mask)
    }
}

fn mean_over(x: &ImageGrid, idx: &[usize]) -> f64 {
    idx.iter().map(|&j| x.data()[j]).sum::<f64>() / idx.len() as f64
}

fn peak_of(truth: &ImageGrid) -> Result<f64> {
    let peak = truth.max();
    if !(peak > 0.0) || truth.max() == truth.min() {
        return Err(Error::Degenerate("ground truth has zero dynamic range".into()));
    }
    Ok(peak)
}

/// Peak signal-to-noise ratio with peak `max(truth)`, capped at 200 dB.
pub fn psnr(x: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
    x.check_same_dims(truth)?;
    let peak = peak_of(truth)?;
    let mse = x.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Structural similarity with a uniform 7x7 window over every fully
/// contained window of every axial slice, unbiased local (co)variances and
/// the usual constants `K1 = 0.01`, `K2 = 0.03` on the range `max(truth)`.
pub fn ssim(x: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
    x.check_same_dims(truth)?;
    let range = peak_of(truth)?;
    let d = x.dims();
    let w = SSIM_WINDOW;
    if d.nx < w || d.ny < w {
        return Err(Error::Shape(format!("SSIM needs slices of at least {w}x{w}, got {}x{}", d.nx, d.ny)));
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let np = (w * w) as f64;
    let cov_norm = np / (np - 1.0);
    let (mut total, mut count) = (0.0, 0usize);
    for z in 0..d.nz {
        for y0 in 0..=d.ny - w {
            for x0 in 0..=d.nx - w {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + w {
                    for xx in x0..x0 + w {
                        let j = d.index(xx, y, z);
                        let (a, b) = (x.data()[j], truth.data()[j]);
                        sa += a;
                        sb += b;
                        saa += a * a;
                        sbb += b * b;
                        sab += a * b;
                    }
                }
                let (ma, mb) = (sa / np, sb / np);
                let va = cov_norm * (saa / np - ma * ma);
                let vb = cov_norm * (sbb / np - mb * mb);
                let cab = cov_norm * (sab / np - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Contrast recovery coefficient averaged over realizations.
pub fn crc(recons: &[ImageGrid], truth: &ImageGrid, rois: &RoiSet) -> Result<f64> {
    if recons.is_empty() {
        return Err(Error::InvalidValue("CRC needs at least one reconstruction".into()));
    }
    let truth_ratio = mean_over(truth, &rois.lesion) / mean_over(truth, &rois.background);
    if !(truth_ratio - 1.0).is_normal() {
        return Err(Error::Degenerate("ground-truth lesion contrast is 1".into()));
    }
    let mut total = 0.0;
    for r in recons {
        r.check_same_dims(truth)?;
        total += mean_over(r, &rois.lesion) / mean_over(r, &rois.background) - 1.0;
    }
    Ok(total / recons.len() as f64 / (truth_ratio - 1.0))
}

/// Ensemble noise over background voxels:
/// `(1/N_B) Σ_k sqrt( Σ_r (B_rk − B̄_k)² / ((R − 1) B̄_k) )`.
/// Voxels with zero ensemble mean are skipped.
pub fn ensemble_std(recons: &[ImageGrid], background: &[usize]) -> Result<f64> {
    let r = recons.len();
    if r < 2 {
        return Err(Error::InvalidValue("ensemble STD needs at least two realizations".into()));
    }
    for x in &recons[1..] {
        recons[0].check_same_dims(x)?;
    }
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for &k in background {
        let mean = recons.iter().map(|x| x.data()[k]).sum::<f64>() / r as f64;
        if mean == 0.0 {
            skipped += 1;
            continue;
        }
        let ss: f64 = recons.iter().map(|x| (x.data()[k] - mean).powi(2)).sum();
        total += (ss / ((r - 1) as f64 * mean)).sqrt();
        used += 1;
    }
    if skipped > 0 {
        warn!("ensemble STD skipped {skipped} background voxels with zero mean");
    }
    if used == 0 {
        return Err(Error::Degenerate("no background voxel with nonzero mean".into()));
    }
    Ok(total / used as f64)
}

/// Mean of `|x(z+1) − x(z)|` over all axially adjacent voxel pairs.
pub fn mean_abs_z_gradient(x: &ImageGrid) -> Result<f64> {
    let d = x.dims();
    if d.nz < 2 {
        return Err(Error::Shape("z-gradient needs at least two slices".into()));
    }
    let n = d.slice_len();
    let v = x.data();
    let total: f64 = (0..v.len() - n).map(|k| (v[k + n] - v[k]).abs()).sum();
    Ok(total / (v.len() - n) as f64)
}

/// Generalized Kullback-Leibler divergence between `ȳ = A x + b̄` and the
/// data, `Σ ȳ log(ȳ/y) − ȳ + y`; bins with `y = 0` contribute `ȳ`.
pub fn kldiv_of_expected(y: &Measurements, ybar: &Measurements) -> Result<f64> {
    if y.layout() != ybar.layout() {
        return Err(Error::Shape("measurement layouts differ".into()));
    }
    Ok(y.bins()
        .iter()
        .zip(ybar.bins())
        .map(|(&yi, &bi)| {
            if yi == 0.0 {
                bi
            } else if bi == 0.0 {
                yi
            } else {
                bi * (bi / yi).ln() - bi + yi
            }
        })
        .sum())
}

pub fn kldiv(y: &Measurements, x: &ImageGrid, sm: &SystemModel) -> Result<f64> {
    x.check_tracer()?;
    kldiv_of_expected(y, &sm.expected(x)?)
}
