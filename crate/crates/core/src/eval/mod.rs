//! Quality metrics, temporal profiles, dataset evaluation and the attention
//! scaling benchmark.

mod bench;
mod report;

pub use bench::{attention_benchmark, bench_csv, growth_factor, BenchCell, BenchConfig};
pub use report::{difference_image, evaluate, evaluate_clip, ClipRow, EvalOptions, EvalReport, Restorer, DIFF_GAIN};

use serde::{Deserialize, Serialize};

use crate::degrade::Image;
use crate::error::{Error, Result};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(&[a.height(), a.width(), 3], &[b.height(), b.width(), 3]));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(se / a.data().len().max(1) as f64)
}

/// PSNR from a mean squared error, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - c;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable valid-region filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(i, t)| t * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(i, t)| t * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let aa = filter_valid(&prod(a, a), h, w, taps);
    let bb = filter_valid(&prod(b, b), h, w, taps);
    let ab = filter_valid(&prod(a, b), h, w, taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over the valid region,
/// peak 1, averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps();
    let plane = |img: &Image, ch: usize| img.data().iter().skip(ch).step_by(3).map(|&v| v as f64).collect::<Vec<_>>();
    let sum: f64 = (0..3).map(|ch| ssim_plane(&plane(a, ch), &plane(b, ch), h, w, &taps)).sum();
    Ok(sum / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileAxis {
    /// A fixed row from every frame: `T×W×3`.
    Horizontal,
    /// A fixed column from every frame: `T×H×3`.
    Vertical,
}

impl ProfileAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "horizontal" | "h" | "row" => Ok(ProfileAxis::Horizontal),
            "vertical" | "v" | "column" | "col" => Ok(ProfileAxis::Vertical),
            other => Err(Error::Config(format!("unknown profile axis '{other}'"))),
        }
    }
}

/// Stacks one line of pixels from each frame, frame `t` becoming row `t`.
pub fn temporal_profile(frames: &[Image], axis: ProfileAxis, index: usize) -> Result<Image> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Dimension("profile of an empty clip".into()))?;
    let (h, w) = (first.height(), first.width());
    if frames.iter().any(|f| (f.height(), f.width()) != (h, w)) {
        return Err(Error::Dimension("frames differ in size".into()));
    }
    let limit = match axis {
        ProfileAxis::Horizontal => h,
        ProfileAxis::Vertical => w,
    };
    if index >= limit {
        return Err(Error::Index { index, len: limit });
    }
    Ok(match axis {
        ProfileAxis::Horizontal => Image::from_fn(frames.len(), w, |t, c, ch| frames[t].get(index, c, ch)),
        ProfileAxis::Vertical => Image::from_fn(frames.len(), h, |t, r, ch| frames[t].get(r, index, ch)),
    })
}
