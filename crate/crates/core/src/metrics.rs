//! Segmentation and image quality metrics.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

fn pairs(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index of two labelings of the same elements.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!("label lists differ in length ({} vs {})", a.len(), b.len())));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let sa: f64 = rows.values().map(|&n| pairs(n)).sum();
    let sb: f64 = cols.values().map(|&n| pairs(n)).sum();
    let total = pairs(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

pub fn ari_maps(a: ArrayView2<usize>, b: ArrayView2<usize>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!("label maps differ in shape ({:?} vs {:?})", a.dim(), b.dim())));
    }
    ari(&a.iter().copied().collect::<Vec<_>>(), &b.iter().copied().collect::<Vec<_>>())
}

/// Jaccard index; two empty masks score 1.
pub fn iou(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!("masks differ in shape ({:?} vs {:?})", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// PSNR for images in [0, 1], capped at `PSNR_CAP`.
pub fn psnr(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(Error::Validation(format!("images differ in shape or are empty ({:?} vs {:?})", a.dim(), b.dim())));
    }
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let tmp: Array2<f64> = Array2::from_shape_fn((h, w + 1 - n), |(y, x)| (0..n).map(|i| k[i] * img[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(y, x)| (0..n).map(|i| k[i] * tmp[[y + i, x]]).sum())
}

fn ssim_channel(a: &Array2<f64>, b: &Array2<f64>, k: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mu_a = filter_valid(a, k);
    let mu_b = filter_valid(b, k);
    let aa = filter_valid(&(a * a), k);
    let bb = filter_valid(&(b * b), k);
    let ab = filter_valid(&(a * b), k);
    let mut total = 0.0;
    for idx in 0..mu_a.len() {
        let (y, x) = (idx / mu_a.ncols(), idx % mu_a.ncols());
        let (ma, mb) = (mu_a[[y, x]], mu_b[[y, x]]);
        let va = aa[[y, x]] - ma * ma;
        let vb = bb[[y, x]] - mb * mb;
        let cov = ab[[y, x]] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Single-scale SSIM with an 11x11 Gaussian window (σ = 1.5), dynamic range 1,
/// averaged over valid window positions and channels.
pub fn ssim(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    let (h, w, c) = a.dim();
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!("images differ in shape ({:?} vs {:?})", a.dim(), b.dim())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW || c == 0 {
        return Err(Error::Validation(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let pa = a.index_axis(Axis(2), ch).to_owned();
        let pb = b.index_axis(Axis(2), ch).to_owned();
        total += ssim_channel(&pa, &pb, &k);
    }
    Ok(total / c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub name: String,
    pub ari: Option<f64>,
    pub iou: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub ari: Option<f64>,
    pub iou: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub frames: Vec<FrameReport>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl SplitReport {
    pub fn from_frames(frames: Vec<FrameReport>) -> Self {
        SplitReport {
            ari: mean(frames.iter().map(|f| f.ari)),
            iou: mean(frames.iter().map(|f| f.iou)),
            psnr: mean(frames.iter().map(|f| f.psnr)),
            ssim: mean(frames.iter().map(|f| f.ssim)),
            frames,
        }
    }
}

/// Metrics per data split (for example input views, fixed camera, fixed time).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: BTreeMap<String, SplitReport>,
}

impl EvalReport {
    pub fn summary_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        let mut out = format!("{:<12} {:>7} {:>7} {:>7} {:>7} {:>6}\n", "split", "ARI", "IoU", "PSNR", "SSIM", "frames");
        for (name, s) in &self.splits {
            out.push_str(&format!(
                "{:<12} {:>7} {:>7} {:>7} {:>7} {:>6}\n",
                name,
                fmt(s.ari),
                fmt(s.iou),
                fmt(s.psnr),
                fmt(s.ssim),
                s.frames.len()
            ));
        }
        out
    }
}
