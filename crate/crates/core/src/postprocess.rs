//! Fully connected CRF refinement of label maps against rendered RGB and depth.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub theta_gamma: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilateralKernel {
    pub theta_gamma: f64,
    pub theta_beta: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfConfig {
    pub gaussian: GaussianKernel,
    pub bilateral_rgb: BilateralKernel,
    pub bilateral_depth: BilateralKernel,
    pub n_iterations: usize,
    pub unary_confidence: f64,
    /// Pixel pairs farther apart than this are ignored. `None` keeps every pair.
    pub truncate_radius: Option<f64>,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            gaussian: GaussianKernel {
                theta_gamma: 3.0,
                weight: 15.0,
            },
            bilateral_rgb: BilateralKernel {
                theta_gamma: 40.0,
                theta_beta: 13.0,
                weight: 10.0,
            },
            bilateral_depth: BilateralKernel {
                theta_gamma: 40.0,
                theta_beta: 13.0,
                weight: 20.0,
            },
            n_iterations: 10,
            unary_confidence: 0.9,
            truncate_radius: None,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.gaussian;
        let (r, d) = (self.bilateral_rgb, self.bilateral_depth);
        let thetas = [g.theta_gamma, r.theta_gamma, r.theta_beta, d.theta_gamma, d.theta_beta];
        if thetas.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("crf: kernel widths must be positive".into()));
        }
        if [g.weight, r.weight, d.weight].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("crf: kernel weights must be non-negative".into()));
        }
        if !(self.unary_confidence > 0.0 && self.unary_confidence <= 1.0) {
            return Err(Error::Config("crf: unary_confidence must lie in (0, 1]".into()));
        }
        if self.truncate_radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("crf: truncate_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel label distribution `(H, W, k)`: the given label gets `confidence`,
/// the rest share the remainder evenly.
pub fn build_unary(labels: ArrayView2<usize>, k: usize, confidence: f64) -> Result<Array3<f64>> {
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!("label {l} out of range for {k} labels")));
    }
    let (h, w) = labels.dim();
    let rest = if k > 1 { (1.0 - confidence) / (k - 1) as f64 } else { 0.0 };
    Ok(Array3::from_shape_fn((h, w, k), |(y, x, l)| {
        if labels[[y, x]] == l {
            if k > 1 {
                confidence
            } else {
                1.0
            }
        } else {
            rest
        }
    }))
}

const DENSE_LIMIT: usize = 4096;

struct Pixels {
    width: usize,
    rgb: Vec<[f64; 3]>,
    depth: Vec<f64>,
}

impl Pixels {
    fn pos(&self, i: usize) -> (f64, f64) {
        ((i / self.width) as f64, (i % self.width) as f64)
    }

    /// Unnormalized (gaussian, rgb, depth) kernel values between two pixels.
    fn kernels(&self, cfg: &CrfConfig, i: usize, j: usize) -> Option<[f64; 3]> {
        let (yi, xi) = self.pos(i);
        let (yj, xj) = self.pos(j);
        let p2 = (yi - yj).powi(2) + (xi - xj).powi(2);
        if cfg.truncate_radius.is_some_and(|r| p2 > r * r) {
            return None;
        }
        let (g, r, d) = (cfg.gaussian, cfg.bilateral_rgb, cfg.bilateral_depth);
        let c2: f64 = (0..3).map(|c| (self.rgb[i][c] - self.rgb[j][c]).powi(2)).sum();
        let d2 = (self.depth[i] - self.depth[j]).powi(2);
        Some([
            (-p2 / (2.0 * g.theta_gamma * g.theta_gamma)).exp(),
            (-p2 / (2.0 * r.theta_gamma * r.theta_gamma) - c2 / (2.0 * r.theta_beta * r.theta_beta)).exp(),
            (-p2 / (2.0 * d.theta_gamma * d.theta_gamma) - d2 / (2.0 * d.theta_beta * d.theta_beta)).exp(),
        ])
    }
}

/// Combined pairwise weight `Σ_m w_m k_m(i, j) / sqrt(n_m(i) n_m(j))`, where
/// `n_m(i) = Σ_{j≠i} k_m(i, j)` normalizes each kernel symmetrically.
struct Pairwise<'a> {
    px: &'a Pixels,
    cfg: &'a CrfConfig,
    inv_sqrt_norm: Vec<[f64; 3]>,
    dense: Option<Vec<f32>>,
}

impl<'a> Pairwise<'a> {
    fn new(px: &'a Pixels, cfg: &'a CrfConfig) -> Self {
        let m = px.depth.len();
        let mut norm = vec![[0.0; 3]; m];
        for i in 0..m {
            for j in i + 1..m {
                if let Some(k) = px.kernels(cfg, i, j) {
                    for c in 0..3 {
                        norm[i][c] += k[c];
                        norm[j][c] += k[c];
                    }
                }
            }
        }
        let inv_sqrt_norm = norm
            .iter()
            .map(|n| n.map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }))
            .collect();
        let mut pw = Pairwise {
            px,
            cfg,
            inv_sqrt_norm,
            dense: None,
        };
        if m <= DENSE_LIMIT {
            let mut dense = vec![0.0f32; m * m];
            for i in 0..m {
                for j in i + 1..m {
                    let v = pw.weight(i, j) as f32;
                    dense[i * m + j] = v;
                    dense[j * m + i] = v;
                }
            }
            pw.dense = Some(dense);
        }
        pw
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        let Some(k) = self.px.kernels(self.cfg, i, j) else {
            return 0.0;
        };
        let w = [self.cfg.gaussian.weight, self.cfg.bilateral_rgb.weight, self.cfg.bilateral_depth.weight];
        (0..3)
            .map(|c| w[c] * k[c] * self.inv_sqrt_norm[i][c] * self.inv_sqrt_norm[j][c])
            .sum()
    }

    /// `out[i][l] = Σ_{j≠i} K(i, j) q[j][l]`.
    fn message(&self, q: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let m = q.len();
        let k = q[0].len();
        let mut out = vec![vec![0.0; k]; m];
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let w = match &self.dense {
                    Some(d) => d[i * m + j] as f64,
                    None => self.weight(i, j),
                };
                if w != 0.0 {
                    for l in 0..k {
                        out[i][l] += w * q[j][l];
                    }
                }
            }
        }
        out
    }
}

fn softmax_neg(energy: &[f64]) -> Vec<f64> {
    let min = energy.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = energy.iter().map(|v| (-(v - min)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean-field inference with Potts compatibility. `rgb` is in [0, 1]; both
/// `rgb` and `depth` are rescaled to [0, 255] before the kernels are evaluated
/// (depth by its min-max range). Returns the refined labels, drawn from the
/// labels present in the input.
pub fn crf_refine(labels: ArrayView2<usize>, rgb: ArrayView3<f64>, depth: ArrayView2<f64>, cfg: &CrfConfig) -> Result<Array2<usize>> {
    cfg.validate()?;
    let (h, w) = labels.dim();
    if rgb.dim() != (h, w, 3) || depth.dim() != (h, w) {
        return Err(Error::Validation(format!(
            "crf inputs misaligned: labels {:?}, rgb {:?}, depth {:?}",
            labels.dim(),
            rgb.dim(),
            depth.dim()
        )));
    }
    if rgb.iter().chain(depth.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("crf guidance images".into()));
    }
    let mut present: Vec<usize> = labels.iter().copied().collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Ok(labels.to_owned());
    }
    let compact = labels.mapv(|l| present.binary_search(&l).expect("present label"));
    let k = present.len();
    let unary = build_unary(compact.view(), k, cfg.unary_confidence)?;
    let (dmin, dmax) = depth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let dscale = if dmax > dmin { 255.0 / (dmax - dmin) } else { 0.0 };
    let m = h * w;
    let px = Pixels {
        width: w,
        rgb: (0..m).map(|i| [0, 1, 2].map(|c| 255.0 * rgb[[i / w, i % w, c]])).collect(),
        depth: (0..m).map(|i| (depth[[i / w, i % w]] - dmin) * dscale).collect(),
    };
    let neg_log_unary: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..k).map(|l| -unary[[i / w, i % w, l]].max(1e-12).ln()).collect())
        .collect();
    let pair = Pairwise::new(&px, cfg);
    let mut q: Vec<Vec<f64>> = neg_log_unary.iter().map(|u| softmax_neg(u)).collect();
    for _ in 0..cfg.n_iterations {
        let msg = pair.message(&q);
        q = neg_log_unary
            .iter()
            .zip(&msg)
            .map(|(u, mg)| {
                let energy: Vec<f64> = u.iter().zip(mg).map(|(u, mg)| u - mg).collect();
                softmax_neg(&energy)
            })
            .collect();
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| present[argmax(&q[y * w + x])]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_are_the_published_constants() {
        let c = CrfConfig::default();
        assert_eq!((c.gaussian.theta_gamma, c.gaussian.weight), (3.0, 15.0));
        assert_eq!((c.bilateral_rgb.theta_gamma, c.bilateral_rgb.theta_beta, c.bilateral_rgb.weight), (40.0, 13.0, 10.0));
        assert_eq!(
            (c.bilateral_depth.theta_gamma, c.bilateral_depth.theta_beta, c.bilateral_depth.weight),
            (40.0, 13.0, 20.0)
        );
    }

    #[test]
    fn unary_distributions() {
        let l = ndarray::array![[0usize, 1]];
        let u = build_unary(l.view(), 2, 0.9).unwrap();
        assert_eq!(u[[0, 0, 0]], 0.9);
        assert!((u[[0, 0, 1]] - 0.1).abs() < 1e-15);
        let u = build_unary(l.view(), 3, 1.0).unwrap();
        assert_eq!(u.slice(ndarray::s![0, 1, ..]).to_vec(), vec![0.0, 1.0, 0.0]);
        let u = build_unary(l.view(), 4, 0.7).unwrap();
        for y in 0..2 {
            assert!((u.slice(ndarray::s![0, y, ..]).sum() - 1.0).abs() < 1e-12);
        }
        assert!(build_unary(l.view(), 1, 0.9).is_err());
    }

    #[test]
    fn clean_labels_on_uniform_images_are_kept() {
        let labels = Array2::from_shape_fn((16, 16), |(_, x)| (x >= 8) as usize);
        let rgb = Array3::from_elem((16, 16, 3), 0.4);
        let depth = Array2::from_elem((16, 16), 2.0);
        let out = crf_refine(labels.view(), rgb.view(), depth.view(), &CrfConfig::default()).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn single_label_is_returned_unchanged() {
        let labels = Array2::from_elem((4, 4), 3usize);
        let rgb = Array3::from_shape_fn((4, 4, 3), |(y, _, _)| y as f64 / 4.0);
        let out = crf_refine(labels.view(), rgb.view(), Array2::zeros((4, 4)).view(), &CrfConfig::default()).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn zero_pairwise_weights_return_the_unary_argmax() {
        let mut cfg = CrfConfig::default();
        cfg.gaussian.weight = 0.0;
        cfg.bilateral_rgb.weight = 0.0;
        cfg.bilateral_depth.weight = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = Array2::from_shape_fn((8, 8), |_| [2usize, 5, 7][rng.random_range(0..3)]);
        let rgb = Array3::from_shape_fn((8, 8, 3), |_| rng.random::<f64>());
        let depth = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let out = crf_refine(labels.view(), rgb.view(), depth.view(), &cfg).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let labels = Array2::<usize>::zeros((4, 4));
        let r = crf_refine(labels.view(), Array3::zeros((4, 5, 3)).view(), Array2::zeros((4, 4)).view(), &CrfConfig::default());
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    fn two_region_scene(n: usize, edge: usize) -> (Array3<f64>, Array2<f64>) {
        let rgb = Array3::from_shape_fn((n, n, 3), |(_, x, c)| if x < edge { [0.1, 0.2, 0.3][c] } else { [0.9, 0.7, 0.6][c] });
        let depth = Array2::from_shape_fn((n, n), |(_, x)| if x < edge { 2.0 } else { 5.0 });
        (rgb, depth)
    }

    #[test]
    fn salt_and_pepper_noise_is_removed() {
        let n = 40;
        let (rgb, depth) = two_region_scene(n, 20);
        let clean = Array2::from_shape_fn((n, n), |(_, x)| (x >= 20) as usize);
        let mut noisy = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut flipped = Vec::new();
        while flipped.len() < n * n / 100 {
            let (y, x) = (rng.random_range(0..n), rng.random_range(0..n));
            if !flipped.contains(&(y, x)) {
                noisy[[y, x]] = 1 - noisy[[y, x]];
                flipped.push((y, x));
            }
        }
        let out = crf_refine(noisy.view(), rgb.view(), depth.view(), &CrfConfig::default()).unwrap();
        let restored = flipped.iter().filter(|&&p| out[p] == clean[p]).count();
        assert!(restored as f64 >= 0.99 * flipped.len() as f64, "{restored}/{}", flipped.len());
        assert_eq!(out, clean);
    }

    #[test]
    fn boundary_snaps_to_the_image_edge() {
        let n = 32;
        let (rgb, depth) = two_region_scene(n, 16);
        for offset in [-2i64, 2] {
            let start = (16 + offset) as usize;
            let labels = Array2::from_shape_fn((n, n), |(_, x)| (x >= start) as usize);
            let out = crf_refine(labels.view(), rgb.view(), depth.view(), &CrfConfig::default()).unwrap();
            for y in 0..n {
                let first = (0..n).find(|&x| out[[y, x]] == 1).unwrap();
                assert!((first as i64 - 16).abs() <= 1, "row {y}: boundary at {first}");
            }
        }
    }
}
