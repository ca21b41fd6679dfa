//! Semantic attention pyramid: per-pixel feature and attention targets fused
//! from sliding-window extractor outputs at several scales, with per-level
//! loss weights that favour the coarse level near the frame boundary.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scene_io::{SceneDataset, WindowMap};
use crate::tensor_io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub n_levels: usize,
    /// Extractor window `(width, height)` at the coarsest level.
    pub window_size: (usize, usize),
    pub window_stride: usize,
    /// Coarse to fine.
    pub interior_weights: Vec<f64>,
    pub boundary_weights: Vec<f64>,
    /// Width of the boundary ramp in output pixels; `None` uses `window_stride`.
    pub margin: Option<usize>,
    pub pca_dims: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            n_levels: 3,
            window_size: (240, 128),
            window_stride: 64,
            interior_weights: vec![1.0 / 9.0, 4.0 / 9.0, 4.0 / 9.0],
            boundary_weights: vec![1.0 / 3.0; 3],
            margin: None,
            pca_dims: 64,
        }
    }
}

impl PyramidConfig {
    /// A single level with unit weight.
    pub fn single_level(pca_dims: usize) -> Self {
        PyramidConfig {
            n_levels: 1,
            interior_weights: vec![1.0],
            boundary_weights: vec![1.0],
            pca_dims,
            ..Default::default()
        }
    }

    pub fn margin(&self) -> usize {
        self.margin.unwrap_or(self.window_stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if self.pca_dims == 0 {
            return Err(Error::Config("pca_dims must be positive".into()));
        }
        for (name, w) in [("interior", &self.interior_weights), ("boundary", &self.boundary_weights)] {
            if w.len() != self.n_levels {
                return Err(Error::Config(format!(
                    "{name} weights have {} entries for {} levels",
                    w.len(),
                    self.n_levels
                )));
            }
            if w.iter().any(|&v| !(v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} weights must be non-negative and sum to 1")));
            }
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    if h == 0 || w == 0 {
        return out;
    }
    let axis = |i: usize, n_out: usize, n_in: usize| {
        let u = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, u - i0 as f64)
    };
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, out_w, w);
            for k in 0..c {
                let top = src[[y0, x0, k]] * (1.0 - fx) + src[[y0, x1, k]] * fx;
                let bottom = src[[y1, x0, k]] * (1.0 - fx) + src[[y1, x1, k]] * fx;
                out[[y, x, k]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// One fused level, already at output resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLevel {
    /// `(H, W, dims)`.
    pub features: Array3<f64>,
    /// `(H, W)` in [0, 1].
    pub attention: Array2<f64>,
    /// Windows covering each level pixel, at level resolution.
    pub coverage: Array2<u32>,
}

/// Fuse the windows of one level: every window map is bilinearly upsampled to
/// its extent, covering windows are averaged per pixel, and the level is then
/// resized to `out_size`.
pub fn fuse_level(windows: &[&WindowMap], level_size: (usize, usize), out_size: (usize, usize)) -> Result<FusedLevel> {
    let (lh, lw) = level_size;
    let dims = windows
        .first()
        .map(|w| w.features.dim().2)
        .ok_or_else(|| Error::Pyramid("no windows for level".into()))?;
    // Sum in a canonical order so the result does not depend on window order.
    let mut sorted: Vec<&WindowMap> = windows.to_vec();
    sorted.sort_by_key(|w| (w.origin.1, w.origin.0, w.size.1, w.size.0));
    let mut acc = Array3::<f64>::zeros((lh, lw, dims + 1));
    let mut coverage = Array2::<u32>::zeros((lh, lw));
    for w in sorted {
        let (gh, gw, d) = w.features.dim();
        if d != dims || w.attention.dim() != (gh, gw) {
            return Err(Error::Pyramid(format!("window at {:?} has inconsistent maps", w.origin)));
        }
        let mut grid = Array3::<f64>::zeros((gh, gw, dims + 1));
        for ((y, x, k), v) in w.features.indexed_iter() {
            grid[[y, x, k]] = *v as f64;
        }
        for ((y, x), v) in w.attention.indexed_iter() {
            grid[[y, x, dims]] = *v as f64;
        }
        let (ww, wh) = w.size;
        let patch = resize_bilinear(grid.view(), wh, ww);
        let (x0, y0) = w.origin;
        if x0 + ww > lw || y0 + wh > lh {
            return Err(Error::Pyramid(format!(
                "window at {:?} of size {:?} exceeds level {}x{}",
                w.origin, w.size, lw, lh
            )));
        }
        for y in 0..wh {
            for x in 0..ww {
                coverage[[y0 + y, x0 + x]] += 1;
                for k in 0..=dims {
                    acc[[y0 + y, x0 + x, k]] += patch[[y, x, k]];
                }
            }
        }
    }
    for ((y, x), &n) in coverage.indexed_iter() {
        if n == 0 {
            return Err(Error::Pyramid(format!("pixel (row {y}, col {x}) is not covered by any window")));
        }
        let inv = 1.0 / n as f64;
        acc.slice_mut(ndarray::s![y, x, ..]).mapv_inplace(|v| v * inv);
    }
    let up = resize_bilinear(acc.view(), out_size.0, out_size.1);
    let features = up.slice(ndarray::s![.., .., ..dims]).to_owned();
    let attention = up.index_axis(Axis(2), dims).mapv(|a| a.clamp(0.0, 1.0));
    Ok(FusedLevel {
        features,
        attention,
        coverage,
    })
}

/// Per-level weights `(levels, H, W)`: `interior` away from the frame edge,
/// ramping linearly to `boundary` at the edge over `margin` pixels.
pub fn boundary_weight_map(cfg: &PyramidConfig, height: usize, width: usize) -> Array3<f64> {
    let levels = cfg.n_levels;
    let m = cfg.margin() as f64;
    Array3::from_shape_fn((levels, height, width), |(l, y, x)| {
        let d = y.min(x).min(height - 1 - y).min(width - 1 - x) as f64;
        let t = if m > 0.0 { (d / m).min(1.0) } else { 1.0 };
        cfg.boundary_weights[l] * (1.0 - t) + cfg.interior_weights[l] * t
    })
}

/// A PCA projection fitted on per-pixel L2-normalized features.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `(dims, input_dims)`; rows past `rank` are zero.
    pub components: Array2<f64>,
    /// Eigenvalues of the kept components, descending.
    pub variances: Vec<f64>,
    pub total_variance: f64,
    pub rank: usize,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

impl PcaBasis {
    pub fn input_dims(&self) -> usize {
        self.mean.len()
    }

    pub fn dims(&self) -> usize {
        self.components.nrows()
    }

    /// Share of total variance captured by the kept components.
    pub fn explained_fraction(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.variances.iter().sum::<f64>() / self.total_variance
        } else {
            1.0
        }
    }

    /// Normalize, centre and project one feature vector.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let x = normalized(v);
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.components.rows().into_iter().map(|c| c.iter().zip(&centred).map(|(a, b)| a * b).sum()).collect()
    }

    /// Map projected coordinates back to the centred, normalized input space.
    pub fn back_project(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &zk) in self.components.rows().into_iter().zip(z) {
            for (o, &ck) in out.iter_mut().zip(c.iter()) {
                *o += zk * ck;
            }
        }
        out
    }
}

/// Fit a PCA basis on the rows of `rows` (`(n, input_dims)`), after L2
/// normalizing each row and centring.
pub fn pca_reduce(rows: &Array2<f64>, dims: usize) -> Result<PcaBasis> {
    let (n, d) = rows.dim();
    if n < dims {
        return Err(Error::Pyramid(format!("PCA needs at least {dims} samples, got {n}")));
    }
    if d == 0 {
        return Err(Error::Pyramid("PCA on zero-dimensional features".into()));
    }
    let normed: Vec<Vec<f64>> = rows.rows().into_iter().map(|r| normalized(r.as_slice().unwrap_or(&r.to_vec()))).collect();
    let mut mean = vec![0.0; d];
    for r in &normed {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centred = vec![0.0; d];
    for r in &normed {
        for k in 0..d {
            centred[k] = r[k] - mean[k];
        }
        for a in 0..d {
            let ca = centred[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                cov[(a, b)] += ca * centred[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 + 1e-300;
    let rank = order.iter().take(dims).filter(|&&i| eig.eigenvalues[i] > tol).count();
    if rank < dims {
        log::warn!("PCA rank {rank} is below the requested {dims} dimensions; padding with zero components");
    }
    let mut components = Array2::zeros((dims, d));
    let mut variances = Vec::with_capacity(rank);
    for (row, &i) in order.iter().take(rank).enumerate() {
        let v = eig.eigenvectors.column(i);
        let pivot = (0..d).fold(0, |best, k| if v[k].abs() > v[best].abs() { k } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..d {
            components[[row, k]] = sign * v[k];
        }
        variances.push(eig.eigenvalues[i]);
    }
    Ok(PcaBasis {
        mean,
        components,
        variances,
        total_variance,
        rank,
    })
}

/// Fused targets and loss weights for one frame, all at output resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAttentionPyramid {
    /// Per level `(H, W, dims)` features in PCA coordinates.
    pub features: Vec<Array3<f64>>,
    /// Per level `(H, W)` attention.
    pub attention: Vec<Array2<f64>>,
    /// `(levels, H, W)`; used for both semantic and attention terms.
    pub weights: Array3<f64>,
    /// Per level window coverage at level resolution.
    pub coverage: Vec<Array2<u32>>,
}

impl SemanticAttentionPyramid {
    pub fn n_levels(&self) -> usize {
        self.features.len()
    }

    pub fn dims(&self) -> usize {
        self.features[0].dim().2
    }

    pub fn feature_at(&self, level: usize, row: usize, col: usize) -> Vec<f64> {
        self.features[level].slice(ndarray::s![row, col, ..]).to_vec()
    }

    /// Level-weighted mean feature at a pixel.
    pub fn mean_feature(&self, row: usize, col: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dims()];
        for l in 0..self.n_levels() {
            let w = self.weights[[l, row, col]];
            for (o, v) in out.iter_mut().zip(self.features[l].slice(ndarray::s![row, col, ..])) {
                *o += w * v;
            }
        }
        out
    }

    /// Level-weighted mean attention at a pixel.
    pub fn mean_attention(&self, row: usize, col: usize) -> f64 {
        (0..self.n_levels()).map(|l| self.weights[[l, row, col]] * self.attention[l][[row, col]]).sum()
    }

    /// `(H, W)` map of the level-weighted mean attention.
    pub fn mean_attention_map(&self) -> Array2<f64> {
        let (h, w) = self.attention[0].dim();
        Array2::from_shape_fn((h, w), |(y, x)| self.mean_attention(y, x))
    }
}

/// Pyramids for every frame of a sequence with their shared PCA basis.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSet {
    pub basis: PcaBasis,
    pub frames: Vec<SemanticAttentionPyramid>,
}

fn fuse_frame(ds: &SceneDataset, frame: usize, cfg: &PyramidConfig) -> Result<Vec<FusedLevel>> {
    if ds.levels.len() < cfg.n_levels {
        return Err(Error::Pyramid(format!(
            "dataset has {} levels, configuration wants {}",
            ds.levels.len(),
            cfg.n_levels
        )));
    }
    (0..cfg.n_levels)
        .map(|l| {
            let windows: Vec<&WindowMap> = ds.frames[frame].windows.iter().filter(|w| w.level == l).collect();
            fuse_level(&windows, ds.levels[l], (ds.height, ds.width))
                .map_err(|e| Error::Pyramid(format!("frame {frame}, level {l}: {e}")))
        })
        .collect()
}

/// Fuse every level of every frame, fit one PCA basis over all fused pixels,
/// project, and attach boundary weights.
pub fn build_pyramids(ds: &SceneDataset, cfg: &PyramidConfig) -> Result<PyramidSet> {
    cfg.validate()?;
    let fused: Vec<Vec<FusedLevel>> = (0..ds.len()).map(|i| fuse_frame(ds, i, cfg)).collect::<Result<_>>()?;
    let d = fused[0][0].features.dim().2;
    let n_px = ds.height * ds.width;
    let mut rows = Array2::zeros((fused.len() * cfg.n_levels * n_px, d));
    let mut r = 0;
    for levels in &fused {
        for level in levels {
            for px in level.features.to_shape((n_px, d)).expect("contiguous").rows() {
                rows.row_mut(r).assign(&px);
                r += 1;
            }
        }
    }
    let basis = pca_reduce(&rows, cfg.pca_dims)?;
    let weights = boundary_weight_map(cfg, ds.height, ds.width);
    let frames = fused
        .into_iter()
        .map(|levels| {
            let mut features = Vec::new();
            let mut attention = Vec::new();
            let mut coverage = Vec::new();
            for level in levels {
                let mut proj = Array3::zeros((ds.height, ds.width, cfg.pca_dims));
                for y in 0..ds.height {
                    for x in 0..ds.width {
                        let v = level.features.slice(ndarray::s![y, x, ..]).to_vec();
                        for (k, p) in basis.project(&v).into_iter().enumerate() {
                            proj[[y, x, k]] = p;
                        }
                    }
                }
                features.push(proj);
                attention.push(level.attention);
                coverage.push(level.coverage);
            }
            SemanticAttentionPyramid {
                features,
                attention,
                weights: weights.clone(),
                coverage,
            }
        })
        .collect();
    Ok(PyramidSet { basis, frames })
}

/// Hex key identifying a pyramid built from `ds` under `cfg`.
pub fn cache_key(ds: &SceneDataset, cfg: &PyramidConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update((ds.height as u64).to_le_bytes());
    h.update((ds.width as u64).to_le_bytes());
    for (lh, lw) in &ds.levels {
        h.update((*lh as u64).to_le_bytes());
        h.update((*lw as u64).to_le_bytes());
    }
    for f in &ds.frames {
        for w in &f.windows {
            for v in [w.level, w.origin.0, w.origin.1, w.size.0, w.size.1, w.stride] {
                h.update((v as u64).to_le_bytes());
            }
            for v in w.features.iter().chain(w.attention.iter()) {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn cache_dir(root: &Path, key: &str) -> PathBuf {
    root.join(format!("pyramid-{key}"))
}

fn save_set(set: &PyramidSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let b = &set.basis;
    tensor_io::write_array(&dir.join("pca_mean.bin"), &ndarray::arr1(&b.mean))?;
    tensor_io::write_array(&dir.join("pca_components.bin"), &b.components)?;
    let mut var = b.variances.clone();
    var.push(b.total_variance);
    tensor_io::write_array(&dir.join("pca_variances.bin"), &ndarray::arr1(&var))?;
    for (i, p) in set.frames.iter().enumerate() {
        for l in 0..p.n_levels() {
            tensor_io::write_array(&dir.join(format!("f{i}_l{l}_features.bin")), &p.features[l])?;
            tensor_io::write_array(&dir.join(format!("f{i}_l{l}_attention.bin")), &p.attention[l])?;
            let cov = p.coverage[l].mapv(|c| c as i32);
            tensor_io::write_array(&dir.join(format!("f{i}_l{l}_coverage.bin")), &cov)?;
        }
        tensor_io::write_array(&dir.join(format!("f{i}_weights.bin")), &p.weights)?;
    }
    Ok(())
}

fn load_set(dir: &Path, n_frames: usize, n_levels: usize) -> Result<PyramidSet> {
    let mean: ndarray::Array1<f64> = tensor_io::read_array_dim(&dir.join("pca_mean.bin"))?;
    let components: Array2<f64> = tensor_io::read_array_dim(&dir.join("pca_components.bin"))?;
    let mut variances: Vec<f64> = tensor_io::read_array_dim::<f64, ndarray::Ix1>(&dir.join("pca_variances.bin"))?.to_vec();
    let total_variance = variances.pop().ok_or_else(|| Error::format(dir, "empty variance tensor"))?;
    let basis = PcaBasis {
        mean: mean.to_vec(),
        rank: variances.len(),
        components,
        variances,
        total_variance,
    };
    let frames = (0..n_frames)
        .map(|i| {
            let mut p = SemanticAttentionPyramid {
                features: Vec::new(),
                attention: Vec::new(),
                weights: tensor_io::read_array_dim(&dir.join(format!("f{i}_weights.bin")))?,
                coverage: Vec::new(),
            };
            for l in 0..n_levels {
                p.features.push(tensor_io::read_array_dim(&dir.join(format!("f{i}_l{l}_features.bin")))?);
                p.attention.push(tensor_io::read_array_dim(&dir.join(format!("f{i}_l{l}_attention.bin")))?);
                let cov: Array2<i32> = tensor_io::read_array_dim(&dir.join(format!("f{i}_l{l}_coverage.bin")))?;
                p.coverage.push(cov.mapv(|c| c as u32));
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    Ok(PyramidSet { basis, frames })
}

/// [`build_pyramids`] backed by an on-disk cache under `cache_root`, keyed by
/// [`cache_key`].
pub fn build_pyramids_cached(ds: &SceneDataset, cfg: &PyramidConfig, cache_root: &Path) -> Result<PyramidSet> {
    let dir = cache_dir(cache_root, &cache_key(ds, cfg));
    if dir.join("done").exists() {
        log::info!("loading cached pyramid from {}", dir.display());
        return load_set(&dir, ds.len(), cfg.n_levels);
    }
    let set = build_pyramids(ds, cfg)?;
    save_set(&set, &dir)?;
    fs::write(dir.join("done"), b"").map_err(|e| Error::io(dir.join("done"), e))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn window(origin: (usize, usize), size: (usize, usize), grid: (usize, usize), value: f32, att: f32) -> WindowMap {
        WindowMap {
            level: 0,
            origin,
            size,
            stride: 2,
            features: Array3::from_elem((grid.0, grid.1, 2), value),
            attention: Array2::from_elem(grid, att),
        }
    }

    #[test]
    fn single_window_is_its_own_upsampling() {
        let mut w = window((0, 0), (6, 4), (2, 3), 0.0, 0.5);
        for ((y, x, k), v) in w.features.indexed_iter_mut() {
            *v = (y * 3 + x) as f32 + k as f32 * 0.5;
        }
        let fused = fuse_level(&[&w], (4, 6), (4, 6)).unwrap();
        let grid = w.features.mapv(|v| v as f64);
        let direct = resize_bilinear(grid.view(), 4, 6);
        assert_eq!(fused.features, direct);
        assert!(fused.attention.iter().all(|&a| a == 0.5));
    }

    #[test]
    fn identical_windows_average_to_either() {
        let a = window((0, 0), (4, 4), (2, 2), 0.3, 0.2);
        let b = a.clone();
        let f = fuse_level(&[&a, &b], (4, 4), (4, 4)).unwrap();
        assert!(f.features.iter().all(|&v| (v - 0.3f32 as f64).abs() < 1e-15));
        assert!(f.coverage.iter().all(|&c| c == 2));
    }

    #[test]
    fn staggered_windows_match_coverage_oracle() {
        let ws = [
            window((0, 0), (4, 3), (1, 1), 1.0, 0.1),
            window((2, 0), (4, 3), (1, 1), 2.0, 0.5),
            window((4, 0), (4, 3), (1, 1), 4.0, 0.9),
        ];
        let refs: Vec<&WindowMap> = ws.iter().collect();
        let f = fuse_level(&refs, (3, 8), (3, 8)).unwrap();
        for y in 0..3 {
            for x in 0..8 {
                let covering: Vec<&WindowMap> = ws.iter().filter(|w| x >= w.origin.0 && x < w.origin.0 + w.size.0).collect();
                let feat = covering.iter().map(|w| w.features[[0, 0, 0]] as f64).sum::<f64>() / covering.len() as f64;
                let att = covering.iter().map(|w| w.attention[[0, 0]] as f64).sum::<f64>() / covering.len() as f64;
                assert!((f.features[[y, x, 0]] - feat).abs() < 1e-12);
                assert!((f.attention[[y, x]] - att).abs() < 1e-12);
                assert_eq!(f.coverage[[y, x]] as usize, covering.len());
            }
        }
    }

    #[test]
    fn fusion_ignores_window_order() {
        let ws = [
            window((0, 0), (5, 3), (2, 2), 0.7, 0.3),
            window((3, 0), (5, 3), (3, 1), -0.2, 0.6),
            window((1, 1), (4, 2), (1, 2), 0.1, 0.9),
        ];
        let a = fuse_level(&[&ws[0], &ws[1], &ws[2]], (3, 8), (6, 16)).unwrap();
        let b = fuse_level(&[&ws[2], &ws[0], &ws[1]], (3, 8), (6, 16)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uncovered_pixel_is_named() {
        let w = window((0, 0), (2, 2), (1, 1), 1.0, 0.1);
        let err = fuse_level(&[&w], (2, 3), (2, 3)).unwrap_err().to_string();
        assert!(err.contains("row 0, col 2"), "{err}");
    }

    #[test]
    fn weights_follow_the_ramp() {
        let mut cfg = PyramidConfig::default();
        cfg.margin = Some(8);
        let w = boundary_weight_map(&cfg, 33, 33);
        let center = [w[[0, 16, 16]], w[[1, 16, 16]], w[[2, 16, 16]]];
        assert_eq!(center, [1.0 / 9.0, 4.0 / 9.0, 4.0 / 9.0]);
        let corner = [w[[0, 0, 0]], w[[1, 0, 0]], w[[2, 0, 0]]];
        assert_eq!(corner, [1.0 / 3.0; 3]);
        let half = w[[0, 4, 16]];
        assert!((half - 0.5 * (1.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
        for y in 0..33 {
            for x in 0..33 {
                assert!((w.slice(ndarray::s![.., y, x]).sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn planar_data_is_reconstructed_exactly() {
        let rows = Array::from_shape_fn((50, 4), |(i, k)| {
            let (a, b) = ((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos());
            [a + 2.0, b - 1.0, a - b + 0.5, 3.0][k]
        });
        let normed: Vec<Vec<f64>> = rows.rows().into_iter().map(|r| normalized(&r.to_vec())).collect();
        let basis = pca_reduce(&rows, 4).unwrap();
        assert!(basis.rank <= 4);
        for r in &normed {
            let back = basis.back_project(&basis.project(r));
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rank_deficit_pads_zero_components() {
        let rows = Array::from_shape_fn((20, 3), |(i, k)| if k == 0 { 1.0 + i as f64 } else { 0.0 });
        let basis = pca_reduce(&rows, 3).unwrap();
        assert_eq!(basis.rank, 0);
        assert!(basis.components.iter().all(|&v| v == 0.0));
        let rows = Array::from_shape_fn((20, 3), |(i, k)| if k == i % 2 { 2.0 } else { 0.0 });
        let basis = pca_reduce(&rows, 3).unwrap();
        assert_eq!(basis.rank, 1);
        assert!(basis.components.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn component_signs_are_fixed() {
        let rows = Array::from_shape_fn((30, 3), |(i, k)| ((i * 7 + k * 3) % 11) as f64 - 5.0);
        let basis = pca_reduce(&rows, 3).unwrap();
        for c in basis.components.rows().into_iter().take(basis.rank) {
            let pivot = c.iter().fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0);
        }
    }
}
