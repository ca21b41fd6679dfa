//! Small interactive demos of the decomposition pipeline, compiled to
//! WebAssembly for `www/index.html`.
//!
//! Every export returns JSON text so the page needs no generated types.

use nalgebra::Vector3;
use ndarray::{Array1, Array2, Array3};
use saff::camera::Ray;
use saff::cluster::{cluster_views, saliency_vote, ClusterConfig};
use saff::field::NetOutput;
use saff::metrics::ari_maps;
use saff::pyramid::{boundary_weight_map, build_pyramids, PyramidConfig};
use saff::render::{composite, deltas, RaySampleBatch, Transmittance};
use saff::synth::{generate_scene, SynthSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const STATIC_COLOR: [f64; 3] = [0.9, 0.55, 0.2];
const DYNAMIC_COLOR: [f64; 3] = [0.2, 0.45, 0.95];

#[derive(Debug, Clone, Serialize)]
pub struct RayReport {
    /// Sample distances, evenly spaced over [0, 1).
    pub t: Vec<f64>,
    pub sigma: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub blend: f64,
}

fn still(sigma: &[f64], color: [f64; 3], blend: Option<&[f64]>) -> NetOutput {
    let n = sigma.len();
    NetOutput {
        sigma: Array1::from_vec(sigma.to_vec()),
        color: Array2::from_shape_fn((n, 3), |(_, c)| color[c]),
        semantic: Array2::zeros((n, 1)),
        attention: Array1::zeros(n),
        blend: blend.map(|v| Array1::from_vec(v.to_vec())),
        flow: None,
        occlusion: None,
    }
}

/// Composite a ray of `n` segments with per-segment static and dynamic
/// densities and blend weights. Static matter is orange, dynamic matter blue.
pub fn composite_segments(sigma_static: &[f64], sigma_dynamic: &[f64], blend: &[f64]) -> Result<RayReport, String> {
    let n = sigma_static.len();
    if n == 0 || sigma_dynamic.len() != n || blend.len() != n {
        return Err(format!(
            "need equal, non-empty inputs, got {n}, {} and {}",
            sigma_dynamic.len(),
            blend.len()
        ));
    }
    if sigma_static.iter().chain(sigma_dynamic).any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err("densities must be finite and non-negative".into());
    }
    if blend.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err("blend weights must lie in [0, 1]".into());
    }
    let ray = Ray {
        origin: Vector3::zeros(),
        direction: Vector3::new(0.0, 0.0, -1.0),
        t_near: 0.0,
        t_far: 1.0,
        row: 0,
        col: 0,
        time_index: 0,
    };
    let t: Vec<f64> = (0..n).map(|k| k as f64 / n as f64).collect();
    let samples = RaySampleBatch {
        positions: RaySampleBatch::positions_for(&ray, &t),
        static_out: still(sigma_static, STATIC_COLOR, Some(blend)),
        dynamic_out: still(sigma_dynamic, DYNAMIC_COLOR, None),
        ray,
        t: t.clone(),
    };
    let px = composite(&samples).map_err(|e| e.to_string())?;
    let (sigma, _) = samples.mixture();
    let tr = Transmittance::new(deltas(&t, 1.0).map_err(|e| e.to_string())?, &sigma);
    Ok(RayReport {
        t,
        sigma,
        transmittance: tr.trans,
        weights: tr.weights,
        color: px.color,
        depth: px.depth,
        opacity: px.opacity,
        blend: px.blend,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightMaps {
    pub height: usize,
    pub width: usize,
    pub margin: usize,
    /// Per level, coarse to fine, row-major `height * width` weights.
    pub levels: Vec<Vec<f64>>,
}

/// The three-level boundary weight maps for a frame with the given ramp width.
pub fn weight_maps(height: usize, width: usize, margin: usize) -> Result<WeightMaps, String> {
    if height == 0 || width == 0 || height * width > 1 << 20 {
        return Err(format!("frame {height}x{width} is empty or too large"));
    }
    let cfg = PyramidConfig {
        margin: Some(margin),
        ..PyramidConfig::default()
    };
    let maps = boundary_weight_map(&cfg, height, width);
    Ok(WeightMaps {
        height,
        width,
        margin,
        levels: maps.outer_iter().map(|l| l.iter().copied().collect()).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterReport {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub k: usize,
    pub salient: Vec<bool>,
    /// Per frame, row-major cluster ids.
    pub labels: Vec<Vec<usize>>,
    /// Per frame, row-major ground-truth labels (0 background, 1.. blobs).
    pub truth: Vec<Vec<u8>>,
    /// Per frame, row-major fused attention.
    pub attention: Vec<Vec<f64>>,
    /// Mean attention of each cluster in the first frame.
    pub cluster_attention: Vec<Option<f64>>,
    /// Mean ARI of the salient decomposition against the ground truth.
    pub ari: f64,
}

/// A small two-blob scene, 32x32.
pub fn demo_spec(frames: usize, feature_noise: f64) -> SynthSpec {
    let mut spec = SynthSpec::two_blob();
    spec.height = 32;
    spec.width = 32;
    spec.focal = 35.0;
    spec.n_frames = frames;
    spec.feature_noise = feature_noise;
    spec.semantic_dims = 16;
    spec.levels = vec![(16, 16), (24, 24), (32, 32)];
    spec.window = (16, 16);
    spec.window_stride = 8;
    spec.patch = 1;
    spec.holdout.clear();
    spec
}

/// Cluster the fused pyramid features of a synthetic scene directly and vote
/// on saliency with the fused attention.
pub fn cluster_scene(seed: u64, frames: usize, feature_noise: f64) -> Result<ClusterReport, String> {
    if !(2..=8).contains(&frames) {
        return Err(format!("frames must lie in 2..=8, got {frames}"));
    }
    if !(0.0..=2.0).contains(&feature_noise) {
        return Err(format!("feature noise must lie in [0, 2], got {feature_noise}"));
    }
    let spec = demo_spec(frames, feature_noise);
    let scene = generate_scene(&spec, seed).map_err(|e| e.to_string())?;
    let pyramids = build_pyramids(&scene.dataset, &spec.pyramid_config()).map_err(|e| e.to_string())?;
    let (h, w) = (spec.height, spec.width);
    let features: Vec<Array3<f64>> = pyramids
        .frames
        .iter()
        .map(|p| {
            let mut f = Array3::zeros((h, w, p.dims()));
            for y in 0..h {
                for x in 0..w {
                    for (d, v) in p.mean_feature(y, x).into_iter().enumerate() {
                        f[[y, x, d]] = v;
                    }
                }
            }
            f
        })
        .collect();
    let attention: Vec<Array2<f64>> = pyramids.frames.iter().map(|p| p.mean_attention_map()).collect();
    let cfg = ClusterConfig::default();
    let mut model = cluster_views(&features, &cfg, seed).map_err(|e| e.to_string())?;
    saliency_vote(&mut model, &attention, &cfg);
    let mut ari = 0.0;
    for (v, truth) in scene.truth.iter().enumerate() {
        let truth = truth.labels.mapv(usize::from);
        ari += ari_maps(model.foreground_labels(v).view(), truth.view()).map_err(|e| e.to_string())?;
    }
    Ok(ClusterReport {
        height: h,
        width: w,
        frames,
        k: model.k,
        salient: model.salient.clone(),
        labels: model.labels.iter().map(|l| l.iter().copied().collect()).collect(),
        truth: scene.truth.iter().map(|t| t.labels.iter().copied().collect()).collect(),
        attention: attention.iter().map(|a| a.iter().copied().collect()).collect(),
        cluster_attention: model.mean_attention.first().cloned().unwrap_or_default(),
        ari: ari / frames as f64,
    })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = compositeRay)]
pub fn composite_ray(sigma_static: Vec<f64>, sigma_dynamic: Vec<f64>, blend: Vec<f64>) -> Result<String, JsError> {
    to_json(composite_segments(&sigma_static, &sigma_dynamic, &blend))
}

#[wasm_bindgen(js_name = pyramidWeights)]
pub fn pyramid_weights(height: usize, width: usize, margin: usize) -> Result<String, JsError> {
    to_json(weight_maps(height, width, margin))
}

#[wasm_bindgen(js_name = clusterScene)]
pub fn cluster_scene_json(seed: u32, frames: usize, feature_noise: f64) -> Result<String, JsError> {
    to_json(cluster_scene(seed as u64, frames, feature_noise))
}
