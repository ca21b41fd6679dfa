//! Synthetic dynamic scenes with exact ground truth: a textured background
//! plane and moving opaque ellipsoids, rendered analytically, together with
//! every prior map a real pipeline would import and an analytic field.

use nalgebra::Vector3;
use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, SceneSpace};
use crate::error::{Error, Result};
use crate::field::{FieldQuery, NetOutput};
use crate::pyramid::PyramidConfig;
use crate::scene_io::{FrameBundle, HoldoutView, SceneDataset, WindowMap};

/// Density inside solid geometry, per normalized unit length.
pub const SOLID_DENSITY: f64 = 400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// World center at time 0.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// World displacement per frame.
    pub velocity: [f64; 3],
    pub color: [f64; 3],
    pub attention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    /// The plane `z = depth_z` (world), facing +z.
    pub depth_z: f64,
    pub color: [f64; 3],
    pub attention: f64,
    /// Period of the checker texture in world units.
    pub texture_period: f64,
    /// Bands of distinct semantics along world x, repeating.
    #[serde(default = "one")]
    pub semantic_regions: usize,
    /// Width of one band in world units.
    #[serde(default = "one_f64")]
    pub region_width: f64,
}

fn one() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

impl BackgroundSpec {
    pub fn region(&self, p: &Vector3<f64>) -> usize {
        if self.semantic_regions <= 1 {
            return 0;
        }
        ((p.x / self.region_width).floor() as i64).rem_euclid(self.semantic_regions as i64) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Cameras on a circle around the y axis looking at the origin.
    Orbit {
        radius: f64,
        height: f64,
        start_deg: f64,
        step_deg: f64,
    },
    /// Cameras translating by `step` per frame, looking along -z.
    Dolly { start: [f64; 3], step: [f64; 3] },
}

impl Trajectory {
    /// Camera pose for (possibly fractional) frame parameter `s`.
    pub fn pose(&self, s: f64, focal: f64, width: usize, height: usize, time_index: usize) -> CameraPose {
        match *self {
            Trajectory::Orbit {
                radius,
                height: h,
                start_deg,
                step_deg,
            } => {
                let a = (start_deg + step_deg * s).to_radians();
                let center = Vector3::new(radius * a.sin(), h, radius * a.cos());
                CameraPose::look_at(center, Vector3::zeros(), Vector3::y(), focal, width, height, time_index)
            }
            Trajectory::Dolly { start, step } => {
                let center = Vector3::from(start) + Vector3::from(step) * s;
                let target = center - Vector3::z();
                CameraPose::look_at(center, target, Vector3::y(), focal, width, height, time_index)
            }
        }
    }
}

/// A hold-out view rendered from the camera of frame `camera` at time `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub split: String,
    pub camera: f64,
    pub time: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    pub background: Option<BackgroundSpec>,
    pub blobs: Vec<BlobSpec>,
    pub trajectory: Trajectory,
    pub semantic_dims: usize,
    /// The depth prior is `depth_scale · depth + depth_shift + noise`.
    pub depth_scale: f64,
    pub depth_shift: f64,
    pub depth_noise: f64,
    pub feature_noise: f64,
    /// Pyramid level sizes `(h, w)`, coarse to fine.
    pub levels: Vec<(usize, usize)>,
    /// Window `(width, height)` in level pixels.
    pub window: (usize, usize),
    pub window_stride: usize,
    /// Level pixels per feature-grid cell.
    pub patch: usize,
    pub holdout: Vec<HoldoutSpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::two_blob()
    }
}

impl SynthSpec {
    /// Two moving blobs over a textured plane, 8 frames of 64×64.
    pub fn two_blob() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            n_frames: 8,
            focal: 70.0,
            near: 2.0,
            far: 7.0,
            background: Some(BackgroundSpec {
                depth_z: -1.5,
                color: [0.55, 0.6, 0.5],
                attention: 0.03,
                texture_period: 0.5,
                semantic_regions: 3,
                region_width: 0.9,
            }),
            blobs: vec![
                BlobSpec {
                    center: [-0.75, 0.3, 0.1],
                    radii: [0.63, 0.51, 0.51],
                    velocity: [0.06, -0.02, 0.0],
                    color: [0.9, 0.25, 0.2],
                    attention: 0.8,
                },
                BlobSpec {
                    center: [0.7, -0.35, -0.2],
                    radii: [0.54, 0.66, 0.54],
                    velocity: [-0.04, 0.04, 0.0],
                    color: [0.2, 0.35, 0.9],
                    attention: 0.6,
                },
            ],
            trajectory: Trajectory::Orbit {
                radius: 4.0,
                height: 0.4,
                start_deg: -7.0,
                step_deg: 2.0,
            },
            semantic_dims: 64,
            depth_scale: 0.5,
            depth_shift: 1.0,
            depth_noise: 0.0,
            feature_noise: 0.2,
            levels: vec![(32, 32), (48, 48), (64, 64)],
            window: (32, 32),
            window_stride: 16,
            patch: 2,
            holdout: vec![
                HoldoutSpec {
                    split: "fix_cam0".into(),
                    camera: 0.0,
                    time: 3,
                },
                HoldoutSpec {
                    split: "fix_cam0".into(),
                    camera: 0.0,
                    time: 6,
                },
                HoldoutSpec {
                    split: "fix_time0".into(),
                    camera: 3.5,
                    time: 0,
                },
                HoldoutSpec {
                    split: "fix_time0".into(),
                    camera: 6.5,
                    time: 0,
                },
            ],
        }
    }

    /// Matching pyramid configuration for this spec's windows.
    pub fn pyramid_config(&self) -> PyramidConfig {
        let n = self.levels.len();
        let mut cfg = if n == 1 {
            PyramidConfig::single_level(self.semantic_dims)
        } else {
            PyramidConfig::default()
        };
        cfg.n_levels = n;
        if n != 1 && n != 3 {
            cfg.interior_weights = vec![1.0 / n as f64; n];
            cfg.boundary_weights = vec![1.0 / n as f64; n];
        }
        cfg.window_size = self.window;
        cfg.window_stride = self.window_stride;
        cfg.pca_dims = self.semantic_dims;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.background.is_none() && self.blobs.is_empty() {
            return Err(Error::Synth("scene has neither background nor objects".into()));
        }
        if self.n_frames < 2 || self.height == 0 || self.width == 0 {
            return Err(Error::Synth("need at least 2 frames of non-empty images".into()));
        }
        let n_semantic = self.background_regions() + self.blobs.len();
        if self.semantic_dims < n_semantic {
            return Err(Error::Synth(format!(
                "{} semantic dims cannot hold {n_semantic} mutually orthogonal vectors",
                self.semantic_dims
            )));
        }
        if self.background.as_ref().is_some_and(|b| !(b.region_width > 0.0)) {
            return Err(Error::Synth("background region width must be positive".into()));
        }
        if self.patch == 0 || self.window.0 % self.patch != 0 || self.window.1 % self.patch != 0 {
            return Err(Error::Synth("window size must be a multiple of the patch size".into()));
        }
        for &(lh, lw) in &self.levels {
            if lh < self.window.1 || lw < self.window.0 || lh > self.height || lw > self.width {
                return Err(Error::Synth(format!("level {lh}x{lw} does not fit the window or the frame")));
            }
        }
        for b in &self.blobs {
            if b.radii.iter().any(|&r| !(r > 0.0)) || !(0.0..=1.0).contains(&b.attention) {
                return Err(Error::Synth("blob radii must be positive and attention in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn pose(&self, camera: f64, time: usize) -> CameraPose {
        self.trajectory.pose(camera, self.focal, self.width, self.height, time)
    }

    /// Number of distinct background semantic vectors.
    pub fn background_regions(&self) -> usize {
        self.background.as_ref().map_or(0, |b| b.semantic_regions.max(1))
    }

    /// Index into the scene's semantic vectors of what a hit sees.
    pub fn semantic_index(&self, hit: &Hit) -> usize {
        match hit.label {
            0 => self.background.as_ref().map_or(0, |b| b.region(&hit.point)),
            l => self.background_regions() + l as usize - 1,
        }
    }

    fn blob_center(&self, k: usize, time: f64) -> Vector3<f64> {
        let b = &self.blobs[k];
        Vector3::from(b.center) + Vector3::from(b.velocity) * time
    }
}

/// What a camera ray hits first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Distance along the unit ray direction (world units).
    pub t: f64,
    pub point: Vector3<f64>,
    /// 0 = background, `k + 1` = blob `k`.
    pub label: u8,
}

fn ray_ellipsoid(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: &[f64; 3]) -> Option<f64> {
    let oc = Vector3::new((o.x - c.x) / r[0], (o.y - c.y) / r[1], (o.z - c.z) / r[2]);
    let dd = Vector3::new(d.x / r[0], d.y / r[1], d.z / r[2]);
    let a = dd.dot(&dd);
    let b = 2.0 * oc.dot(&dd);
    let cc = oc.dot(&oc) - 1.0;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = (-b - s) / (2.0 * a);
    let t1 = (-b + s) / (2.0 * a);
    [t0, t1].into_iter().find(|&t| t > 1e-9)
}

/// Nearest intersection of a world ray with the scene at `time`.
pub fn trace(spec: &SynthSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, time: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, label: u8| {
        if best.is_none_or(|h| t < h.t) {
            best = Some(Hit {
                t,
                point: origin + dir * t,
                label,
            });
        }
    };
    if let Some(bg) = &spec.background {
        if dir.z.abs() > 1e-12 {
            let t = (bg.depth_z - origin.z) / dir.z;
            if t > 1e-9 {
                consider(t, 0);
            }
        }
    }
    for k in 0..spec.blobs.len() {
        if let Some(t) = ray_ellipsoid(origin, dir, &spec.blob_center(k, time), &spec.blobs[k].radii) {
            consider(t, (k + 1) as u8);
        }
    }
    best
}

fn background_color(bg: &BackgroundSpec, p: &Vector3<f64>) -> [f64; 3] {
    let u = (p.x / bg.texture_period).floor() as i64;
    let v = (p.y / bg.texture_period).floor() as i64;
    let checker = if (u + v).rem_euclid(2) == 0 { 1.0 } else { 0.75 };
    bg.color.map(|c| c * checker)
}

fn surface_color(spec: &SynthSpec, hit: &Hit, time: f64) -> [f64; 3] {
    match hit.label {
        0 => background_color(spec.background.as_ref().expect("background hit"), &hit.point),
        l => {
            let k = l as usize - 1;
            let b = &spec.blobs[k];
            let c = spec.blob_center(k, time);
            let n = Vector3::new(
                (hit.point.x - c.x) / (b.radii[0] * b.radii[0]),
                (hit.point.y - c.y) / (b.radii[1] * b.radii[1]),
                (hit.point.z - c.z) / (b.radii[2] * b.radii[2]),
            )
            .normalize();
            let shade = 0.75 + 0.25 * n.dot(&Vector3::new(0.3, 0.5, 0.81).normalize()).max(0.0);
            b.color.map(|v| v * shade)
        }
    }
}

/// Per-pixel ground truth of one rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTruth {
    pub rgb: Array3<f32>,
    /// Distance along the ray to the first hit (world units); `far` on a miss.
    pub depth: Array2<f64>,
    pub labels: Array2<u8>,
    pub attention: Array2<f64>,
    pub hits: Vec<Option<Hit>>,
}

/// Render the analytic scene from `pose` at `time`.
pub fn render_view(spec: &SynthSpec, pose: &CameraPose, time: f64) -> ViewTruth {
    let (h, w) = (spec.height, spec.width);
    let mut rgb = Array3::zeros((h, w, 3));
    let mut depth = Array2::from_elem((h, w), spec.far);
    let mut labels = Array2::zeros((h, w));
    let mut attention = Array2::zeros((h, w));
    let mut hits = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let dir = pose.pixel_direction(row as f64, col as f64);
            let hit = trace(spec, &pose.translation, &dir, time);
            if let Some(hit) = hit {
                let c = surface_color(spec, &hit, time);
                for k in 0..3 {
                    rgb[[row, col, k]] = c[k] as f32;
                }
                depth[[row, col]] = hit.t;
                labels[[row, col]] = hit.label;
                attention[[row, col]] = match hit.label {
                    0 => spec.background.as_ref().map_or(0.0, |b| b.attention),
                    l => spec.blobs[l as usize - 1].attention,
                };
            }
            hits.push(hit);
        }
    }
    ViewTruth {
        rgb,
        depth,
        labels,
        attention,
        hits,
    }
}

/// Mutually orthogonal unit vectors.
fn semantic_vectors(n: usize, dims: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dims).map(|_| normal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// A generated scene: the dataset plus everything needed to score it.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub dataset: SceneDataset,
    /// Unit semantic vectors: background regions first, then one per blob
    /// (see `SynthSpec::semantic_index`).
    pub semantics: Vec<Vec<f64>>,
    /// Exact per-frame truth.
    pub truth: Vec<ViewTruth>,
    /// Exact truth of every hold-out view.
    pub holdout_truth: Vec<ViewTruth>,
}

fn window_origins(level: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=level - window).step_by(stride.max(1)).collect();
    if *out.last().expect("window fits") != level - window {
        out.push(level - window);
    }
    out
}

/// Extractor-like windows for one frame: each grid cell holds the mean true
/// semantic vector (and attention) of the frame pixels it covers.
fn frame_windows(
    spec: &SynthSpec,
    truth: &ViewTruth,
    semantics: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Vec<WindowMap> {
    let (h, w) = (spec.height, spec.width);
    let dims = spec.semantic_dims;
    let noise = Normal::new(0.0, spec.feature_noise.max(0.0)).expect("finite noise");
    let (ww, wh) = spec.window;
    let (gw, gh) = (ww / spec.patch, wh / spec.patch);
    let mut out = Vec::new();
    for (level, &(lh, lw)) in spec.levels.iter().enumerate() {
        // Level pixel of every frame pixel.
        let ly = |r: usize| ((r as f64 + 0.5) * lh as f64 / h as f64).floor() as usize;
        let lx = |c: usize| ((c as f64 + 0.5) * lw as f64 / w as f64).floor() as usize;
        for &y0 in &window_origins(lh, wh, spec.window_stride) {
            for &x0 in &window_origins(lw, ww, spec.window_stride) {
                let mut feat = Array3::<f64>::zeros((gh, gw, dims));
                let mut att = Array2::<f64>::zeros((gh, gw));
                let mut count = Array2::<f64>::zeros((gh, gw));
                for r in 0..h {
                    let y = ly(r);
                    if y < y0 || y >= y0 + wh {
                        continue;
                    }
                    for c in 0..w {
                        let x = lx(c);
                        if x < x0 || x >= x0 + ww {
                            continue;
                        }
                        let (gy, gx) = ((y - y0) / spec.patch, (x - x0) / spec.patch);
                        if let Some(hit) = &truth.hits[r * w + c] {
                            let id = spec.semantic_index(hit);
                            for k in 0..dims {
                                feat[[gy, gx, k]] += semantics[id][k];
                            }
                        }
                        att[[gy, gx]] += truth.attention[[r, c]];
                        count[[gy, gx]] += 1.0;
                    }
                }
                let features = Array3::from_shape_fn((gh, gw, dims), |(y, x, k)| {
                    let n = count[[y, x]].max(1.0);
                    let e = if spec.feature_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                    (feat[[y, x, k]] / n + e) as f32
                });
                let attention = Array2::from_shape_fn((gh, gw), |(y, x)| (att[[y, x]] / count[[y, x]].max(1.0)) as f32);
                out.push(WindowMap {
                    level,
                    origin: (x0, y0),
                    size: (ww, wh),
                    stride: spec.window_stride,
                    features,
                    attention,
                });
            }
        }
    }
    out
}

/// Pixel flow `(dx, dy)` from frame `i` to frame `j` of every pixel's first hit.
fn flow_map(spec: &SynthSpec, truth: &ViewTruth, pose_i: &CameraPose, pose_j: &CameraPose, dt: f64) -> Array3<f32> {
    let (h, w) = (spec.height, spec.width);
    let mut flow = Array3::zeros((h, w, 2));
    for row in 0..h {
        for col in 0..w {
            let Some(hit) = truth.hits[row * w + col] else {
                continue;
            };
            let moved = match hit.label {
                0 => hit.point,
                l => hit.point + Vector3::from(spec.blobs[l as usize - 1].velocity) * dt,
            };
            if let (Some(a), Some(b)) = (pose_i.project(&hit.point), pose_j.project(&moved)) {
                flow[[row, col, 0]] = (b.0 - a.0) as f32;
                flow[[row, col, 1]] = (b.1 - a.1) as f32;
            }
        }
    }
    flow
}

/// Render every frame and hold-out view of `spec` and assemble the dataset.
pub fn generate_scene(spec: &SynthSpec, seed: u64) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let semantics = semantic_vectors(spec.background_regions() + spec.blobs.len(), spec.semantic_dims, &mut rng);
    let depth_noise = Normal::new(0.0, spec.depth_noise.max(0.0)).expect("finite noise");
    let poses: Vec<CameraPose> = (0..spec.n_frames).map(|i| spec.pose(i as f64, i)).collect();
    let truth: Vec<ViewTruth> = poses.iter().enumerate().map(|(i, p)| render_view(spec, p, i as f64)).collect();
    let mut frames = Vec::with_capacity(spec.n_frames);
    for i in 0..spec.n_frames {
        let t = &truth[i];
        let depth_prior = t.depth.mapv(|d| {
            let e = if spec.depth_noise > 0.0 { depth_noise.sample(&mut rng) } else { 0.0 };
            (spec.depth_scale * d + spec.depth_shift + e) as f32
        });
        let flow_fwd = (i + 1 < spec.n_frames).then(|| flow_map(spec, t, &poses[i], &poses[i + 1], 1.0));
        let flow_bwd = (i > 0).then(|| flow_map(spec, t, &poses[i], &poses[i - 1], -1.0));
        let windows = frame_windows(spec, t, &semantics, &mut rng);
        frames.push(FrameBundle {
            rgb: t.rgb.clone(),
            depth_prior,
            flow_fwd,
            flow_bwd,
            windows,
            pose: poses[i].clone(),
            mask: Some(t.labels.clone()),
        });
    }
    let mut holdout = Vec::new();
    let mut holdout_truth = Vec::new();
    for hs in &spec.holdout {
        let pose = spec.pose(hs.camera, hs.time);
        let t = render_view(spec, &pose, hs.time as f64);
        holdout.push(HoldoutView {
            split: hs.split.clone(),
            pose,
            rgb: Some(t.rgb.clone()),
            mask: Some(t.labels.clone()),
        });
        holdout_truth.push(t);
    }
    let dataset = SceneDataset::new(spec.height, spec.width, spec.near, spec.far, spec.levels.clone(), frames, holdout)?;
    Ok(SynthScene {
        spec: spec.clone(),
        dataset,
        semantics,
        truth,
        holdout_truth,
    })
}

/// Exact decomposition of a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Per input frame: 0 = background, `k + 1` = blob `k`.
    pub labels: Vec<Array2<u8>>,
    pub holdout_labels: Vec<Array2<u8>>,
    /// Per label: whether it is a salient object.
    pub salient: Vec<bool>,
}

pub fn ground_truth_decomposition(scene: &SynthScene) -> GroundTruth {
    let mut salient = vec![false];
    salient.extend(std::iter::repeat_n(true, scene.spec.blobs.len()));
    GroundTruth {
        labels: scene.truth.iter().map(|t| t.labels.clone()).collect(),
        holdout_labels: scene.holdout_truth.iter().map(|t| t.labels.clone()).collect(),
        salient,
    }
}

/// The scene as a field over normalized coordinates: the background plane
/// (thickened backwards into a slab) is static, the blobs are dynamic.
#[derive(Debug, Clone)]
pub struct AnalyticField {
    pub spec: SynthSpec,
    pub space: SceneSpace,
    /// Semantic vector per label, in whatever coordinates the caller wants
    /// rendered (raw or projected).
    pub semantics: Vec<Vec<f64>>,
}

impl AnalyticField {
    pub fn new(scene: &SynthScene) -> Self {
        AnalyticField {
            spec: scene.spec.clone(),
            space: scene.dataset.space.clone(),
            semantics: scene.semantics.clone(),
        }
    }

    /// Replace semantic vectors, e.g. with their PCA projections.
    pub fn with_semantics(mut self, semantics: Vec<Vec<f64>>) -> Self {
        self.semantics = semantics;
        self
    }

    fn blob_at(&self, p: &Vector3<f64>, time: f64) -> Option<usize> {
        (0..self.spec.blobs.len()).find(|&k| {
            let c = self.spec.blob_center(k, time);
            let r = &self.spec.blobs[k].radii;
            let q = Vector3::new((p.x - c.x) / r[0], (p.y - c.y) / r[1], (p.z - c.z) / r[2]);
            q.norm_squared() <= 1.0
        })
    }

    fn in_background(&self, p: &Vector3<f64>) -> bool {
        self.spec.background.as_ref().is_some_and(|bg| p.z <= bg.depth_z)
    }
}

impl FieldQuery for AnalyticField {
    fn n_frames(&self) -> usize {
        self.spec.n_frames
    }

    fn semantic_dims(&self) -> usize {
        self.semantics[0].len()
    }

    fn query_static(&self, positions: &Array2<f64>, _omegas: &Array2<f64>) -> NetOutput {
        let n = positions.nrows();
        let dims = self.semantic_dims();
        let mut out = NetOutput {
            sigma: Array1::zeros(n),
            color: Array2::zeros((n, 3)),
            semantic: Array2::zeros((n, dims)),
            attention: Array1::zeros(n),
            blend: Some(Array1::zeros(n)),
            flow: None,
            occlusion: None,
        };
        let density = SOLID_DENSITY;
        for i in 0..n {
            let p = self.space.from_normalized(&Vector3::new(positions[[i, 0]], positions[[i, 1]], positions[[i, 2]]));
            if self.in_background(&p) {
                let bg = self.spec.background.as_ref().expect("background");
                out.sigma[i] = density;
                out.blend.as_mut().expect("blend")[i] = 1.0;
                let c = background_color(bg, &p);
                for k in 0..3 {
                    out.color[[i, k]] = c[k];
                }
                let region = bg.region(&p);
                for k in 0..dims {
                    out.semantic[[i, k]] = self.semantics[region][k];
                }
                out.attention[i] = bg.attention;
            }
        }
        out
    }

    fn query_dynamic(&self, positions: &Array2<f64>, _omegas: &Array2<f64>, times: &[f64]) -> NetOutput {
        let n = positions.nrows();
        let dims = self.semantic_dims();
        let mut out = NetOutput {
            sigma: Array1::zeros(n),
            color: Array2::zeros((n, 3)),
            semantic: Array2::zeros((n, dims)),
            attention: Array1::zeros(n),
            blend: None,
            flow: Some(Array2::zeros((n, 6))),
            occlusion: Some(Array2::ones((n, 2))),
        };
        for i in 0..n {
            let p = self.space.from_normalized(&Vector3::new(positions[[i, 0]], positions[[i, 1]], positions[[i, 2]]));
            let Some(k) = self.blob_at(&p, times[i]) else {
                continue;
            };
            let b = &self.spec.blobs[k];
            out.sigma[i] = SOLID_DENSITY;
            let hit = Hit {
                t: 0.0,
                point: p,
                label: (k + 1) as u8,
            };
            let c = surface_color(&self.spec, &hit, times[i]);
            for a in 0..3 {
                out.color[[i, a]] = c[a];
            }
            for a in 0..dims {
                out.semantic[[i, a]] = self.semantics[self.spec.background_regions() + k][a];
            }
            out.attention[i] = b.attention;
            let flow = out.flow.as_mut().expect("flow");
            for a in 0..3 {
                let v = b.velocity[a] * self.space.scale;
                flow[[i, a]] = v;
                flow[[i, 3 + a]] = -v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            height: 32,
            width: 32,
            n_frames: 3,
            focal: 35.0,
            levels: vec![(32, 32)],
            window: (16, 16),
            window_stride: 8,
            holdout: vec![],
            ..SynthSpec::two_blob()
        }
    }

    #[test]
    fn empty_scene_is_rejected() {
        let spec = SynthSpec {
            background: None,
            blobs: vec![],
            ..small_spec()
        };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Synth(_))));
    }

    #[test]
    fn static_blob_has_zero_flow() {
        let mut spec = small_spec();
        spec.n_frames = 2;
        spec.blobs.truncate(1);
        spec.blobs[0].velocity = [0.0; 3];
        spec.trajectory = Trajectory::Dolly {
            start: [0.0, 0.0, 4.0],
            step: [0.0; 3],
        };
        let scene = generate_scene(&spec, 1).unwrap();
        for f in &scene.dataset.frames {
            for m in f.flow_fwd.iter().chain(f.flow_bwd.iter()) {
                assert!(m.iter().all(|&v| v.abs() < 1e-5));
            }
        }
    }

    #[test]
    fn translating_flat_blob_moves_one_pixel() {
        let mut spec = small_spec();
        spec.n_frames = 2;
        spec.background = None;
        let depth = 4.0;
        let focal = spec.focal;
        spec.blobs = vec![BlobSpec {
            center: [0.0, 0.0, 0.0],
            radii: [0.5, 0.5, 1e-9],
            velocity: [depth / focal, 0.0, 0.0],
            color: [1.0, 0.0, 0.0],
            attention: 0.5,
        }];
        spec.trajectory = Trajectory::Dolly {
            start: [0.0, 0.0, depth],
            step: [0.0; 3],
        };
        let scene = generate_scene(&spec, 0).unwrap();
        let f = &scene.dataset.frames[0];
        let flow = f.flow_fwd.as_ref().unwrap();
        let mut n = 0;
        for ((r, c), &l) in scene.truth[0].labels.indexed_iter() {
            if l == 1 {
                assert!((flow[[r, c, 0]] - 1.0).abs() < 1e-5 && flow[[r, c, 1]].abs() < 1e-5);
                n += 1;
            }
        }
        assert!(n > 20);
    }

    #[test]
    fn depth_matches_brute_force_intersection() {
        let spec = small_spec();
        let scene = generate_scene(&spec, 2).unwrap();
        let pose = &scene.dataset.frames[1].pose;
        for (r, c) in [(3, 5), (16, 16), (10, 25), (28, 2)] {
            let dir = pose.pixel_direction(r as f64, c as f64);
            // march to the first point inside any solid, then bisect
            let inside = |t: f64| {
                let p = pose.translation + dir * t;
                let bg = spec.background.as_ref().unwrap();
                p.z <= bg.depth_z
                    || (0..spec.blobs.len()).any(|k| {
                        let ctr = spec.blob_center(k, 1.0);
                        let rr = spec.blobs[k].radii;
                        ((p.x - ctr.x) / rr[0]).powi(2) + ((p.y - ctr.y) / rr[1]).powi(2) + ((p.z - ctr.z) / rr[2]).powi(2) <= 1.0
                    })
            };
            let mut t = 0.0;
            while !inside(t + 1e-3) {
                t += 1e-3;
            }
            let (mut lo, mut hi) = (t, t + 1e-3);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if inside(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            assert!((scene.truth[1].depth[[r, c]] - hi).abs() < 1e-6);
        }
    }

    #[test]
    fn two_blobs_give_three_labels() {
        let scene = generate_scene(&small_spec(), 0).unwrap();
        let gt = ground_truth_decomposition(&scene);
        assert_eq!(gt.salient, vec![false, true, true]);
        let mut seen = std::collections::BTreeSet::new();
        for l in &gt.labels {
            seen.extend(l.iter().copied());
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn semantic_vectors_are_orthonormal() {
        let scene = generate_scene(&small_spec(), 5).unwrap();
        for (i, a) in scene.semantics.iter().enumerate() {
            for (j, b) in scene.semantics.iter().enumerate() {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masks_match_rendered_coverage() {
        let scene = generate_scene(&small_spec(), 0).unwrap();
        let t = &scene.truth[0];
        for ((r, c), &l) in t.labels.indexed_iter() {
            let hit = t.hits[r * scene.spec.width + c].unwrap();
            assert_eq!(hit.label, l);
            if l > 0 {
                assert_eq!(t.attention[[r, c]], scene.spec.blobs[l as usize - 1].attention);
            }
        }
    }
}
