//! Ray batch sampling and the optimization loop.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::graph::{LossGraph, RayTarget, TrainBatch};
use crate::loss::{DecaySchedule, LossTerm, LossWeights};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::pyramid::PyramidSet;
use crate::render::sample_interval;
use crate::scene_io::SceneDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub n_samples: usize,
    pub stratified: bool,
    pub field: FieldConfig,
    pub weights: LossWeights,
    pub decay: DecaySchedule,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub seed: u64,
    /// Write a log record every this many iterations (and on the last one).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_rays: 1024,
            n_samples: 32,
            stratified: true,
            field: FieldConfig::default(),
            weights: LossWeights::default(),
            decay: DecaySchedule::default(),
            adam: AdamConfig::default(),
            grad_clip: 100.0,
            seed: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.weights.validate()?;
        if self.batch_rays < 2 {
            return Err(Error::Config("batch_rays must be at least 2".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning rate and gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub decay_rate: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Draws supervised ray batches uniformly over frames and pixels.
pub struct RaySampler<'a> {
    ds: &'a SceneDataset,
    pyramids: &'a PyramidSet,
    rays: Vec<Vec<Ray>>,
    poses: Vec<crate::camera::CameraPose>,
}

impl<'a> RaySampler<'a> {
    pub fn new(ds: &'a SceneDataset, pyramids: &'a PyramidSet) -> Result<Self> {
        if pyramids.frames.len() != ds.len() {
            return Err(Error::Validation(format!(
                "{} pyramids for {} frames",
                pyramids.frames.len(),
                ds.len()
            )));
        }
        let rays = ds.frames.iter().map(|f| ds.rays_for_pose(&f.pose)).collect::<Result<_>>()?;
        let poses = (0..ds.len()).map(|i| ds.normalized_pose(i)).collect();
        Ok(RaySampler {
            ds,
            pyramids,
            rays,
            poses,
        })
    }

    /// Supervision for pixel `(row, col)` of `frame` with sample distances `t`.
    pub fn target(&self, frame: usize, row: usize, col: usize, t: Vec<f64>) -> RayTarget {
        let f = &self.ds.frames[frame];
        let pyr = &self.pyramids.frames[frame];
        let ray = self.rays[frame][row * self.ds.width + col].clone();
        let flow_at = |m: &Option<ndarray::Array3<f32>>| m.as_ref().map(|m| [m[[row, col, 0]] as f64, m[[row, col, 1]] as f64]);
        let levels = pyr.n_levels();
        let weights: Vec<f64> = (0..levels).map(|l| pyr.weights[[l, row, col]]).collect();
        RayTarget {
            ray,
            t,
            rgb: [0, 1, 2].map(|c| f.rgb[[row, col, c]] as f64),
            depth_prior: f.depth_prior[[row, col]] as f64,
            flow_prior: [flow_at(&f.flow_fwd), flow_at(&f.flow_bwd)],
            semantic: (0..levels).map(|l| pyr.feature_at(l, row, col)).collect(),
            attention: (0..levels).map(|l| pyr.attention[l][[row, col]]).collect(),
            semantic_weights: weights.clone(),
            attention_weights: weights,
        }
    }

    pub fn sample<R: Rng>(&self, n_rays: usize, n_samples: usize, stratified: bool, rng: &mut R) -> TrainBatch {
        let (h, w) = (self.ds.height, self.ds.width);
        let rays = (0..n_rays)
            .map(|_| {
                let frame = rng.random_range(0..self.ds.len());
                let px = rng.random_range(0..h * w);
                let ray = &self.rays[frame][px];
                let t = sample_interval(ray.t_near, ray.t_far, n_samples, stratified, rng);
                self.target(frame, px / w, px % w, t)
            })
            .collect();
        TrainBatch {
            rays,
            poses: self.poses.clone(),
        }
    }
}

pub struct FitResult {
    pub params: FieldParams,
    pub records: Vec<TrainRecord>,
    pub clipped_steps: usize,
}

/// Optimize a freshly initialized field.
pub fn fit(ds: &SceneDataset, pyramids: &PyramidSet, cfg: &TrainConfig, log: Option<&mut dyn Write>) -> Result<FitResult> {
    let mut field_cfg = cfg.field.clone();
    field_cfg.seed = cfg.seed;
    let params = FieldParams::new(field_cfg, ds.len())?;
    fit_from(params, ds, pyramids, cfg, log)
}

/// Continue optimizing `params`. Deterministic given `cfg.seed`.
pub fn fit_from(
    mut params: FieldParams,
    ds: &SceneDataset,
    pyramids: &PyramidSet,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitResult> {
    cfg.validate()?;
    let dims = pyramids.basis.dims();
    if params.config.semantic_dims != dims {
        return Err(Error::Config(format!(
            "field has {} semantic dims, pyramid has {dims}",
            params.config.semantic_dims
        )));
    }
    let sampler = RaySampler::new(ds, pyramids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c);
    let mut adam = Adam::new(cfg.adam, params.tensors().iter().map(|t| t.len()));
    let mut records = Vec::new();
    let mut clipped_steps = 0;
    for iter in 0..cfg.iterations {
        let weights = cfg.weights.scheduled(&cfg.decay, iter);
        let terms: BTreeSet<LossTerm> = LossTerm::ALL.into_iter().filter(|&t| weights.get(t) != 0.0).collect();
        let batch = sampler.sample(cfg.batch_rays, cfg.n_samples, cfg.stratified, &mut rng);
        let graph = LossGraph::record_terms(&params, &batch, &terms)?;
        let total = graph.total(&weights);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        let mut grad = graph.backward(&params, &weights)?;
        let norm = clip_global_norm(&mut grad.tensors_mut(), cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        let clipped = norm > cfg.grad_clip;
        if clipped {
            clipped_steps += 1;
            log::debug!("iteration {iter}: gradient norm {norm:.3e} clipped to {}", cfg.grad_clip);
        }
        adam.update(&mut params.tensors_mut(), &grad.tensors());
        if iter % cfg.log_every.max(1) == 0 || iter + 1 == cfg.iterations {
            let record = TrainRecord {
                iter,
                total,
                terms: graph.values().iter().map(|(t, v)| (t.name().to_string(), *v)).collect(),
                decay_rate: cfg.decay.rate(iter),
                grad_norm: norm,
                clipped,
            };
            if let Some(out) = log.as_deref_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(out, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            records.push(record);
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: cfg.iterations });
    }
    Ok(FitResult {
        params,
        records,
        clipped_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingConfig;
    use crate::pyramid::build_pyramids;
    use crate::synth::{generate_scene, SynthSpec};

    fn setup() -> (SceneDataset, PyramidSet, TrainConfig) {
        let spec = SynthSpec {
            height: 24,
            width: 24,
            n_frames: 3,
            focal: 26.0,
            semantic_dims: 8,
            levels: vec![(24, 24)],
            window: (16, 16),
            window_stride: 8,
            holdout: vec![],
            ..SynthSpec::two_blob()
        };
        let scene = generate_scene(&spec, 3).unwrap();
        let pyr = build_pyramids(&scene.dataset, &spec.pyramid_config()).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            batch_rays: 48,
            n_samples: 12,
            field: FieldConfig {
                depth: 2,
                width: 32,
                skip: Some(1),
                semantic_dims: 8,
                encoding: EncodingConfig {
                    n_freq_position: 4,
                    n_freq_direction: 2,
                    n_freq_time: 2,
                    ..Default::default()
                },
                seed: 0,
            },
            adam: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            seed: 4,
            ..Default::default()
        };
        (scene.dataset, pyr, cfg)
    }

    #[test]
    fn zero_iterations_returns_the_initialization() {
        let (ds, pyr, cfg) = setup();
        let out = fit(&ds, &pyr, &cfg, None).unwrap();
        let mut field = cfg.field.clone();
        field.seed = cfg.seed;
        assert_eq!(out.params, FieldParams::new(field, ds.len()).unwrap());
        assert!(out.records.is_empty());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (ds, pyr, mut cfg) = setup();
        cfg.iterations = 4;
        let mut log_a = Vec::new();
        let a = fit(&ds, &pyr, &cfg, Some(&mut log_a)).unwrap();
        let b = fit(&ds, &pyr, &cfg, None).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let lines: Vec<TrainRecord> = String::from_utf8(log_a)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, a.records);
        assert_eq!(lines.len(), 4);
        assert!(lines[0].terms.contains_key("photometric") && lines[0].terms.contains_key("cycle"));
    }

    #[test]
    fn photometric_loss_drops_during_training() {
        let (ds, pyr, mut cfg) = setup();
        cfg.iterations = 500;
        let sampler = RaySampler::new(&ds, &pyr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = sampler.sample(256, cfg.n_samples, false, &mut rng);
        let only: BTreeSet<_> = [LossTerm::Photometric].into_iter().collect();
        let before = {
            let mut field = cfg.field.clone();
            field.seed = cfg.seed;
            let p = FieldParams::new(field, ds.len()).unwrap();
            LossGraph::record_terms(&p, &probe, &only).unwrap().value(LossTerm::Photometric).unwrap()
        };
        let out = fit(&ds, &pyr, &cfg, None).unwrap();
        let after = LossGraph::record_terms(&out.params, &probe, &only)
            .unwrap()
            .value(LossTerm::Photometric)
            .unwrap();
        assert!(after < before, "photometric {before} -> {after}");
    }

    #[test]
    fn non_finite_loss_aborts_with_the_iteration() {
        let (mut ds, pyr, mut cfg) = setup();
        cfg.iterations = 3;
        ds.frames.iter_mut().for_each(|f| f.rgb.fill(f32::NAN));
        match fit(&ds, &pyr, &cfg, None) {
            Err(Error::NonFiniteLoss { iteration }) => assert_eq!(iteration, 0),
            other => panic!("expected a non-finite loss error, got {:?}", other.err()),
        }
    }

    #[test]
    fn semantic_width_must_match_the_pyramid() {
        let (ds, pyr, mut cfg) = setup();
        cfg.field.semantic_dims = 5;
        assert!(matches!(fit(&ds, &pyr, &cfg, None), Err(Error::Config(_))));
    }
}
