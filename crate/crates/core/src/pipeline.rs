//! Stage wiring shared by the command line and the tests: configuration,
//! decomposition of a fitted field, and scoring against known masks.

use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{
    assign_view, blend_quantile_baseline, cluster_views, flow_salient_filter, relabel_salient, render_view_maps,
    saliency_vote, ClusterConfig, ClusterModel, ViewAssignment, ViewMaps,
};
use crate::error::{Error, Result};
use crate::field::FieldQuery;
use crate::metrics::{ari_maps, iou, psnr, ssim, EvalReport, FrameReport, SplitReport};
use crate::postprocess::{crf_refine, CrfConfig};
use crate::pyramid::PyramidConfig;
use crate::render::RenderOptions;
use crate::scene_io::SceneDataset;
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeConfig {
    pub cluster: ClusterConfig,
    pub render: RenderOptions,
    /// Require motion as well as saliency when voting.
    pub flow_filter: bool,
    pub post_process: bool,
    pub crf: CrfConfig,
    /// Quantile of the dynamic share `1 - v̂` above which the baseline marks foreground.
    pub baseline_quantile: f64,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig {
            cluster: ClusterConfig::default(),
            render: RenderOptions::default(),
            flow_filter: false,
            post_process: false,
            crf: CrfConfig::default(),
            baseline_quantile: 0.8,
        }
    }
}

/// Everything a run needs. Unset sections fall back to their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthSpec,
    /// `None` derives the pyramid from the synthetic spec's window layout.
    pub pyramid: Option<PyramidConfig>,
    pub train: TrainConfig,
    pub decompose: DecomposeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            dataset: None,
            out_dir: None,
            synth: SynthSpec::default(),
            pyramid: None,
            train: TrainConfig::default(),
            decompose: DecomposeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pyramid_config(&self) -> PyramidConfig {
        self.pyramid.clone().unwrap_or_else(|| self.synth.pyramid_config())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pyramid_config().validate()?;
        self.train.validate()?;
        self.decompose.cluster.validate()?;
        self.decompose.crf.validate()?;
        if !(0.0..1.0).contains(&self.decompose.baseline_quantile) {
            return Err(Error::Config("baseline_quantile must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct HoldoutDecomposition {
    pub split: String,
    pub maps: ViewMaps,
    pub assignment: ViewAssignment,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub model: ClusterModel,
    /// Saliency flags from attention alone, before any flow filtering.
    pub attention_salient: Vec<bool>,
    pub inputs: Vec<ViewMaps>,
    pub holdout: Vec<HoldoutDecomposition>,
}

impl Decomposition {
    /// Per input view: background 0, salient clusters from 1.
    pub fn input_labels(&self) -> Vec<Array2<usize>> {
        (0..self.inputs.len()).map(|v| self.model.foreground_labels(v)).collect()
    }

    pub fn holdout_labels(&self) -> Vec<Array2<usize>> {
        self.holdout
            .iter()
            .map(|h| relabel_salient(&h.assignment.labels, &self.model.salient))
            .collect()
    }

    /// Input and hold-out label maps refined against their rendered RGB and depth.
    pub fn post_processed(&self, crf: &CrfConfig) -> Result<(Vec<Array2<usize>>, Vec<Array2<usize>>)> {
        let refine = |labels: &Array2<usize>, maps: &ViewMaps| crf_refine(labels.view(), maps.rgb.view(), maps.depth.view(), crf);
        let inputs = self
            .input_labels()
            .iter()
            .zip(&self.inputs)
            .map(|(l, m)| refine(l, m))
            .collect::<Result<_>>()?;
        let holdout = self
            .holdout_labels()
            .iter()
            .zip(&self.holdout)
            .map(|(l, h)| refine(l, &h.maps))
            .collect::<Result<_>>()?;
        Ok((inputs, holdout))
    }

    /// Blend-quantile foreground (as labels 0/1) for inputs then hold-out views.
    pub fn baseline_labels(&self, quantile: f64) -> (Vec<Array2<usize>>, Vec<Array2<usize>>) {
        let dynamic = |m: &ViewMaps| m.blend.mapv(|v| 1.0 - v);
        let to_labels = |masks: Vec<Array2<bool>>| masks.into_iter().map(|m| m.mapv(|f| f as usize)).collect();
        let inputs: Vec<_> = self.inputs.iter().map(dynamic).collect();
        let holdout: Vec<_> = self.holdout.iter().map(|h| dynamic(&h.maps)).collect();
        (
            to_labels(blend_quantile_baseline(&inputs, quantile)),
            to_labels(blend_quantile_baseline(&holdout, quantile)),
        )
    }
}

/// Render every input and hold-out view of `field`, cluster the input views,
/// vote on saliency, and label the hold-out views by the stored centroids.
pub fn decompose(field: &dyn FieldQuery, ds: &SceneDataset, cfg: &DecomposeConfig, seed: u64) -> Result<Decomposition> {
    let (h, w) = (ds.height, ds.width);
    let mut inputs = Vec::with_capacity(ds.len());
    for (i, frame) in ds.frames.iter().enumerate() {
        let rays = ds.rays_for_pose(&frame.pose)?;
        let pose = ds.normalized_pose(i);
        inputs.push(render_view_maps(field, &rays, h, w, &cfg.render, Some(&pose))?);
    }
    let features: Vec<_> = inputs.iter().map(|m| m.features.clone()).collect();
    let mut model = cluster_views(&features, &cfg.cluster, seed)?;
    let attention: Vec<_> = inputs.iter().map(|m| m.attention.clone()).collect();
    let attention_salient = saliency_vote(&mut model, &attention, &cfg.cluster);
    if cfg.flow_filter {
        let flow: Vec<_> = inputs
            .iter()
            .map(|m| m.flow_magnitude.clone().expect("input views render flow"))
            .collect();
        model.salient = flow_salient_filter(&model, &flow, &cfg.cluster);
    }
    log::info!(
        "decomposition: {} clusters, salient {:?}",
        model.k,
        model.salient_clusters()
    );
    let mut holdout = Vec::with_capacity(ds.holdout.len());
    for view in &ds.holdout {
        let rays = ds.rays_for_pose(&view.pose)?;
        let maps = render_view_maps(field, &rays, h, w, &cfg.render, None)?;
        let assignment = assign_view(maps.features.view(), &model);
        holdout.push(HoldoutDecomposition {
            split: view.split.clone(),
            maps,
            assignment,
        });
    }
    Ok(Decomposition {
        model,
        attention_salient,
        inputs,
        holdout,
    })
}

/// One scored view: predicted labels (background 0) against ground truth.
pub struct ScoredView<'a> {
    pub name: String,
    pub split: String,
    pub predicted: &'a Array2<usize>,
    pub truth: &'a Array2<usize>,
    pub rgb: Option<(&'a ndarray::Array3<f64>, &'a ndarray::Array3<f64>)>,
}

/// ARI on full label maps, IoU on foreground, and image quality when both
/// images are given; frames are grouped by split.
pub fn score_views(views: &[ScoredView]) -> Result<EvalReport> {
    let mut grouped: std::collections::BTreeMap<String, Vec<FrameReport>> = Default::default();
    for v in views {
        let fg_pred = v.predicted.mapv(|l| l != 0);
        let fg_true = v.truth.mapv(|l| l != 0);
        let (p, s) = match v.rgb {
            Some((a, b)) => (Some(psnr(a.view(), b.view())?), ssim(a.view(), b.view()).ok()),
            None => (None, None),
        };
        grouped.entry(v.split.clone()).or_default().push(FrameReport {
            name: v.name.clone(),
            ari: Some(ari_maps(v.predicted.view(), v.truth.view())?),
            iou: Some(iou(fg_pred.view(), fg_true.view())?),
            psnr: p,
            ssim: s,
        });
    }
    Ok(EvalReport {
        splits: grouped.into_iter().map(|(k, f)| (k, SplitReport::from_frames(f))).collect(),
    })
}

/// Mean ARI over a list of label maps.
pub fn mean_ari(predicted: &[Array2<usize>], truth: &[Array2<usize>]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::Validation(format!("{} predictions for {} truths", predicted.len(), truth.len())));
    }
    let mut total = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        total += ari_maps(p.view(), t.view())?;
    }
    Ok(total / predicted.len() as f64)
}
