use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use saff::camera::CameraPose;
use saff::cluster::render_view_maps;
use saff::field::FieldParams;
use saff::pipeline::{decompose, score_views, PipelineConfig, ScoredView};
use saff::pyramid::build_pyramids;
use saff::scene_io::{
    load_dataset, read_mask_png, read_rgb_png, save_dataset, write_mask_png, write_rgb_png, write_scalar_png,
    SceneDataset,
};
use saff::synth::{generate_scene, ground_truth_decomposition};
use saff::tensor_io::write_array;
use saff::train::fit;
use saff::{Error, Result};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::Command;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::from_toml(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A rendered or scored view: inputs are `input_000..`, hold-out views are
/// `<split>_<index>`.
struct ViewSpec {
    name: String,
    split: String,
    pose: CameraPose,
    flow_pose: Option<CameraPose>,
    mask: Option<Array2<u8>>,
    rgb: Option<Array3<f32>>,
}

fn views(ds: &SceneDataset) -> Vec<ViewSpec> {
    let inputs = ds.frames.iter().enumerate().map(|(i, f)| ViewSpec {
        name: format!("input_{i:03}"),
        split: "input".into(),
        pose: f.pose.clone(),
        flow_pose: Some(ds.normalized_pose(i)),
        mask: f.mask.clone(),
        rgb: Some(f.rgb.clone()),
    });
    let holdout = ds.holdout.iter().enumerate().map(|(j, h)| ViewSpec {
        name: format!("{}_{j:03}", h.split),
        split: h.split.clone(),
        pose: h.pose.clone(),
        flow_pose: None,
        mask: h.mask.clone(),
        rgb: h.rgb.clone(),
    });
    inputs.chain(holdout).collect()
}

fn to_f32<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> ndarray::Array<f32, D> {
    a.mapv(|v| v as f32)
}

fn labels_to_u8(labels: &Array2<usize>) -> Result<Array2<u8>> {
    if labels.iter().any(|&l| l > u8::MAX as usize) {
        return Err(Error::Validation("more than 255 labels cannot be written as a grayscale PNG".into()));
    }
    Ok(labels.mapv(|l| l as u8))
}

/// First three semantic dimensions, each rescaled to [0, 1] over the view.
fn semantic_preview(features: &Array3<f64>) -> Array3<f32> {
    let (h, w, d) = features.dim();
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for c in 0..3.min(d) {
        let ch = features.index_axis(Axis(2), c);
        let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for ((y, x), &v) in ch.indexed_iter() {
            out[[y, x, c]] = ((v - lo) / span) as f32;
        }
    }
    out
}

pub fn execute(command: &Command, cfg: &PipelineConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Validation("an output directory is required (--out or out_dir)".into()))?;
    let dataset = |flag: &Option<PathBuf>| -> Result<PathBuf> {
        flag.clone()
            .or_else(|| cfg.dataset.clone())
            .ok_or_else(|| Error::Validation("a dataset directory is required (--dataset or dataset)".into()))
    };
    match command {
        Command::Synth => synth(cfg, &out),
        Command::Fit { dataset: d } => fit_cmd(cfg, &dataset(d)?, &out),
        Command::Render { dataset: d, checkpoint } => render(cfg, &dataset(d)?, checkpoint, &out),
        Command::Decompose {
            dataset: d,
            checkpoint,
            crf,
        } => decompose_cmd(cfg, &dataset(d)?, checkpoint, *crf, &out),
        Command::Eval { dataset: d, pred } => eval(cfg, &dataset(d)?, pred, &out),
    }
}

#[derive(Serialize)]
struct TruthReport {
    salient: Vec<bool>,
    semantic_vectors: usize,
}

fn synth(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let scene = generate_scene(&cfg.synth, cfg.seed)?;
    save_dataset(&scene.dataset, out)?;
    let gt = ground_truth_decomposition(&scene);
    write_json(
        &out.join("truth.json"),
        &TruthReport {
            salient: gt.salient,
            semantic_vectors: scene.semantics.len(),
        },
    )?;
    let mut m = RunManifest::new("synth", cfg);
    m.outputs = vec!["scene.json".into(), "truth.json".into()];
    m.write(out)?;
    log::info!("wrote {} frames and {} hold-out views to {}", scene.dataset.len(), scene.dataset.holdout.len(), out.display());
    Ok(())
}

fn fit_cmd(cfg: &PipelineConfig, dataset: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let pyramids = build_pyramids(&ds, &cfg.pyramid_config())?;
    let mut train = cfg.train.clone();
    train.field.semantic_dims = pyramids.basis.dims();
    create_dir(out)?;
    let log_path = out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let result = fit(&ds, &pyramids, &train, Some(&mut writer))?;
    writer.flush().map_err(|e| io_err(&log_path, e))?;
    result.params.save_checkpoint(out)?;
    if let Some(last) = result.records.last() {
        log::info!("iteration {}: loss {:.5}, {} clipped steps", last.iter, last.total, result.clipped_steps);
    }
    let mut m = RunManifest::new("fit", cfg);
    m.inputs = vec![dataset.to_path_buf()];
    m.outputs = vec!["checkpoint.json".into(), "train_log.jsonl".into()];
    m.write(out)
}

fn render(cfg: &PipelineConfig, dataset: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let params = FieldParams::load_checkpoint(checkpoint)?;
    let mut outputs = Vec::new();
    for view in views(&ds) {
        let rays = ds.rays_for_pose(&view.pose)?;
        let maps = render_view_maps(&params, &rays, ds.height, ds.width, &cfg.decompose.render, view.flow_pose.as_ref())?;
        let dir = out.join(&view.name);
        create_dir(&dir)?;
        write_array(&dir.join("rgb.bin"), &to_f32(&maps.rgb))?;
        write_array(&dir.join("depth.bin"), &to_f32(&maps.depth))?;
        write_array(&dir.join("semantics.bin"), &to_f32(&maps.features))?;
        write_array(&dir.join("attention.bin"), &to_f32(&maps.attention))?;
        write_array(&dir.join("blend.bin"), &to_f32(&maps.blend))?;
        write_array(&dir.join("opacity.bin"), &to_f32(&maps.opacity))?;
        write_rgb_png(&dir.join("rgb.png"), &to_f32(&maps.rgb))?;
        write_scalar_png(&dir.join("depth.png"), &to_f32(&maps.depth))?;
        write_rgb_png(&dir.join("semantics.png"), &semantic_preview(&maps.features))?;
        write_mask_png(&dir.join("attention.png"), &maps.attention.mapv(|v| saff::scene_io::quantize_u8(v as f32)))?;
        write_mask_png(&dir.join("blend.png"), &maps.blend.mapv(|v| saff::scene_io::quantize_u8(v as f32)))?;
        if let Some(flow) = &maps.flow_magnitude {
            write_array(&dir.join("flow_magnitude.bin"), &to_f32(flow))?;
        }
        outputs.push(view.name);
    }
    let mut m = RunManifest::new("render", cfg);
    m.inputs = vec![dataset.to_path_buf(), checkpoint.to_path_buf()];
    m.outputs = outputs;
    m.write(out)
}

#[derive(Serialize)]
struct SaliencyReport {
    k: usize,
    counts: Vec<usize>,
    salient: Vec<bool>,
    attention_salient: Vec<bool>,
    flow_filter: bool,
    crf: bool,
    /// Per input view, per cluster; `null` where the cluster is absent.
    mean_attention: Vec<Vec<Option<f64>>>,
}

fn decompose_cmd(cfg: &PipelineConfig, dataset: &Path, checkpoint: &Path, crf: bool, out: &Path) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let params = FieldParams::load_checkpoint(checkpoint)?;
    let d = decompose(&params, &ds, &cfg.decompose, cfg.seed)?;
    let use_crf = crf || cfg.decompose.post_process;
    let (inputs, holdout) = if use_crf {
        d.post_processed(&cfg.decompose.crf)?
    } else {
        (d.input_labels(), d.holdout_labels())
    };
    let (base_in, base_hold) = d.baseline_labels(cfg.decompose.baseline_quantile);
    for sub in ["labels", "baseline", "rgb"] {
        create_dir(&out.join(sub))?;
    }
    let rgb = d.inputs.iter().map(|m| &m.rgb).chain(d.holdout.iter().map(|h| &h.maps.rgb));
    let labels = inputs.iter().chain(&holdout);
    let baseline = base_in.iter().chain(&base_hold);
    let mut outputs = Vec::new();
    for (((view, labels), baseline), rgb) in views(&ds).into_iter().zip(labels).zip(baseline).zip(rgb) {
        let file = format!("{}.png", view.name);
        write_mask_png(&out.join("labels").join(&file), &labels_to_u8(labels)?)?;
        write_mask_png(&out.join("baseline").join(&file), &labels_to_u8(baseline)?)?;
        write_rgb_png(&out.join("rgb").join(&file), &to_f32(rgb))?;
        outputs.push(format!("labels/{file}"));
    }
    write_array(&out.join("centroids.bin"), &d.model.centroids)?;
    write_json(
        &out.join("saliency.json"),
        &SaliencyReport {
            k: d.model.k,
            counts: d.model.counts.clone(),
            salient: d.model.salient.clone(),
            attention_salient: d.attention_salient.clone(),
            flow_filter: cfg.decompose.flow_filter,
            crf: use_crf,
            mean_attention: d.model.mean_attention.clone(),
        },
    )?;
    outputs.extend(["centroids.bin".to_string(), "saliency.json".to_string()]);
    let mut m = RunManifest::new("decompose", cfg);
    m.inputs = vec![dataset.to_path_buf(), checkpoint.to_path_buf()];
    m.outputs = outputs;
    m.write(out)
}

fn to_f64(a: &Array3<f32>) -> Array3<f64> {
    a.mapv(|v| v as f64)
}

fn eval(cfg: &PipelineConfig, dataset: &Path, pred: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let mut loaded = Vec::new();
    for view in views(&ds) {
        let Some(mask) = view.mask else {
            return Err(Error::Validation(format!("dataset has no ground truth mask for {}", view.name)));
        };
        let file = format!("{}.png", view.name);
        let predicted = read_mask_png(&pred.join("labels").join(&file))?.mapv(|l| l as usize);
        let rendered = pred.join("rgb").join(&file);
        let images = match (&view.rgb, rendered.exists()) {
            (Some(gt), true) => Some((to_f64(&read_rgb_png(&rendered)?), to_f64(gt))),
            _ => None,
        };
        loaded.push((view.name, view.split, predicted, mask.mapv(|l| l as usize), images));
    }
    let scored: Vec<ScoredView> = loaded
        .iter()
        .map(|(name, split, predicted, truth, images)| ScoredView {
            name: name.clone(),
            split: split.clone(),
            predicted,
            truth,
            rgb: images.as_ref().map(|(a, b)| (a, b)),
        })
        .collect();
    let report = score_views(&scored)?;
    create_dir(out)?;
    write_json(&out.join("eval_report.json"), &report)?;
    print!("{}", report.summary_table());
    let mut m = RunManifest::new("eval", cfg);
    m.inputs = vec![dataset.to_path_buf(), pred.to_path_buf()];
    m.outputs = vec!["eval_report.json".into()];
    m.write(out)
}
