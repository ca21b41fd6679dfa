//! Scene datasets: frames, prior maps, sliding-window extractor outputs and
//! hold-out poses, stored as a JSON manifest next to PNG images and tensor files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Ray, SceneSpace};
use crate::error::{Error, Result};
use crate::tensor_io;

pub const MANIFEST_NAME: &str = "scene.json";
pub const MANIFEST_FORMAT: &str = "saff-scene/1";

/// One extractor window: a patch-grid feature map and attention map placed
/// inside a pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMap {
    pub level: usize,
    /// Top-left corner `(x, y)` in level pixels.
    pub origin: (usize, usize),
    /// Window extent `(width, height)` in level pixels.
    pub size: (usize, usize),
    pub stride: usize,
    /// `(grid_h, grid_w, dims)`.
    pub features: Array3<f32>,
    /// `(grid_h, grid_w)`, values in [0, 1].
    pub attention: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    /// `(H, W, 3)` in [0, 1].
    pub rgb: Array3<f32>,
    /// Relative (affine-ambiguous) depth.
    pub depth_prior: Array2<f32>,
    /// Optical flow to the next frame, `(H, W, 2)` as (dx, dy) pixels. Absent on the last frame.
    pub flow_fwd: Option<Array3<f32>>,
    /// Optical flow to the previous frame. Absent on the first frame.
    pub flow_bwd: Option<Array3<f32>>,
    pub windows: Vec<WindowMap>,
    pub pose: CameraPose,
    /// Optional annotation mask: 0 = background, one nonzero value per instance.
    pub mask: Option<Array2<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutView {
    pub split: String,
    pub pose: CameraPose,
    pub rgb: Option<Array3<f32>>,
    pub mask: Option<Array2<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub height: usize,
    pub width: usize,
    /// World-unit near/far depths used to bound the frusta.
    pub near: f64,
    pub far: f64,
    /// Pyramid level sizes `(h, w)`, coarse to fine.
    pub levels: Vec<(usize, usize)>,
    pub frames: Vec<FrameBundle>,
    pub holdout: Vec<HoldoutView>,
    pub space: SceneSpace,
}

impl SceneDataset {
    /// Assemble a dataset from its parts, computing the scene space and validating.
    pub fn new(
        height: usize,
        width: usize,
        near: f64,
        far: f64,
        levels: Vec<(usize, usize)>,
        frames: Vec<FrameBundle>,
        holdout: Vec<HoldoutView>,
    ) -> Result<Self> {
        let poses: Vec<&CameraPose> = frames.iter().map(|f| &f.pose).collect();
        let space = SceneSpace::from_frusta(&poses, width, height, near, far)?;
        let ds = SceneDataset {
            height,
            width,
            near,
            far,
            levels,
            frames,
            holdout,
            space,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n < 2 {
            return Err(Error::Validation(format!("need at least 2 frames, got {n}")));
        }
        let (h, w) = (self.height, self.width);
        let mut seen = BTreeSet::new();
        for (i, f) in self.frames.iter().enumerate() {
            f.pose.validate()?;
            if f.pose.time_index != i || !seen.insert(f.pose.time_index) {
                return Err(Error::Validation(format!(
                    "frame {i} has time index {}, expected {i}",
                    f.pose.time_index
                )));
            }
            let check = |name: &str, shape: &[usize]| -> Result<()> {
                if shape[0] != h || shape[1] != w {
                    return Err(Error::Validation(format!(
                        "frame {i}: {name} is {}x{}, expected {h}x{w}",
                        shape[0], shape[1]
                    )));
                }
                Ok(())
            };
            check("rgb", f.rgb.shape())?;
            if f.rgb.shape()[2] != 3 {
                return Err(Error::Validation(format!("frame {i}: rgb must have 3 channels")));
            }
            check("depth_prior", f.depth_prior.shape())?;
            if f.depth_prior.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("frame {i}: depth_prior is not finite")));
            }
            for (name, flow) in [("flow_fwd", &f.flow_fwd), ("flow_bwd", &f.flow_bwd)] {
                if let Some(flow) = flow {
                    check(name, flow.shape())?;
                    if flow.shape()[2] != 2 || flow.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Validation(format!(
                            "frame {i}: {name} must be finite (H, W, 2)"
                        )));
                    }
                }
            }
            if i + 1 < n && f.flow_fwd.is_none() {
                return Err(Error::Validation(format!("frame {i}: missing flow_fwd")));
            }
            if i > 0 && f.flow_bwd.is_none() {
                return Err(Error::Validation(format!("frame {i}: missing flow_bwd")));
            }
            if let Some(mask) = &f.mask {
                check("mask", mask.shape())?;
            }
            for (k, win) in f.windows.iter().enumerate() {
                if win.level >= self.levels.len().max(1) {
                    return Err(Error::Validation(format!(
                        "frame {i} window {k}: level {} out of range",
                        win.level
                    )));
                }
                let fs = win.features.shape();
                if win.attention.shape() != [fs[0], fs[1]] {
                    return Err(Error::Validation(format!(
                        "frame {i} window {k}: attention grid does not match feature grid"
                    )));
                }
                if win.attention.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return Err(Error::Validation(format!(
                        "frame {i} window {k}: attention outside [0, 1]"
                    )));
                }
            }
        }
        for pose in self.frames.iter().map(|f| &f.pose) {
            let p = self.space.to_normalized(&pose.translation);
            if !self.space.bounds.contains(&p, 1e-9) {
                return Err(Error::Validation("scene bounds do not contain all cameras".into()));
            }
        }
        for v in &self.holdout {
            v.pose.validate()?;
            if v.pose.time_index >= n {
                return Err(Error::Validation(format!(
                    "hold-out view has time index {} beyond {n} frames",
                    v.pose.time_index
                )));
            }
        }
        Ok(())
    }

    pub fn rays_for_pose(&self, pose: &CameraPose) -> Result<Vec<Ray>> {
        self.space.generate_rays(pose, self.height, self.width)
    }

    pub fn normalized_pose(&self, frame: usize) -> CameraPose {
        self.space.normalize_pose(&self.frames[frame].pose)
    }

    pub fn feature_dims(&self) -> Option<usize> {
        self.frames
            .iter()
            .flat_map(|f| f.windows.first())
            .map(|w| w.features.shape()[2])
            .next()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    height: usize,
    width: usize,
    near: f64,
    far: f64,
    levels: Vec<(usize, usize)>,
    frames: Vec<FrameRecord>,
    #[serde(default)]
    holdout: Vec<HoldoutRecord>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    pose: CameraPose,
    rgb: String,
    depth: String,
    flow_fwd: Option<String>,
    flow_bwd: Option<String>,
    #[serde(default)]
    mask: Option<String>,
    windows: Vec<WindowRecord>,
}

#[derive(Serialize, Deserialize)]
struct WindowRecord {
    level: usize,
    origin: (usize, usize),
    size: (usize, usize),
    stride: usize,
    features: String,
    attention: String,
}

#[derive(Serialize, Deserialize)]
struct HoldoutRecord {
    split: String,
    pose: CameraPose,
    rgb: Option<String>,
    mask: Option<String>,
}

pub fn load_dataset(root: &Path) -> Result<SceneDataset> {
    let manifest_path = root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported format {:?}", m.format),
        ));
    }
    let mut frames = Vec::with_capacity(m.frames.len());
    for rec in &m.frames {
        let windows = rec
            .windows
            .iter()
            .map(|w| {
                Ok(WindowMap {
                    level: w.level,
                    origin: w.origin,
                    size: w.size,
                    stride: w.stride,
                    features: tensor_io::read_array_dim(&root.join(&w.features))?,
                    attention: tensor_io::read_array_dim(&root.join(&w.attention))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let opt_tensor = |p: &Option<String>| -> Result<Option<Array3<f32>>> {
            p.as_ref()
                .map(|p| tensor_io::read_array_dim(&root.join(p)))
                .transpose()
        };
        frames.push(FrameBundle {
            rgb: read_rgb_png(&root.join(&rec.rgb))?,
            depth_prior: tensor_io::read_array_dim(&root.join(&rec.depth))?,
            flow_fwd: opt_tensor(&rec.flow_fwd)?,
            flow_bwd: opt_tensor(&rec.flow_bwd)?,
            windows,
            pose: rec.pose.clone(),
            mask: rec
                .mask
                .as_ref()
                .map(|p| read_mask_png(&root.join(p)))
                .transpose()?,
        });
    }
    let holdout = m
        .holdout
        .iter()
        .map(|h| {
            Ok(HoldoutView {
                split: h.split.clone(),
                pose: h.pose.clone(),
                rgb: h.rgb.as_ref().map(|p| read_rgb_png(&root.join(p))).transpose()?,
                mask: h.mask.as_ref().map(|p| read_mask_png(&root.join(p))).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SceneDataset::new(m.height, m.width, m.near, m.far, m.levels, frames, holdout)
}

pub fn save_dataset(ds: &SceneDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut frames = Vec::with_capacity(ds.frames.len());
    for (i, f) in ds.frames.iter().enumerate() {
        let rgb = format!("rgb/{i:03}.png");
        write_rgb_png(&root.join(&rgb), &f.rgb)?;
        let depth = format!("depth/{i:03}.bin");
        tensor_io::write_array(&root.join(&depth), &f.depth_prior)?;
        let flow_path = |dir: &str, flow: &Option<Array3<f32>>| -> Result<Option<String>> {
            flow.as_ref()
                .map(|flow| {
                    let p = format!("flow/{dir}_{i:03}.bin");
                    tensor_io::write_array(&root.join(&p), flow)?;
                    Ok(p)
                })
                .transpose()
        };
        let flow_fwd = flow_path("fwd", &f.flow_fwd)?;
        let flow_bwd = flow_path("bwd", &f.flow_bwd)?;
        let mask = f
            .mask
            .as_ref()
            .map(|m| {
                let p = format!("masks/input/{i:03}.png");
                write_mask_png(&root.join(&p), m)?;
                Ok::<_, Error>(p)
            })
            .transpose()?;
        let mut windows = Vec::with_capacity(f.windows.len());
        for (k, w) in f.windows.iter().enumerate() {
            let features = format!("windows/{i:03}_l{}_{k:03}_feat.bin", w.level);
            let attention = format!("windows/{i:03}_l{}_{k:03}_attn.bin", w.level);
            tensor_io::write_array(&root.join(&features), &w.features)?;
            tensor_io::write_array(&root.join(&attention), &w.attention)?;
            windows.push(WindowRecord {
                level: w.level,
                origin: w.origin,
                size: w.size,
                stride: w.stride,
                features,
                attention,
            });
        }
        frames.push(FrameRecord {
            pose: f.pose.clone(),
            rgb,
            depth,
            flow_fwd,
            flow_bwd,
            mask,
            windows,
        });
    }
    let mut holdout = Vec::with_capacity(ds.holdout.len());
    for (k, h) in ds.holdout.iter().enumerate() {
        let rgb = h
            .rgb
            .as_ref()
            .map(|img| {
                let p = format!("holdout/{}/{k:03}.png", h.split);
                write_rgb_png(&root.join(&p), img)?;
                Ok::<_, Error>(p)
            })
            .transpose()?;
        let mask = h
            .mask
            .as_ref()
            .map(|m| {
                let p = format!("masks/{}/{k:03}.png", h.split);
                write_mask_png(&root.join(&p), m)?;
                Ok::<_, Error>(p)
            })
            .transpose()?;
        holdout.push(HoldoutRecord {
            split: h.split.clone(),
            pose: h.pose.clone(),
            rgb,
            mask,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        height: ds.height,
        width: ds.width,
        near: ds.near,
        far: ds.far,
        levels: ds.levels.clone(),
        frames,
        holdout,
    };
    let path = root.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_image(path: &Path, img: image::DynamicImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        img.get_pixel(c as u32, r as u32)[k] as f32 / 255.0
    }))
}

pub fn quantize_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, rgb: &Array3<f32>) -> Result<()> {
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    let img = image::RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        image::Rgb([
            quantize_u8(rgb[[r, c, 0]]),
            quantize_u8(rgb[[r, c, 1]]),
            quantize_u8(rgb[[r, c, 2]]),
        ])
    });
    save_image(path, image::DynamicImage::ImageRgb8(img))
}

pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0]
    }))
}

pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |c, r| {
        image::Luma([mask[[r as usize, c as usize]]])
    });
    save_image(path, image::DynamicImage::ImageLuma8(img))
}

/// Grayscale preview of a scalar map, linearly rescaled to its own range.
pub fn write_scalar_png(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let norm = map.mapv(|v| ((v - lo) / span * 255.0).round() as u8);
    write_mask_png(path, &norm)
}

/// Where a manifest lives for a dataset root.
pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_NAME)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn tiny_dataset(n: usize) -> SceneDataset {
        let (h, w) = (6, 8);
        let frames = (0..n)
            .map(|i| {
                let pose = CameraPose::look_at(
                    Vector3::new(0.1 * i as f64, 0.0, 3.0),
                    Vector3::zeros(),
                    Vector3::y(),
                    8.0,
                    w,
                    h,
                    i,
                );
                FrameBundle {
                    rgb: Array3::from_shape_fn((h, w, 3), |(r, c, k)| {
                        ((r * 7 + c * 3 + k + i) % 256) as f32 / 255.0
                    }),
                    depth_prior: Array2::from_elem((h, w), 0.5 + i as f32),
                    flow_fwd: (i + 1 < n).then(|| Array3::from_elem((h, w, 2), 0.25)),
                    flow_bwd: (i > 0).then(|| Array3::from_elem((h, w, 2), -0.25)),
                    windows: vec![WindowMap {
                        level: 0,
                        origin: (0, 0),
                        size: (w, h),
                        stride: 4,
                        features: Array3::from_elem((2, 2, 3), 0.1 * i as f32),
                        attention: Array2::from_elem((2, 2), 0.5),
                    }],
                    pose,
                    mask: Some(Array2::from_shape_fn((h, w), |(r, c)| ((r + c) % 3) as u8)),
                }
            })
            .collect();
        SceneDataset::new(h, w, 1.0, 5.0, vec![(h, w)], frames, vec![]).unwrap()
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(4);
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.rgb, b.rgb);
            assert_eq!(a.depth_prior, b.depth_prior);
            assert_eq!(a.flow_fwd, b.flow_fwd);
            assert_eq!(a.windows, b.windows);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.pose, b.pose);
        }
        assert_eq!(ds.space, back.space);
        assert_eq!(ds, back);
    }

    #[test]
    fn wrong_depth_shape_names_frame_and_map() {
        let mut ds = tiny_dataset(3);
        ds.frames[1].depth_prior = Array2::zeros((5, 8));
        let err = ds.validate().unwrap_err().to_string();
        assert!(err.contains("frame 1") && err.contains("depth_prior"), "{err}");
    }

    #[test]
    fn wrong_depth_shape_on_disk_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(3);
        save_dataset(&ds, dir.path()).unwrap();
        tensor_io::write_array(&dir.path().join("depth/002.bin"), &Array2::<f32>::zeros((3, 3)))
            .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny_dataset(2), dir.path()).unwrap();
        fs::remove_file(dir.path().join("rgb/001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("rgb/001.png"), "{err}");
    }

    #[test]
    fn single_frame_is_rejected() {
        let ds = tiny_dataset(2);
        let mut one = ds.clone();
        one.frames.truncate(1);
        assert!(one.validate().is_err());
    }

    #[test]
    fn rays_start_inside_bounds_and_are_deterministic() {
        let ds = tiny_dataset(3);
        let rays = ds.rays_for_pose(&ds.frames[1].pose).unwrap();
        assert_eq!(rays.len(), 48);
        for r in &rays {
            assert!((r.direction.norm() - 1.0).abs() < 1e-12);
            assert!(r.t_near < r.t_far);
            assert!(ds.space.bounds.contains(&r.at(r.t_near), 1e-9));
        }
        assert_eq!(rays, ds.rays_for_pose(&ds.frames[1].pose).unwrap());
    }

    #[test]
    fn camera_far_outside_the_box_is_an_error() {
        let ds = tiny_dataset(2);
        let mut pose = ds.frames[0].pose.clone();
        pose.translation = Vector3::new(500.0, 0.0, 0.0);
        assert!(ds.rays_for_pose(&pose).is_err());
    }
}
