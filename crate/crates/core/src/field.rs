//! Static and dynamic field networks.
//!
//! Both share a ReLU trunk over encoded position (plus encoded time for the
//! dynamic net). Density, blend, flow, occlusion, semantic and attention heads
//! read the trunk output directly; only the color branch sees the view direction.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{encode_backward, encode_into, encoded_len, normalized_time, EncodingConfig};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, softplus_grad_from_output, Dense, Trunk, TrunkCache};
use crate::tensor_io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub depth: usize,
    pub width: usize,
    /// Trunk layer that re-reads the encoded input.
    pub skip: Option<usize>,
    pub semantic_dims: usize,
    pub encoding: EncodingConfig,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            depth: 4,
            width: 128,
            skip: Some(2),
            semantic_dims: 64,
            encoding: EncodingConfig::default(),
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.semantic_dims == 0 {
            return Err(Error::Config(
                "field depth, width and semantic_dims must be positive".into(),
            ));
        }
        if let Some(s) = self.skip {
            if s == 0 || s >= self.depth {
                return Err(Error::Config(format!(
                    "skip layer {s} must lie in 1..{}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    fn color_width(&self) -> usize {
        (self.width / 2).max(4)
    }

    fn position_len(&self) -> usize {
        encoded_len(3, self.encoding.n_freq_position, self.encoding.include_input)
    }

    fn direction_len(&self) -> usize {
        encoded_len(3, self.encoding.n_freq_direction, self.encoding.include_input)
    }

    fn time_len(&self) -> usize {
        if self.encoding.encode_time {
            encoded_len(1, self.encoding.n_freq_time, self.encoding.include_input)
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldNet {
    pub kind: FieldKind,
    pub trunk: Trunk,
    pub density: Dense,
    pub attention: Dense,
    pub semantic: Dense,
    /// Static only.
    pub blend: Option<Dense>,
    /// Dynamic only: forward then backward 3D flow.
    pub flow: Option<Dense>,
    /// Dynamic only: forward then backward occlusion weight.
    pub occlusion: Option<Dense>,
    pub color_feature: Dense,
    pub color_hidden: Dense,
    pub color_out: Dense,
}

/// Per-point outputs of one net for a batch of `B` queries.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub sigma: Array1<f64>,
    /// `(B, 3)`.
    pub color: Array2<f64>,
    /// `(B, D)`.
    pub semantic: Array2<f64>,
    pub attention: Array1<f64>,
    pub blend: Option<Array1<f64>>,
    /// `(B, 6)`: forward flow xyz, backward flow xyz.
    pub flow: Option<Array2<f64>>,
    /// `(B, 2)`: forward, backward.
    pub occlusion: Option<Array2<f64>>,
}

impl NetOutput {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        NetOutput {
            sigma: Array1::zeros(self.sigma.raw_dim()),
            color: Array2::zeros(self.color.raw_dim()),
            semantic: Array2::zeros(self.semantic.raw_dim()),
            attention: Array1::zeros(self.attention.raw_dim()),
            blend: self.blend.as_ref().map(|a| Array1::zeros(a.raw_dim())),
            flow: self.flow.as_ref().map(|a| Array2::zeros(a.raw_dim())),
            occlusion: self.occlusion.as_ref().map(|a| Array2::zeros(a.raw_dim())),
        }
    }

    /// Rows `idx` of every channel.
    pub fn select(&self, idx: &[usize]) -> Self {
        NetOutput {
            sigma: self.sigma.select(Axis(0), idx),
            color: self.color.select(Axis(0), idx),
            semantic: self.semantic.select(Axis(0), idx),
            attention: self.attention.select(Axis(0), idx),
            blend: self.blend.as_ref().map(|a| a.select(Axis(0), idx)),
            flow: self.flow.as_ref().map(|a| a.select(Axis(0), idx)),
            occlusion: self.occlusion.as_ref().map(|a| a.select(Axis(0), idx)),
        }
    }
}

/// Everything the backward pass needs from a batched forward call.
#[derive(Debug, Clone)]
pub struct NetCache {
    positions: Array2<f64>,
    trunk: TrunkCache,
    color_in: Array2<f64>,
    color_hidden: Array2<f64>,
    pub output: NetOutput,
}

impl FieldNet {
    fn init(kind: FieldKind, cfg: &FieldConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        let n_in = cfg.position_len()
            + match kind {
                FieldKind::Static => 0,
                FieldKind::Dynamic => cfg.time_len(),
            };
        let trunk = Trunk::init(n_in, w, cfg.depth, cfg.skip, rng);
        let head = |n_out: usize, rng: &mut ChaCha8Rng| Dense::init(w, n_out, 1.0, rng);
        let density = head(1, rng);
        let attention = head(1, rng);
        let semantic = head(cfg.semantic_dims, rng);
        let (blend, flow, occlusion) = match kind {
            FieldKind::Static => (Some(head(1, rng)), None, None),
            FieldKind::Dynamic => {
                let mut flow = head(6, rng);
                flow.weight.mapv_inplace(|v| v * 0.1);
                (None, Some(flow), Some(head(2, rng)))
            }
        };
        let color_feature = head(w, rng);
        let cw = cfg.color_width();
        let color_hidden = Dense::init(w + cfg.direction_len(), cw, 6f64.sqrt(), rng);
        let color_out = Dense::init(cw, 3, 1.0, rng);
        FieldNet {
            kind,
            trunk,
            density,
            attention,
            semantic,
            blend,
            flow,
            occlusion,
            color_feature,
            color_hidden,
            color_out,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.n_in(), d.n_out());
        FieldNet {
            kind: self.kind,
            trunk: self.trunk.zeros_like(),
            density: z(&self.density),
            attention: z(&self.attention),
            semantic: z(&self.semantic),
            blend: self.blend.as_ref().map(z),
            flow: self.flow.as_ref().map(z),
            occlusion: self.occlusion.as_ref().map(z),
            color_feature: z(&self.color_feature),
            color_hidden: z(&self.color_hidden),
            color_out: z(&self.color_out),
        }
    }

    /// Named dense layers in a fixed order.
    pub fn layers(&self) -> Vec<(String, &Dense)> {
        let mut out: Vec<(String, &Dense)> = self
            .trunk
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("trunk.{i}"), l))
            .collect();
        out.push(("density".into(), &self.density));
        out.push(("attention".into(), &self.attention));
        out.push(("semantic".into(), &self.semantic));
        if let Some(l) = &self.blend {
            out.push(("blend".into(), l));
        }
        if let Some(l) = &self.flow {
            out.push(("flow".into(), l));
        }
        if let Some(l) = &self.occlusion {
            out.push(("occlusion".into(), l));
        }
        out.push(("color_feature".into(), &self.color_feature));
        out.push(("color_hidden".into(), &self.color_hidden));
        out.push(("color_out".into(), &self.color_out));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.trunk.layers.iter_mut().collect();
        out.push(&mut self.density);
        out.push(&mut self.attention);
        out.push(&mut self.semantic);
        if let Some(l) = self.blend.as_mut() {
            out.push(l);
        }
        if let Some(l) = self.flow.as_mut() {
            out.push(l);
        }
        if let Some(l) = self.occlusion.as_mut() {
            out.push(l);
        }
        out.push(&mut self.color_feature);
        out.push(&mut self.color_hidden);
        out.push(&mut self.color_out);
        out
    }

    /// Batched forward pass. `times` holds normalized times (ignored by the static net).
    pub fn forward(
        &self,
        cfg: &FieldConfig,
        positions: &Array2<f64>,
        omegas: &Array2<f64>,
        times: &[f64],
    ) -> NetCache {
        let b = positions.nrows();
        let enc = &cfg.encoding;
        let pl = cfg.position_len();
        let tl = match self.kind {
            FieldKind::Static => 0,
            FieldKind::Dynamic => cfg.time_len(),
        };
        let mut input = Array2::zeros((b, pl + tl));
        for (r, mut row) in input.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            let p = [positions[[r, 0]], positions[[r, 1]], positions[[r, 2]]];
            encode_into(&p, enc.n_freq_position, enc.include_input, &mut row[..pl]);
            if tl > 0 {
                if enc.encode_time {
                    encode_into(&[times[r]], enc.n_freq_time, enc.include_input, &mut row[pl..]);
                } else {
                    row[pl] = times[r];
                }
            }
        }
        let trunk = self.trunk.forward(&input);
        let h = trunk.output();

        let sigma = self.density.forward(h.view()).column(0).mapv(softplus);
        let attention = self.attention.forward(h.view()).column(0).mapv(sigmoid);
        let semantic = self.semantic.forward(h.view()).mapv(f64::tanh);
        let blend = self
            .blend
            .as_ref()
            .map(|l| l.forward(h.view()).column(0).mapv(sigmoid));
        let flow = self.flow.as_ref().map(|l| l.forward(h.view()));
        let occlusion = self
            .occlusion
            .as_ref()
            .map(|l| l.forward(h.view()).mapv(sigmoid));

        let feat = self.color_feature.forward(h.view());
        let dl = cfg.direction_len();
        let w = cfg.width;
        let mut color_in = Array2::zeros((b, w + dl));
        color_in.slice_mut(s![.., ..w]).assign(&feat);
        for r in 0..b {
            let o = [omegas[[r, 0]], omegas[[r, 1]], omegas[[r, 2]]];
            let mut row = color_in.row_mut(r);
            let row = row.as_slice_mut().expect("standard layout");
            encode_into(&o, enc.n_freq_direction, enc.include_input, &mut row[w..]);
        }
        let mut color_hidden = self.color_hidden.forward(color_in.view());
        crate::nn::relu_inplace(&mut color_hidden);
        let color = self.color_out.forward(color_hidden.view()).mapv(sigmoid);

        NetCache {
            positions: positions.clone(),
            trunk,
            color_in,
            color_hidden,
            output: NetOutput {
                sigma,
                color,
                semantic,
                attention,
                blend,
                flow,
                occlusion,
            },
        }
    }

    /// Every ReLU pre-activation of the recorded forward pass, flattened.
    pub fn pre_activations(&self, cache: &NetCache) -> Vec<f64> {
        let mut out: Vec<f64> = self.trunk.pre_activations(&cache.trunk).iter().flatten().copied().collect();
        out.extend(self.color_hidden.forward(cache.color_in.view()).iter());
        out
    }

    /// Accumulates parameter gradients for upstream gradients `d` on the outputs
    /// of `cache`. Returns `d loss / d position` when `want_positions`.
    pub fn backward(
        &self,
        cfg: &FieldConfig,
        cache: &NetCache,
        d: &NetOutput,
        grad: &mut FieldNet,
        want_positions: bool,
    ) -> Option<Array2<f64>> {
        let out = &cache.output;
        let h = cache.trunk.output();
        let hv = h.view();
        let mut dh = Array2::<f64>::zeros(h.raw_dim());

        let column = |v: Array1<f64>| v.insert_axis(Axis(1));

        let dz = column(Zip::from(&d.sigma).and(&out.sigma).map_collect(|g, &y| g * softplus_grad_from_output(y)));
        dh += &self.density.backward(hv, dz.view(), &mut grad.density, true).unwrap();

        let dz = column(Zip::from(&d.attention).and(&out.attention).map_collect(|g, &y| g * y * (1.0 - y)));
        dh += &self.attention.backward(hv, dz.view(), &mut grad.attention, true).unwrap();

        let dz = Zip::from(&d.semantic).and(&out.semantic).map_collect(|g, &y| g * (1.0 - y * y));
        dh += &self.semantic.backward(hv, dz.view(), &mut grad.semantic, true).unwrap();

        if let (Some(layer), Some(y), Some(g), Some(gl)) =
            (&self.blend, &out.blend, &d.blend, grad.blend.as_mut())
        {
            let dz = column(Zip::from(g).and(y).map_collect(|g, &y| g * y * (1.0 - y)));
            dh += &layer.backward(hv, dz.view(), gl, true).unwrap();
        }
        if let (Some(layer), Some(g), Some(gl)) = (&self.flow, &d.flow, grad.flow.as_mut()) {
            dh += &layer.backward(hv, g.view(), gl, true).unwrap();
        }
        if let (Some(layer), Some(y), Some(g), Some(gl)) =
            (&self.occlusion, &out.occlusion, &d.occlusion, grad.occlusion.as_mut())
        {
            let dz = Zip::from(g).and(y).map_collect(|g, &y| g * y * (1.0 - y));
            dh += &layer.backward(hv, dz.view(), gl, true).unwrap();
        }

        let dz = Zip::from(&d.color).and(&out.color).map_collect(|g, &y| g * y * (1.0 - y));
        let mut d_hidden = self
            .color_out
            .backward(cache.color_hidden.view(), dz.view(), &mut grad.color_out, true)
            .unwrap();
        d_hidden.zip_mut_with(&cache.color_hidden, |g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
        let d_color_in = self
            .color_hidden
            .backward(cache.color_in.view(), d_hidden.view(), &mut grad.color_hidden, true)
            .unwrap();
        let d_feat = d_color_in.slice(s![.., ..cfg.width]);
        dh += &self
            .color_feature
            .backward(hv, d_feat, &mut grad.color_feature, true)
            .unwrap();

        let d_input = self.trunk.backward(&cache.trunk, dh, &mut grad.trunk, want_positions)?;
        let enc = &cfg.encoding;
        let pl = cfg.position_len();
        let b = cache.positions.nrows();
        let mut d_pos = Array2::zeros((b, 3));
        for r in 0..b {
            let p = [
                cache.positions[[r, 0]],
                cache.positions[[r, 1]],
                cache.positions[[r, 2]],
            ];
            let g = d_input.row(r);
            let g = g.as_slice().expect("standard layout");
            let mut dp = [0.0; 3];
            encode_backward(&p, enc.n_freq_position, enc.include_input, &g[..pl], &mut dp);
            for a in 0..3 {
                d_pos[[r, a]] = dp[a];
            }
        }
        Some(d_pos)
    }
}

/// Read-only access to a static and a dynamic field in normalized scene space.
pub trait FieldQuery {
    fn n_frames(&self) -> usize;
    fn semantic_dims(&self) -> usize;
    fn query_static(&self, positions: &Array2<f64>, omegas: &Array2<f64>) -> NetOutput;
    /// `times` are frame indices (possibly fractional).
    fn query_dynamic(&self, positions: &Array2<f64>, omegas: &Array2<f64>, times: &[f64]) -> NetOutput;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticSample {
    pub color: [f64; 3],
    pub sigma: f64,
    pub blend: f64,
    pub semantic: Vec<f64>,
    pub attention: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSample {
    pub color: [f64; 3],
    pub sigma: f64,
    pub flow_fwd: [f64; 3],
    pub flow_bwd: [f64; 3],
    pub occlusion_fwd: f64,
    pub occlusion_bwd: f64,
    pub semantic: Vec<f64>,
    pub attention: f64,
}

/// Weights of both fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub n_frames: usize,
    pub static_net: FieldNet,
    pub dynamic_net: FieldNet,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: FieldConfig,
    n_frames: usize,
    tensors: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

pub const CHECKPOINT_FORMAT: &str = "saff-checkpoint/1";

fn check_point(x: &[f64; 3], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} {x:?}")))
    }
}

fn row3(a: &Array2<f64>, r: usize, offset: usize) -> [f64; 3] {
    [a[[r, offset]], a[[r, offset + 1]], a[[r, offset + 2]]]
}

impl FieldParams {
    pub fn new(config: FieldConfig, n_frames: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let static_net = FieldNet::init(FieldKind::Static, &config, &mut rng);
        let dynamic_net = FieldNet::init(FieldKind::Dynamic, &config, &mut rng);
        Ok(FieldParams {
            config,
            n_frames,
            static_net,
            dynamic_net,
        })
    }

    pub fn zeros_like(&self) -> Self {
        FieldParams {
            config: self.config.clone(),
            n_frames: self.n_frames,
            static_net: self.static_net.zeros_like(),
            dynamic_net: self.dynamic_net.zeros_like(),
        }
    }

    pub fn normalized_times(&self, times: &[f64]) -> Vec<f64> {
        times.iter().map(|&t| normalized_time(t, self.n_frames)).collect()
    }

    pub fn forward_static(&self, positions: &Array2<f64>, omegas: &Array2<f64>) -> NetCache {
        self.static_net.forward(&self.config, positions, omegas, &[])
    }

    pub fn forward_dynamic(&self, positions: &Array2<f64>, omegas: &Array2<f64>, times: &[f64]) -> NetCache {
        let t = self.normalized_times(times);
        self.dynamic_net.forward(&self.config, positions, omegas, &t)
    }

    /// Named tensors (`static.trunk.0.weight`, ...) in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (prefix, net) in [("static", &self.static_net), ("dynamic", &self.dynamic_net)] {
            for (name, layer) in net.layers() {
                let [w, b] = layer.params();
                out.push((format!("{prefix}.{name}.weight"), layer.weight.shape().to_vec(), w));
                out.push((format!("{prefix}.{name}.bias"), layer.bias.shape().to_vec(), b));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.named_tensors().into_iter().map(|(_, _, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for net in [&mut self.static_net, &mut self.dynamic_net] {
            for layer in net.layers_mut() {
                out.extend(layer.params_mut());
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Hex SHA-256 over all parameter bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &FieldParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn eval_static(&self, x: [f64; 3], omega: [f64; 3]) -> Result<StaticSample> {
        check_point(&x, "position")?;
        check_point(&omega, "view direction")?;
        let p = Array2::from_shape_vec((1, 3), x.to_vec()).unwrap();
        let o = Array2::from_shape_vec((1, 3), omega.to_vec()).unwrap();
        let out = self.forward_static(&p, &o).output;
        Ok(StaticSample {
            color: row3(&out.color, 0, 0),
            sigma: out.sigma[0],
            blend: out.blend.expect("static net has a blend head")[0],
            semantic: out.semantic.row(0).to_vec(),
            attention: out.attention[0],
        })
    }

    pub fn eval_dynamic(&self, x: [f64; 3], omega: [f64; 3], time_index: f64) -> Result<DynamicSample> {
        check_point(&x, "position")?;
        check_point(&omega, "view direction")?;
        if !time_index.is_finite() {
            return Err(Error::NonFinite(format!("time {time_index}")));
        }
        let p = Array2::from_shape_vec((1, 3), x.to_vec()).unwrap();
        let o = Array2::from_shape_vec((1, 3), omega.to_vec()).unwrap();
        let out = self.forward_dynamic(&p, &o, &[time_index]).output;
        let flow = out.flow.expect("dynamic net has a flow head");
        let occ = out.occlusion.expect("dynamic net has an occlusion head");
        Ok(DynamicSample {
            color: row3(&out.color, 0, 0),
            sigma: out.sigma[0],
            flow_fwd: row3(&flow, 0, 0),
            flow_bwd: row3(&flow, 0, 3),
            occlusion_fwd: occ[[0, 0]],
            occlusion_bwd: occ[[0, 1]],
            semantic: out.semantic.row(0).to_vec(),
            attention: out.attention[0],
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, shape, data) in self.named_tensors() {
            let file = format!("{name}.bin");
            tensor_io::write_tensor(&dir.join(&file), &shape, data)?;
            entries.push(CheckpointEntry { name, shape, file });
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            n_frames: self.n_frames,
            tensors: entries,
        };
        let path = dir.join("checkpoint.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join("checkpoint.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::format(&path, format!("unknown format {:?}", manifest.format)));
        }
        let mut params = FieldParams::new(manifest.config, manifest.n_frames)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::format(
                &path,
                format!("expected {} tensors, found {}", expected.len(), manifest.tensors.len()),
            ));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(Error::format(
                    &path,
                    format!("tensor {} {:?} does not match expected {name} {shape:?}", entry.name, entry.shape),
                ));
            }
            let file = dir.join(&entry.file);
            let (disk_shape, data) = tensor_io::read_tensor::<f64>(&file)?;
            if disk_shape != *shape {
                return Err(Error::format(&file, format!("shape {disk_shape:?}, expected {shape:?}")));
            }
            loaded.push(data);
        }
        for (dst, src) in params.tensors_mut().into_iter().zip(loaded) {
            dst.copy_from_slice(&src);
        }
        Ok(params)
    }
}

impl FieldQuery for FieldParams {
    fn n_frames(&self) -> usize {
        self.n_frames
    }

    fn semantic_dims(&self) -> usize {
        self.config.semantic_dims
    }

    fn query_static(&self, positions: &Array2<f64>, omegas: &Array2<f64>) -> NetOutput {
        self.forward_static(positions, omegas).output
    }

    fn query_dynamic(&self, positions: &Array2<f64>, omegas: &Array2<f64>, times: &[f64]) -> NetOutput {
        self.forward_dynamic(positions, omegas, times).output
    }
}

/// A small configuration for oracle and gradient tests: 2 layers of 8 units.
pub fn tiny_config(seed: u64) -> FieldConfig {
    FieldConfig {
        depth: 2,
        width: 8,
        skip: Some(1),
        semantic_dims: 4,
        encoding: EncodingConfig {
            n_freq_position: 2,
            n_freq_direction: 1,
            n_freq_time: 1,
            include_input: true,
            encode_time: true,
        },
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::encode;

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }

    #[test]
    fn non_color_heads_ignore_view_direction() {
        let p = FieldParams::new(tiny_config(1), 8).unwrap();
        let x = [0.2, -0.4, 0.1];
        let a = p.eval_static(x, unit([0.0, 0.0, 1.0])).unwrap();
        let b = p.eval_static(x, unit([1.0, 0.5, -0.3])).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.blend, b.blend);
        assert_eq!(a.semantic, b.semantic);
        assert_eq!(a.attention, b.attention);
        assert_ne!(a.color, b.color);
        let a = p.eval_dynamic(x, unit([0.0, 0.0, 1.0]), 3.0).unwrap();
        let b = p.eval_dynamic(x, unit([1.0, 0.5, -0.3]), 3.0).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!((a.flow_fwd, a.flow_bwd), (b.flow_fwd, b.flow_bwd));
        assert_eq!((a.occlusion_fwd, a.occlusion_bwd), (b.occlusion_fwd, b.occlusion_bwd));
        assert_eq!(a.semantic, b.semantic);
        assert_eq!(a.attention, b.attention);
    }

    #[test]
    fn zero_flow_head_gives_zero_flow() {
        let mut p = FieldParams::new(tiny_config(2), 4).unwrap();
        let flow = p.dynamic_net.flow.as_mut().unwrap();
        flow.weight.fill(0.0);
        flow.bias.fill(0.0);
        let d = p.eval_dynamic([0.3, 0.3, -0.2], [0.0, 0.0, 1.0], 1.0).unwrap();
        assert_eq!(d.flow_fwd, [0.0; 3]);
        assert_eq!(d.flow_bwd, [0.0; 3]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = FieldParams::new(tiny_config(2), 4).unwrap();
        assert!(p.eval_static([f64::NAN, 0.0, 0.0], [0.0, 0.0, 1.0]).is_err());
        assert!(p.eval_dynamic([0.0; 3], [0.0, 0.0, 1.0], f64::INFINITY).is_err());
    }

    /// Plain nested-loop evaluation of the tiny static net.
    fn hand_static(p: &FieldParams, x: [f64; 3], omega: [f64; 3]) -> (f64, f64, f64, Vec<f64>, [f64; 3]) {
        let cfg = &p.config;
        let e = &cfg.encoding;
        let input = encode(&x, e.n_freq_position, e.include_input);
        let affine = |layer: &Dense, v: &[f64]| -> Vec<f64> {
            (0..layer.n_out())
                .map(|o| layer.bias[o] + (0..v.len()).map(|i| layer.weight[[o, i]] * v[i]).sum::<f64>())
                .collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|a| a.max(0.0)).collect::<Vec<_>>();
        let net = &p.static_net;
        let h0 = relu(affine(&net.trunk.layers[0], &input));
        let mut cat = h0.clone();
        cat.extend(&input);
        let h = relu(affine(&net.trunk.layers[1], &cat));
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let sigma = (1.0 + affine(&net.density, &h)[0].exp()).ln();
        let v = sig(affine(net.blend.as_ref().unwrap(), &h)[0]);
        let a = sig(affine(&net.attention, &h)[0]);
        let s: Vec<f64> = affine(&net.semantic, &h).into_iter().map(f64::tanh).collect();
        let mut cin = affine(&net.color_feature, &h);
        cin.extend(encode(&omega, e.n_freq_direction, e.include_input));
        let hid = relu(affine(&net.color_hidden, &cin));
        let c = affine(&net.color_out, &hid);
        (sigma, v, a, s, [sig(c[0]), sig(c[1]), sig(c[2])])
    }

    #[test]
    fn tiny_static_net_matches_hand_rolled_forward() {
        let p = FieldParams::new(tiny_config(5), 4).unwrap();
        for (x, o) in [
            ([0.1, 0.2, 0.3], unit([0.0, 0.0, 1.0])),
            ([-0.7, 0.4, 0.9], unit([0.3, -1.0, 0.2])),
        ] {
            let got = p.eval_static(x, o).unwrap();
            let (sigma, v, a, s, c) = hand_static(&p, x, o);
            assert!((got.sigma - sigma).abs() < 1e-6);
            assert!((got.blend - v).abs() < 1e-6);
            assert!((got.attention - a).abs() < 1e-6);
            for (g, e) in got.semantic.iter().zip(&s) {
                assert!((g - e).abs() < 1e-6);
            }
            for k in 0..3 {
                assert!((got.color[k] - c[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tiny_dynamic_net_matches_hand_rolled_forward() {
        let p = FieldParams::new(tiny_config(6), 5).unwrap();
        let cfg = &p.config;
        let e = &cfg.encoding;
        let x = [0.25, -0.5, 0.75];
        let t = 2.0;
        let mut input = encode(&x, e.n_freq_position, e.include_input);
        input.extend(encode(&[normalized_time(t, 5)], e.n_freq_time, e.include_input));
        let net = &p.dynamic_net;
        let affine = |layer: &Dense, v: &[f64]| -> Vec<f64> {
            (0..layer.n_out())
                .map(|o| layer.bias[o] + (0..v.len()).map(|i| layer.weight[[o, i]] * v[i]).sum::<f64>())
                .collect()
        };
        let h0: Vec<f64> = affine(&net.trunk.layers[0], &input).into_iter().map(|a| a.max(0.0)).collect();
        let mut cat = h0;
        cat.extend(&input);
        let h: Vec<f64> = affine(&net.trunk.layers[1], &cat).into_iter().map(|a| a.max(0.0)).collect();
        let flow = affine(net.flow.as_ref().unwrap(), &h);
        let occ: Vec<f64> = affine(net.occlusion.as_ref().unwrap(), &h)
            .into_iter()
            .map(|z| 1.0 / (1.0 + (-z).exp()))
            .collect();
        let got = p.eval_dynamic(x, [0.0, 0.0, 1.0], t).unwrap();
        for k in 0..3 {
            assert!((got.flow_fwd[k] - flow[k]).abs() < 1e-6);
            assert!((got.flow_bwd[k] - flow[k + 3]).abs() < 1e-6);
        }
        assert!((got.occlusion_fwd - occ[0]).abs() < 1e-6);
        assert!((got.occlusion_bwd - occ[1]).abs() < 1e-6);
    }

    #[test]
    fn position_gradient_matches_finite_differences() {
        let p = FieldParams::new(tiny_config(8), 4).unwrap();
        let pos = Array2::from_shape_vec((2, 3), vec![0.1, 0.2, -0.3, -0.4, 0.05, 0.6]).unwrap();
        let om = Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 1.0, 0.6, 0.0, 0.8]).unwrap();
        let times = [1.0, 2.0];
        let probe = |out: &NetOutput| -> f64 {
            out.sigma.sum() + 0.5 * out.attention.sum() - out.semantic.sum() + 0.3 * out.color.sum()
                + out.flow.as_ref().unwrap().sum()
                + out.occlusion.as_ref().unwrap().sum()
        };
        let cache = p.forward_dynamic(&pos, &om, &times);
        let mut d = cache.output.zeros_like();
        d.sigma.fill(1.0);
        d.attention.fill(0.5);
        d.semantic.fill(-1.0);
        d.color.fill(0.3);
        d.flow.as_mut().unwrap().fill(1.0);
        d.occlusion.as_mut().unwrap().fill(1.0);
        let mut grad = p.zeros_like();
        let dp = p
            .dynamic_net
            .backward(&p.config, &cache, &d, &mut grad.dynamic_net, true)
            .unwrap();
        for r in 0..2 {
            for a in 0..3 {
                let mut pp = pos.clone();
                let mut pm = pos.clone();
                pp[[r, a]] += 1e-6;
                pm[[r, a]] -= 1e-6;
                let fd = (probe(&p.forward_dynamic(&pp, &om, &times).output)
                    - probe(&p.forward_dynamic(&pm, &om, &times).output))
                    / 2e-6;
                assert!((fd - dp[[r, a]]).abs() < 1e-5, "{fd} vs {}", dp[[r, a]]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = FieldParams::new(tiny_config(3), 6).unwrap();
        p.save_checkpoint(dir.path()).unwrap();
        let q = FieldParams::load_checkpoint(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
    }

    #[test]
    fn tensors_and_tensors_mut_agree() {
        let mut p = FieldParams::new(tiny_config(4), 3).unwrap();
        let lens: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
        let lens_mut: Vec<usize> = p.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(lens, lens_mut);
        assert_eq!(p.num_params(), lens.iter().sum::<usize>());
    }
}
