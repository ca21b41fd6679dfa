//! Ray sampling, static/dynamic mixture compositing, scene-flow warped
//! compositing and projection of scene flow into a neighboring camera.

use nalgebra::Vector3;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Ray};
use crate::error::{Error, Result};
use crate::field::{FieldQuery, NetOutput};

/// Neighboring time step of a source frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Neighbor {
    /// `j = i + 1`, reached through the forward flow.
    Next,
    /// `j = i - 1`, reached through the backward flow.
    Prev,
}

impl Neighbor {
    pub const BOTH: [Neighbor; 2] = [Neighbor::Next, Neighbor::Prev];

    /// Column of the 6-wide flow output holding this direction's xyz.
    pub fn flow_offset(self) -> usize {
        match self {
            Neighbor::Next => 0,
            Neighbor::Prev => 3,
        }
    }

    /// Column of the occlusion output for this direction.
    pub fn occlusion_column(self) -> usize {
        match self {
            Neighbor::Next => 0,
            Neighbor::Prev => 1,
        }
    }

    pub fn opposite(self) -> Neighbor {
        match self {
            Neighbor::Next => Neighbor::Prev,
            Neighbor::Prev => Neighbor::Next,
        }
    }

    /// The neighbor time index if it exists in a sequence of `n_frames`.
    pub fn target(self, i: usize, n_frames: usize) -> Option<usize> {
        match self {
            Neighbor::Next => (i + 1 < n_frames).then_some(i + 1),
            Neighbor::Prev => i.checked_sub(1),
        }
    }

    /// Which neighbor `j` is of `i`, if any.
    pub fn between(i: usize, j: usize) -> Result<Neighbor> {
        if j == i + 1 {
            Ok(Neighbor::Next)
        } else if j + 1 == i {
            Ok(Neighbor::Prev)
        } else {
            Err(Error::Render(format!("time {j} is not a neighbor of {i}")))
        }
    }
}

/// Sample distances in `[t_near, t_far]`: bin midpoints, or one uniform draw per bin.
pub fn sample_ray(ray: &Ray, n_samples: usize, stratified: bool, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_interval(ray.t_near, ray.t_far, n_samples, stratified, &mut rng)
}

pub fn sample_interval<R: Rng>(t_near: f64, t_far: f64, n: usize, stratified: bool, rng: &mut R) -> Vec<f64> {
    assert!(n >= 1, "need at least one sample per ray");
    let width = (t_far - t_near) / n as f64;
    (0..n)
        .map(|k| {
            let u: f64 = if stratified { rng.random() } else { 0.5 };
            t_near + (k as f64 + u) * width
        })
        .collect()
}

/// Quadrature intervals: `δ_k = t_{k+1} - t_k`, the last one reaching `t_far`.
pub fn deltas(t: &[f64], t_far: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(t.len());
    for k in 0..t.len() {
        let next = if k + 1 < t.len() { t[k + 1] } else { t_far };
        let d = next - t[k];
        if !(d >= 0.0) {
            return Err(Error::Render(format!(
                "sample distances must increase up to t_far (t[{k}] = {}, next = {next})",
                t[k]
            )));
        }
        out.push(d);
    }
    Ok(out)
}

/// Combined density `σ = vσˢ + (1-v)σᵈ` and the static share `m = vσˢ / σ`
/// (taken as `v` where `σ = 0`).
pub fn mix_density(v: f64, sigma_s: f64, sigma_d: f64) -> (f64, f64) {
    let a = v * sigma_s;
    let sigma = a + (1.0 - v) * sigma_d;
    let m = if sigma > 0.0 { a / sigma } else { v };
    (sigma, m)
}

/// Chain rule through `mix_density`: returns `(dv, dσˢ, dσᵈ)`.
pub fn mix_density_backward(v: f64, sigma_s: f64, sigma_d: f64, d_sigma: f64, d_m: f64) -> (f64, f64, f64) {
    let sigma = v * sigma_s + (1.0 - v) * sigma_d;
    let mut dv = d_sigma * (sigma_s - sigma_d);
    let mut ds = d_sigma * v;
    let mut dd = d_sigma * (1.0 - v);
    if sigma > 0.0 {
        let inv2 = 1.0 / (sigma * sigma);
        dv += d_m * sigma_s * sigma_d * inv2;
        ds += d_m * v * (1.0 - v) * sigma_d * inv2;
        dd -= d_m * v * (1.0 - v) * sigma_s * inv2;
    } else {
        dv += d_m;
    }
    (dv, ds, dd)
}

/// Alpha-compositing record along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmittance {
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `T_k`, transmittance before sample `k`.
    pub trans: Vec<f64>,
    /// `T_k α_k`.
    pub weights: Vec<f64>,
    /// Transmittance past the last sample.
    pub t_final: f64,
}

impl Transmittance {
    pub fn new(delta: Vec<f64>, sigma: &[f64]) -> Self {
        let n = sigma.len();
        let mut alpha = Vec::with_capacity(n);
        let mut trans = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut t = 1.0;
        for k in 0..n {
            let a = -(-sigma[k] * delta[k]).exp_m1();
            alpha.push(a);
            trans.push(t);
            weights.push(t * a);
            t *= 1.0 - a;
        }
        Transmittance {
            delta,
            alpha,
            trans,
            weights,
            t_final: t,
        }
    }

    pub fn opacity(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `d loss / d σ_k` given `d loss / d w_k`.
    pub fn backward(&self, d_weights: &[f64]) -> Vec<f64> {
        let n = self.weights.len();
        let mut out = vec![0.0; n];
        let mut tail = 0.0;
        for k in (0..n).rev() {
            out[k] = self.delta[k] * (self.trans[k] * (1.0 - self.alpha[k]) * d_weights[k] - tail);
            tail += self.weights[k] * d_weights[k];
        }
        out
    }
}

/// The samples of one ray with both fields evaluated.
#[derive(Debug, Clone)]
pub struct RaySampleBatch {
    pub ray: Ray,
    pub t: Vec<f64>,
    /// `(K, 3)` sample positions `x - ω t`.
    pub positions: Array2<f64>,
    pub static_out: NetOutput,
    pub dynamic_out: NetOutput,
}

impl RaySampleBatch {
    pub fn positions_for(ray: &Ray, t: &[f64]) -> Array2<f64> {
        let mut p = Array2::zeros((t.len(), 3));
        for (k, &tk) in t.iter().enumerate() {
            let x = ray.at(tk);
            p[[k, 0]] = x.x;
            p[[k, 1]] = x.y;
            p[[k, 2]] = x.z;
        }
        p
    }

    pub fn omegas_for(ray: &Ray, n: usize) -> Array2<f64> {
        let o = ray.omega();
        Array2::from_shape_fn((n, 3), |(_, a)| o[a])
    }

    /// Evaluate both fields at the given distances of `ray`.
    pub fn query(field: &dyn FieldQuery, ray: &Ray, t: Vec<f64>) -> Self {
        let positions = Self::positions_for(ray, &t);
        let omegas = Self::omegas_for(ray, t.len());
        let times = vec![ray.time_index as f64; t.len()];
        let static_out = field.query_static(&positions, &omegas);
        let dynamic_out = field.query_dynamic(&positions, &omegas, &times);
        RaySampleBatch {
            ray: ray.clone(),
            t,
            positions,
            static_out,
            dynamic_out,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn blend(&self) -> &Array1<f64> {
        self.static_out.blend.as_ref().expect("static samples carry a blend weight")
    }

    /// Combined density and static share per sample.
    pub fn mixture(&self) -> (Vec<f64>, Vec<f64>) {
        self.mixture_with(&self.dynamic_out)
    }

    fn mixture_with(&self, dynamic: &NetOutput) -> (Vec<f64>, Vec<f64>) {
        let v = self.blend();
        (0..self.len())
            .map(|k| mix_density(v[k], self.static_out.sigma[k], dynamic.sigma[k]))
            .unzip()
    }

    /// Combined per-sample semantics `m sˢ + (1-m) sᵈ`, `(K, D)`.
    pub fn combined_semantics(&self) -> Array2<f64> {
        let (_, m) = self.mixture();
        let mut out = self.static_out.semantic.clone();
        for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let d = self.dynamic_out.semantic.row(k);
            row.zip_mut_with(&d, |s, &dy| *s = m[k] * *s + (1.0 - m[k]) * dy);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPixel {
    pub color: [f64; 3],
    pub depth: f64,
    pub semantic: Vec<f64>,
    pub attention: f64,
    /// Integrated blend weight.
    pub blend: f64,
    /// Accumulated opacity `Σ T_k α_k`.
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpedPixel {
    pub neighbor: Neighbor,
    pub color: [f64; 3],
    pub semantic: Vec<f64>,
    pub attention: f64,
    /// Integrated occlusion weight.
    pub occlusion: f64,
}

/// Composite `Σ w_k (m_k uˢ_k + (1-m_k) uᵈ_k)` for every channel.
fn composite_channels(
    w: &[f64],
    m: &[f64],
    st: &NetOutput,
    dy: &NetOutput,
) -> ([f64; 3], Vec<f64>, f64) {
    let dims = st.semantic.ncols();
    let mut color = [0.0; 3];
    let mut semantic = vec![0.0; dims];
    let mut attention = 0.0;
    for k in 0..w.len() {
        let (wk, mk) = (w[k], m[k]);
        for (c, out) in color.iter_mut().enumerate() {
            *out += wk * (mk * st.color[[k, c]] + (1.0 - mk) * dy.color[[k, c]]);
        }
        for (d, out) in semantic.iter_mut().enumerate() {
            *out += wk * (mk * st.semantic[[k, d]] + (1.0 - mk) * dy.semantic[[k, d]]);
        }
        attention += wk * (mk * st.attention[k] + (1.0 - mk) * dy.attention[k]);
    }
    (color, semantic, attention)
}

/// Composite every channel of the static/dynamic mixture along the ray.
pub fn composite(samples: &RaySampleBatch) -> Result<RenderedPixel> {
    composite_masked(samples, None)
}

/// As `composite`, with samples where `keep[k]` is false given zero density.
pub fn composite_masked(samples: &RaySampleBatch, keep: Option<&[bool]>) -> Result<RenderedPixel> {
    let delta = deltas(&samples.t, samples.ray.t_far)?;
    let (mut sigma, m) = samples.mixture();
    if let Some(keep) = keep {
        for (s, &k) in sigma.iter_mut().zip(keep) {
            if !k {
                *s = 0.0;
            }
        }
    }
    let tr = Transmittance::new(delta, &sigma);
    let (color, semantic, attention) = composite_channels(&tr.weights, &m, &samples.static_out, &samples.dynamic_out);
    let v = samples.blend();
    Ok(RenderedPixel {
        color,
        depth: tr.weights.iter().zip(&samples.t).map(|(w, t)| w * t).sum(),
        semantic,
        attention,
        blend: tr.weights.iter().zip(v).map(|(w, v)| w * v).sum(),
        opacity: tr.opacity(),
    })
}

/// Composite a single field (no mixture) along the ray.
pub fn composite_single(t: &[f64], t_far: f64, out: &NetOutput) -> Result<RenderedPixel> {
    let delta = deltas(t, t_far)?;
    let tr = Transmittance::new(delta, out.sigma.as_slice().expect("contiguous"));
    let ones = vec![1.0; t.len()];
    let (color, semantic, attention) = composite_channels(&tr.weights, &ones, out, out);
    Ok(RenderedPixel {
        color,
        depth: tr.weights.iter().zip(t).map(|(w, t)| w * t).sum(),
        semantic,
        attention,
        blend: out
            .blend
            .as_ref()
            .map(|v| tr.weights.iter().zip(v).map(|(w, v)| w * v).sum())
            .unwrap_or(0.0),
        opacity: tr.opacity(),
    })
}

/// Sample positions advected by the flow toward `neighbor`.
pub fn advected_positions(samples: &RaySampleBatch, neighbor: Neighbor) -> Array2<f64> {
    let flow = samples.dynamic_out.flow.as_ref().expect("dynamic samples carry flow");
    let o = neighbor.flow_offset();
    let mut p = samples.positions.clone();
    for k in 0..samples.len() {
        for a in 0..3 {
            p[[k, a]] += flow[[k, o + a]];
        }
    }
    p
}

/// Composite the static field at the original samples with the dynamic field
/// re-queried at the advected points and time `j` (`warped`). The occlusion
/// weight of the source samples toward `j` is integrated with the warped weights.
pub fn composite_warped(samples: &RaySampleBatch, j: usize, warped: &NetOutput) -> Result<WarpedPixel> {
    let neighbor = Neighbor::between(samples.ray.time_index, j)?;
    let delta = deltas(&samples.t, samples.ray.t_far)?;
    let (sigma, m) = samples.mixture_with(warped);
    let tr = Transmittance::new(delta, &sigma);
    let (color, semantic, attention) = composite_channels(&tr.weights, &m, &samples.static_out, warped);
    let occ = samples.dynamic_out.occlusion.as_ref().expect("dynamic samples carry occlusion");
    let c = neighbor.occlusion_column();
    let occlusion = tr.weights.iter().enumerate().map(|(k, w)| w * occ[[k, c]]).sum();
    Ok(WarpedPixel {
        neighbor,
        color,
        semantic,
        attention,
        occlusion,
    })
}

/// Query the dynamic field at the advected points and composite (see `composite_warped`).
pub fn render_warped(field: &dyn FieldQuery, samples: &RaySampleBatch, j: usize) -> Result<WarpedPixel> {
    let neighbor = Neighbor::between(samples.ray.time_index, j)?;
    let positions = advected_positions(samples, neighbor);
    let omegas = RaySampleBatch::omegas_for(&samples.ray, samples.len());
    let warped = field.query_dynamic(&positions, &omegas, &vec![j as f64; samples.len()]);
    composite_warped(samples, j, &warped)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowProjection {
    /// `(dx, dy)` in pixels.
    pub flow: [f64; 2],
    /// Advected samples that fell behind the target camera and were skipped.
    pub behind_camera: usize,
}

/// Project the advected samples into `pose_j` (normalized space) and integrate
/// their pixel displacements from the ray's own pixel with the source weights.
pub fn project_scene_flow(samples: &RaySampleBatch, j: usize, pose_j: &CameraPose) -> Result<FlowProjection> {
    let neighbor = Neighbor::between(samples.ray.time_index, j)?;
    project_flow_with(samples, neighbor, pose_j)
}

/// As `project_scene_flow`, for a direction given explicitly (also usable with
/// the source camera itself to measure motion under a fixed camera).
pub fn project_flow_with(samples: &RaySampleBatch, neighbor: Neighbor, pose: &CameraPose) -> Result<FlowProjection> {
    let delta = deltas(&samples.t, samples.ray.t_far)?;
    let (sigma, _) = samples.mixture();
    let tr = Transmittance::new(delta, &sigma);
    let advected = advected_positions(samples, neighbor);
    let pixel = [samples.ray.col as f64, samples.ray.row as f64];
    let mut flow = [0.0; 2];
    let mut behind = 0;
    for k in 0..samples.len() {
        let x = Vector3::new(advected[[k, 0]], advected[[k, 1]], advected[[k, 2]]);
        match pose.project(&x) {
            Some((c, r)) => {
                flow[0] += tr.weights[k] * (c - pixel[0]);
                flow[1] += tr.weights[k] * (r - pixel[1]);
            }
            None => behind += 1,
        }
    }
    if behind > 0 {
        log::debug!("{behind} advected samples behind the camera at time {}", pose.time_index);
    }
    Ok(FlowProjection {
        flow,
        behind_camera: behind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub n_samples: usize,
    /// Rays evaluated per network call.
    pub chunk: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            n_samples: 32,
            chunk: 256,
        }
    }
}

/// Query both fields for many rays at once (midpoint sampling) and split per ray.
pub fn query_rays(field: &dyn FieldQuery, rays: &[Ray], opts: &RenderOptions) -> Vec<RaySampleBatch> {
    let k = opts.n_samples;
    let mut out = Vec::with_capacity(rays.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in rays.chunks(opts.chunk.max(1)) {
        let n = chunk.len() * k;
        let mut positions = Array2::zeros((n, 3));
        let mut omegas = Array2::zeros((n, 3));
        let mut times = Vec::with_capacity(n);
        let mut ts = Vec::with_capacity(chunk.len());
        for (r, ray) in chunk.iter().enumerate() {
            let t = sample_interval(ray.t_near, ray.t_far, k, false, &mut rng);
            let o = ray.omega();
            for (s, &tk) in t.iter().enumerate() {
                let x = ray.at(tk);
                for a in 0..3 {
                    positions[[r * k + s, a]] = x[a];
                    omegas[[r * k + s, a]] = o[a];
                }
                times.push(ray.time_index as f64);
            }
            ts.push(t);
        }
        let st = field.query_static(&positions, &omegas);
        let dy = field.query_dynamic(&positions, &omegas, &times);
        for (r, (ray, t)) in chunk.iter().zip(ts).enumerate() {
            let idx: Vec<usize> = (r * k..(r + 1) * k).collect();
            out.push(RaySampleBatch {
                ray: ray.clone(),
                t,
                positions: positions.select(Axis(0), &idx),
                static_out: st.select(&idx),
                dynamic_out: dy.select(&idx),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{tiny_config, FieldParams};

    fn ray(t_near: f64, t_far: f64) -> Ray {
        Ray {
            origin: Vector3::new(0.0, 0.0, 0.5),
            direction: Vector3::new(0.0, 0.0, -1.0),
            t_near,
            t_far,
            row: 0,
            col: 0,
            time_index: 1,
        }
    }

    /// A hand-built sample batch with constant per-sample values.
    fn batch(sigma_s: &[f64], v: &[f64], sigma_d: &[f64], t: Vec<f64>, t_far: f64) -> RaySampleBatch {
        let k = t.len();
        let make = |sigma: &[f64], blend: Option<&[f64]>, base: f64| NetOutput {
            sigma: Array1::from(sigma.to_vec()),
            color: Array2::from_shape_fn((k, 3), |(i, c)| base + 0.1 * (i + c) as f64),
            semantic: Array2::from_shape_fn((k, 2), |(i, d)| base - 0.2 * (i as f64) + 0.1 * d as f64),
            attention: Array1::from_shape_fn(k, |i| base * 0.5 + 0.05 * i as f64),
            blend: blend.map(|b| Array1::from(b.to_vec())),
            flow: None,
            occlusion: None,
        };
        let r = ray(t[0], t_far);
        RaySampleBatch {
            positions: RaySampleBatch::positions_for(&r, &t),
            ray: r,
            t,
            static_out: make(sigma_s, Some(v), 0.2),
            dynamic_out: make(sigma_d, None, 0.6),
        }
    }

    #[test]
    fn single_midpoint_sample() {
        assert_eq!(sample_ray(&ray(1.0, 3.0), 1, false, 0), vec![2.0]);
    }

    #[test]
    fn stratified_samples_are_reproducible_and_binned() {
        let r = ray(0.5, 2.5);
        let a = sample_ray(&r, 4, true, 11);
        assert_eq!(a, sample_ray(&r, 4, true, 11));
        for (k, t) in a.iter().enumerate() {
            assert!(*t >= 0.5 + 0.5 * k as f64 && *t <= 0.5 + 0.5 * (k + 1) as f64);
        }
    }

    #[test]
    fn zero_density_renders_nothing() {
        let b = batch(&[0.0; 3], &[0.5; 3], &[0.0; 3], vec![0.1, 0.2, 0.3], 0.4);
        let p = composite(&b).unwrap();
        assert_eq!(p.color, [0.0; 3]);
        assert_eq!(p.opacity, 0.0);
        let tr = Transmittance::new(deltas(&b.t, 0.4).unwrap(), &[0.0; 3]);
        assert_eq!(tr.t_final, 1.0);
    }

    #[test]
    fn opaque_single_sample_returns_its_values() {
        let b = batch(&[200.0], &[1.0], &[0.0], vec![0.1], 0.2);
        let p = composite(&b).unwrap();
        for c in 0..3 {
            assert!((p.color[c] - b.static_out.color[[0, c]]).abs() < 1e-8);
        }
    }

    #[test]
    fn non_monotone_distances_are_rejected() {
        assert!(deltas(&[0.2, 0.1], 0.3).is_err());
        assert!(deltas(&[0.1, 0.2], 0.15).is_err());
    }

    #[test]
    fn mixture_gradient_matches_finite_differences() {
        let (v, s, d) = (0.3, 1.7, 0.4);
        let f = |v: f64, s: f64, d: f64| {
            let (sig, m) = mix_density(v, s, d);
            2.0 * sig - 3.0 * m
        };
        let (dv, ds, dd) = mix_density_backward(v, s, d, 2.0, -3.0);
        let h = 1e-6;
        assert!((dv - (f(v + h, s, d) - f(v - h, s, d)) / (2.0 * h)).abs() < 1e-6);
        assert!((ds - (f(v, s + h, d) - f(v, s - h, d)) / (2.0 * h)).abs() < 1e-6);
        assert!((dd - (f(v, s, d + h) - f(v, s, d - h)) / (2.0 * h)).abs() < 1e-6);
    }

    #[test]
    fn transmittance_gradient_matches_finite_differences() {
        let delta = vec![0.2, 0.5, 0.1, 0.3];
        let sigma = [0.7, 2.0, 0.1, 4.0];
        let g = [0.3, -1.0, 2.0, 0.5];
        let loss = |s: &[f64]| -> f64 {
            Transmittance::new(delta.clone(), s).weights.iter().zip(&g).map(|(w, g)| w * g).sum()
        };
        let d = Transmittance::new(delta.clone(), &sigma).backward(&g);
        for k in 0..4 {
            let mut sp = sigma;
            let mut sm = sigma;
            sp[k] += 1e-6;
            sm[k] -= 1e-6;
            assert!((d[k] - (loss(&sp) - loss(&sm)) / 2e-6).abs() < 1e-7);
        }
    }

    #[test]
    fn warp_to_non_neighbor_is_rejected() {
        let field = FieldParams::new(tiny_config(1), 4).unwrap();
        let r = ray(0.1, 0.9);
        let s = RaySampleBatch::query(&field, &r, vec![0.2, 0.5]);
        assert!(render_warped(&field, &s, 3).is_err());
        assert!(render_warped(&field, &s, 2).is_ok());
        assert!(project_scene_flow(&s, 1, &CameraPose::look_at(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::zeros(),
            Vector3::y(),
            10.0,
            4,
            4,
            1,
        ))
        .is_err());
    }

    #[test]
    fn chunked_query_matches_single_ray_query() {
        let field = FieldParams::new(tiny_config(3), 4).unwrap();
        let rays = vec![ray(0.1, 0.9), ray(0.2, 0.8), ray(0.0, 1.0)];
        let opts = RenderOptions { n_samples: 5, chunk: 2 };
        let batches = query_rays(&field, &rays, &opts);
        for (r, b) in rays.iter().zip(&batches) {
            let single = RaySampleBatch::query(&field, r, b.t.clone());
            assert_eq!(composite(b).unwrap(), composite(&single).unwrap());
        }
    }
}
