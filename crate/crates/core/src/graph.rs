//! A recorded forward pass of the full training objective over a ray batch,
//! and its exact reverse-mode gradient with respect to every field parameter.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use ndarray::{s, Array1, Array2, Axis};

use crate::camera::{CameraPose, Ray};
use crate::error::{Error, Result};
use crate::field::{FieldParams, NetCache, NetOutput};
use crate::loss::{self, LossTerm, LossWeights};
use crate::render::{deltas, mix_density, mix_density_backward, Neighbor, Transmittance};

/// One training ray with its sample distances and every supervision target.
#[derive(Debug, Clone, PartialEq)]
pub struct RayTarget {
    pub ray: Ray,
    pub t: Vec<f64>,
    pub rgb: [f64; 3],
    pub depth_prior: f64,
    /// Optical-flow prior toward `[next, prev]`, where the neighbor exists.
    pub flow_prior: [Option<[f64; 2]>; 2],
    /// Per pyramid level semantic target (`D` values each).
    pub semantic: Vec<Vec<f64>>,
    pub attention: Vec<f64>,
    pub semantic_weights: Vec<f64>,
    pub attention_weights: Vec<f64>,
}

impl RayTarget {
    /// Level-weighted semantic target, used for the reprojection terms.
    pub fn mean_semantic(&self) -> Vec<f64> {
        let d = self.semantic.first().map_or(0, Vec::len);
        let mut out = vec![0.0; d];
        for (level, &lam) in self.semantic.iter().zip(&self.semantic_weights) {
            for (o, v) in out.iter_mut().zip(level) {
                *o += lam * v;
            }
        }
        out
    }

    pub fn mean_attention(&self) -> f64 {
        self.attention.iter().zip(&self.attention_weights).map(|(a, l)| a * l).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub rays: Vec<RayTarget>,
    /// Normalized-space pose of every frame (index = time).
    pub poses: Vec<CameraPose>,
}

fn nb_index(nb: Neighbor) -> usize {
    match nb {
        Neighbor::Next => 0,
        Neighbor::Prev => 1,
    }
}

/// Unwarped compositing results per ray.
#[derive(Debug, Clone)]
pub struct RenderedBatch {
    pub color: Array2<f64>,
    pub depth: Array1<f64>,
    pub semantic: Array2<f64>,
    pub attention: Array1<f64>,
    pub opacity: Array1<f64>,
}

#[derive(Debug, Clone)]
struct WarpRecord {
    neighbor: Neighbor,
    /// Rays that have this neighbor.
    rays: Vec<usize>,
    cache: NetCache,
    trans: Vec<Transmittance>,
    /// Static share per warped sample (row-aligned with `cache`).
    m: Vec<f64>,
    color: Array2<f64>,
    semantic: Array2<f64>,
    attention: Array1<f64>,
    occlusion: Array1<f64>,
}

/// Per-sample pixel offset and projection Jacobian (None behind the camera).
type SampleProjection = Option<([f64; 2], [Vector3<f64>; 2])>;

#[derive(Debug, Clone)]
struct ProjectionRecord {
    neighbor: Neighbor,
    rays: Vec<usize>,
    samples: Vec<Vec<SampleProjection>>,
    flow: Array2<f64>,
    prior: Array2<f64>,
}

/// The recorded forward computation. `backward` replays it in reverse.
#[derive(Debug, Clone)]
pub struct LossGraph {
    batch: TrainBatch,
    k: usize,
    recorded: BTreeSet<LossTerm>,
    static_cache: NetCache,
    dynamic_cache: NetCache,
    trans: Vec<Transmittance>,
    m: Vec<f64>,
    pub rendered: RenderedBatch,
    warps: Vec<WarpRecord>,
    projections: Vec<ProjectionRecord>,
    values: BTreeMap<LossTerm, f64>,
    pub behind_camera: usize,
}

/// Composite `(color, semantics, attention)` of the mixture for rows `base..base+k`
/// of `st` against rows `dyn_base..` of `dy`.
fn composite_rows(
    w: &[f64],
    m: &[f64],
    st: &NetOutput,
    base: usize,
    dy: &NetOutput,
    dyn_base: usize,
    color: &mut [f64],
    semantic: &mut [f64],
) -> f64 {
    let mut attention = 0.0;
    for k in 0..w.len() {
        let (a, b) = (base + k, dyn_base + k);
        let (wk, mk) = (w[k], m[k]);
        for c in 0..3 {
            color[c] += wk * (mk * st.color[[a, c]] + (1.0 - mk) * dy.color[[b, c]]);
        }
        for (d, out) in semantic.iter_mut().enumerate() {
            *out += wk * (mk * st.semantic[[a, d]] + (1.0 - mk) * dy.semantic[[b, d]]);
        }
        attention += wk * (mk * st.attention[a] + (1.0 - mk) * dy.attention[b]);
    }
    attention
}

/// Reverse of `composite_rows`: accumulates channel gradients into `d_st`/`d_dy`
/// and returns `(d w_k, d m_k)` per sample.
#[allow(clippy::too_many_arguments)]
fn composite_rows_backward(
    w: &[f64],
    m: &[f64],
    st: &NetOutput,
    base: usize,
    dy: &NetOutput,
    dyn_base: usize,
    g_color: &[f64],
    g_sem: &[f64],
    g_att: f64,
    d_st: &mut NetOutput,
    d_dy: &mut NetOutput,
) -> (Vec<f64>, Vec<f64>) {
    let n = w.len();
    let mut dw = vec![0.0; n];
    let mut dm = vec![0.0; n];
    for k in 0..n {
        let (a, b) = (base + k, dyn_base + k);
        let (wk, mk) = (w[k], m[k]);
        let mut gw = 0.0;
        let mut gm = 0.0;
        for c in 0..3 {
            let (us, ud) = (st.color[[a, c]], dy.color[[b, c]]);
            gw += g_color[c] * (mk * us + (1.0 - mk) * ud);
            gm += g_color[c] * (us - ud);
            d_st.color[[a, c]] += wk * mk * g_color[c];
            d_dy.color[[b, c]] += wk * (1.0 - mk) * g_color[c];
        }
        for (d, &g) in g_sem.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let (us, ud) = (st.semantic[[a, d]], dy.semantic[[b, d]]);
            gw += g * (mk * us + (1.0 - mk) * ud);
            gm += g * (us - ud);
            d_st.semantic[[a, d]] += wk * mk * g;
            d_dy.semantic[[b, d]] += wk * (1.0 - mk) * g;
        }
        let (us, ud) = (st.attention[a], dy.attention[b]);
        gw += g_att * (mk * us + (1.0 - mk) * ud);
        gm += g_att * (us - ud);
        d_st.attention[a] += wk * mk * g_att;
        d_dy.attention[b] += wk * (1.0 - mk) * g_att;
        dw[k] = gw;
        dm[k] = wk * gm;
    }
    (dw, dm)
}

fn rows_of(rays: &[usize], k: usize) -> Vec<usize> {
    rays.iter().flat_map(|&r| r * k..(r + 1) * k).collect()
}

impl LossGraph {
    /// Record every loss term.
    pub fn record(params: &FieldParams, batch: &TrainBatch) -> Result<Self> {
        Self::record_terms(params, batch, &LossTerm::ALL.into_iter().collect())
    }

    /// Record the forward pass for the given terms only.
    pub fn record_terms(params: &FieldParams, batch: &TrainBatch, terms: &BTreeSet<LossTerm>) -> Result<Self> {
        let n_rays = batch.rays.len();
        if n_rays == 0 {
            return Err(Error::Validation("empty ray batch".into()));
        }
        let k = batch.rays[0].t.len();
        if k == 0 || batch.rays.iter().any(|r| r.t.len() != k) {
            return Err(Error::Validation("every ray needs the same positive sample count".into()));
        }
        let n_frames = params.n_frames;
        let p = n_rays * k;
        let mut positions = Array2::zeros((p, 3));
        let mut omegas = Array2::zeros((p, 3));
        let mut times = Vec::with_capacity(p);
        for (r, target) in batch.rays.iter().enumerate() {
            let o = target.ray.omega();
            for (s, &t) in target.t.iter().enumerate() {
                let x = target.ray.at(t);
                for a in 0..3 {
                    positions[[r * k + s, a]] = x[a];
                    omegas[[r * k + s, a]] = o[a];
                }
                times.push(target.ray.time_index as f64);
            }
        }
        let static_cache = params.forward_static(&positions, &omegas);
        let dynamic_cache = params.forward_dynamic(&positions, &omegas, &times);
        let st = &static_cache.output;
        let dy = &dynamic_cache.output;
        let v = st.blend.as_ref().expect("static blend head");
        let dims = st.semantic.ncols();

        let mut m = vec![0.0; p];
        let mut trans = Vec::with_capacity(n_rays);
        let mut rendered = RenderedBatch {
            color: Array2::zeros((n_rays, 3)),
            depth: Array1::zeros(n_rays),
            semantic: Array2::zeros((n_rays, dims)),
            attention: Array1::zeros(n_rays),
            opacity: Array1::zeros(n_rays),
        };
        for (r, target) in batch.rays.iter().enumerate() {
            let delta = deltas(&target.t, target.ray.t_far)?;
            let mut sigma = vec![0.0; k];
            for s in 0..k {
                let row = r * k + s;
                let (sg, mm) = mix_density(v[row], st.sigma[row], dy.sigma[row]);
                sigma[s] = sg;
                m[row] = mm;
            }
            let tr = Transmittance::new(delta, &sigma);
            let mut color = [0.0; 3];
            let mut sem = vec![0.0; dims];
            let att = composite_rows(&tr.weights, &m[r * k..(r + 1) * k], st, r * k, dy, r * k, &mut color, &mut sem);
            for c in 0..3 {
                rendered.color[[r, c]] = color[c];
            }
            rendered.semantic.row_mut(r).assign(&Array1::from(sem));
            rendered.attention[r] = att;
            rendered.depth[r] = tr.weights.iter().zip(&target.t).map(|(w, t)| w * t).sum();
            rendered.opacity[r] = tr.opacity();
            trans.push(tr);
        }

        let flow = dy.flow.as_ref().expect("dynamic flow head");
        let mut projections = Vec::new();
        let mut behind_camera = 0;
        if terms.contains(&LossTerm::Flow) {
            for nb in Neighbor::BOTH {
                let rays: Vec<usize> = (0..n_rays)
                    .filter(|&r| {
                        let t = &batch.rays[r];
                        nb.target(t.ray.time_index, n_frames).is_some() && t.flow_prior[nb_index(nb)].is_some()
                    })
                    .collect();
                let mut samples = Vec::with_capacity(rays.len());
                let mut pflow = Array2::zeros((rays.len(), 2));
                let mut prior = Array2::zeros((rays.len(), 2));
                for (q, &r) in rays.iter().enumerate() {
                    let target = &batch.rays[r];
                    let j = nb.target(target.ray.time_index, n_frames).unwrap();
                    let pose = batch.poses.get(j).ok_or_else(|| {
                        Error::Validation(format!("batch has no pose for time {j}"))
                    })?;
                    let pixel = [target.ray.col as f64, target.ray.row as f64];
                    let mut per = Vec::with_capacity(k);
                    for s in 0..k {
                        let row = r * k + s;
                        let o = nb.flow_offset();
                        let x = Vector3::new(
                            positions[[row, 0]] + flow[[row, o]],
                            positions[[row, 1]] + flow[[row, o + 1]],
                            positions[[row, 2]] + flow[[row, o + 2]],
                        );
                        match (pose.project(&x), pose.project_jacobian(&x)) {
                            (Some((c, rr)), Some(jac)) => {
                                let off = [c - pixel[0], rr - pixel[1]];
                                let w = trans[r].weights[s];
                                pflow[[q, 0]] += w * off[0];
                                pflow[[q, 1]] += w * off[1];
                                per.push(Some((off, jac)));
                            }
                            _ => {
                                behind_camera += 1;
                                per.push(None);
                            }
                        }
                    }
                    samples.push(per);
                    let pr = target.flow_prior[nb_index(nb)].unwrap();
                    prior[[q, 0]] = pr[0];
                    prior[[q, 1]] = pr[1];
                }
                projections.push(ProjectionRecord {
                    neighbor: nb,
                    rays,
                    samples,
                    flow: pflow,
                    prior,
                });
            }
        }

        let mut warps = Vec::new();
        if terms.iter().any(|t| t.needs_warp()) {
            let occ = dy.occlusion.as_ref().expect("dynamic occlusion head");
            for nb in Neighbor::BOTH {
                let rays: Vec<usize> = (0..n_rays)
                    .filter(|&r| nb.target(batch.rays[r].ray.time_index, n_frames).is_some())
                    .collect();
                if rays.is_empty() {
                    continue;
                }
                let rows = rows_of(&rays, k);
                let o = nb.flow_offset();
                let mut adv = positions.select(Axis(0), &rows);
                adv += &flow.select(Axis(0), &rows).slice(s![.., o..o + 3]);
                let wt: Vec<f64> = rays
                    .iter()
                    .flat_map(|&r| {
                        let j = nb.target(batch.rays[r].ray.time_index, n_frames).unwrap();
                        std::iter::repeat_n(j as f64, k)
                    })
                    .collect();
                let cache = params.forward_dynamic(&adv, &omegas.select(Axis(0), &rows), &wt);
                let wo = &cache.output;
                let mut wm = vec![0.0; rows.len()];
                let mut wtrans = Vec::with_capacity(rays.len());
                let mut color = Array2::zeros((rays.len(), 3));
                let mut semantic = Array2::zeros((rays.len(), dims));
                let mut attention = Array1::zeros(rays.len());
                let mut occlusion = Array1::zeros(rays.len());
                let oc = nb.occlusion_column();
                for (q, &r) in rays.iter().enumerate() {
                    let target = &batch.rays[r];
                    let delta = deltas(&target.t, target.ray.t_far)?;
                    let mut sigma = vec![0.0; k];
                    for s in 0..k {
                        let (sg, mm) = mix_density(v[r * k + s], st.sigma[r * k + s], wo.sigma[q * k + s]);
                        sigma[s] = sg;
                        wm[q * k + s] = mm;
                    }
                    let tr = Transmittance::new(delta, &sigma);
                    let mut c = [0.0; 3];
                    let mut sem = vec![0.0; dims];
                    attention[q] =
                        composite_rows(&tr.weights, &wm[q * k..(q + 1) * k], st, r * k, wo, q * k, &mut c, &mut sem);
                    for ch in 0..3 {
                        color[[q, ch]] = c[ch];
                    }
                    semantic.row_mut(q).assign(&Array1::from(sem));
                    occlusion[q] = (0..k).map(|s| tr.weights[s] * occ[[r * k + s, oc]]).sum();
                    wtrans.push(tr);
                }
                warps.push(WarpRecord {
                    neighbor: nb,
                    rays,
                    cache,
                    trans: wtrans,
                    m: wm,
                    color,
                    semantic,
                    attention,
                    occlusion,
                });
            }
        }

        let mut graph = LossGraph {
            batch: batch.clone(),
            k,
            recorded: terms.clone(),
            static_cache,
            dynamic_cache,
            trans,
            m,
            rendered,
            warps,
            projections,
            values: BTreeMap::new(),
            behind_camera,
        };
        for &term in terms {
            let value = graph.term_value(term)?;
            graph.values.insert(term, value);
        }
        Ok(graph)
    }

    pub fn values(&self) -> &BTreeMap<LossTerm, f64> {
        &self.values
    }

    pub fn value(&self, term: LossTerm) -> Option<f64> {
        self.values.get(&term).copied()
    }

    /// `Σ weight_term · value_term` over recorded terms.
    pub fn total(&self, weights: &LossWeights) -> f64 {
        self.values.iter().map(|(&t, &v)| weights.get(t) * v).sum()
    }

    fn target_rgb(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.batch.rays.len(), 3), |(r, c)| self.batch.rays[r].rgb[c])
    }

    fn stacked_warps(&self) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let dims = self.rendered.semantic.ncols();
        let total: usize = self.warps.iter().map(|w| w.rays.len()).sum();
        let mut color = Array2::zeros((total, 3));
        let mut sem = Array2::zeros((total, dims));
        let mut occ = Array1::zeros(total);
        let mut att = Array2::zeros((total, 1));
        let mut t_rgb = Array2::zeros((total, 3));
        let mut t_sem = Array2::zeros((total, dims));
        let mut t_att = Array2::zeros((total, 1));
        let mut q = 0;
        for w in &self.warps {
            for (i, &r) in w.rays.iter().enumerate() {
                let target = &self.batch.rays[r];
                color.row_mut(q).assign(&w.color.row(i));
                sem.row_mut(q).assign(&w.semantic.row(i));
                att[[q, 0]] = w.attention[i];
                occ[q] = w.occlusion[i];
                t_rgb.row_mut(q).assign(&Array1::from(target.rgb.to_vec()));
                t_sem.row_mut(q).assign(&Array1::from(target.mean_semantic()));
                t_att[[q, 0]] = target.mean_attention();
                q += 1;
            }
        }
        (color, sem, occ, att, t_rgb, t_sem, t_att)
    }

    fn feature_targets(&self, semantic: bool) -> (Vec<Array2<f64>>, Array2<f64>) {
        let rays = &self.batch.rays;
        let n = rays.len();
        let levels = if semantic { rays[0].semantic.len() } else { rays[0].attention.len() };
        let dims = if semantic { self.rendered.semantic.ncols() } else { 1 };
        let mut targets = vec![Array2::zeros((n, dims)); levels];
        let mut lam = Array2::zeros((n, levels));
        for (r, t) in rays.iter().enumerate() {
            for l in 0..levels {
                if semantic {
                    targets[l].row_mut(r).assign(&Array1::from(t.semantic[l].clone()));
                    lam[[r, l]] = t.semantic_weights[l];
                } else {
                    targets[l][[r, 0]] = t.attention[l];
                    lam[[r, l]] = t.attention_weights[l];
                }
            }
        }
        (targets, lam)
    }

    fn cycle_pairs(&self) -> (Array2<f64>, Array2<f64>) {
        let k = self.k;
        let flow = self.dynamic_cache.output.flow.as_ref().unwrap();
        let total: usize = self.warps.iter().map(|w| w.rays.len() * k).sum();
        let mut there = Array2::zeros((total, 3));
        let mut back = Array2::zeros((total, 3));
        let mut q = 0;
        for w in &self.warps {
            let o = w.neighbor.flow_offset();
            let ob = w.neighbor.opposite().flow_offset();
            let wf = w.cache.output.flow.as_ref().unwrap();
            for (i, &r) in w.rays.iter().enumerate() {
                for s in 0..k {
                    there.row_mut(q).assign(&flow.slice(s![r * k + s, o..o + 3]));
                    back.row_mut(q).assign(&wf.slice(s![i * k + s, ob..ob + 3]));
                    q += 1;
                }
            }
        }
        (there, back)
    }

    fn stacked_projections(&self) -> (Array2<f64>, Array2<f64>) {
        let flows: Vec<_> = self.projections.iter().map(|p| p.flow.view()).collect();
        let priors: Vec<_> = self.projections.iter().map(|p| p.prior.view()).collect();
        if flows.is_empty() {
            return (Array2::zeros((0, 2)), Array2::zeros((0, 2)));
        }
        (
            ndarray::concatenate(Axis(0), &flows).unwrap(),
            ndarray::concatenate(Axis(0), &priors).unwrap(),
        )
    }

    fn term_value(&self, term: LossTerm) -> Result<f64> {
        let st = &self.static_cache.output;
        let dy = &self.dynamic_cache.output;
        Ok(match term {
            LossTerm::Photometric => loss::weighted_sq_error(self.rendered.color.view(), self.target_rgb().view(), None).0,
            LossTerm::ReprojColor | LossTerm::SemanticReproj | LossTerm::AttentionReproj => {
                let (c, s, o, a, tc, ts, ta) = self.stacked_warps();
                let (pred, target) = match term {
                    LossTerm::ReprojColor => (c, tc),
                    LossTerm::SemanticReproj => (s, ts),
                    _ => (a, ta),
                };
                loss::weighted_sq_error(pred.view(), target.view(), Some(o.view())).0
            }
            LossTerm::Depth => {
                let prior: Vec<f64> = self.batch.rays.iter().map(|r| r.depth_prior).collect();
                loss::depth_prior_loss(self.rendered.depth.as_slice().unwrap(), &prior)?.0
            }
            LossTerm::Flow => {
                let (f, p) = self.stacked_projections();
                loss::l1_rows(f.view(), p.view()).0
            }
            LossTerm::Semantic => {
                let (t, lam) = self.feature_targets(true);
                loss::feature_reconstruction_loss(self.rendered.semantic.view(), &t, lam.view()).0
            }
            LossTerm::Attention => {
                let (t, lam) = self.feature_targets(false);
                let pred = self.rendered.attention.view().insert_axis(Axis(1));
                loss::feature_reconstruction_loss(pred, &t, lam.view()).0
            }
            LossTerm::FlowMagnitude => loss::flow_magnitude(dy.flow.as_ref().unwrap().view()).0,
            LossTerm::FlowSmooth => loss::flow_smoothness(dy.flow.as_ref().unwrap().view(), self.k).0,
            LossTerm::Occlusion => loss::occlusion_prior(dy.occlusion.as_ref().unwrap().view()).0,
            LossTerm::Cycle => {
                let (a, b) = self.cycle_pairs();
                loss::cycle_consistency(a.view(), b.view()).0
            }
            LossTerm::Entropy => loss::blend_entropy(st.blend.as_ref().unwrap().view()).0,
        })
    }

    /// Every value whose sign selects a branch of a piecewise-linear
    /// function: ReLU pre-activations of each network query, then the
    /// residuals entering the L1 terms.
    pub fn kink_arguments(&self, params: &FieldParams) -> Vec<f64> {
        let mut out = params.static_net.pre_activations(&self.static_cache);
        out.extend(params.dynamic_net.pre_activations(&self.dynamic_cache));
        for w in &self.warps {
            out.extend(params.dynamic_net.pre_activations(&w.cache));
        }
        let prior: Vec<f64> = self.batch.rays.iter().map(|r| r.depth_prior).collect();
        let z = loss::align_depth(self.rendered.depth.as_slice().unwrap(), &prior);
        for (d, p) in self.rendered.depth.iter().zip(&prior) {
            out.push(d - (z.scale * p + z.shift));
        }
        let (f, p) = self.stacked_projections();
        out.extend(f.iter().zip(p.iter()).map(|(a, b)| a - b));
        let flow = self.dynamic_cache.output.flow.as_ref().unwrap();
        out.extend(flow.iter());
        for r in 0..self.batch.rays.len() {
            for s in 0..self.k.saturating_sub(1) {
                for c in 0..6 {
                    out.push(flow[[r * self.k + s, c]] - flow[[r * self.k + s + 1, c]]);
                }
            }
        }
        let (a, b) = self.cycle_pairs();
        out.extend(a.iter().zip(b.iter()).map(|(x, y)| x + y));
        out
    }

    /// Gradient of `Σ weights_term · term` with respect to every parameter.
    /// Fails if a term with nonzero weight was not recorded.
    pub fn backward(&self, params: &FieldParams, weights: &LossWeights) -> Result<FieldParams> {
        for term in LossTerm::ALL {
            if weights.get(term) != 0.0 && !self.recorded.contains(&term) {
                return Err(Error::Graph(format!(
                    "loss term {} has weight {} but was not recorded",
                    term.name(),
                    weights.get(term)
                )));
            }
        }
        let coeff = |t: LossTerm| if self.recorded.contains(&t) { weights.get(t) } else { 0.0 };
        let k = self.k;
        let n_rays = self.batch.rays.len();
        let st = &self.static_cache.output;
        let dy = &self.dynamic_cache.output;
        let dims = st.semantic.ncols();
        let mut d_st = st.zeros_like();
        let mut d_dy = dy.zeros_like();

        // Gradients on rendered (unwarped) quantities.
        let mut g_color = Array2::<f64>::zeros((n_rays, 3));
        let mut g_sem = Array2::<f64>::zeros((n_rays, dims));
        let mut g_att = Array1::<f64>::zeros(n_rays);
        let mut g_depth = Array1::<f64>::zeros(n_rays);
        let c = coeff(LossTerm::Photometric);
        if c != 0.0 {
            let (_, d, _) = loss::weighted_sq_error(self.rendered.color.view(), self.target_rgb().view(), None);
            g_color.scaled_add(c, &d);
        }
        let c = coeff(LossTerm::Semantic);
        if c != 0.0 {
            let (t, lam) = self.feature_targets(true);
            let (_, d) = loss::feature_reconstruction_loss(self.rendered.semantic.view(), &t, lam.view());
            g_sem.scaled_add(c, &d);
        }
        let c = coeff(LossTerm::Attention);
        if c != 0.0 {
            let (t, lam) = self.feature_targets(false);
            let pred = self.rendered.attention.view().insert_axis(Axis(1));
            let (_, d) = loss::feature_reconstruction_loss(pred, &t, lam.view());
            g_att.scaled_add(c, &d.column(0));
        }
        let c = coeff(LossTerm::Depth);
        if c != 0.0 {
            let prior: Vec<f64> = self.batch.rays.iter().map(|r| r.depth_prior).collect();
            let (_, d, _) = loss::depth_prior_loss(self.rendered.depth.as_slice().unwrap(), &prior)?;
            g_depth.scaled_add(c, &Array1::from(d));
        }

        // Gradients on projected flow, per projection record.
        let c_flow = coeff(LossTerm::Flow);
        let mut g_proj: Vec<Array2<f64>> = Vec::new();
        if c_flow != 0.0 {
            let (f, p) = self.stacked_projections();
            let (_, d) = loss::l1_rows(f.view(), p.view());
            let mut q = 0;
            for rec in &self.projections {
                let n = rec.rays.len();
                g_proj.push(d.slice(s![q..q + n, ..]).to_owned() * c_flow);
                q += n;
            }
        }

        // Direct per-sample regularizers.
        let flow = dy.flow.as_ref().unwrap();
        let d_flow = d_dy.flow.as_mut().unwrap();
        let c = coeff(LossTerm::FlowMagnitude);
        if c != 0.0 {
            d_flow.scaled_add(c, &loss::flow_magnitude(flow.view()).1);
        }
        let c = coeff(LossTerm::FlowSmooth);
        if c != 0.0 {
            d_flow.scaled_add(c, &loss::flow_smoothness(flow.view(), k).1);
        }
        let c = coeff(LossTerm::Occlusion);
        if c != 0.0 {
            let occ = dy.occlusion.as_ref().unwrap();
            d_dy.occlusion.as_mut().unwrap().scaled_add(c, &loss::occlusion_prior(occ.view()).1);
        }
        let c = coeff(LossTerm::Entropy);
        if c != 0.0 {
            let v = st.blend.as_ref().unwrap();
            d_st.blend.as_mut().unwrap().scaled_add(c, &loss::blend_entropy(v.view()).1);
        }

        // Warped renders: reprojection and cycle gradients.
        let mut d_warp: Vec<NetOutput> = self.warps.iter().map(|w| w.cache.output.zeros_like()).collect();
        let c_rc = coeff(LossTerm::ReprojColor);
        let c_rs = coeff(LossTerm::SemanticReproj);
        let c_ra = coeff(LossTerm::AttentionReproj);
        let total_pairs: usize = self.warps.iter().map(|w| w.rays.len()).sum();
        let (mut g_wc, mut g_ws, mut g_wa, mut g_wo) = (
            Array2::<f64>::zeros((total_pairs, 3)),
            Array2::<f64>::zeros((total_pairs, dims)),
            Array1::<f64>::zeros(total_pairs),
            Array1::<f64>::zeros(total_pairs),
        );
        if c_rc != 0.0 || c_rs != 0.0 || c_ra != 0.0 {
            let (wc, ws, wo, wa, tc, ts, ta) = self.stacked_warps();
            for (coef, pred, target, is) in [(c_rc, &wc, &tc, 0), (c_rs, &ws, &ts, 1), (c_ra, &wa, &ta, 2)] {
                if coef == 0.0 {
                    continue;
                }
                let (_, dp, dw) = loss::weighted_sq_error(pred.view(), target.view(), Some(wo.view()));
                match is {
                    0 => g_wc.scaled_add(coef, &dp),
                    1 => g_ws.scaled_add(coef, &dp),
                    _ => g_wa.scaled_add(coef, &dp.column(0)),
                }
                g_wo.scaled_add(coef, &dw);
            }
        }
        let c = coeff(LossTerm::Cycle);
        if c != 0.0 {
            let (a, b) = self.cycle_pairs();
            let (_, d) = loss::cycle_consistency(a.view(), b.view());
            let mut q = 0;
            for (wi, w) in self.warps.iter().enumerate() {
                let o = w.neighbor.flow_offset();
                let ob = w.neighbor.opposite().flow_offset();
                let wflow = d_warp[wi].flow.as_mut().unwrap();
                for (i, &r) in w.rays.iter().enumerate() {
                    for s in 0..k {
                        for a in 0..3 {
                            let g = c * d[[q, a]];
                            d_flow_add(&mut d_dy, r * k + s, o + a, g);
                            wflow[[i * k + s, ob + a]] += g;
                        }
                        q += 1;
                    }
                }
            }
        }

        // Reverse the warped compositing.
        let v = st.blend.as_ref().unwrap();
        let mut q0 = 0;
        for (wi, w) in self.warps.iter().enumerate() {
            let wo = &w.cache.output;
            let oc = w.neighbor.occlusion_column();
            let occ = dy.occlusion.as_ref().unwrap();
            for (i, &r) in w.rays.iter().enumerate() {
                let q = q0 + i;
                let tr = &w.trans[i];
                let gc = [g_wc[[q, 0]], g_wc[[q, 1]], g_wc[[q, 2]]];
                let gs = g_ws.row(q).to_vec();
                let (mut dw, dm) = composite_rows_backward(
                    &tr.weights,
                    &w.m[i * k..(i + 1) * k],
                    st,
                    r * k,
                    wo,
                    i * k,
                    &gc,
                    &gs,
                    g_wa[q],
                    &mut d_st,
                    &mut d_warp[wi],
                );
                let go = g_wo[q];
                if go != 0.0 {
                    let d_occ = d_dy.occlusion.as_mut().unwrap();
                    for s in 0..k {
                        dw[s] += go * occ[[r * k + s, oc]];
                        d_occ[[r * k + s, oc]] += go * tr.weights[s];
                    }
                }
                let dsig = tr.backward(&dw);
                for s in 0..k {
                    let (row, wrow) = (r * k + s, i * k + s);
                    let (dv, ds, dd) = mix_density_backward(v[row], st.sigma[row], wo.sigma[wrow], dsig[s], dm[s]);
                    d_st.blend.as_mut().unwrap()[row] += dv;
                    d_st.sigma[row] += ds;
                    d_warp[wi].sigma[wrow] += dd;
                }
            }
            q0 += w.rays.len();
        }

        // Reverse the unwarped compositing and the flow projection.
        let mut proj_lookup: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_rays];
        for (pi, rec) in self.projections.iter().enumerate() {
            for (q, &r) in rec.rays.iter().enumerate() {
                proj_lookup[r].push((pi, q));
            }
        }
        for r in 0..n_rays {
            let tr = &self.trans[r];
            let target = &self.batch.rays[r];
            let gc = [g_color[[r, 0]], g_color[[r, 1]], g_color[[r, 2]]];
            let gs = g_sem.row(r).to_vec();
            let (mut dw, dm) = composite_rows_backward(
                &tr.weights,
                &self.m[r * k..(r + 1) * k],
                st,
                r * k,
                dy,
                r * k,
                &gc,
                &gs,
                g_att[r],
                &mut d_st,
                &mut d_dy,
            );
            for s in 0..k {
                dw[s] += g_depth[r] * target.t[s];
            }
            if !g_proj.is_empty() {
                for &(pi, q) in &proj_lookup[r] {
                    let rec = &self.projections[pi];
                    let g = [g_proj[pi][[q, 0]], g_proj[pi][[q, 1]]];
                    let o = rec.neighbor.flow_offset();
                    for s in 0..k {
                        if let Some((off, jac)) = &rec.samples[q][s] {
                            dw[s] += g[0] * off[0] + g[1] * off[1];
                            let wk = tr.weights[s];
                            for a in 0..3 {
                                d_flow_add(&mut d_dy, r * k + s, o + a, wk * (g[0] * jac[0][a] + g[1] * jac[1][a]));
                            }
                        }
                    }
                }
            }
            let dsig = tr.backward(&dw);
            for s in 0..k {
                let row = r * k + s;
                let (dv, ds, dd) = mix_density_backward(v[row], st.sigma[row], dy.sigma[row], dsig[s], dm[s]);
                d_st.blend.as_mut().unwrap()[row] += dv;
                d_st.sigma[row] += ds;
                d_dy.sigma[row] += dd;
            }
        }

        // Networks, warped queries first: their position gradient feeds the flow head.
        let cfg = &params.config;
        let mut grads = params.zeros_like();
        for (wi, w) in self.warps.iter().enumerate() {
            let d_pos = params
                .dynamic_net
                .backward(cfg, &w.cache, &d_warp[wi], &mut grads.dynamic_net, true)
                .expect("position gradient requested");
            let o = w.neighbor.flow_offset();
            let rows = rows_of(&w.rays, k);
            for (i, &row) in rows.iter().enumerate() {
                for a in 0..3 {
                    d_flow_add(&mut d_dy, row, o + a, d_pos[[i, a]]);
                }
            }
        }
        params.dynamic_net.backward(cfg, &self.dynamic_cache, &d_dy, &mut grads.dynamic_net, false);
        params.static_net.backward(cfg, &self.static_cache, &d_st, &mut grads.static_net, false);
        Ok(grads)
    }
}

fn d_flow_add(d: &mut NetOutput, row: usize, col: usize, g: f64) {
    d.flow.as_mut().expect("dynamic flow gradient")[[row, col]] += g;
}

/// A small deterministic batch for gradient tests: `n_rays` rays spread over
/// `n_frames` frames, `k` samples each, random targets.
pub fn fixture_batch(n_rays: usize, k: usize, n_frames: usize, dims: usize, levels: usize, seed: u64) -> TrainBatch {
    use crate::camera::SceneSpace;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (8, 8);
    let world: Vec<CameraPose> = (0..n_frames)
        .map(|i| {
            CameraPose::look_at(
                Vector3::new(0.3 * i as f64 - 0.3, 0.1, 4.0),
                Vector3::zeros(),
                Vector3::y(),
                10.0,
                w,
                h,
                i,
            )
        })
        .collect();
    let refs: Vec<&CameraPose> = world.iter().collect();
    let space = SceneSpace::from_frusta(&refs, w, h, 2.0, 6.0).expect("fixture frusta");
    let poses: Vec<CameraPose> = world.iter().map(|p| space.normalize_pose(p)).collect();
    let rays = (0..n_rays)
        .map(|r| {
            let frame = r % n_frames;
            let all = space.generate_rays(&world[frame], h, w).expect("fixture rays");
            let ray = all[rng.random_range(0..all.len())].clone();
            let t = crate::render::sample_interval(ray.t_near, ray.t_far, k, true, &mut rng);
            let mut unit = || rng.random_range(-1.0..1.0);
            let lam = 1.0 / levels as f64;
            RayTarget {
                t,
                rgb: [0.5 + 0.4 * unit(), 0.5 + 0.4 * unit(), 0.5 + 0.4 * unit()],
                depth_prior: 2.0 + unit(),
                flow_prior: [
                    (frame + 1 < n_frames).then(|| [2.0 * unit(), 2.0 * unit()]),
                    (frame > 0).then(|| [2.0 * unit(), 2.0 * unit()]),
                ],
                semantic: (0..levels).map(|_| (0..dims).map(|_| 0.8 * unit()).collect()).collect(),
                attention: (0..levels).map(|_| 0.5 + 0.4 * unit()).collect(),
                semantic_weights: vec![lam; levels],
                attention_weights: vec![lam; levels],
                ray,
            }
        })
        .collect();
    TrainBatch { rays, poses }
}

/// Central-difference checking of [`LossGraph::backward`] on a tiny fixture.
pub mod gradcheck {
    use super::*;
    use crate::field::tiny_config;

    /// A seed whose fixture has no ReLU or |·| branch within ±1e-3 of any parameter.
    pub const FD_SEED: u64 = 47;

    /// Tiny nets with the flow head biased away from zero so that the L1
    /// flow terms stay differentiable under perturbation.
    pub fn fd_fixture(seed: u64) -> (FieldParams, TrainBatch) {
        let mut params = FieldParams::new(tiny_config(seed), 3).expect("fixture graph");
        params.dynamic_net.flow.as_mut().expect("fixture graph").bias.fill(0.3);
        (params, fixture_batch(4, 3, 3, 4, 3, seed + 1000))
    }

    /// Weighted loss with the depth alignment frozen at `z`, matching the
    /// stop-gradient in the analytic pass.
    pub fn frozen_loss(params: &FieldParams, batch: &TrainBatch, weights: &LossWeights, z: &loss::DepthAlignment) -> f64 {
        let g = LossGraph::record(params, batch).expect("fixture graph");
        let mut rest = weights.clone();
        rest.depth = 0.0;
        let depth = g
            .rendered
            .depth
            .iter()
            .zip(&batch.rays)
            .map(|(d, r)| (d - (z.scale * r.depth_prior + z.shift)).abs())
            .sum::<f64>()
            / batch.rays.len() as f64;
        g.total(&rest) + weights.depth * depth
    }

    /// Relative error `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖)` of every
    /// parameter tensor under central differences of step `eps`.
    pub fn fd_errors(params: &FieldParams, batch: &TrainBatch, weights: &LossWeights, eps: f64) -> Vec<f64> {
        let graph = LossGraph::record(params, batch).expect("fixture graph");
        let prior: Vec<f64> = batch.rays.iter().map(|r| r.depth_prior).collect();
        let z = loss::align_depth(graph.rendered.depth.as_slice().expect("fixture graph"), &prior);
        let analytic = graph.backward(params, weights).expect("fixture graph");
        let mut p = params.clone();
        (0..params.tensors().len())
            .map(|ti| {
                let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
                for e in 0..params.tensors()[ti].len() {
                    let x = params.tensors()[ti][e];
                    p.tensors_mut()[ti][e] = x + eps;
                    let lp = frozen_loss(&p, batch, weights, &z);
                    p.tensors_mut()[ti][e] = x - eps;
                    let lm = frozen_loss(&p, batch, weights, &z);
                    p.tensors_mut()[ti][e] = x;
                    let fd = (lp - lm) / (2.0 * eps);
                    let a = analytic.tensors()[ti][e];
                    diff += (a - fd) * (a - fd);
                    na += a * a;
                    nf += fd * fd;
                }
                diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-8)
            })
            .collect()
    }

    /// Whether a ±eps step on any single parameter flips the branch of any
    /// ReLU or absolute value in the graph.
    pub fn crosses_kink(params: &FieldParams, batch: &TrainBatch, eps: f64) -> bool {
        let sign = |p: &FieldParams| -> Vec<bool> {
            LossGraph::record(p, batch).expect("fixture graph").kink_arguments(p).iter().map(|&v| v > 0.0).collect()
        };
        let base = sign(params);
        let mut p = params.clone();
        for ti in 0..params.tensors().len() {
            for e in 0..params.tensors()[ti].len() {
                let x = params.tensors()[ti][e];
                for step in [eps, -eps] {
                    p.tensors_mut()[ti][e] = x + step;
                    if sign(&p) != base {
                        return true;
                    }
                }
                p.tensors_mut()[ti][e] = x;
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::tiny_config;

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = FieldParams::new(tiny_config(1), 3).unwrap();
        let batch = fixture_batch(4, 3, 3, 4, 3, 2);
        let g = LossGraph::record(&params, &batch).unwrap().backward(&params, &LossWeights::zero()).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unrecorded_term_is_a_graph_error() {
        let params = FieldParams::new(tiny_config(1), 3).unwrap();
        let batch = fixture_batch(4, 3, 3, 4, 3, 2);
        let terms: BTreeSet<_> = [LossTerm::Photometric].into_iter().collect();
        let graph = LossGraph::record_terms(&params, &batch, &terms).unwrap();
        assert!(graph.backward(&params, &LossWeights::only(LossTerm::Photometric)).is_ok());
        match graph.backward(&params, &LossWeights::only(LossTerm::Cycle)) {
            Err(Error::Graph(_)) => {}
            other => panic!("expected graph error, got {other:?}"),
        }
    }

    #[test]
    fn every_term_matches_finite_differences() {
        use gradcheck::*;
        let (params, batch) = fd_fixture(FD_SEED);
        assert!(!crosses_kink(&params, &batch, 1e-3), "fixture must be smooth within the step");
        let names: Vec<String> = params.named_tensors().into_iter().map(|t| t.0).collect();
        let mut cases: Vec<(&str, LossWeights)> = LossTerm::ALL.iter().map(|&t| (t.name(), LossWeights::only(t))).collect();
        cases.push(("total", LossWeights::default()));
        for (name, weights) in cases {
            for (ti, err) in fd_errors(&params, &batch, &weights, 1e-3).into_iter().enumerate() {
                assert!(err < 1e-4, "{name} {}: relative error {err:.3e}", names[ti]);
            }
        }
    }
}
