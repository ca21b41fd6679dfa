//! Loss terms on rendered quantities and per-sample field outputs, each
//! returning its value together with the gradient on its inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Photometric,
    ReprojColor,
    Depth,
    Flow,
    SemanticReproj,
    AttentionReproj,
    Semantic,
    Attention,
    FlowMagnitude,
    FlowSmooth,
    Occlusion,
    Cycle,
    Entropy,
}

impl LossTerm {
    pub const ALL: [LossTerm; 13] = [
        LossTerm::Photometric,
        LossTerm::ReprojColor,
        LossTerm::Depth,
        LossTerm::Flow,
        LossTerm::SemanticReproj,
        LossTerm::AttentionReproj,
        LossTerm::Semantic,
        LossTerm::Attention,
        LossTerm::FlowMagnitude,
        LossTerm::FlowSmooth,
        LossTerm::Occlusion,
        LossTerm::Cycle,
        LossTerm::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Photometric => "photometric",
            LossTerm::ReprojColor => "reproj_color",
            LossTerm::Depth => "depth",
            LossTerm::Flow => "flow",
            LossTerm::SemanticReproj => "s_reproj",
            LossTerm::AttentionReproj => "a_reproj",
            LossTerm::Semantic => "s",
            LossTerm::Attention => "a",
            LossTerm::FlowMagnitude => "flow_mag",
            LossTerm::FlowSmooth => "flow_smooth",
            LossTerm::Occlusion => "occ",
            LossTerm::Cycle => "cycle",
            LossTerm::Entropy => "entropy",
        }
    }

    /// Terms that need the dynamic field re-queried at advected points.
    pub fn needs_warp(self) -> bool {
        matches!(
            self,
            LossTerm::ReprojColor | LossTerm::SemanticReproj | LossTerm::AttentionReproj | LossTerm::Cycle
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub photometric: f64,
    pub reproj_color: f64,
    pub depth: f64,
    pub flow: f64,
    pub s_reproj: f64,
    pub a_reproj: f64,
    pub s: f64,
    pub a: f64,
    pub flow_mag: f64,
    pub flow_smooth: f64,
    pub occ_prior: f64,
    pub cycle: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            photometric: 1.0,
            reproj_color: 1.0,
            depth: 0.04,
            flow: 0.02,
            s_reproj: 1.0,
            a_reproj: 1.0,
            s: 0.04,
            a: 0.04,
            flow_mag: 0.1,
            flow_smooth: 0.1,
            occ_prior: 0.1,
            cycle: 1.0,
            entropy: 0.001,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            photometric: 0.0,
            reproj_color: 0.0,
            depth: 0.0,
            flow: 0.0,
            s_reproj: 0.0,
            a_reproj: 0.0,
            s: 0.0,
            a: 0.0,
            flow_mag: 0.0,
            flow_smooth: 0.0,
            occ_prior: 0.0,
            cycle: 0.0,
            entropy: 0.0,
        }
    }

    /// Only `term` active, with unit weight.
    pub fn only(term: LossTerm) -> Self {
        let mut w = Self::zero();
        *w.get_mut(term) = 1.0;
        w
    }

    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Photometric => self.photometric,
            LossTerm::ReprojColor => self.reproj_color,
            LossTerm::Depth => self.depth,
            LossTerm::Flow => self.flow,
            LossTerm::SemanticReproj => self.s_reproj,
            LossTerm::AttentionReproj => self.a_reproj,
            LossTerm::Semantic => self.s,
            LossTerm::Attention => self.a,
            LossTerm::FlowMagnitude => self.flow_mag,
            LossTerm::FlowSmooth => self.flow_smooth,
            LossTerm::Occlusion => self.occ_prior,
            LossTerm::Cycle => self.cycle,
            LossTerm::Entropy => self.entropy,
        }
    }

    /// Weights with the schedule's multiplier applied at `iter`.
    pub fn scheduled(&self, schedule: &DecaySchedule, iter: usize) -> Self {
        let mut out = self.clone();
        for term in LossTerm::ALL {
            *out.get_mut(term) *= schedule.multiplier(term, iter);
        }
        out
    }

    pub fn get_mut(&mut self, term: LossTerm) -> &mut f64 {
        match term {
            LossTerm::Photometric => &mut self.photometric,
            LossTerm::ReprojColor => &mut self.reproj_color,
            LossTerm::Depth => &mut self.depth,
            LossTerm::Flow => &mut self.flow,
            LossTerm::SemanticReproj => &mut self.s_reproj,
            LossTerm::AttentionReproj => &mut self.a_reproj,
            LossTerm::Semantic => &mut self.s,
            LossTerm::Attention => &mut self.a,
            LossTerm::FlowMagnitude => &mut self.flow_mag,
            LossTerm::FlowSmooth => &mut self.flow_smooth,
            LossTerm::Occlusion => &mut self.occ_prior,
            LossTerm::Cycle => &mut self.cycle,
            LossTerm::Entropy => &mut self.entropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for term in LossTerm::ALL {
            let w = self.get(term);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {} must be >= 0, got {w}", term.name())));
            }
        }
        Ok(())
    }
}

/// Step decay of the prior terms: the multiplier drops by 10 every `period` iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecaySchedule {
    pub period: usize,
    pub factor: f64,
    /// Also decay the semantic and attention terms (ablation only).
    pub decay_semantics: bool,
}

impl Default for DecaySchedule {
    fn default() -> Self {
        DecaySchedule {
            period: 300_000,
            factor: 10.0,
            decay_semantics: false,
        }
    }
}

impl DecaySchedule {
    pub fn rate(&self, iter: usize) -> f64 {
        let steps = iter / self.period.max(1);
        self.factor.powi(-(steps.min(i32::MAX as usize) as i32))
    }

    pub fn is_decayed(&self, term: LossTerm) -> bool {
        match term {
            LossTerm::Depth | LossTerm::Flow => true,
            LossTerm::Semantic | LossTerm::Attention | LossTerm::SemanticReproj | LossTerm::AttentionReproj => {
                self.decay_semantics
            }
            _ => false,
        }
    }

    pub fn multiplier(&self, term: LossTerm, iter: usize) -> f64 {
        if self.is_decayed(term) {
            self.rate(iter)
        } else {
            1.0
        }
    }
}

/// `mean_r c_r ||pred_r - target_r||²` with optional per-row weights `c`.
/// Returns the value, `d/d pred` and `d/d c`.
pub fn weighted_sq_error(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    weights: Option<ArrayView1<f64>>,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = pred.nrows();
    let mut d_pred = Array2::zeros(pred.raw_dim());
    let mut d_w = Array1::zeros(n);
    if n == 0 {
        return (0.0, d_pred, d_w);
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for r in 0..n {
        let c = weights.map_or(1.0, |w| w[r]);
        let mut sq = 0.0;
        for k in 0..pred.ncols() {
            let e = pred[[r, k]] - target[[r, k]];
            sq += e * e;
            d_pred[[r, k]] = 2.0 * c * e * inv;
        }
        total += c * sq;
        d_w[r] = sq * inv;
    }
    (total * inv, d_pred, d_w)
}

/// Mean over rays of the squared color error.
pub fn photometric_loss(rendered: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if rendered.nrows() == 0 {
        return Err(Error::Validation("photometric loss over an empty batch".into()));
    }
    Ok(weighted_sq_error(rendered, target, None).0)
}

/// Mean over (ray, neighbor) pairs of `ŵ ||warped - target||²`.
pub fn reprojection_loss(warped: ArrayView2<f64>, target: ArrayView2<f64>, occlusion: ArrayView1<f64>) -> f64 {
    weighted_sq_error(warped, target, Some(occlusion)).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthAlignment {
    pub scale: f64,
    pub shift: f64,
    /// True when the prior had no variance and only a shift was fitted.
    pub shift_only: bool,
}

/// Least-squares `(a, b)` minimizing `Σ (rendered - (a prior + b))²`.
pub fn align_depth(rendered: &[f64], prior: &[f64]) -> DepthAlignment {
    let n = rendered.len() as f64;
    let mp = prior.iter().sum::<f64>() / n;
    let mr = rendered.iter().sum::<f64>() / n;
    let mut var = 0.0;
    let mut cov = 0.0;
    for (r, p) in rendered.iter().zip(prior) {
        var += (p - mp) * (p - mp);
        cov += (p - mp) * (r - mr);
    }
    if var <= 1e-12 * (1.0 + mp * mp) * n {
        return DepthAlignment {
            scale: 1.0,
            shift: mr - mp,
            shift_only: true,
        };
    }
    let scale = cov / var;
    DepthAlignment {
        scale,
        shift: mr - scale * mp,
        shift_only: false,
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean L1 between rendered depth and the affinely aligned prior. The
/// alignment is treated as a constant for the gradient.
pub fn depth_prior_loss(rendered: &[f64], prior: &[f64]) -> Result<(f64, Vec<f64>, DepthAlignment)> {
    if rendered.len() < 2 || rendered.len() != prior.len() {
        return Err(Error::Validation(format!(
            "depth loss needs >= 2 matched values, got {} and {}",
            rendered.len(),
            prior.len()
        )));
    }
    let z = align_depth(rendered, prior);
    let inv = 1.0 / rendered.len() as f64;
    let mut value = 0.0;
    let grad = rendered
        .iter()
        .zip(prior)
        .map(|(r, p)| {
            let e = r - (z.scale * p + z.shift);
            value += e.abs();
            sign(e) * inv
        })
        .collect();
    Ok((value * inv, grad, z))
}

/// Mean over rows of `||pred - target||₁`.
pub fn l1_rows(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = pred.nrows();
    let mut d = Array2::zeros(pred.raw_dim());
    if n == 0 {
        return (0.0, d);
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for ((g, &p), &t) in d.iter_mut().zip(pred.iter()).zip(target.iter()) {
        total += (p - t).abs();
        *g = sign(p - t) * inv;
    }
    (total * inv, d)
}

/// Mean over (ray, neighbor) pairs of the L1 distance between projected and prior flow.
pub fn flow_prior_loss(projected: ArrayView2<f64>, prior: ArrayView2<f64>) -> f64 {
    l1_rows(projected, prior).0
}

/// `mean_r Σ_l λ_{r,l} ||pred_r - target_{l,r}||²`.
pub fn feature_reconstruction_loss(
    pred: ArrayView2<f64>,
    levels: &[Array2<f64>],
    level_weights: ArrayView2<f64>,
) -> (f64, Array2<f64>) {
    let n = pred.nrows();
    let mut d = Array2::zeros(pred.raw_dim());
    if n == 0 {
        return (0.0, d);
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for (l, target) in levels.iter().enumerate() {
        for r in 0..n {
            let lam = level_weights[[r, l]];
            if lam == 0.0 {
                continue;
            }
            for k in 0..pred.ncols() {
                let e = pred[[r, k]] - target[[r, k]];
                total += lam * e * e;
                d[[r, k]] += 2.0 * lam * e * inv;
            }
        }
    }
    (total * inv, d)
}

/// Mean of `(1 - w)²` over every entry.
pub fn occlusion_prior(w: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let inv = 1.0 / w.len().max(1) as f64;
    let value = w.iter().map(|w| (1.0 - w) * (1.0 - w)).sum::<f64>() * inv;
    (value, w.mapv(|w| -2.0 * (1.0 - w) * inv))
}

/// Mean over samples and both directions of `||f||₁` for a `(K, 6)` flow array.
pub fn flow_magnitude(flow: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let pairs = (flow.nrows() * 2).max(1) as f64;
    let value = flow.iter().map(|f| f.abs()).sum::<f64>() / pairs;
    (value, flow.mapv(|f| sign(f) / pairs))
}

/// Mean over adjacent sample pairs (within each ray of `k` samples) and both
/// directions of `||f_k - f_{k+1}||₁`.
pub fn flow_smoothness(flow: ArrayView2<f64>, samples_per_ray: usize) -> (f64, Array2<f64>) {
    let mut d = Array2::zeros(flow.raw_dim());
    let k = samples_per_ray;
    if k < 2 || flow.nrows() == 0 {
        return (0.0, d);
    }
    let rays = flow.nrows() / k;
    let pairs = (rays * (k - 1) * 2) as f64;
    let mut total = 0.0;
    for r in 0..rays {
        for s in 0..k - 1 {
            let (a, b) = (r * k + s, r * k + s + 1);
            for c in 0..flow.ncols() {
                let e = flow[[a, c]] - flow[[b, c]];
                total += e.abs();
                d[[a, c]] += sign(e) / pairs;
                d[[b, c]] -= sign(e) / pairs;
            }
        }
    }
    (total / pairs, d)
}

/// Mean over rows of `||f_there(x) + f_back(x + f_there)||₁` for `(P, 3)` arrays.
pub fn cycle_consistency(there: ArrayView2<f64>, back: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = there.nrows();
    let mut d = Array2::zeros(there.raw_dim());
    if n == 0 {
        return (0.0, d);
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for ((g, &a), &b) in d.iter_mut().zip(there.iter()).zip(back.iter()) {
        total += (a + b).abs();
        *g = sign(a + b) * inv;
    }
    (total * inv, d)
}

/// Mean binary entropy (nats) of blend weights.
pub fn blend_entropy(v: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let inv = 1.0 / v.len().max(1) as f64;
    let h = |p: f64| {
        let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
        term(p) + term(1.0 - p)
    };
    let value = v.iter().map(|&p| h(p)).sum::<f64>() * inv;
    let grad = v.mapv(|p| {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        ((1.0 - p) / p).ln() * inv
    });
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regularizers {
    pub occ_prior: f64,
    pub flow_mag: f64,
    pub flow_smooth: f64,
    pub cycle: f64,
    pub entropy: f64,
}

/// All regularizers on per-sample outputs: occlusion `(K,2)`, flow `(K,6)`,
/// cycle pairs and blend weights.
pub fn regularizers(
    occlusion: ArrayView2<f64>,
    flow: ArrayView2<f64>,
    samples_per_ray: usize,
    cycle_there: ArrayView2<f64>,
    cycle_back: ArrayView2<f64>,
    blend: ArrayView1<f64>,
) -> Regularizers {
    Regularizers {
        occ_prior: occlusion_prior(occlusion).0,
        flow_mag: flow_magnitude(flow).0,
        flow_smooth: flow_smoothness(flow, samples_per_ray).0,
        cycle: cycle_consistency(cycle_there, cycle_back).0,
        entropy: blend_entropy(blend).0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn photometric_examples() {
        let a = array![[0.2, 0.3, 0.4], [0.5, 0.5, 0.5]];
        assert_eq!(photometric_loss(a.view(), a.view()).unwrap(), 0.0);
        let b = &a + 0.1;
        assert!((photometric_loss(b.view(), a.view()).unwrap() - 0.03).abs() < 1e-12);
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(photometric_loss(empty.view(), empty.view()).is_err());
    }

    #[test]
    fn reprojection_ignores_occluded() {
        let a = array![[0.0, 0.0, 0.0]];
        let b = array![[1.0, 1.0, 1.0]];
        assert_eq!(reprojection_loss(a.view(), b.view(), array![0.0].view()), 0.0);
        assert_eq!(reprojection_loss(b.view(), b.view(), array![1.0].view()), 0.0);
    }

    #[test]
    fn depth_affine_and_shift_fallback() {
        let prior = [0.5, 1.0, 2.0, 4.0];
        let rendered: Vec<f64> = prior.iter().map(|p| 2.0 * p + 3.0).collect();
        let (v, _, z) = depth_prior_loss(&rendered, &prior).unwrap();
        assert!(v < 1e-12);
        assert!((z.scale - 2.0).abs() < 1e-12 && (z.shift - 3.0).abs() < 1e-12);
        let (v, _, z) = depth_prior_loss(&[1.5; 3], &[0.2; 3]).unwrap();
        assert!(z.shift_only);
        assert!(v < 1e-12);
        assert!(depth_prior_loss(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn flow_prior_examples() {
        let a = array![[1.0, 2.0], [0.0, 0.0]];
        assert_eq!(flow_prior_loss(a.view(), a.view()), 0.0);
        let b = &a + 1.0;
        assert_eq!(flow_prior_loss(b.view(), a.view()), 2.0);
    }

    #[test]
    fn regularizers_vanish_on_ideal_samples() {
        let occ = Array2::ones((4, 2));
        let flow = Array2::zeros((4, 6));
        let z = Array2::zeros((4, 3));
        let v = array![0.0, 1.0, 1.0, 0.0];
        let r = regularizers(occ.view(), flow.view(), 2, z.view(), z.view(), v.view());
        assert_eq!(r, Regularizers { occ_prior: 0.0, flow_mag: 0.0, flow_smooth: 0.0, cycle: 0.0, entropy: 0.0 });
        let (h, _) = blend_entropy(array![0.5, 0.5].view());
        assert!((h - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn decay_schedule_steps() {
        let d = DecaySchedule::default();
        assert_eq!(d.rate(0), 1.0);
        assert_eq!(d.rate(299_999), 1.0);
        assert!((d.rate(300_000) - 0.1).abs() < 1e-15);
        assert_eq!(d.multiplier(LossTerm::Semantic, 900_000), 1.0);
        assert_eq!(d.multiplier(LossTerm::Photometric, 900_000), 1.0);
    }

    #[test]
    fn feature_loss_single_level_is_mse() {
        let pred = array![[0.1, 0.2], [0.3, -0.4]];
        let t0 = array![[0.0, 0.0], [0.0, 0.0]];
        let t1 = array![[9.0, 9.0], [9.0, 9.0]];
        let lam = array![[1.0, 0.0], [1.0, 0.0]];
        let (v, _) = feature_reconstruction_loss(pred.view(), &[t0.clone(), t1], lam.view());
        let mse = weighted_sq_error(pred.view(), t0.view(), None).0;
        assert!((v - mse).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = array![[0.1, -0.2, 0.3, 0.05, -0.4, 0.25], [0.2, 0.1, -0.3, 0.15, 0.4, -0.05]];
        let (_, g) = flow_smoothness(f.view(), 2);
        let (_, gm) = flow_magnitude(f.view());
        for idx in [(0, 0), (1, 4), (0, 5)] {
            let mut p = f.clone();
            let mut m = f.clone();
            p[idx] += 1e-7;
            m[idx] -= 1e-7;
            let fd = (flow_smoothness(p.view(), 2).0 - flow_smoothness(m.view(), 2).0) / 2e-7;
            assert!((fd - g[idx]).abs() < 1e-6);
            let fd = (flow_magnitude(p.view()).0 - flow_magnitude(m.view()).0) / 2e-7;
            assert!((fd - gm[idx]).abs() < 1e-6);
        }
        let v = array![0.2, 0.7];
        let (_, gv) = blend_entropy(v.view());
        let mut p = v.clone();
        let mut m = v.clone();
        p[0] += 1e-7;
        m[0] -= 1e-7;
        let fd = (blend_entropy(p.view()).0 - blend_entropy(m.view()).0) / 2e-7;
        assert!((fd - gv[0]).abs() < 1e-6);
    }
}
