//! Saliency-aware decomposition of rendered feature images.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Ray};
use crate::error::{Error, Result};
use crate::field::FieldQuery;
use crate::render::{composite, composite_masked, project_flow_with, query_rays, Neighbor, RenderOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub max_k: usize,
    pub elbow_threshold: f64,
    pub trials_per_k: usize,
    pub subsample_stride: usize,
    pub merge_cos_threshold: f64,
    pub saliency_threshold: f64,
    pub vote_fraction: f64,
    pub flow_threshold: f64,
    /// Pixels a cluster needs in a view to take part in that view's vote.
    pub min_present_pixels: usize,
    pub max_iterations: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            max_k: 25,
            elbow_threshold: 0.975,
            trials_per_k: 10,
            subsample_stride: 5,
            merge_cos_threshold: 0.5,
            saliency_threshold: 0.07,
            vote_fraction: 0.7,
            flow_threshold: 0.07,
            min_present_pixels: 10,
            max_iterations: 100,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("cluster: {m}")));
        if self.max_k == 0 || self.trials_per_k == 0 || self.subsample_stride == 0 || self.max_iterations == 0 {
            return bad("max_k, trials_per_k, subsample_stride and max_iterations must be positive");
        }
        if !(self.elbow_threshold > 0.0 && self.elbow_threshold <= 1.0) {
            return bad("elbow_threshold must lie in (0, 1]");
        }
        if !(-1.0..=1.0).contains(&self.merge_cos_threshold) {
            return bad("merge_cos_threshold must lie in [-1, 1]");
        }
        if !(0.0..=1.0).contains(&self.vote_fraction) {
            return bad("vote_fraction must lie in [0, 1]");
        }
        if !(self.saliency_threshold.is_finite() && self.flow_threshold.is_finite()) {
            return bad("thresholds must be finite");
        }
        Ok(())
    }
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        row.iter().map(|x| x / n).collect()
    } else {
        row.to_vec()
    }
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn normalize_rows(points: ArrayView2<f64>) -> Array2<f64> {
    let mut out = points.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the centroid with the largest dot product; lowest index on ties.
pub fn nearest_centroid(x: &[f64], centroids: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (c, row) in centroids.axis_iter(Axis(0)).enumerate() {
        let v = dot(x, row.as_slice().expect("contiguous centroids"));
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    /// `(k, D)` raw (unnormalized) centroids.
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub wcss: f64,
}

fn assign_euclid(points: &Array2<f64>, centroids: &Array2<f64>, labels: &mut [usize]) -> f64 {
    let mut wcss = 0.0;
    for (i, p) in points.axis_iter(Axis(0)).enumerate() {
        let p = p.as_slice().expect("contiguous points");
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, row) in centroids.axis_iter(Axis(0)).enumerate() {
            let d = sq_dist(p, row.as_slice().expect("contiguous centroids"));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        wcss += best_d;
    }
    wcss
}

fn kmeanspp_extend<R: Rng>(points: &Array2<f64>, centroids: &mut Vec<Vec<f64>>, k: usize, rng: &mut R) {
    let m = points.nrows();
    if centroids.is_empty() {
        centroids.push(points.row(rng.random_range(0..m)).to_vec());
    }
    let mut d2: Vec<f64> = points
        .axis_iter(Axis(0))
        .map(|p| {
            let p = p.as_slice().expect("contiguous points");
            centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min)
        })
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..m)
        };
        let c = points.row(pick).to_vec();
        for (i, p) in points.axis_iter(Axis(0)).enumerate() {
            d2[i] = d2[i].min(sq_dist(p.as_slice().expect("contiguous points"), &c));
        }
        centroids.push(c);
    }
}

/// Lloyd iterations from the given centroids. Empty clusters keep their centroid.
pub fn lloyd(points: &Array2<f64>, init: Vec<Vec<f64>>, max_iterations: usize) -> KMeansRun {
    let (m, d) = points.dim();
    let k = init.len();
    let mut centroids = Array2::from_shape_fn((k, d), |(c, j)| init[c][j]);
    let mut labels = vec![usize::MAX; m];
    let mut wcss = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_iterations {
        let before = labels.clone();
        wcss = assign_euclid(points, &centroids, &mut labels);
        if labels == before {
            converged = true;
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, p) in points.axis_iter(Axis(0)).enumerate() {
            let mut row = sums.row_mut(labels[i]);
            row += &p;
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c).mapv(|x| x / counts[c] as f64);
                centroids.row_mut(c).assign(&mean);
            }
        }
    }
    if !converged {
        wcss = assign_euclid(points, &centroids, &mut labels);
    }
    KMeansRun {
        centroids,
        labels,
        wcss,
    }
}

fn trial_seed(seed: u64, k: usize, trial: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (trial as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Best of `trials` k-means++ runs by WCSS. If `warm` is given, the first trial
/// starts from those centroids extended by one k-means++ pick.
pub fn best_kmeans(
    points: &Array2<f64>,
    k: usize,
    trials: usize,
    seed: u64,
    warm: Option<&Array2<f64>>,
    max_iterations: usize,
) -> KMeansRun {
    let mut best: Option<KMeansRun> = None;
    for trial in 0..trials.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, k, trial));
        let mut init: Vec<Vec<f64>> = match (trial, warm) {
            (0, Some(w)) => w.axis_iter(Axis(0)).map(|r| r.to_vec()).collect(),
            _ => Vec::new(),
        };
        kmeanspp_extend(points, &mut init, k, &mut rng);
        let run = lloyd(points, init, max_iterations);
        if best.as_ref().map_or(true, |b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    best.expect("at least one trial")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowResult {
    pub k: usize,
    /// `(k, D)` unit centroids.
    pub centroids: Array2<f64>,
    /// Labels of every input point.
    pub labels: Vec<usize>,
    /// Best WCSS on the subsample for k = 1, 2, ... as far as the search went.
    pub wcss: Vec<f64>,
}

/// Every `stride`-th row, or all rows if that leaves fewer than two.
pub fn subsample(points: &Array2<f64>, stride: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..points.nrows()).step_by(stride.max(1)).collect();
    if idx.len() < 2 {
        return points.clone();
    }
    points.select(Axis(0), &idx)
}

/// The chosen k once the curve `wcss[k-1] = WCSS(k)` decides it: the smallest k
/// with `WCSS(k+1) / WCSS(k) > threshold`, or with `WCSS(k)` already zero.
pub fn elbow_choice(wcss: &[f64], threshold: f64, n_points: usize) -> Option<usize> {
    (1..wcss.len()).find_map(|i| {
        let (prev, cur) = (wcss[i - 1], wcss[i]);
        (prev <= f64::EPSILON * n_points as f64 || cur / prev > threshold).then_some(i)
    })
}

/// Elbow k-means on the directions of `points`.
pub fn elbow_kmeans(points: ArrayView2<f64>, cfg: &ClusterConfig, seed: u64) -> Result<ElbowResult> {
    cfg.validate()?;
    if points.nrows() < 2 {
        return Err(Error::Cluster(format!("need at least 2 points, got {}", points.nrows())));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cluster input features".into()));
    }
    let unit = normalize_rows(points);
    let sub = subsample(&unit, cfg.subsample_stride);
    let max_k = cfg.max_k.min(sub.nrows());
    let mut wcss = Vec::new();
    let mut runs: Vec<KMeansRun> = Vec::new();
    let mut chosen = None;
    for k in 1..=max_k {
        let run = best_kmeans(&sub, k, cfg.trials_per_k, seed, runs.last().map(|r| &r.centroids), cfg.max_iterations);
        wcss.push(run.wcss);
        runs.push(run);
        chosen = elbow_choice(&wcss, cfg.elbow_threshold, sub.nrows());
        if chosen.is_some() {
            break;
        }
    }
    let k = chosen.unwrap_or(max_k);
    let raw = &runs[k - 1].centroids;
    let centroids = normalize_rows(raw.view());
    let labels: Vec<usize> = unit
        .axis_iter(Axis(0))
        .map(|p| nearest_centroid(p.as_slice().expect("contiguous points"), &centroids))
        .collect();
    let (centroids, labels) = drop_empty(centroids, labels);
    log::debug!("elbow k-means chose k = {} (wcss curve {:?})", centroids.nrows(), wcss);
    Ok(ElbowResult {
        k: centroids.nrows(),
        centroids,
        labels,
        wcss,
    })
}

fn drop_empty(centroids: Array2<f64>, labels: Vec<usize>) -> (Array2<f64>, Vec<usize>) {
    let k = centroids.nrows();
    let mut used = vec![false; k];
    labels.iter().for_each(|&l| used[l] = true);
    if used.iter().all(|&u| u) {
        return (centroids, labels);
    }
    let keep: Vec<usize> = (0..k).filter(|&c| used[c]).collect();
    let mut remap = vec![usize::MAX; k];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    (centroids.select(Axis(0), &keep), labels.into_iter().map(|l| remap[l]).collect())
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut i = i;
    while parent[i] != r {
        let next = parent[i];
        parent[i] = r;
        i = next;
    }
    r
}

/// Connected components of the graph joining centroid pairs with cosine above
/// `threshold`. Returns the component of each centroid, numbered by smallest member.
pub fn merge_components(centroids: &Array2<f64>, threshold: f64) -> Vec<usize> {
    let k = centroids.nrows();
    let unit = normalize_rows(centroids.view());
    let mut parent: Vec<usize> = (0..k).collect();
    for a in 0..k {
        for b in a + 1..k {
            if unit.row(a).dot(&unit.row(b)) > threshold {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let roots: Vec<usize> = (0..k).map(|c| find(&mut parent, c)).collect();
    let mut ids = vec![usize::MAX; k];
    let mut next = 0;
    let mut out = vec![0; k];
    for c in 0..k {
        let r = roots[c];
        if ids[r] == usize::MAX {
            ids[r] = next;
            next += 1;
        }
        out[c] = ids[r];
    }
    out
}

/// Merge centroids by `merge_components`, repeating until no pair of merged
/// centroids exceeds the threshold. Each new centroid is the count-weighted mean
/// of its members, renormalized; unmerged centroids are kept as given. Returns
/// the new centroids, new counts and the old-to-new label map.
pub fn merge_centroids(centroids: &Array2<f64>, counts: &[usize], threshold: f64) -> (Array2<f64>, Vec<usize>, Vec<usize>) {
    let mut cur = centroids.to_owned();
    let mut cur_counts = counts.to_vec();
    let mut map: Vec<usize> = (0..centroids.nrows()).collect();
    loop {
        let comp = merge_components(&cur, threshold);
        let n = comp.iter().copied().max().map_or(0, |m| m + 1);
        if n == cur.nrows() {
            return (cur, cur_counts, map);
        }
        let mut sums = Array2::<f64>::zeros((n, cur.ncols()));
        let mut new_counts = vec![0; n];
        let mut members = vec![0; n];
        for c in 0..cur.nrows() {
            let w = cur_counts[c].max(1) as f64;
            let mut row = sums.row_mut(comp[c]);
            row.scaled_add(w, &normalize_rows(cur.row(c).insert_axis(Axis(0))).row(0));
            new_counts[comp[c]] += cur_counts[c];
            members[comp[c]] += 1;
        }
        let mut next = normalize_rows(sums.view());
        for c in 0..cur.nrows() {
            if members[comp[c]] == 1 {
                next.row_mut(comp[c]).assign(&cur.row(c));
            }
        }
        cur = next;
        cur_counts = new_counts;
        map.iter_mut().for_each(|m| *m = comp[*m]);
    }
}

/// Per-view, per-cluster pixel count and value sum.
fn view_sums(labels: &Array2<usize>, values: &Array2<f64>, k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut count = vec![0; k];
    let mut sum = vec![0.0; k];
    for (l, v) in labels.iter().zip(values.iter()) {
        count[*l] += 1;
        sum[*l] += v;
    }
    (count, sum)
}

/// Mean of `values` over each cluster in each view; `None` where the cluster
/// has fewer than `min_present` pixels in that view.
pub fn cluster_means(labels: &[Array2<usize>], values: &[Array2<f64>], k: usize, min_present: usize) -> Vec<Vec<Option<f64>>> {
    labels
        .iter()
        .zip(values)
        .map(|(l, v)| {
            let (count, sum) = view_sums(l, v, k);
            (0..k)
                .map(|c| (count[c] >= min_present.max(1)).then(|| sum[c] / count[c] as f64))
                .collect()
        })
        .collect()
}

/// A cluster wins when the share of views voting for it, among the views where
/// it is present, exceeds `fraction`.
pub fn vote(per_view: &[Vec<Option<bool>>], k: usize, fraction: f64) -> Vec<bool> {
    (0..k)
        .map(|c| {
            let (mut yes, mut present) = (0usize, 0usize);
            for view in per_view {
                if let Some(v) = view[c] {
                    present += 1;
                    yes += v as usize;
                }
            }
            present > 0 && yes as f64 > fraction * present as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// `(k, D)` unit centroids.
    pub centroids: Array2<f64>,
    pub salient: Vec<bool>,
    /// Per-view label maps.
    pub labels: Vec<Array2<usize>>,
    /// `[view][cluster]` mean attention, `None` where the cluster is absent.
    pub mean_attention: Vec<Vec<Option<f64>>>,
    pub counts: Vec<usize>,
}

impl ClusterModel {
    /// Label maps and counts from features by nearest centroid.
    pub fn from_centroids(centroids: Array2<f64>, features: &[Array3<f64>]) -> Self {
        let k = centroids.nrows();
        let labels: Vec<Array2<usize>> = features.iter().map(|f| assign_labels(f.view(), &centroids)).collect();
        let mut counts = vec![0; k];
        labels.iter().flat_map(|l| l.iter()).for_each(|&l| counts[l] += 1);
        ClusterModel {
            k,
            centroids,
            salient: vec![false; k],
            labels,
            mean_attention: Vec::new(),
            counts,
        }
    }

    pub fn salient_clusters(&self) -> Vec<usize> {
        (0..self.k).filter(|&c| self.salient[c]).collect()
    }

    pub fn foreground(&self, view: usize) -> Array2<bool> {
        self.labels[view].mapv(|l| self.salient[l])
    }

    /// Label maps with background 0 and salient clusters numbered 1, 2, ...
    pub fn foreground_labels(&self, view: usize) -> Array2<usize> {
        relabel_salient(&self.labels[view], &self.salient)
    }
}

/// Salient clusters numbered from 1 in index order, everything else 0.
pub fn relabel_salient(labels: &Array2<usize>, salient: &[bool]) -> Array2<usize> {
    let mut ids = vec![0; salient.len()];
    let mut next = 1;
    for (c, &s) in salient.iter().enumerate() {
        if s {
            ids[c] = next;
            next += 1;
        }
    }
    labels.mapv(|l| ids[l])
}

fn assign_labels(features: ArrayView3<f64>, centroids: &Array2<f64>) -> Array2<usize> {
    let (h, w, _) = features.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let f = features.slice(ndarray::s![y, x, ..]).to_vec();
        nearest_centroid(&normalized(&f), centroids)
    })
}

fn flatten_views(features: &[Array3<f64>]) -> Result<Array2<f64>> {
    let d = features.first().map(|f| f.dim().2).ok_or_else(|| Error::Cluster("no views".into()))?;
    let total: usize = features.iter().map(|f| f.dim().0 * f.dim().1).sum();
    let mut rows = Vec::with_capacity(total * d);
    for f in features {
        if f.dim().2 != d {
            return Err(Error::Cluster("views disagree on feature dimensions".into()));
        }
        rows.extend(f.iter().copied());
    }
    Ok(Array2::from_shape_vec((total, d), rows).expect("row-major flatten"))
}

/// Elbow k-means over all pixels of all views, followed by merging.
pub fn cluster_views(features: &[Array3<f64>], cfg: &ClusterConfig, seed: u64) -> Result<ClusterModel> {
    let points = flatten_views(features)?;
    let elbow = elbow_kmeans(points.view(), cfg, seed)?;
    let model = ClusterModel::from_centroids(elbow.centroids, features);
    Ok(merge_clusters(&model, features, cfg))
}

/// Merge clusters whose centroids are similar, then reassign pixels to the merged centroids.
pub fn merge_clusters(model: &ClusterModel, features: &[Array3<f64>], cfg: &ClusterConfig) -> ClusterModel {
    let (centroids, _, map) = merge_centroids(&model.centroids, &model.counts, cfg.merge_cos_threshold);
    if centroids.nrows() == model.k {
        return model.clone();
    }
    let mut salient = vec![false; centroids.nrows()];
    for (c, &s) in model.salient.iter().enumerate() {
        salient[map[c]] |= s;
    }
    let merged = ClusterModel::from_centroids(centroids, features);
    let keep: Vec<usize> = (0..merged.k).filter(|&c| merged.counts[c] > 0).collect();
    let mut out = if keep.len() == merged.k {
        merged
    } else {
        ClusterModel::from_centroids(merged.centroids.select(Axis(0), &keep), features)
    };
    out.salient = keep.iter().map(|&c| salient[c]).collect();
    out
}

/// Per-view saliency test `ā_c > threshold`, then voting. Stores the means on the model.
pub fn saliency_vote(model: &mut ClusterModel, attention: &[Array2<f64>], cfg: &ClusterConfig) -> Vec<bool> {
    let means = cluster_means(&model.labels, attention, model.k, cfg.min_present_pixels);
    let per_view: Vec<Vec<Option<bool>>> = means
        .iter()
        .map(|v| v.iter().map(|m| m.map(|a| a > cfg.saliency_threshold)).collect())
        .collect();
    model.mean_attention = means;
    let flags = vote(&per_view, model.k, cfg.vote_fraction);
    model.salient = flags.clone();
    flags
}

/// Like `saliency_vote`, but a view only votes salient when the cluster's mean
/// attention and its mean projected-flow magnitude both exceed their thresholds.
/// Uses `model.mean_attention` from a previous `saliency_vote`.
pub fn flow_salient_filter(model: &ClusterModel, flow_magnitude: &[Array2<f64>], cfg: &ClusterConfig) -> Vec<bool> {
    let flow = cluster_means(&model.labels, flow_magnitude, model.k, cfg.min_present_pixels);
    let per_view: Vec<Vec<Option<bool>>> = model
        .mean_attention
        .iter()
        .zip(&flow)
        .map(|(att, fl)| {
            att.iter()
                .zip(fl)
                .map(|(a, f)| match (a, f) {
                    (Some(a), Some(f)) => Some(*a > cfg.saliency_threshold && *f > cfg.flow_threshold),
                    _ => None,
                })
                .collect()
        })
        .collect();
    vote(&per_view, model.k, cfg.vote_fraction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewAssignment {
    pub labels: Array2<usize>,
    pub foreground: Array2<bool>,
}

/// Label each pixel of a rendered `(H, W, D)` feature image by its most similar centroid.
pub fn assign_view(features: ArrayView3<f64>, model: &ClusterModel) -> ViewAssignment {
    let labels = assign_labels(features, &model.centroids);
    let foreground = labels.mapv(|l| model.salient[l]);
    ViewAssignment { labels, foreground }
}

/// Foreground where the score exceeds its per-image `q` quantile (ties are background).
pub fn blend_quantile_baseline(scores: &[Array2<f64>], q: f64) -> Vec<Array2<bool>> {
    scores
        .iter()
        .map(|s| {
            let mut v: Vec<f64> = s.iter().copied().collect();
            if v.is_empty() {
                return s.mapv(|_| false);
            }
            v.sort_by(|a, b| a.total_cmp(b));
            let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            let thr = v[idx];
            s.mapv(|x| x > thr)
        })
        .collect()
}

/// A cluster is selected when strictly more than half of its pixels, over all
/// views, lie inside the ground-truth foreground.
pub fn oracle_select(model: &ClusterModel, gt_masks: &[Array2<bool>]) -> Vec<bool> {
    let mut inside = vec![0usize; model.k];
    let mut total = vec![0usize; model.k];
    for (l, m) in model.labels.iter().zip(gt_masks) {
        for (&c, &fg) in l.iter().zip(m.iter()) {
            total[c] += 1;
            inside[c] += fg as usize;
        }
    }
    (0..model.k).map(|c| 2 * inside[c] > total[c]).collect()
}

/// Render with samples whose semantics are nearest to a centroid outside
/// `targets` given zero density.
pub fn isolate_object(
    field: &dyn FieldQuery,
    rays: &[Ray],
    model: &ClusterModel,
    targets: &[usize],
    opts: &RenderOptions,
) -> Result<Vec<crate::render::RenderedPixel>> {
    if !model.salient.iter().any(|&s| s) {
        return Err(Error::Cluster("model has no salient cluster to isolate".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= model.k) {
        return Err(Error::Cluster(format!("target cluster {t} out of range (k = {})", model.k)));
    }
    let mut keep_label = vec![false; model.k];
    targets.iter().for_each(|&t| keep_label[t] = true);
    query_rays(field, rays, opts)
        .iter()
        .map(|samples| {
            let sem = samples.combined_semantics();
            let keep: Vec<bool> = sem
                .axis_iter(Axis(0))
                .map(|s| keep_label[nearest_centroid(&normalized(&s.to_vec()), &model.centroids)])
                .collect();
            composite_masked(samples, Some(&keep))
        })
        .collect()
}

/// Rendered per-pixel maps of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMaps {
    pub rgb: Array3<f64>,
    pub depth: Array2<f64>,
    pub features: Array3<f64>,
    pub attention: Array2<f64>,
    pub blend: Array2<f64>,
    pub opacity: Array2<f64>,
    /// Magnitude in pixels of scene flow projected into the view's own camera.
    pub flow_magnitude: Option<Array2<f64>>,
}

/// Render every channel of a full view. With `flow_pose`, also project the
/// scene flow toward the next frame (previous for the last frame) into that
/// fixed camera.
pub fn render_view_maps(
    field: &dyn FieldQuery,
    rays: &[Ray],
    height: usize,
    width: usize,
    opts: &RenderOptions,
    flow_pose: Option<&CameraPose>,
) -> Result<ViewMaps> {
    if rays.len() != height * width {
        return Err(Error::Render(format!("{} rays for a {height}x{width} view", rays.len())));
    }
    let d = field.semantic_dims();
    let n_frames = field.n_frames();
    let mut maps = ViewMaps {
        rgb: Array3::zeros((height, width, 3)),
        depth: Array2::zeros((height, width)),
        features: Array3::zeros((height, width, d)),
        attention: Array2::zeros((height, width)),
        blend: Array2::zeros((height, width)),
        opacity: Array2::zeros((height, width)),
        flow_magnitude: flow_pose.map(|_| Array2::zeros((height, width))),
    };
    for samples in query_rays(field, rays, opts) {
        let px = composite(&samples)?;
        let (y, x) = (samples.ray.row, samples.ray.col);
        for c in 0..3 {
            maps.rgb[[y, x, c]] = px.color[c];
        }
        for (j, s) in px.semantic.iter().enumerate() {
            maps.features[[y, x, j]] = *s;
        }
        maps.depth[[y, x]] = px.depth;
        maps.attention[[y, x]] = px.attention;
        maps.blend[[y, x]] = px.blend;
        maps.opacity[[y, x]] = px.opacity;
        if let (Some(pose), Some(fm)) = (flow_pose, maps.flow_magnitude.as_mut()) {
            let neighbor = if samples.ray.time_index + 1 < n_frames {
                Neighbor::Next
            } else {
                Neighbor::Prev
            };
            let f = project_flow_with(&samples, neighbor, pose)?;
            fm[[y, x]] = f.flow[0].hypot(f.flow[1]);
        }
    }
    Ok(maps)
}
