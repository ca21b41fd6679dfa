use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saff::camera::Ray;
use saff::field::{tiny_config, FieldParams, FieldQuery, NetOutput};
use saff::render::{composite, composite_single, deltas, render_warped, RaySampleBatch, Transmittance};

const DIMS: usize = 3;

fn ray(time_index: usize) -> Ray {
    Ray {
        origin: Vector3::new(0.1, -0.2, 1.5),
        direction: Vector3::new(0.0, 0.0, -1.0),
        t_near: 0.2,
        t_far: 3.0,
        row: 4,
        col: 7,
        time_index,
    }
}

fn distances(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    t
}

fn random_output(rng: &mut ChaCha8Rng, n: usize, blend: Option<f64>, dynamic: bool) -> NetOutput {
    NetOutput {
        sigma: Array1::from_shape_fn(n, |_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..6.0) }),
        color: Array2::from_shape_fn((n, 3), |_| rng.random_range(0.0..1.0)),
        semantic: Array2::from_shape_fn((n, DIMS), |_| rng.random_range(-1.0..1.0)),
        attention: Array1::from_shape_fn(n, |_| rng.random_range(0.0..1.0)),
        blend: (!dynamic).then(|| Array1::from_shape_fn(n, |_| blend.unwrap_or_else(|| rng.random_range(0.0..1.0)))),
        flow: dynamic.then(|| Array2::zeros((n, 6))),
        occlusion: dynamic.then(|| Array2::ones((n, 2))),
    }
}

fn random_batch(seed: u64, n: usize, blend: Option<f64>) -> RaySampleBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = distances(&mut rng, n);
    let k = t.len();
    let r = ray(1);
    RaySampleBatch {
        positions: RaySampleBatch::positions_for(&r, &t),
        static_out: random_output(&mut rng, k, blend, false),
        dynamic_out: random_output(&mut rng, k, None, true),
        ray: r,
        t,
    }
}

/// Smooth, time-invariant field with zero scene flow and unit occlusion weights.
struct StillField {
    a: [f64; 3],
    b: [f64; 3],
}

impl StillField {
    fn output(&self, positions: &Array2<f64>, phase: f64, dynamic: bool) -> NetOutput {
        let n = positions.nrows();
        let s = |k: usize, c: usize| {
            let p = positions.row(k);
            (self.a[c] * p[0] + self.b[c] * p[1] + (c as f64 + phase) * p[2]).sin()
        };
        NetOutput {
            sigma: Array1::from_shape_fn(n, |k| 3.0 * (1.0 + s(k, 0))),
            color: Array2::from_shape_fn((n, 3), |(k, c)| 0.5 + 0.5 * s(k, c)),
            semantic: Array2::from_shape_fn((n, DIMS), |(k, d)| s(k, (d + 1) % 3)),
            attention: Array1::from_shape_fn(n, |k| 0.5 + 0.5 * s(k, 2)),
            blend: (!dynamic).then(|| Array1::from_shape_fn(n, |k| 0.5 + 0.5 * s(k, 1))),
            flow: dynamic.then(|| Array2::zeros((n, 6))),
            occlusion: dynamic.then(|| Array2::ones((n, 2))),
        }
    }
}

impl FieldQuery for StillField {
    fn n_frames(&self) -> usize {
        3
    }

    fn semantic_dims(&self) -> usize {
        DIMS
    }

    fn query_static(&self, positions: &Array2<f64>, _omegas: &Array2<f64>) -> NetOutput {
        self.output(positions, 0.0, false)
    }

    fn query_dynamic(&self, positions: &Array2<f64>, _omegas: &Array2<f64>, _times: &[f64]) -> NetOutput {
        self.output(positions, 0.7, true)
    }
}

proptest! {
    #[test]
    fn composited_channels_stay_in_the_scaled_hull(seed in any::<u64>(), n in 1usize..24) {
        let b = random_batch(seed, n, None);
        let px = composite(&b).unwrap();
        let eps = 1e-12;
        prop_assert!((-eps..=1.0 + eps).contains(&px.opacity));
        prop_assert!((-eps..=1.0 + eps).contains(&px.attention));
        prop_assert!((-eps..=1.0 + eps).contains(&px.blend));
        let hull = |vals: Vec<f64>, got: f64| {
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            got >= px.opacity * lo - eps && got <= px.opacity * hi + eps
        };
        for c in 0..3 {
            let vals = b.static_out.color.column(c).iter().chain(b.dynamic_out.color.column(c).iter()).copied().collect();
            prop_assert!(hull(vals, px.color[c]));
        }
        for d in 0..DIMS {
            let vals = b.static_out.semantic.column(d).iter().chain(b.dynamic_out.semantic.column(d).iter()).copied().collect();
            prop_assert!(hull(vals, px.semantic[d]));
        }
        prop_assert!(hull(b.t.clone(), px.depth));
    }

    #[test]
    fn blend_endpoints_reduce_to_a_single_field(seed in any::<u64>(), n in 1usize..24) {
        for (v, dynamic) in [(1.0, false), (0.0, true)] {
            let b = random_batch(seed, n, Some(v));
            let mixed = composite(&b).unwrap();
            let single = composite_single(&b.t, b.ray.t_far, if dynamic { &b.dynamic_out } else { &b.static_out }).unwrap();
            prop_assert_eq!(mixed.color, single.color);
            prop_assert_eq!(&mixed.semantic, &single.semantic);
            prop_assert_eq!(mixed.attention, single.attention);
            prop_assert_eq!(mixed.depth, single.depth);
            prop_assert_eq!(mixed.opacity, single.opacity);
        }
    }

    #[test]
    fn zero_density_samples_change_no_weights(
        sigma in prop::collection::vec(0.0f64..8.0, 1..16),
        delta in prop::collection::vec(0.01f64..0.5, 16),
        at in any::<prop::sample::Index>(),
        gap in 0.01f64..1.0,
    ) {
        let n = sigma.len();
        let base = Transmittance::new(delta[..n].to_vec(), &sigma);
        let i = at.index(n + 1);
        let mut s2 = sigma.clone();
        let mut d2 = delta[..n].to_vec();
        s2.insert(i, 0.0);
        d2.insert(i, gap);
        let with = Transmittance::new(d2, &s2);
        let mut w = with.weights.clone();
        prop_assert_eq!(w.remove(i), 0.0);
        prop_assert_eq!(w, base.weights);
        prop_assert_eq!(with.t_final, base.t_final);
    }

    #[test]
    fn still_field_warps_to_itself(a in prop::array::uniform3(-3.0f64..3.0), b in prop::array::uniform3(-3.0f64..3.0), n in 2usize..20) {
        let field = StillField { a, b };
        let r = ray(1);
        let t: Vec<f64> = (0..n).map(|k| r.t_near + (r.t_far - r.t_near) * (k as f64 + 0.5) / n as f64).collect();
        let samples = RaySampleBatch::query(&field, &r, t);
        let plain = composite(&samples).unwrap();
        for j in [0, 2] {
            let warped = render_warped(&field, &samples, j).unwrap();
            prop_assert_eq!(warped.color, plain.color);
            prop_assert_eq!(&warped.semantic, &plain.semantic);
            prop_assert_eq!(warped.attention, plain.attention);
            prop_assert!((warped.occlusion - plain.opacity).abs() < 1e-12);
        }
    }

    #[test]
    fn deltas_close_on_the_far_bound(t in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let mut ts: Vec<f64> = t.iter().scan(0.1, |acc, d| { *acc += 0.01 + d; Some(*acc) }).collect();
        ts.dedup();
        let far = ts.last().unwrap() + 0.5;
        let d = deltas(&ts, far).unwrap();
        prop_assert!((d.iter().sum::<f64>() - (far - ts[0])).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn non_color_heads_ignore_view_direction(
        seed in 0u64..50,
        x in prop::array::uniform3(-2.0f64..2.0),
        w1 in prop::array::uniform3(-1.0f64..1.0),
        w2 in prop::array::uniform3(-1.0f64..1.0),
        time in 0.0f64..3.0,
    ) {
        let unit = |w: [f64; 3]| {
            let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt().max(1e-6);
            [w[0] / n, w[1] / n, w[2] / n]
        };
        let params = FieldParams::new(tiny_config(seed), 4).unwrap();
        let (a, b) = (params.eval_static(x, unit(w1)).unwrap(), params.eval_static(x, unit(w2)).unwrap());
        prop_assert_eq!(a.sigma, b.sigma);
        prop_assert_eq!(a.blend, b.blend);
        prop_assert_eq!(&a.semantic, &b.semantic);
        prop_assert_eq!(a.attention, b.attention);
        let (a, b) = (params.eval_dynamic(x, unit(w1), time).unwrap(), params.eval_dynamic(x, unit(w2), time).unwrap());
        prop_assert_eq!(a.sigma, b.sigma);
        prop_assert_eq!(a.flow_fwd, b.flow_fwd);
        prop_assert_eq!(a.flow_bwd, b.flow_bwd);
        prop_assert_eq!((a.occlusion_fwd, a.occlusion_bwd), (b.occlusion_fwd, b.occlusion_bwd));
        prop_assert_eq!(&a.semantic, &b.semantic);
        prop_assert_eq!(a.attention, b.attention);
    }

    #[test]
    fn heads_stay_in_range(seed in 0u64..50, x in prop::array::uniform3(-2.0f64..2.0), time in 0.0f64..3.0) {
        let params = FieldParams::new(tiny_config(seed), 4).unwrap();
        let omega = [0.0, 0.0, 1.0];
        let s = params.eval_static(x, omega).unwrap();
        let d = params.eval_dynamic(x, omega, time).unwrap();
        prop_assert!(s.sigma >= 0.0 && d.sigma >= 0.0);
        prop_assert!((0.0..=1.0).contains(&s.blend));
        for v in [s.attention, d.attention, d.occlusion_fwd, d.occlusion_bwd] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for c in s.color.iter().chain(&d.color) {
            prop_assert!((0.0..=1.0).contains(c));
        }
        prop_assert!(s.semantic.iter().chain(&d.semantic).all(|v| (-1.0..=1.0).contains(v)));
    }
}
