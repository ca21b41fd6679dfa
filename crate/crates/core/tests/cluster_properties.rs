use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saff::cluster::{
    assign_view, cluster_views, elbow_kmeans, merge_centroids, normalize_rows, vote, ClusterConfig,
};

/// Views of `h x w` pixels, each pixel a noisy copy of one of `k` random directions.
fn blob_views(k: usize, n_views: usize, dims: usize, seed: u64) -> Vec<Array3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n_views)
        .map(|_| Array3::from_shape_fn((8, 10, dims), |(y, x, d)| centers[(y * 10 + x) * k / 80][d] + rng.random_range(-0.05..0.05)))
        .collect()
}

fn stack(views: &[Array3<f64>]) -> Array2<f64> {
    let d = views[0].dim().2;
    Array2::from_shape_vec((views.len() * views[0].len() / d, d), views.iter().flat_map(|v| v.iter().copied()).collect())
        .unwrap()
}

fn unit_rows(n: usize, dims: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normalize_rows(Array2::from_shape_fn((n, dims), |_| rng.random_range(-1.0..1.0)).view())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn labels_ignore_global_positive_scaling(k in 1usize..4, seed in 0u64..1000, exp in -20i32..20) {
        let pts = stack(&blob_views(k, 2, 6, seed));
        let cfg = ClusterConfig { max_k: 6, ..ClusterConfig::default() };
        let a = elbow_kmeans(pts.view(), &cfg, seed).unwrap();
        let b = elbow_kmeans((&pts * 2f64.powi(exp)).view(), &cfg, seed).unwrap();
        prop_assert_eq!(a.labels, b.labels);
        prop_assert_eq!(a.k, b.k);
    }

    #[test]
    fn wcss_never_increases_with_k(k in 1usize..5, seed in 0u64..1000) {
        let pts = stack(&blob_views(k, 3, 5, seed));
        let cfg = ClusterConfig { max_k: 8, elbow_threshold: 0.9999, ..ClusterConfig::default() };
        let e = elbow_kmeans(pts.view(), &cfg, seed).unwrap();
        for pair in e.wcss.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9 * pair[0].abs(), "{:?}", e.wcss);
        }
    }

    #[test]
    fn merging_twice_changes_nothing(n in 1usize..12, dims in 2usize..5, seed in 0u64..1000, thr in -0.2f64..0.9) {
        let centroids = unit_rows(n, dims, seed);
        let counts: Vec<usize> = (0..n).map(|i| 1 + (i * 7 + seed as usize) % 13).collect();
        let (c1, n1, map) = merge_centroids(&centroids, &counts, thr);
        prop_assert_eq!(map.len(), n);
        prop_assert_eq!(n1.iter().sum::<usize>(), counts.iter().sum::<usize>());
        let (c2, n2, map2) = merge_centroids(&c1, &n1, thr);
        prop_assert_eq!(&c2, &c1);
        prop_assert_eq!(n2, n1);
        prop_assert_eq!(map2, (0..c1.nrows()).collect::<Vec<_>>());
    }

    #[test]
    fn vote_ignores_view_order(
        flags in prop::collection::vec(prop::collection::vec(prop::option::of(any::<bool>()), 4), 1..12),
        rot in 0usize..12,
        fraction in 0.0f64..1.0,
    ) {
        let base = vote(&flags, 4, fraction);
        let mut shuffled = flags.clone();
        shuffled.rotate_left(rot % flags.len());
        shuffled.reverse();
        prop_assert_eq!(vote(&shuffled, 4, fraction), base);
    }

    #[test]
    fn assigning_the_training_views_reproduces_their_labels(k in 1usize..4, seed in 0u64..1000) {
        let views = blob_views(k, 3, 6, seed);
        let cfg = ClusterConfig { max_k: 6, ..ClusterConfig::default() };
        let model = cluster_views(&views, &cfg, seed).unwrap();
        for (v, f) in views.iter().enumerate() {
            prop_assert_eq!(&assign_view(f.view(), &model).labels, &model.labels[v]);
        }
    }
}
