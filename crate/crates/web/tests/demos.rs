use saff_web::{cluster_scene, composite_segments, weight_maps};

#[test]
fn empty_ray_is_transparent() {
    let r = composite_segments(&[0.0; 4], &[0.0; 4], &[0.5; 4]).unwrap();
    assert_eq!(r.opacity, 0.0);
    assert_eq!(r.color, [0.0; 3]);
    assert!(r.transmittance.iter().all(|&t| t == 1.0));
}

#[test]
fn static_only_ray_takes_the_static_color() {
    let r = composite_segments(&[0.0, 50.0, 0.0], &[9.0, 9.0, 9.0], &[1.0; 3]).unwrap();
    assert!(r.opacity > 0.999);
    assert!((r.color[0] - 0.9).abs() < 1e-3 && (r.color[2] - 0.2).abs() < 1e-3);
    assert!((r.weights.iter().sum::<f64>() - r.opacity).abs() < 1e-12);
    assert!(r.weights[0] == 0.0 && r.weights[1] > 0.999);
}

#[test]
fn bad_rays_are_rejected() {
    assert!(composite_segments(&[], &[], &[]).is_err());
    assert!(composite_segments(&[1.0], &[1.0, 2.0], &[0.5]).is_err());
    assert!(composite_segments(&[-1.0], &[1.0], &[0.5]).is_err());
    assert!(composite_segments(&[1.0], &[1.0], &[1.5]).is_err());
}

#[test]
fn weight_maps_sum_to_one() {
    let m = weight_maps(20, 30, 5).unwrap();
    assert_eq!(m.levels.len(), 3);
    for i in 0..20 * 30 {
        let s: f64 = m.levels.iter().map(|l| l[i]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!((m.levels[0][0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((m.levels[0][10 * 30 + 15] - 1.0 / 9.0).abs() < 1e-12);
    assert!(weight_maps(0, 10, 2).is_err());
}

#[test]
fn default_scene_clusters_into_its_blobs() {
    for seed in 0..3 {
        let r = cluster_scene(seed, 3, 0.1).unwrap();
        assert_eq!(r.salient.iter().filter(|&&s| s).count(), 2);
        assert!(r.ari > 0.9, "seed {seed} ari {}", r.ari);
    }
    let r = cluster_scene(0, 3, 0.1).unwrap();
    assert_eq!(r.labels.len(), 3);
    assert_eq!(r.labels[0].len(), 32 * 32);
    assert_eq!(r.salient.len(), r.k);
    assert!(r.salient.iter().any(|&s| s));
    assert!(cluster_scene(0, 1, 0.0).is_err());
}
