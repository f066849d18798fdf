use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use permview_core::geometry::{Intrinsics, Pose};
use permview_core::scenegen::{
    generate_dataset, orbit_cameras, read_dataset, render_view, sample_training_views, write_dataset, DatasetConfig,
    OrbitConfig, Primitive, Scene, AMBIENT,
};
use permview_core::Error;

fn small() -> DatasetConfig {
    DatasetConfig {
        n_scenes: 2,
        frames_per_scene: 3,
        height: 8,
        width: 12,
        ..DatasetConfig::default()
    }
}

fn shade(albedo: [f64; 3], n: Vector3<f64>, light: [f64; 3]) -> [f64; 3] {
    let s = n.dot(&Vector3::from(light)).max(0.0) + AMBIENT;
    albedo.map(|a| (a * s).clamp(0.0, 1.0))
}

fn assert_close(got: [f32; 3], want: [f64; 3], at: (usize, usize)) {
    for c in 0..3 {
        assert!((got[c] as f64 - want[c]).abs() < 1e-6, "pixel {at:?}: {got:?} vs {want:?}");
    }
}

#[test]
fn sampler_golden_draw() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws: Vec<_> = (0..3)
        .map(|_| {
            let s = sample_training_views(24, 6, 1, 8, &mut rng).unwrap();
            (s.inputs, s.targets, s.local)
        })
        .collect();
    let golden = vec![
        (vec![18, 22, 16, 17, 19, 23], vec![21], true),
        (vec![18, 13, 11, 3, 5, 14], vec![9], false),
        (vec![14, 11, 10, 20, 16, 13], vec![21], false),
    ];
    assert_eq!(draws, golden);
}

#[test]
fn local_branch_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let local = (0..n)
        .filter(|_| sample_training_views(24, 6, 1, 8, &mut rng).unwrap().local)
        .count();
    let f = local as f64 / n as f64;
    assert!((f - 0.2).abs() <= 0.02, "local fraction {f}");
}

#[test]
fn local_draws_stay_inside_one_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2000 {
        let s = sample_training_views(24, 3, 2, 8, &mut rng).unwrap();
        let all: Vec<usize> = s.inputs.iter().chain(&s.targets).copied().collect();
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        if s.local {
            assert!(sorted[4] - sorted[0] < 8, "{all:?}");
        }
    }
}

#[test]
fn centered_sphere_matches_analytic_intersection() {
    let (radius, albedo, light) = (0.6, [0.9, 0.5, 0.2], [0.0, 0.6, 0.8]);
    let scene = Scene {
        seed: 0,
        objects: vec![Primitive::Sphere {
            center: [0.0; 3],
            radius,
            albedo,
        }],
        background: [0.1, 0.2, 0.3],
        light_dir: light,
    };
    let k = Intrinsics::centered(20.0, 24, 16).unwrap();
    let eye = Vector3::new(0.0, 0.0, 2.5);
    let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::y()).unwrap();
    let img = render_view(&scene, &k, &pose).unwrap();
    let mut hits = 0;
    for v in 0..16 {
        for u in 0..24 {
            let dc = Vector3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0);
            let d = (pose.rotation() * dc).normalize();
            // |eye + s d|^2 = r^2
            let b = eye.dot(&d);
            let disc = b * b - (eye.norm_squared() - radius * radius);
            let want = if disc < 0.0 {
                scene.background
            } else {
                hits += 1;
                let p = eye + (-b - disc.sqrt()) * d;
                shade(albedo, p / radius, light)
            };
            assert_close(img.pixel(v, u), want, (v, u));
        }
    }
    assert!(hits > 50);
}

#[test]
fn box_face_is_flat_shaded() {
    let (albedo, light) = ([0.3, 0.7, 0.9], [0.48, 0.0, 0.8]);
    let scene = Scene {
        seed: 0,
        objects: vec![Primitive::Box {
            min: [-0.3, -0.2, -0.4],
            max: [0.3, 0.2, 0.1],
            albedo,
        }],
        background: [0.0; 3],
        light_dir: light,
    };
    let k = Intrinsics::centered(16.0, 20, 14).unwrap();
    let eye = Vector3::new(0.0, 0.0, 1.5);
    let pose = Pose::look_at(eye, Vector3::new(0.0, 0.0, -1.0), Vector3::y()).unwrap();
    let img = render_view(&scene, &k, &pose).unwrap();
    let face = shade(albedo, Vector3::z(), light);
    let mut hits = 0;
    for v in 0..14 {
        for u in 0..20 {
            let dc = Vector3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0);
            let d = (pose.rotation() * dc).normalize();
            let s = (0.1 - eye.z) / d.z;
            let p = eye + s * d;
            let want = if p.x.abs() <= 0.3 && p.y.abs() <= 0.2 {
                hits += 1;
                face
            } else {
                scene.background
            };
            assert_close(img.pixel(v, u), want, (v, u));
        }
    }
    assert!(hits > 20);
}

#[test]
fn orbit_cameras_look_at_the_target() {
    let cfg = OrbitConfig {
        look_at: [0.1, -0.2, 0.05],
        ..OrbitConfig::default()
    };
    let k = Intrinsics::centered(30.0, 48, 32).unwrap();
    for pose in orbit_cameras(24, &cfg, 4).unwrap() {
        let p = pose.rotation().transpose() * (Vector3::from(cfg.look_at) - pose.center());
        assert!(p.z > 0.0);
        let (u, v) = (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
        assert!((u - k.cx).abs() < 1e-9 && (v - k.cy).abs() < 1e-9, "({u}, {v})");
        let r = pose.rotation();
        assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    assert_eq!(generate_dataset(&small(), 8, 12).unwrap(), generate_dataset(&small(), 8, 12).unwrap());
    let other = DatasetConfig { seed: 1, ..small() };
    assert_ne!(generate_dataset(&small(), 8, 12).unwrap(), generate_dataset(&other, 8, 12).unwrap());
}

#[test]
fn dataset_round_trip() {
    let sets = generate_dataset(&small(), 8, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&sets, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), sets.len());
    for (a, b) in sets.iter().zip(&back) {
        assert_eq!(a.scene_id, b.scene_id);
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.image, vb.image);
            assert_eq!(va.intrinsics, vb.intrinsics);
            assert!((va.pose.to_matrix() - vb.pose.to_matrix()).abs().max() <= 1e-12);
        }
    }
}

#[test]
fn missing_camera_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&generate_dataset(&small(), 8, 12).unwrap(), dir.path()).unwrap();
    let scene = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap();
    std::fs::remove_file(scene.join("cameras.json")).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err}");
}

#[test]
fn manifest_version_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&generate_dataset(&small(), 8, 12).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    manifest["version"] = serde_json::json!(99);
    std::fs::write(&path, manifest.to_string()).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Version { found: 99, .. }), "{err}");
}
