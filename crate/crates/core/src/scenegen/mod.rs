//! Procedural scenes of spheres and boxes, a ray-cast renderer, orbiting
//! camera paths, the training view sampler and the on-disk dataset format.

mod dataset;
mod sampler;

pub use dataset::{generate_dataset, read_dataset, write_dataset, DatasetConfig, DATASET_VERSION};
pub use sampler::{sample_training_views, ViewSample, LOCAL_WINDOW_PROB};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Intrinsics, Pose};
use crate::image::Image;

pub const AMBIENT: f64 = 0.2;
const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        albedo: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<Primitive>,
    pub background: [f64; 3],
    /// Unit vector pointing towards the light.
    pub light_dir: [f64; 3],
}

/// Posed frames of one scene in capture order.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub scene_id: usize,
    pub views: Vec<CameraView>,
}

impl ViewSet {
    pub fn image(&self, k: usize) -> Result<&Image> {
        self.views[k]
            .image
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("scene {} view {k} has no image", self.scene_id)))
    }
}

fn uniform3(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

/// Objects lie inside the unit cube centered at the origin. `n_objects = 0`
/// is an error unless `allow_empty` is set.
pub fn generate_scene(seed: u64, n_objects: usize, allow_empty: bool) -> Result<Scene> {
    if n_objects == 0 && !allow_empty {
        return Err(Error::config("n_objects", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = uniform3(&mut rng, 0.05, 0.35);
    let light = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(0.4..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    let objects = (0..n_objects)
        .map(|_| {
            let albedo = uniform3(&mut rng, 0.15, 1.0);
            if rng.random_bool(0.5) {
                let radius = rng.random_range(0.15..0.32);
                Primitive::Sphere {
                    center: uniform3(&mut rng, -0.5 + radius, 0.5 - radius),
                    radius,
                    albedo,
                }
            } else {
                let half = uniform3(&mut rng, 0.08, 0.25);
                let center: [f64; 3] = std::array::from_fn(|i| rng.random_range(-0.5 + half[i]..0.5 - half[i]));
                Primitive::Box {
                    min: std::array::from_fn(|i| center[i] - half[i]),
                    max: std::array::from_fn(|i| center[i] + half[i]),
                    albedo,
                }
            }
        })
        .collect();
    Ok(Scene {
        seed,
        objects,
        background,
        light_dir: light.into(),
    })
}

/// Nearest positive hit: (distance, outward normal, albedo).
fn intersect(p: &Primitive, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>, [f64; 3])> {
    match p {
        Primitive::Sphere { center, radius, albedo } => {
            let c = Vector3::from(*center);
            let oc = o - c;
            let b = oc.dot(d);
            let disc = b * b - (oc.dot(&oc) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > HIT_EPS { -b - s } else { -b + s };
            (t > HIT_EPS).then(|| (t, (o + t * d - c) / *radius, *albedo))
        }
        Primitive::Box { min, max, albedo } => {
            let (mut tnear, mut tfar) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut near_axis, mut far_axis) = (0, 0);
            for a in 0..3 {
                let inv = 1.0 / d[a];
                let (t0, t1) = {
                    let (u, v) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                    if u <= v {
                        (u, v)
                    } else {
                        (v, u)
                    }
                };
                if t0 > tnear {
                    tnear = t0;
                    near_axis = a;
                }
                if t1 < tfar {
                    tfar = t1;
                    far_axis = a;
                }
            }
            if tnear > tfar || tfar <= HIT_EPS {
                return None;
            }
            let (t, axis, sign) = if tnear > HIT_EPS {
                (tnear, near_axis, -d[near_axis].signum())
            } else {
                (tfar, far_axis, d[far_axis].signum())
            };
            let mut n = Vector3::zeros();
            n[axis] = sign;
            Some((t, n, *albedo))
        }
    }
}

/// Color seen along one world-space ray.
pub fn trace(scene: &Scene, o: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3] {
    let hit = scene
        .objects
        .iter()
        .filter_map(|p| intersect(p, o, d))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    match hit {
        None => scene.background,
        Some((_, n, albedo)) => {
            let l = Vector3::from(scene.light_dir);
            let shade = n.dot(&l).max(0.0) + AMBIENT;
            albedo.map(|a| (shade * a).clamp(0.0, 1.0))
        }
    }
}

/// One ray per pixel center.
pub fn render_view(scene: &Scene, intrinsics: &Intrinsics, pose: &Pose) -> Result<Image> {
    render_view_supersampled(scene, intrinsics, pose, 1)
}

/// Averages an `ss × ss` grid of rays inside each pixel; `ss = 1` is
/// [`render_view`].
pub fn render_view_supersampled(scene: &Scene, intrinsics: &Intrinsics, pose: &Pose, ss: usize) -> Result<Image> {
    intrinsics.validate()?;
    if ss == 0 {
        return Err(Error::config("supersample", "must be at least 1"));
    }
    let (h, w) = (intrinsics.height, intrinsics.width);
    let o = pose.center();
    let r = pose.rotation();
    let mut img = Image::zeros(h, w);
    let inv = 1.0 / (ss * ss) as f64;
    for v in 0..h {
        for u in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = u as f64 + (sx as f64 + 0.5) / ss as f64;
                    let py = v as f64 + (sy as f64 + 0.5) / ss as f64;
                    let dc = Vector3::new(
                        (px - intrinsics.cx) / intrinsics.fx,
                        (py - intrinsics.cy) / intrinsics.fy,
                        1.0,
                    );
                    let d = (r * dc).normalize();
                    let c = trace(scene, &o, &d);
                    for i in 0..3 {
                        acc[i] += c[i];
                    }
                }
            }
            img.set_pixel(v, u, acc.map(|a| (a * inv) as f32));
        }
    }
    Ok(img)
}

/// Camera path on a sphere around `look_at`. Frame `i` sits at azimuth
/// `arc * i / n` (plus jitter) so consecutive frames form a smooth orbit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitConfig {
    pub radius: f64,
    pub look_at: [f64; 3],
    /// Radians above the horizontal plane.
    pub elevation: f64,
    pub elevation_jitter: f64,
    pub azimuth_jitter: f64,
    pub arc: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            radius: 1.8,
            look_at: [0.0; 3],
            elevation: 0.35,
            elevation_jitter: 0.12,
            azimuth_jitter: 0.04,
            arc: std::f64::consts::TAU,
        }
    }
}

pub fn orbit_cameras(n: usize, cfg: &OrbitConfig, seed: u64) -> Result<Vec<Pose>> {
    if !(cfg.radius > 0.0) {
        return Err(Error::config("orbit.radius", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = Vector3::from(cfg.look_at);
    let mut jitter = |amp: f64| if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 };
    (0..n)
        .map(|i| {
            let az = cfg.arc * i as f64 / n as f64 + jitter(cfg.azimuth_jitter);
            let el = cfg.elevation + jitter(cfg.elevation_jitter);
            let dir = Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
            Pose::look_at(target + cfg.radius * dir, target, Vector3::y())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_scene(9, 3, false).unwrap(), generate_scene(9, 3, false).unwrap());
        assert_ne!(
            generate_scene(9, 3, false).unwrap().objects,
            generate_scene(10, 3, false).unwrap().objects
        );
    }

    #[test]
    fn empty_scene_flag() {
        assert!(generate_scene(1, 0, false).is_err());
        let s = generate_scene(1, 0, true).unwrap();
        let k = Intrinsics::centered(10.0, 6, 4).unwrap();
        let img = render_view(&s, &k, &Pose::identity()).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(img.pixel(y, x), s.background.map(|v| v as f32));
            }
        }
    }

    #[test]
    fn objects_inside_unit_cube() {
        for seed in 0..50 {
            for p in generate_scene(seed, 4, false).unwrap().objects {
                match p {
                    Primitive::Sphere { center, radius, .. } => {
                        assert!(radius > 0.0);
                        assert!(center.iter().all(|c| c.abs() + radius <= 0.5));
                    }
                    Primitive::Box { min, max, .. } => {
                        assert!((0..3).all(|i| min[i] < max[i] && min[i] >= -0.5 && max[i] <= 0.5));
                    }
                }
            }
        }
    }

    #[test]
    fn single_zero_jitter_orbit_camera() {
        let cfg = OrbitConfig {
            radius: 3.0,
            elevation: 0.0,
            elevation_jitter: 0.0,
            azimuth_jitter: 0.0,
            ..OrbitConfig::default()
        };
        let p = orbit_cameras(1, &cfg, 0).unwrap().remove(0);
        assert!((p.center() - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-15);
        let forward = p.rotation().column(2).into_owned();
        assert!((forward - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
    }
}
