use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_scene, orbit_cameras, render_view_supersampled, OrbitConfig, ViewSet};
use crate::error::{Error, Result};
use crate::geometry::{read_pose_bundle, write_pose_bundle, BundleEntry, CameraView, Intrinsics, PoseBundle};
use crate::image::Image;

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "permview-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub frames_per_scene: usize,
    /// Resolution written by `gen-data` and used for VAE pretraining.
    pub height: usize,
    pub width: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub supersample: usize,
    pub orbit: OrbitConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_scenes: 5,
            frames_per_scene: 24,
            height: 32,
            width: 48,
            objects_min: 2,
            objects_max: 4,
            fov_deg: 50.0,
            supersample: 2,
            orbit: OrbitConfig::default(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn intrinsics(&self, height: usize, width: usize) -> Result<Intrinsics> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::config("data.fov_deg", "must lie in (0, 180)"));
        }
        let focal = width as f64 / (2.0 * (self.fov_deg.to_radians() / 2.0).tan());
        Intrinsics::centered(focal, width, height)
    }
}

/// Renders every scene at `height × width`. Scenes and camera paths depend
/// only on the seed, so different resolutions show identical content.
pub fn generate_dataset(cfg: &DatasetConfig, height: usize, width: usize) -> Result<Vec<ViewSet>> {
    if cfg.objects_min == 0 || cfg.objects_min > cfg.objects_max {
        return Err(Error::config("data.objects_min", "need 1 <= objects_min <= objects_max"));
    }
    let k = cfg.intrinsics(height, width)?;
    (0..cfg.n_scenes)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id as u64);
            let scene_seed = rng.next_u64();
            let n_obj = rng.random_range(cfg.objects_min..=cfg.objects_max);
            let scene = generate_scene(scene_seed, n_obj, false)?;
            let poses = orbit_cameras(cfg.frames_per_scene, &cfg.orbit, rng.next_u64())?;
            let views = poses
                .into_iter()
                .map(|pose| {
                    let img = render_view_supersampled(&scene, &k, &pose, cfg.supersample)?.quantized();
                    CameraView::new(k, pose, Some(img))
                })
                .collect::<Result<_>>()?;
            Ok(ViewSet { scene_id: id, views })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestScene {
    id: usize,
    dir: String,
    frames: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    scenes: Vec<ManifestScene>,
}

fn scene_dir(id: usize) -> String {
    format!("scene_{id:05}")
}

pub fn write_dataset(sets: &[ViewSet], root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = Manifest {
        format: FORMAT.into(),
        version: DATASET_VERSION,
        scenes: Vec::new(),
    };
    for set in sets {
        let dir_name = scene_dir(set.scene_id);
        let dir = root.join(&dir_name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut bundle = PoseBundle::default();
        for (k, view) in set.views.iter().enumerate() {
            let image = match &view.image {
                Some(img) => {
                    let name = format!("view_{k}.png");
                    img.write_png(&dir.join(&name))?;
                    Some(name)
                }
                None => None,
            };
            bundle.views.push(BundleEntry {
                image,
                intrinsics: view.intrinsics,
                pose: view.pose,
            });
        }
        write_pose_bundle(&bundle, &dir.join("cameras.json"))?;
        manifest.scenes.push(ManifestScene {
            id: set.scene_id,
            dir: dir_name,
            frames: set.views.len(),
        });
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn parse_manifest(path: &Path) -> Result<Manifest> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::parse(&name, "<file>", "manifest not found"),
        _ => Error::io(path, e),
    })?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(&name, "<document>", e.to_string()))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(Error::parse(&name, "format", format!("expected `{FORMAT}`")));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::parse(&name, "version", "missing or not an integer"))?;
    if version != DATASET_VERSION as u64 {
        return Err(Error::Version {
            what: "dataset manifest",
            found: version.min(u32::MAX as u64) as u32,
            expected: DATASET_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::parse(&name, "scenes", e.to_string()))
}

pub fn read_dataset(root: &Path) -> Result<Vec<ViewSet>> {
    let manifest = parse_manifest(&root.join("manifest.json"))?;
    manifest
        .scenes
        .into_iter()
        .map(|s| {
            let dir: PathBuf = root.join(&s.dir);
            let bundle = read_pose_bundle(&dir.join("cameras.json"))?;
            if bundle.views.len() != s.frames {
                return Err(Error::parse(
                    dir.join("cameras.json").display().to_string(),
                    "views",
                    format!("manifest lists {} frames, bundle has {}", s.frames, bundle.views.len()),
                ));
            }
            let views = bundle
                .views
                .into_iter()
                .map(|v| {
                    let image = v.image.map(|name| Image::read_png(&dir.join(name))).transpose()?;
                    CameraView::new(v.intrinsics, v.pose, image)
                })
                .collect::<Result<_>>()?;
            Ok(ViewSet { scene_id: s.id, views })
        })
        .collect()
}
