//! Versioned JSON pose bundle: per view, 3×3 intrinsics and 4×4
//! camera-to-world matrices (both row-major) and an optional image filename.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::{Intrinsics, Pose};
use crate::error::{Error, Result};

pub const POSE_BUNDLE_VERSION: u32 = 1;
const FORMAT: &str = "permview-pose-bundle";

#[derive(Clone, Debug, PartialEq)]
pub struct BundleEntry {
    /// Image file relative to the bundle; `None` for query views.
    pub image: Option<String>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseBundle {
    pub views: Vec<BundleEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileView {
    image: Option<String>,
    width: usize,
    height: usize,
    intrinsics: [f64; 9],
    camera_to_world: [f64; 16],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBundle {
    format: String,
    version: u32,
    views: Vec<FileView>,
}

impl PoseBundle {
    pub fn to_json(&self) -> String {
        let file = FileBundle {
            format: FORMAT.into(),
            version: POSE_BUNDLE_VERSION,
            views: self
                .views
                .iter()
                .map(|v| {
                    let k = v.intrinsics.matrix();
                    let m = v.pose.to_matrix();
                    FileView {
                        image: v.image.clone(),
                        width: v.intrinsics.width,
                        height: v.intrinsics.height,
                        intrinsics: std::array::from_fn(|i| k[(i / 3, i % 3)]),
                        camera_to_world: std::array::from_fn(|i| m[(i / 4, i % 4)]),
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("bundle serializes")
    }

    /// `name` labels errors (usually the file path).
    pub fn from_json(text: &str, name: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse(name, "<document>", e.to_string()))?;
        match raw.get("format").and_then(|f| f.as_str()) {
            Some(FORMAT) => {}
            Some(other) => return Err(Error::parse(name, "format", format!("unknown format `{other}`"))),
            None => return Err(Error::parse(name, "format", "missing")),
        }
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::parse(name, "version", "missing or not an integer"))?;
        if version != POSE_BUNDLE_VERSION as u64 {
            return Err(Error::Version {
                what: "pose bundle",
                found: version.min(u32::MAX as u64) as u32,
                expected: POSE_BUNDLE_VERSION,
            });
        }
        let file: FileBundle =
            serde_json::from_value(raw).map_err(|e| Error::parse(name, field_of(&e.to_string()), e.to_string()))?;
        let views = file
            .views
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let k = &v.intrinsics;
                if k[1] != 0.0 || k[3] != 0.0 || k[6] != 0.0 || k[7] != 0.0 || k[8] != 1.0 {
                    return Err(Error::parse(
                        name,
                        format!("views[{i}].intrinsics"),
                        "expected [fx, 0, cx, 0, fy, cy, 0, 0, 1]",
                    ));
                }
                let intrinsics = Intrinsics::new(k[0], k[4], k[2], k[5], v.width, v.height)
                    .map_err(|e| Error::parse(name, format!("views[{i}].intrinsics"), e.to_string()))?;
                let m = Matrix4::from_row_slice(&v.camera_to_world);
                let pose = Pose::from_matrix(&m)
                    .map_err(|e| Error::parse(name, format!("views[{i}].camera_to_world"), e.to_string()))?;
                Ok(BundleEntry {
                    image: v.image,
                    intrinsics,
                    pose,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { views })
    }
}

/// serde reports missing fields as "missing field `x`"; pull the name out.
fn field_of(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<document>").to_string()
}

pub fn write_pose_bundle(bundle: &PoseBundle, path: &Path) -> Result<()> {
    std::fs::write(path, bundle.to_json()).map_err(|e| Error::io(path, e))
}

pub fn read_pose_bundle(path: &Path) -> Result<PoseBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::parse(path.display().to_string(), "<file>", "camera file not found"),
        _ => Error::io(path, e),
    })?;
    PoseBundle::from_json(&text, &path.display().to_string())
}
