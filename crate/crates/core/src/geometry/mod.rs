//! Pinhole cameras, Plücker ray maps, space-to-channel resampling and
//! query-centered pose normalization.
//!
//! Conventions: camera axes are x right, y down, z forward; poses are
//! camera-to-world; pixel `(u, v)` is sampled at its center `(u + 0.5, v + 0.5)`.

mod bundle;
mod resample;

pub use bundle::{read_pose_bundle, write_pose_bundle, BundleEntry, PoseBundle, POSE_BUNDLE_VERSION};
pub use resample::{bilinear_downsample, pixel_shuffle, pixel_unshuffle};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point with square pixels.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive and finite (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty image extent".into()));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Same field of view at a different resolution.
    pub fn rescaled(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::InvalidCamera(format!(
                "rotation is not proper orthonormal (|R^T R - I| = {ortho:.3e}, det = {det})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction
    /// (image y points away from it).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to viewing direction".into()))?;
        let down = forward.cross(&right);
        Self::new(Matrix3::from_columns(&[right, down, forward]), eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn with_translation(&self, t: Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation: t,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let last = m.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidCamera("camera-to-world last row must be [0, 0, 0, 1]".into()));
        }
        Self::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }
}

/// One posed camera; the image is absent for query views.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image: Option<Image>,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, pose: Pose, image: Option<Image>) -> Result<Self> {
        intrinsics.validate()?;
        if let Some(img) = &image {
            if img.width != intrinsics.width || img.height != intrinsics.height {
                return Err(Error::shape(
                    "camera view image",
                    &[img.height, img.width],
                    &[intrinsics.height, intrinsics.width],
                ));
            }
        }
        Ok(Self {
            intrinsics,
            pose,
            image,
        })
    }
}

/// Coordinate system a ray map was computed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    World,
    QueryCentered,
    FirstView,
}

/// Per-pixel Plücker coordinates `[d̂; o × d̂]`, stored `[6, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub frame: Frame,
}

impl RayMap {
    pub fn at(&self, y: usize, x: usize) -> [f64; 6] {
        let hw = self.height * self.width;
        let p = y * self.width + x;
        std::array::from_fn(|c| self.data[c * hw + p])
    }
}

pub fn plucker_ray_map(intrinsics: &Intrinsics, pose: &Pose, frame: Frame) -> Result<RayMap> {
    intrinsics.validate()?;
    let (h, w) = (intrinsics.height, intrinsics.width);
    let hw = h * w;
    let mut data = vec![0.0; 6 * hw];
    let r = pose.rotation();
    let o = pose.center();
    let (ifx, ify) = (1.0 / intrinsics.fx, 1.0 / intrinsics.fy);
    for v in 0..h {
        let yc = (v as f64 + 0.5 - intrinsics.cy) * ify;
        for u in 0..w {
            let xc = (u as f64 + 0.5 - intrinsics.cx) * ifx;
            let d = (r * Vector3::new(xc, yc, 1.0)).normalize();
            let m = o.cross(&d);
            let p = v * w + u;
            for c in 0..3 {
                data[c * hw + p] = d[c];
                data[(c + 3) * hw + p] = m[c];
            }
        }
    }
    Ok(RayMap {
        height: h,
        width: w,
        data,
        frame,
    })
}

/// Poses re-expressed in a reference camera's frame with unit-mean input
/// camera distance.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPoses {
    pub inputs: Vec<Pose>,
    pub query: Pose,
    pub scale: f64,
}

/// Sum of distances in ascending order, so the result does not depend on the
/// order the cameras were listed in.
fn order_free_mean(mut dists: Vec<f64>) -> f64 {
    let n = dists.len() as f64;
    dists.sort_by(f64::total_cmp);
    dists.iter().sum::<f64>() / n
}

fn relative_scaled(reference_inv: &Pose, pose: &Pose, scale: f64) -> Pose {
    let rel = reference_inv.compose(pose);
    rel.with_translation(rel.translation() * scale)
}

/// `pose` expressed relative to `reference` with translations scaled by
/// `scale`, as done for every camera by the normalizers.
pub fn express_in(reference: &Pose, pose: &Pose, scale: f64) -> Pose {
    relative_scaled(&reference.inverse(), pose, scale)
}

/// Re-centers on the query camera (which becomes the identity) and scales
/// translations so the input cameras sit at unit mean distance.
pub fn normalize_to_query(inputs: &[Pose], query: &Pose) -> Result<NormalizedPoses> {
    if inputs.is_empty() {
        return Err(Error::Degenerate("no input poses".into()));
    }
    let qinv = query.inverse();
    let dists = inputs.iter().map(|p| qinv.compose(p).translation().norm()).collect();
    let mean = order_free_mean(dists);
    if !(mean >= 1e-9) {
        return Err(Error::Degenerate(format!(
            "mean input camera distance {mean:.3e} from the query is below 1e-9"
        )));
    }
    let scale = 1.0 / mean;
    Ok(NormalizedPoses {
        inputs: inputs.iter().map(|p| relative_scaled(&qinv, p, scale)).collect(),
        query: Pose::identity(),
        scale,
    })
}

/// Ablation: the first input camera defines the frame; scale uses the mean
/// distance of every other camera (remaining inputs and the query).
pub fn normalize_to_first_view(inputs: &[Pose], query: &Pose) -> Result<NormalizedPoses> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Degenerate("no input poses".into()))?;
    let finv = first.inverse();
    let dists = inputs[1..]
        .iter()
        .chain(std::iter::once(query))
        .map(|p| finv.compose(p).translation().norm())
        .collect();
    let mean = order_free_mean(dists);
    if !(mean >= 1e-9) {
        return Err(Error::Degenerate(format!("mean camera distance {mean:.3e} is below 1e-9")));
    }
    let scale = 1.0 / mean;
    Ok(NormalizedPoses {
        inputs: inputs.iter().map(|p| relative_scaled(&finv, p, scale)).collect(),
        query: relative_scaled(&finv, query, scale),
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics::centered(40.0, 8, 6).unwrap()
    }

    fn principal_pixel_rays(pose: &Pose) -> [f64; 6] {
        // Width 8, height 6, center at (4, 3): pixel (3, 2) has center (3.5, 2.5),
        // so use a camera whose principal point sits on that pixel center.
        let k = Intrinsics::new(40.0, 40.0, 3.5, 2.5, 8, 6).unwrap();
        plucker_ray_map(&k, pose, Frame::World).unwrap().at(2, 3)
    }

    #[test]
    fn optical_axis_ray_at_origin() {
        let p = principal_pixel_rays(&Pose::identity());
        assert_eq!(p, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn translated_camera_moment() {
        let p = principal_pixel_rays(&Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        assert_eq!(p, [0.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn moment_invariant_to_origin_along_ray() {
        let pose = Pose::look_at(Vector3::new(0.3, -1.0, 2.0), Vector3::zeros(), Vector3::y()).unwrap();
        let a = principal_pixel_rays(&pose);
        let d = Vector3::new(a[0], a[1], a[2]);
        let shifted = pose.with_translation(pose.center() + 5.0 * d);
        let b = principal_pixel_rays(&shifted);
        for i in 0..6 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_focal_is_invalid_camera() {
        let k = Intrinsics {
            fx: 0.0,
            ..intr()
        };
        assert!(matches!(plucker_ray_map(&k, &Pose::identity(), Frame::World), Err(Error::InvalidCamera(_))));
    }

    #[test]
    fn normalize_distances_two_and_four() {
        let q = Pose::identity();
        let inputs = [
            Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)),
            Pose::from_translation(Vector3::new(0.0, 0.0, -4.0)),
        ];
        let n = normalize_to_query(&inputs, &q).unwrap();
        assert!((n.scale - 1.0 / 3.0).abs() < 1e-15);
        assert!((n.inputs[0].center().norm() - 2.0 / 3.0).abs() < 1e-15);
        assert!((n.inputs[1].center().norm() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(n.query, Pose::identity());
    }

    #[test]
    fn coincident_cameras_are_degenerate() {
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert!(matches!(normalize_to_query(&[p, p], &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(m, Vector3::zeros()).is_err());
    }
}
