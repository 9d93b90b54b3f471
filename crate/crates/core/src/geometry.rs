//! Pinhole camera model, rigid camera poses and pose-error metrics.
//!
//! Poses are camera-to-world throughout: `pose.transform_point(p_cam)` yields
//! the scene coordinate of a camera-frame point. Pixel coordinates place the
//! center of pixel `(u, v)` at the integer position `(u, v)`.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3D position in the scene (world) frame, in meters.
pub type SceneCoordinate = Vector3<f64>;

/// Camera-frame points with `z` at or below this value are behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with det +1 (max deviation {0:e})")]
    NotARotation(f64),
    #[error("depth must be positive and finite, got {0}")]
    InvalidDepth(f64),
    #[error("malformed pose file: {0}")]
    PoseFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the same camera after resampling the image by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: ((self.width as f64) * factor).round() as usize,
            height: ((self.height as f64) * factor).round() as usize,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose, rejecting rotations that are not proper orthonormal
    /// matrices within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev = rotation_deviation(&rotation);
        if !(dev <= ORTHONORMAL_TOL) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(Self { rotation, translation })
    }

    /// Axis-angle rotation vector plus translation.
    pub fn from_axis_angle(rvec: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::new(*rvec).into_inner();
        Self { rotation, translation }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: q.to_rotation_matrix().into_inner(), translation }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if (bottom[(0, 0)].abs() + bottom[(0, 1)].abs() + bottom[(0, 2)].abs() + (bottom[(0, 3)] - 1.0).abs())
            > 1e-6
        {
            return Err(GeometryError::PoseFormat("last row must be 0 0 0 1".into()));
        }
        let rotation: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        // Pose files are written with limited precision; snap back onto SO(3).
        let rotation = orthonormalize(&rotation);
        RigidPose::new(rotation, translation)
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> RigidPose {
        RigidPose { rotation: orthonormalize(&self.rotation), translation: self.translation }
    }

    /// Parses a 4x4 row-major camera-to-world matrix from whitespace separated text.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| GeometryError::PoseFormat(format!("{t:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 16 {
            return Err(GeometryError::PoseFormat(format!("expected 16 values, found {}", values.len())));
        }
        RigidPose::from_homogeneous(&Matrix4::from_row_slice(&values))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        RigidPose::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for RigidPose {
    /// Four lines of four values; `{:e}` round-trips f64 exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.to_homogeneous();
        for r in 0..4 {
            writeln!(f, "{:e} {:e} {:e} {:e}", m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)])?;
        }
        Ok(())
    }
}

fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let det = (r.determinant() - 1.0).abs();
    if ortho.is_nan() || det.is_nan() {
        return f64::INFINITY;
    }
    ortho.max(det)
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Result of projecting a scene point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(Vector2<f64>),
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<Vector2<f64>> {
        match self {
            Projection::Visible(p) => Some(p),
            Projection::BehindCamera => None,
        }
    }
}

/// Pinhole projection of a scene point seen from a camera-to-world pose.
pub fn project(p: &SceneCoordinate, pose: &RigidPose, k: &CameraIntrinsics) -> Projection {
    // pose⁻¹ · p without forming the inverse.
    let cam = pose.rotation.tr_mul(&(p - pose.translation));
    project_camera_point(&cam, k)
}

pub fn project_camera_point(cam: &Vector3<f64>, k: &CameraIntrinsics) -> Projection {
    if !(cam.z > MIN_DEPTH) {
        return Projection::BehindCamera;
    }
    Projection::Visible(Vector2::new(k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy))
}

/// Lifts a pixel with known depth (camera-frame z, meters) to a scene coordinate.
pub fn backproject(
    pixel: &Vector2<f64>,
    depth: f64,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<SceneCoordinate, GeometryError> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    let cam = Vector3::new((pixel.x - k.cx) * depth / k.fx, (pixel.y - k.cy) * depth / k.fy, depth);
    Ok(pose.transform_point(&cam))
}

/// Unit viewing ray (camera frame) through a pixel.
pub fn pixel_ray(pixel: &Vector2<f64>, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0).normalize()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

impl PoseError {
    pub fn within(&self, max_translation_m: f64, max_rotation_deg: f64) -> bool {
        self.translation_m < max_translation_m && self.rotation_deg < max_rotation_deg
    }
}

pub fn pose_error(est: &RigidPose, gt: &RigidPose) -> PoseError {
    let translation_m = (est.translation - gt.translation).norm();
    PoseError { translation_m, rotation_deg: rotation_angle_deg(&gt.rotation, &est.rotation) }
}

/// Angle of the relative rotation `aᵀ b`, in degrees.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.tr_mul(b);
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k_vga() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn arb_pose() -> impl Strategy<Value = RigidPose> {
        (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(-5.0f64..5.0)).prop_map(|(r, t)| {
            RigidPose::from_axis_angle(&Vector3::from(r), Vector3::from(t))
        })
    }

    fn quat_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        let qa = UnitQuaternion::from_matrix(a);
        let qb = UnitQuaternion::from_matrix(b);
        let dot = qa.coords.dot(&qb.coords).abs().min(1.0);
        (2.0 * dot.acos()).to_degrees()
    }

    #[test]
    fn project_on_axis() {
        let k = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 2, height: 2 };
        let px = project(&Vector3::new(0.0, 0.0, 2.0), &RigidPose::identity(), &k).pixel().unwrap();
        assert_eq!(px, Vector2::new(0.0, 0.0));
    }

    #[test]
    fn project_algebraic() {
        let px = project(&Vector3::new(1.0, 0.0, 1.0), &RigidPose::identity(), &k_vga()).pixel().unwrap();
        assert_eq!(px, Vector2::new(820.0, 240.0));
    }

    #[test]
    fn behind_camera_is_flagged() {
        let k = k_vga();
        assert_eq!(project(&Vector3::new(0.0, 0.0, -1.0), &RigidPose::identity(), &k), Projection::BehindCamera);
        assert_eq!(project(&Vector3::new(0.0, 0.0, 1e-7), &RigidPose::identity(), &k), Projection::BehindCamera);
    }

    #[test]
    fn backproject_examples() {
        let k = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 2, height: 2 };
        let p = backproject(&Vector2::new(0.0, 0.0), 2.0, &RigidPose::identity(), &k).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        let k = k_vga();
        let p = backproject(&Vector2::new(k.cx, k.cy), 3.7, &RigidPose::identity(), &k).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 3.7));
        for d in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(backproject(&Vector2::new(1.0, 1.0), d, &RigidPose::identity(), &k).is_err());
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn inverse_of_identity() {
        assert_eq!(RigidPose::identity().inverse(), RigidPose::identity());
    }

    #[test]
    fn pose_error_examples() {
        let gt = RigidPose::from_axis_angle(&Vector3::new(0.2, -0.1, 0.4), Vector3::new(1.0, 2.0, 3.0));
        let e = pose_error(&gt, &gt);
        assert_eq!(e.translation_m, 0.0);
        assert!(e.rotation_deg < 1e-6);
        let flip = RigidPose::from_axis_angle(&Vector3::new(0.0, 0.0, std::f64::consts::PI), Vector3::zeros());
        let est = RigidPose { rotation: gt.rotation * flip.rotation, translation: gt.translation };
        let e = pose_error(&est, &gt);
        assert_eq!(e.translation_m, 0.0);
        assert!((e.rotation_deg - 180.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidPose::new(m, Vector3::zeros()).is_err());
        assert!(RigidPose::new(m * 2.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn pose_text_round_trip() {
        let p = RigidPose::from_axis_angle(&Vector3::new(0.3, 1.1, -0.7), Vector3::new(0.5, -2.0, 1.25));
        let q = RigidPose::parse(&p.to_string()).unwrap();
        assert!((p.rotation - q.rotation).abs().max() < 1e-15);
        assert_eq!(p.translation, q.translation);
        assert!(RigidPose::parse("1 0 0 0\n0 1 0 0\n0 0 1 0").is_err());
        assert!(RigidPose::parse("1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1").is_ok());
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(
            pose in arb_pose(),
            u in 0.0f64..640.0, v in 0.0f64..480.0, d in 0.1f64..20.0,
            f in 100.0f64..900.0,
        ) {
            let k = CameraIntrinsics::new(f, f * 1.1, 320.0, 240.0, 640, 480).unwrap();
            let px = Vector2::new(u, v);
            let p = backproject(&px, d, &pose, &k).unwrap();
            let back = project(&p, &pose, &k).pixel().unwrap();
            prop_assert!((back - px).norm() < 1e-9);
        }

        #[test]
        fn group_laws(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            prop_assert!((lhs.to_homogeneous() - rhs.to_homogeneous()).abs().max() < 1e-9);
            let id = a.compose(&a.inverse()).to_homogeneous();
            prop_assert!((id - Matrix4::identity()).abs().max() < 1e-9);
            let id = a.inverse().compose(&a).to_homogeneous();
            prop_assert!((id - Matrix4::identity()).abs().max() < 1e-9);
            // 4x4 homogeneous multiplication oracle
            let m = a.to_homogeneous() * b.to_homogeneous();
            prop_assert!((a.compose(&b).to_homogeneous() - m).abs().max() < 1e-9);
        }

        #[test]
        fn rotation_error_matches_quaternion_oracle(a in arb_pose(), b in arb_pose()) {
            let e = pose_error(&a, &b);
            let q = quat_angle_deg(&a.rotation, &b.rotation);
            // acos is ill-conditioned near 0 and 180 degrees
            prop_assert!((e.rotation_deg - q).abs() < 1e-5, "{} vs {}", e.rotation_deg, q);
            prop_assert!((0.0..=180.0).contains(&e.rotation_deg));
            let sym = pose_error(&b, &a);
            prop_assert!((sym.rotation_deg - e.rotation_deg).abs() < 1e-9);
            prop_assert!((sym.translation_m - e.translation_m).abs() < 1e-12);
        }

        #[test]
        fn pose_error_left_invariance(a in arb_pose(), b in arb_pose(), g in arb_pose()) {
            let e = pose_error(&a, &b);
            let e2 = pose_error(&g.compose(&a), &g.compose(&b));
            prop_assert!((e.rotation_deg - e2.rotation_deg).abs() < 1e-6);
            prop_assert!((e.translation_m - e2.translation_m).abs() < 1e-9);
        }
    }
}
