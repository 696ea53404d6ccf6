//! Pinhole cameras, rigid poses, rays, and image sampling.
//!
//! Camera frame convention: x right, y down, z forward. Extrinsics are stored
//! as ego-from-camera, so a camera's center is the translation of its pose.

mod image;

pub use image::{bilinear_sample, bilinear_sample_into, Image, LabelMap, Sample, UNCERTAIN_LABEL};

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;
/// Matrices read from hand-edited files are re-orthonormalized when they are
/// within this distance of a rotation.
const LENIENT_TOL: f64 = 1e-5;

/// Rigid transform `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).abs().max()
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        let err = orthonormality_error(&rotation);
        if err > ORTHONORMAL_TOL || (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidParameter(format!(
                "rotation is not orthonormal with det +1 (R*R^T error {err:.3e})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation built as `Rz(yaw) * Ry(pitch) * Rx(roll)` (radians).
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_euler_angles(roll, pitch, yaw);
        Self { rotation: *r.matrix(), translation }
    }

    /// Reads a 4x4 row-major homogeneous matrix. Rotations within a small
    /// tolerance of orthonormal are projected back onto SO(3).
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        let mat = Matrix4::from_row_slice(m);
        if (mat.fixed_view::<1, 4>(3, 0) - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > 1e-9 {
            return Err(Error::InvalidParameter("last row of a rigid transform must be [0 0 0 1]".into()));
        }
        let r: Matrix3<f64> = mat.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = mat.fixed_view::<3, 1>(0, 3).into_owned();
        let err = orthonormality_error(&r);
        if err > ORTHONORMAL_TOL && err <= LENIENT_TOL && (r.determinant() - 1.0).abs() <= LENIENT_TOL {
            let fixed = Rotation3::from_matrix_eps(&r, 1e-15, 100, Rotation3::identity());
            return Pose::new(*fixed.matrix(), t).or_else(|_| Pose::new(r, t));
        }
        Pose::new(r, t)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 4 + j] = self.rotation[(i, j)];
            }
            out[i * 4 + 3] = self.translation[i];
        }
        out[15] = 1.0;
        out
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = <[f64; 16]>::deserialize(d)?;
        Pose::from_row_major(&m).map_err(serde::de::Error::custom)
    }
}

/// Pinhole intrinsics plus the ego-from-camera extrinsic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraSpec", into = "CameraSpec")]
pub struct CameraModel {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub ego_from_camera: Pose,
    /// Excluded from fitting; used for evaluation only.
    pub held_out: bool,
}

/// Rig JSON entry: `{fx, fy, cx, cy, width, height, ego_from_camera: [16]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSpec {
    #[serde(default)]
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub ego_from_camera: Pose,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub held_out: bool,
}

impl TryFrom<CameraSpec> for CameraModel {
    type Error = Error;

    fn try_from(s: CameraSpec) -> Result<Self> {
        let mut cam = CameraModel::new(s.fx, s.fy, s.cx, s.cy, s.width, s.height, s.ego_from_camera)?;
        cam.name = s.name;
        cam.held_out = s.held_out;
        Ok(cam)
    }
}

impl From<CameraModel> for CameraSpec {
    fn from(c: CameraModel) -> Self {
        CameraSpec {
            name: c.name,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            ego_from_camera: c.ego_from_camera,
            held_out: c.held_out,
        }
    }
}

/// Result of projecting a point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z.
    pub depth: f64,
    /// False when the point is at or behind the camera plane.
    pub valid: bool,
}

/// A ray `o + t * d` in ego coordinates. `direction` is the camera-frame
/// vector `(x_n, y_n, 1)` rotated into ego space, so `t` along it equals the
/// camera-frame depth; it is not unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub pixel: (f64, f64),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    pub fn unit_direction(&self) -> Vector3<f64> {
        self.direction.normalize()
    }
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, ego_from_camera: Pose) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidParameter(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be non-zero".into()));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::InvalidParameter(format!(
                "principal point ({cx}, {cy}) must lie inside the {width}x{height} image"
            )));
        }
        let ego_from_camera = Pose::new(ego_from_camera.rotation, ego_from_camera.translation)?;
        Ok(Self { name: String::new(), fx, fy, cx, cy, width, height, ego_from_camera, held_out: false })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Same intrinsics, different extrinsic (e.g. expressed in another frame).
    pub fn with_extrinsic(&self, ego_from_camera: Pose) -> Self {
        Self { ego_from_camera, ..self.clone() }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.ego_from_camera.translation
    }

    /// Optical axis in ego coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.ego_from_camera.rotation.column(2).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.ego_from_camera.rotation.transpose() * (p - self.ego_from_camera.translation)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Projection {
        let pc = self.to_camera(p);
        self.project_camera_point(&pc)
    }

    fn project_camera_point(&self, pc: &Vector3<f64>) -> Projection {
        if pc.z <= 0.0 {
            return Projection { u: f64::NAN, v: f64::NAN, depth: pc.z, valid: false };
        }
        Projection { u: self.fx * pc.x / pc.z + self.cx, v: self.fy * pc.y / pc.z + self.cy, depth: pc.z, valid: true }
    }

    /// Projection together with the 2x3 Jacobian `d(u, v) / d(p_ego)`.
    pub fn project_with_jacobian(&self, p: &Vector3<f64>) -> (Projection, [Vector3<f64>; 2]) {
        let pc = self.to_camera(p);
        let proj = self.project_camera_point(&pc);
        if !proj.valid {
            return (proj, [Vector3::zeros(); 2]);
        }
        let iz = 1.0 / pc.z;
        // d(u,v)/d(pc), then chain through pc = R^T (p - t).
        let du_dpc = Vector3::new(self.fx * iz, 0.0, -self.fx * pc.x * iz * iz);
        let dv_dpc = Vector3::new(0.0, self.fy * iz, -self.fy * pc.y * iz * iz);
        let r = &self.ego_from_camera.rotation;
        (proj, [r * du_dpc, r * dv_dpc])
    }

    pub fn generate_ray(&self, u: f64, v: f64) -> Ray {
        let dc = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray { origin: self.center(), direction: self.ego_from_camera.rotation * dc, pixel: (u, v) }
    }

    pub fn generate_rays(&self, pixels: &[(f64, f64)]) -> Vec<Ray> {
        pixels.iter().map(|&(u, v)| self.generate_ray(u, v)).collect()
    }

    /// Camera-frame depth of a point `t` units along the ray through `(u, v)`
    /// measured in metric distance (unit direction).
    pub fn depth_from_distance(&self, ray: &Ray, distance: f64) -> f64 {
        distance / ray.direction.norm()
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100, Pose::identity()).unwrap()
    }

    fn tilted_cam() -> CameraModel {
        let pose = Pose::from_euler(0.3, -0.2, 1.1, Vector3::new(1.5, -0.4, 1.7));
        CameraModel::new(80.0, 90.0, 48.5, 31.0, 96, 64, pose).unwrap()
    }

    #[test]
    fn project_examples() {
        let cam = identity_cam();
        let p = cam.project(&Vector3::new(0.0, 0.0, 5.0));
        assert!(p.valid);
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 5.0));
        let p = cam.project(&Vector3::new(1.0, 0.0, 2.0));
        assert_eq!((p.u, p.v, p.depth), (100.0, 50.0, 2.0));
        assert!(!cam.project(&Vector3::new(0.0, 0.0, -1.0)).valid);
    }

    #[test]
    fn principal_ray_is_forward() {
        let cam = tilted_cam();
        let ray = cam.generate_ray(cam.cx, cam.cy);
        assert_relative_eq!(ray.unit_direction(), cam.forward(), epsilon = 1e-12);
    }

    #[test]
    fn adjacent_pixels_differ_by_inverse_focal() {
        let cam = tilted_cam();
        let a = cam.to_camera(&cam.generate_ray(10.0, 20.0).at(1.0));
        let b = cam.to_camera(&cam.generate_ray(11.0, 20.0).at(1.0));
        assert_relative_eq!(b.x - a.x, 1.0 / cam.fx, epsilon = 1e-12);
        assert_relative_eq!(b.y - a.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ray_projection_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for cam in [identity_cam(), tilted_cam()] {
            for _ in 0..1000 {
                let u = rng.random_range(0.0..(cam.width - 1) as f64);
                let v = rng.random_range(0.0..(cam.height - 1) as f64);
                let t = rng.random_range(0.05..200.0);
                let ray = cam.generate_ray(u, v);
                let p = cam.project(&ray.at(t));
                assert!(p.valid);
                assert!((p.u - u).abs() < 1e-6 && (p.v - v).abs() < 1e-6);
                assert_relative_eq!(p.depth, t, max_relative = 1e-12);
            }
        }
        let cam = tilted_cam();
        let ray = cam.generate_ray(17.0, 40.0);
        let p = cam.project(&ray.at(7.0));
        assert!((p.u - 17.0).abs() < 1e-6 && (p.v - 40.0).abs() < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = tilted_cam();
        let p = cam.generate_ray(30.0, 20.0).at(6.0);
        let (_, jac) = cam.project_with_jacobian(&p);
        let h = 1e-6;
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            let a = cam.project(&(p + e));
            let b = cam.project(&(p - e));
            assert_relative_eq!((a.u - b.u) / (2.0 * h), jac[0][axis], epsilon = 1e-5);
            assert_relative_eq!((a.v - b.v) / (2.0 * h), jac[1][axis], epsilon = 1e-5);
        }
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraModel::new(0.0, 1.0, 5.0, 5.0, 10, 10, Pose::identity()).is_err());
        assert!(CameraModel::new(1.0, 1.0, 10.0, 5.0, 10, 10, Pose::identity()).is_err());
        let bad = Pose { rotation: Matrix3::identity() * 2.0, translation: Vector3::zeros() };
        assert!(CameraModel::new(1.0, 1.0, 5.0, 5.0, 10, 10, bad).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn rig_json_roundtrip() {
        let cam = tilted_cam().named("front");
        let json = serde_json::to_string(&cam).unwrap();
        let back: CameraModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back.name, "front");
        assert_relative_eq!(back.ego_from_camera.rotation, cam.ego_from_camera.rotation, epsilon = 1e-15);
    }

    #[test]
    fn lenient_matrix_reader_reorthonormalizes() {
        let mut m = Pose::from_euler(0.1, 0.2, 0.3, Vector3::new(1.0, 2.0, 3.0)).to_row_major();
        for v in m.iter_mut().take(11) {
            *v = (*v * 1e6).round() / 1e6;
        }
        let p = Pose::from_row_major(&m).unwrap();
        assert!(orthonormality_error(&p.rotation) < 1e-12);
        m[0] += 0.1;
        assert!(Pose::from_row_major(&m).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0, -10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0)
            .prop_map(|(r, p, y, a, b, c)| Pose::from_euler(r, p, y, Vector3::new(a, b, c)))
    }

    proptest! {
        #[test]
        fn pose_group_laws(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.rotation - right.rotation).abs().max() < 1e-9);
            prop_assert!((left.translation - right.translation).abs().max() < 1e-9);
            let id = a.compose(&a.inverse());
            prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation.abs().max() < 1e-9);
        }
    }
}
