//! Scene primitives, the pinhole camera and the projection chain.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-space depth at or below which a point is treated as behind the camera.
pub const Z_NEAR: f64 = 0.01;

/// Variance (px²) added to both eigenvalues of every projected covariance.
pub const BLUR_FLOOR: f64 = 0.3;

/// One anisotropic 3D Gaussian in canonical space.
///
/// `rotation` is a unit quaternion stored as (w, x, y, z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mu0: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
}

impl Gaussian3D {
    pub fn isotropic(mu0: Vector3<f64>, scale: f64, color: Vector3<f64>, opacity: f64) -> Self {
        Gaussian3D {
            mu0,
            scale: Vector3::repeat(scale),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            color,
            opacity,
        }
    }

    /// Restores the attribute invariants after an unconstrained update.
    pub fn project_constraints(&mut self) {
        for c in self.color.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        self.opacity = self.opacity.clamp(0.0, 1.0);
        for s in self.scale.iter_mut() {
            if !(*s > 1e-8) {
                *s = 1e-8;
            }
        }
        let n = self.rotation.norm();
        if n > 0.0 && n.is_finite() {
            self.rotation /= n;
        } else {
            self.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mu0.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
    }

    /// Mean of the three scale components.
    pub fn mean_scale(&self) -> f64 {
        self.scale.sum() / 3.0
    }
}

/// The canonical (t = 0) scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalScene {
    #[serde(rename = "background")]
    pub background: Vector3<f64>,
    pub gaussians: Vec<Gaussian3D>,
}

impl CanonicalScene {
    pub fn new(background: Vector3<f64>, gaussians: Vec<Gaussian3D>) -> Self {
        CanonicalScene {
            background,
            gaussians,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Diagonal of the bounding box of all canonical centers.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.mu0);
            hi = hi.sup(&g.mu0);
        }
        (hi - lo).norm()
    }
}

/// Rotation matrix of the normalized quaternion (w, x, y, z).
pub fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of `rotation_matrix` w.r.t. the normalized (w, x, y, z).
fn rotation_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Σ = R S Sᵀ Rᵀ.
pub fn covariance_of(g: &Gaussian3D) -> Matrix3<f64> {
    let m = rotation_matrix(&g.rotation) * Matrix3::from_diagonal(&g.scale);
    m * m.transpose()
}

/// Pulls a gradient on Σ back to the scale vector and the raw quaternion.
pub fn covariance_backward(g: &Gaussian3D, d_cov: &Matrix3<f64>) -> (Vector3<f64>, Vector4<f64>) {
    let norm = g.rotation.norm();
    let qn = g.rotation / norm;
    let r = rotation_matrix(&qn);
    let m = r * Matrix3::from_diagonal(&g.scale);
    let d_m = (d_cov + d_cov.transpose()) * m;
    let mut d_scale = Vector3::zeros();
    let mut d_r = Matrix3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            d_scale[k] += d_m[(i, k)] * r[(i, k)];
            d_r[(i, k)] = d_m[(i, k)] * g.scale[k];
        }
    }
    let partials = rotation_partials(&qn);
    let d_qn = Vector4::from_fn(|c, _| partials[c].component_mul(&d_r).sum());
    let d_q = (d_qn - qn * qn.dot(&d_qn)) / norm;
    (d_scale, d_q)
}

/// Pinhole camera: `p = K (R x + T)` followed by homogeneous normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    #[serde(rename = "T")]
    t: [f64; 3],
    width: usize,
    height: usize,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = m[(i, j)];
        }
    }
    out
}

impl Serialize for CameraModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CameraRecord {
            k: row_major(&self.k),
            r: row_major(&self.r),
            t: [self.t.x, self.t.y, self.t.z],
            width: self.width,
            height: self.height,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = CameraRecord::deserialize(d)?;
        CameraModel::new(
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::from(rec.t),
            rec.width,
            rec.height,
        )
        .map_err(serde::de::Error::custom)
    }
}

impl CameraModel {
    /// Validates zero-skew upper-triangular `k` and orthonormal `r`.
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("camera resolution must be positive".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0)
            || k[(0, 1)] != 0.0
            || k[(1, 0)] != 0.0
            || k[(2, 0)] != 0.0
            || k[(2, 1)] != 0.0
            || k[(2, 2)] != 1.0
        {
            return Err(Error::Config(
                "intrinsics must be zero-skew upper triangular with positive focal lengths".into(),
            ));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "extrinsic rotation is not orthonormal (deviation {ortho:e})"
            )));
        }
        Ok(CameraModel {
            k,
            r,
            t,
            width,
            height,
        })
    }

    pub fn from_intrinsics(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        CameraModel::new(k, r, t, width, height)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    /// Camera axes follow the x-right, y-down, z-forward convention.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        // Re-orthonormalize so the constructor's tolerance holds exactly enough.
        let svd = r.svd(true, true);
        let r = svd.u.unwrap() * svd.v_t.unwrap();
        let t = -(r * eye);
        CameraModel::from_intrinsics(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            r,
            t,
            width,
            height,
        )
    }

    #[inline]
    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }
    #[inline]
    pub fn fy(&self) -> f64 {
        self.k[(1, 1)]
    }
    #[inline]
    pub fn cx(&self) -> f64 {
        self.k[(0, 2)]
    }
    #[inline]
    pub fn cy(&self) -> f64 {
        self.k[(1, 2)]
    }

    /// World position of the camera center.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    #[inline]
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    pub fn project_point(&self, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let c = self.to_camera(x);
        if !(c.z > Z_NEAR) {
            return Err(Error::BehindCamera { depth: c.z });
        }
        Ok((
            Vector2::new(
                self.fx() * c.x / c.z + self.cx(),
                self.fy() * c.y / c.z + self.cy(),
            ),
            c.z,
        ))
    }

    /// d pixel / d camera-space point.
    pub fn perspective_jacobian(&self, c: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / c.z;
        Matrix2x3::new(
            self.fx() * iz,
            0.0,
            -self.fx() * c.x * iz * iz,
            0.0,
            self.fy() * iz,
            -self.fy() * c.y * iz * iz,
        )
    }

    /// d pixel / d world point.
    pub fn projection_jacobian(&self, x: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        let c = self.to_camera(x);
        if !(c.z > Z_NEAR) {
            return Err(Error::BehindCamera { depth: c.z });
        }
        Ok(self.perspective_jacobian(&c) * self.r)
    }

    /// Inverse of `project_point` for a known camera depth.
    pub fn unproject_pixel(&self, p: &Vector2<f64>, z: f64) -> Result<Vector3<f64>> {
        if !(z > 0.0) {
            return Err(Error::NonPositiveDepth(z));
        }
        let c = Vector3::new(
            (p.x - self.cx()) / self.fx() * z,
            (p.y - self.cy()) / self.fy() * z,
            z,
        );
        Ok(self.r.transpose() * (c - self.t))
    }

    /// EWA projection of `g`'s covariance placed at `mu_t`, plus the blur floor.
    pub fn project_covariance(&self, g: &Gaussian3D, mu_t: &Vector3<f64>) -> Result<Matrix2<f64>> {
        self.project_covariance_of(&covariance_of(g), mu_t)
    }

    pub fn project_covariance_of(
        &self,
        cov3: &Matrix3<f64>,
        mu_t: &Vector3<f64>,
    ) -> Result<Matrix2<f64>> {
        let c = self.to_camera(mu_t);
        if !(c.z > Z_NEAR) {
            return Err(Error::BehindCamera { depth: c.z });
        }
        let jw = self.perspective_jacobian(&c) * self.r;
        let cov2 = jw * cov3 * jw.transpose();
        let cov2 = (cov2 + cov2.transpose()) * 0.5;
        Ok(cov2 + Matrix2::identity() * BLUR_FLOOR)
    }

    /// Gradient of a loss through `project_covariance_of`.
    ///
    /// `d_cov2` is the gradient w.r.t. the (symmetric) projected covariance.
    /// Returns the gradients w.r.t. `mu_t` and the 3D covariance.
    pub fn project_covariance_backward(
        &self,
        cov3: &Matrix3<f64>,
        mu_t: &Vector3<f64>,
        d_cov2: &Matrix2<f64>,
    ) -> (Vector3<f64>, Matrix3<f64>) {
        let c = self.to_camera(mu_t);
        let j = self.perspective_jacobian(&c);
        let jw = j * self.r;
        let g = (d_cov2 + d_cov2.transpose()) * 0.5;
        let d_cov3 = jw.transpose() * g * jw;
        let d_jw = g * jw * cov3 * 2.0;
        let d_j = d_jw * self.r.transpose();
        let (fx, fy) = (self.fx(), self.fy());
        let iz = 1.0 / c.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let d_c = Vector3::new(
            d_j[(0, 2)] * (-fx * iz2),
            d_j[(1, 2)] * (-fy * iz2),
            d_j[(0, 0)] * (-fx * iz2)
                + d_j[(0, 2)] * (2.0 * fx * c.x * iz3)
                + d_j[(1, 1)] * (-fy * iz2)
                + d_j[(1, 2)] * (2.0 * fy * c.y * iz3),
        );
        (self.r.transpose() * d_c, d_cov3)
    }
}

/// Cameras file: a JSON array of camera records.
pub fn cameras_to_json(cams: &[CameraModel]) -> Result<String> {
    Ok(serde_json::to_string_pretty(cams)?)
}

pub fn cameras_from_json(text: &str) -> Result<Vec<CameraModel>> {
    Ok(serde_json::from_str(text)?)
}
