//! Camera model, rigid-body parameterization, pose algebra and surface
//! normals.
//!
//! Rotations are parameterized by an axis-angle 3-vector: the direction is
//! the rotation axis, the length the rotation angle. Poses are kept
//! canonical (angle in `[0, pi]`) so component-wise pose differences stay
//! meaningful.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Angle below which rotation formulas switch to their first-order series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Pinhole camera parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(cx >= 0.0 && cx < width as f64, "cx out of raster");
        assert!(cy >= 0.0 && cy < height as f64, "cy out of raster");
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Perspective projection of a camera-space point onto the image plane.
    /// Continuous pixel coordinates, not rounded.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(self.project_unchecked(p))
    }

    /// `project` without the depth check; caller guarantees `p.z > 0`.
    #[inline]
    pub fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Back-projection of an image point with known depth into camera space.
    pub fn backproject(&self, p: &Vector2<f64>, z: f64) -> Result<Vector3<f64>> {
        if z <= 0.0 {
            return Err(Error::InvalidDepth { z });
        }
        Ok(self.backproject_unchecked(p, z))
    }

    /// `backproject` without the depth check; caller guarantees `z > 0`.
    #[inline]
    pub fn backproject_unchecked(&self, p: &Vector2<f64>, z: f64) -> Vector3<f64> {
        Vector3::new(
            z * (p.x - self.cx) / self.fx,
            z * (p.y - self.cy) / self.fy,
            z,
        )
    }

    /// Jacobian of `project` with respect to the 3D point, 2x3 row-major
    /// as `[du/dP; dv/dP]`.
    #[inline]
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> [[f64; 3]; 2] {
        let inv_z = 1.0 / p.z;
        [
            [self.fx * inv_z, 0.0, -self.fx * p.x * inv_z * inv_z],
            [0.0, self.fy * inv_z, -self.fy * p.y * inv_z * inv_z],
        ]
    }
}

/// 6-DOF rigid transform of one segment for one frame pair: axis-angle
/// rotation plus translation, applied as `R(axis_angle) * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentPose {
    pub axis_angle: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl SegmentPose {
    pub fn identity() -> Self {
        SegmentPose {
            axis_angle: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, wrapping the rotation into the canonical range.
    pub fn new(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        SegmentPose {
            axis_angle: canonicalize_axis_angle(axis_angle),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        SegmentPose {
            axis_angle: Vector3::zeros(),
            translation,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_axis_angle(&self.axis_angle)
    }

    /// Applies the rigid transform to a point.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation
    }

    pub fn inverse(&self) -> SegmentPose {
        let r_inv = self.rotation().transpose();
        SegmentPose {
            axis_angle: -self.axis_angle,
            translation: -(r_inv * self.translation),
        }
    }

    /// Stacks `(axis_angle, translation)` into one 6-vector.
    pub fn to_vector6(&self) -> [f64; 6] {
        [
            self.axis_angle.x,
            self.axis_angle.y,
            self.axis_angle.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_slice(v: &[f64]) -> SegmentPose {
        SegmentPose {
            axis_angle: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    /// Euclidean norm of the stacked 6-vector.
    pub fn norm(&self) -> f64 {
        (self.axis_angle.norm_squared() + self.translation.norm_squared()).sqrt()
    }
}

/// Wraps the rotation angle into `[0, pi]` by reducing modulo 2*pi and
/// flipping the axis when the reduced angle exceeds pi.
pub fn canonicalize_axis_angle(alpha: Vector3<f64>) -> Vector3<f64> {
    let theta = alpha.norm();
    if theta < SMALL_ANGLE {
        return alpha;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let reduced = theta.rem_euclid(two_pi);
    if reduced <= std::f64::consts::PI {
        alpha * (reduced / theta)
    } else {
        alpha * ((reduced - two_pi) / theta)
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation: `R = I + sin(theta) K + (1 - cos(theta)) K^2` with
/// `K` the unit-axis skew matrix. Falls back to `I + skew(alpha)` below the
/// small-angle threshold.
pub fn rotation_from_axis_angle(alpha: &Vector3<f64>) -> Matrix3<f64> {
    let theta = alpha.norm();
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + skew(alpha);
    }
    let k = skew(&(alpha / theta));
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Axis-angle of a rotation matrix; returned angle lies in `[0, pi]`.
pub fn axis_angle_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < SMALL_ANGLE {
        return vee * 0.5;
    }
    if theta > std::f64::consts::PI - 1e-6 {
        // Near pi the vee part vanishes; recover the axis from R + I.
        let b = (r + Matrix3::identity()) * 0.5;
        let k = (0..3)
            .max_by(|&i, &j| b[(i, i)].partial_cmp(&b[(j, j)]).unwrap())
            .unwrap();
        let mut axis = Vector3::zeros();
        axis[k] = b[(k, k)].max(0.0).sqrt();
        for j in 0..3 {
            if j != k {
                axis[j] = b[(j, k)] / axis[k];
            }
        }
        let axis = axis.normalize();
        // Residual sine information still fixes the sign below pi.
        let axis = if vee.dot(&axis) < 0.0 { -axis } else { axis };
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

/// Composition applying `inner` first, then `outer`. The rotation part is
/// re-extracted to canonical axis-angle.
pub fn compose_poses(outer: &SegmentPose, inner: &SegmentPose) -> SegmentPose {
    let r_outer = outer.rotation();
    let r = r_outer * inner.rotation();
    SegmentPose {
        axis_angle: axis_angle_from_rotation(&r),
        translation: r_outer * inner.translation + outer.translation,
    }
}

/// Component-wise difference of the stacked 6-vectors
/// `(alpha_a - alpha_b, t_a - t_b)`.
pub fn pose_difference(a: &SegmentPose, b: &SegmentPose) -> [f64; 6] {
    let da = a.axis_angle - b.axis_angle;
    let dt = a.translation - b.translation;
    [da.x, da.y, da.z, dt.x, dt.y, dt.z]
}

/// Point-independent factors of the derivative of `R(alpha) * p` with
/// respect to `alpha`; reusable across many points sharing one rotation.
#[derive(Debug, Clone)]
pub struct RotatePointDerivative {
    m: [Matrix3<f64>; 3],
}

impl RotatePointDerivative {
    pub fn new(alpha: &Vector3<f64>) -> Self {
        let theta_sq = alpha.norm_squared();
        if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
            // First order: d(R p)/d(alpha_i) ~ e_i x q.
            return RotatePointDerivative {
                m: [
                    skew(&Vector3::x()),
                    skew(&Vector3::y()),
                    skew(&Vector3::z()),
                ],
            };
        }
        let r = rotation_from_axis_angle(alpha);
        let k_alpha = skew(alpha);
        let i_minus_r = Matrix3::identity() - r;
        let m = std::array::from_fn(|i| {
            let v = alpha.cross(&i_minus_r.column(i).into_owned());
            (k_alpha * alpha[i] + skew(&v)) / theta_sq
        });
        RotatePointDerivative { m }
    }

    /// Jacobian of `R(alpha) p` given the already-rotated point
    /// `q = R(alpha) p`; column `i` is `m_i q`.
    pub fn jacobian_at(&self, q: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.m[0] * q, self.m[1] * q, self.m[2] * q])
    }
}

/// Derivative of the rotated point `R(alpha) * p` with respect to the
/// axis-angle vector; column `i` is `d(R p)/d(alpha_i)`.
pub fn rotate_point_jacobian(alpha: &Vector3<f64>, p: &Vector3<f64>) -> Matrix3<f64> {
    let q = rotation_from_axis_angle(alpha) * p;
    RotatePointDerivative::new(alpha).jacobian_at(&q)
}

/// Left Jacobian of SO(3): `exp((alpha + d)^) ~ exp((Jl d)^) exp(alpha^)`.
pub fn so3_left_jacobian(alpha: &Vector3<f64>) -> Matrix3<f64> {
    let theta = alpha.norm();
    let k = skew(alpha);
    let (a, b) = if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of the left Jacobian of SO(3).
pub fn so3_left_jacobian_inv(alpha: &Vector3<f64>) -> Matrix3<f64> {
    let theta = alpha.norm();
    let k = skew(alpha);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Right Jacobian of SO(3): `exp((alpha + d)^) ~ exp(alpha^) exp((Jr d)^)`.
pub fn so3_right_jacobian(alpha: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&(-alpha))
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(alpha: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian_inv(&(-alpha))
}

/// Derivative blocks of `compose_poses(outer, inner)` with respect to both
/// operands, each a 6x6 matrix over `(axis_angle, translation)`.
pub struct ComposeJacobians {
    pub d_outer: [[f64; 6]; 6],
    pub d_inner: [[f64; 6]; 6],
}

/// Composition together with its derivative blocks.
pub fn compose_poses_with_jacobians(
    outer: &SegmentPose,
    inner: &SegmentPose,
) -> (SegmentPose, ComposeJacobians) {
    let out = compose_poses(outer, inner);

    let d_alpha_outer =
        so3_left_jacobian_inv(&out.axis_angle) * so3_left_jacobian(&outer.axis_angle);
    let d_alpha_inner =
        so3_right_jacobian_inv(&out.axis_angle) * so3_right_jacobian(&inner.axis_angle);
    let d_t_alpha_outer = rotate_point_jacobian(&outer.axis_angle, &inner.translation);
    let r_outer = outer.rotation();

    let mut d_outer = [[0.0; 6]; 6];
    let mut d_inner = [[0.0; 6]; 6];
    for i in 0..3 {
        for j in 0..3 {
            d_outer[i][j] = d_alpha_outer[(i, j)];
            d_outer[i + 3][j] = d_t_alpha_outer[(i, j)];
            d_inner[i][j] = d_alpha_inner[(i, j)];
            d_inner[i + 3][j + 3] = r_outer[(i, j)];
        }
        d_outer[i + 3][i + 3] = 1.0;
    }
    (out, ComposeJacobians { d_outer, d_inner })
}

/// Per-pixel unit normals of the reference surface with a validity mask.
#[derive(Debug, Clone)]
pub struct NormalMap {
    normals: Raster<Vector3<f64>>,
    valid: Raster<bool>,
}

impl NormalMap {
    pub fn width(&self) -> usize {
        self.normals.width()
    }

    pub fn height(&self) -> usize {
        self.normals.height()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        if self.valid.get(x, y) {
            Some(self.normals.get(x, y))
        } else {
            None
        }
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid.get(x, y)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&v| v).count()
    }
}

/// Normals from the cross product of central differences of back-projected
/// depth, oriented toward the camera (`n_z < 0`). Border pixels and pixels
/// with any invalid 4-neighbor are flagged invalid.
pub fn compute_normals(depth: &Raster<f64>, intrinsics: &CameraIntrinsics) -> NormalMap {
    let (w, h) = (depth.width(), depth.height());
    let mut normals = Raster::filled(w, h, Vector3::zeros());
    let mut valid = Raster::filled(w, h, false);
    if w < 3 || h < 3 {
        return NormalMap { normals, valid };
    }
    let point = |x: usize, y: usize, z: f64| -> Vector3<f64> {
        intrinsics.backproject_unchecked(&Vector2::new(x as f64, y as f64), z)
    };
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let zc = depth.get(x, y);
            let zl = depth.get(x - 1, y);
            let zr = depth.get(x + 1, y);
            let zu = depth.get(x, y - 1);
            let zd = depth.get(x, y + 1);
            if zc <= 0.0 || zl <= 0.0 || zr <= 0.0 || zu <= 0.0 || zd <= 0.0 {
                continue;
            }
            let dx = (point(x + 1, y, zr) - point(x - 1, y, zl)) * 0.5;
            let dy = (point(x, y + 1, zd) - point(x, y - 1, zu)) * 0.5;
            let mut n = dx.cross(&dy);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            n /= norm;
            if n.z > 0.0 {
                n = -n;
            }
            normals.set(x, y, n);
            valid.set(x, y, true);
        }
    }
    NormalMap { normals, valid }
}
