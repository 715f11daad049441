//! Rigid-body transforms and the small 6-vectors that live on top of them.
//!
//! Units are fixed throughout the crate: millimetres, newtons, newton-millimetres
//! and radians. Orientation 3-vectors are rotation-matrix logarithms
//! (axis times angle, principal branch), which agree to first order with any
//! small-angle triple.

use std::f64::consts::PI;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality tolerance for validated transforms.
pub const ORTHONORMAL_TOL: f64 = 1e-12;

/// Distance from π below which the rotation logarithm is treated as ambiguous.
const LOG_BRANCH_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (|R^T R - I| = {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("rotation has determinant {det}, expected +1")]
    Improper { det: f64 },
    #[error("rotation angle {angle} is at the log-map branch cut (pi); orientation is ambiguous")]
    BranchAmbiguity { angle: f64 },
    #[error("non-finite component in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn unit(self) -> Vector3<f64> {
        match self {
            Axis::X => Vector3::x(),
            Axis::Y => Vector3::y(),
            Axis::Z => Vector3::z(),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        };
        f.write_str(s)
    }
}

/// Elementary motion type: a translation along or a rotation about an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Translation,
    Rotation,
}

/// Rigid-body pose stored as rotation plus translation (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform after checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("transform"));
        }
        let deviation = orthonormality_deviation(&rotation);
        if deviation > ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal { deviation });
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::Improper { det });
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation_vector(phi: &Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(phi),
            translation: Vector3::zeros(),
        }
    }

    /// Single-axis translation (mm) or rotation (rad).
    pub fn elementary(motion: Motion, axis: Axis, value: f64) -> Self {
        match motion {
            Motion::Translation => Self::from_translation(axis.unit() * value),
            Motion::Rotation => Self {
                rotation: axis_rotation(axis, value),
                translation: Vector3::zeros(),
            },
        }
    }

    pub fn tx(d: f64) -> Self {
        Self::elementary(Motion::Translation, Axis::X, d)
    }
    pub fn ty(d: f64) -> Self {
        Self::elementary(Motion::Translation, Axis::Y, d)
    }
    pub fn tz(d: f64) -> Self {
        Self::elementary(Motion::Translation, Axis::Z, d)
    }
    pub fn rx(a: f64) -> Self {
        Self::elementary(Motion::Rotation, Axis::X, a)
    }
    pub fn ry(a: f64) -> Self {
        Self::elementary(Motion::Rotation, Axis::Y, a)
    }
    pub fn rz(a: f64) -> Self {
        Self::elementary(Motion::Rotation, Axis::Z, a)
    }

    /// Builds the transform whose `pose_of` is `pose` (exponential of the orientation vector).
    pub fn from_pose(pose: &Pose) -> Self {
        Self {
            rotation: so3_exp(&pose.orientation),
            translation: pose.position,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.transpose();
        Transform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn pose(&self) -> Result<Pose, GeometryError> {
        pose_of(self)
    }

    /// Applies a small displacement expressed in the base frame: the position is
    /// shifted by `d.translation` and the orientation is pre-multiplied by
    /// `exp(d.rotation)`, so that `pose_difference(self, self.displaced(d)) == d`.
    pub fn displaced(&self, d: &Deflection) -> Transform {
        Transform {
            rotation: so3_exp(&d.rotation) * self.rotation,
            translation: self.translation + d.translation,
        }
    }

    /// Maximum deviation of the stored rotation from orthonormality.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_deviation(&self.rotation)
    }
}

impl Mul for Transform {
    type Output = Transform;
    fn mul(self, rhs: Transform) -> Transform {
        self.compose(&rhs)
    }
}

impl Mul<&Transform> for &Transform {
    type Output = Transform;
    fn mul(self, rhs: &Transform) -> Transform {
        self.compose(rhs)
    }
}

pub fn compose(a: &Transform, b: &Transform) -> Transform {
    a.compose(b)
}

pub fn elementary(motion: Motion, axis: Axis, value: f64) -> Transform {
    Transform::elementary(motion, axis, value)
}

/// Position and log-map orientation of a transform.
pub fn pose_of(t: &Transform) -> Result<Pose, GeometryError> {
    Ok(Pose {
        position: t.translation,
        orientation: so3_log(&t.rotation)?,
    })
}

/// Displacement carrying `a` onto `b`: translation `b.p - a.p`, rotation
/// `log(b.R a.R^T)` expressed in the base frame.
pub fn pose_difference(a: &Transform, b: &Transform) -> Result<Deflection, GeometryError> {
    let relative = b.rotation * a.rotation.transpose();
    Ok(Deflection {
        translation: b.translation - a.translation,
        rotation: so3_log(&relative)?,
    })
}

fn orthonormality_deviation(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

fn axis_rotation(axis: Axis, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    match axis {
        Axis::X => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Axis::Y => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Axis::Z => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(phi);
    Matrix3::identity() + k * a + k * k * b
}

/// Principal-branch rotation logarithm as an axis-angle 3-vector.
///
/// Returns exactly zero for any rotation whose skew part vanishes, in particular
/// for `R * R^T` products computed in floating point.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("rotation"));
    }
    let half_skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = half_skew.norm();
    let angle = sin.atan2(cos);
    if angle < 1e-5 {
        let a2 = angle * angle;
        return Ok(half_skew * (1.0 + a2 / 6.0 + 7.0 * a2 * a2 / 360.0));
    }
    if PI - angle < LOG_BRANCH_TOL {
        return Err(GeometryError::BranchAmbiguity { angle });
    }
    if angle < PI - 1e-6 {
        return Ok(half_skew * (angle / sin));
    }
    // Near pi the skew part loses precision; recover the axis from (R + R^T)/2 - cos I = (1 - cos) a a^T.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let (col, _) = (0..3)
        .map(|i| (i, sym[(i, i)]))
        .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
    let mut axis = sym.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&half_skew) < 0.0 {
        axis = -axis;
    }
    Ok(axis * angle)
}

/// Left Jacobian of SO(3): maps the rate of the rotation vector to the spatial
/// angular velocity, `omega = J_l(phi) * d(phi)/dt`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (b, c) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let k = skew(phi);
    Matrix3::identity() + k * b + k * k * c
}

/// End-effector location: position (mm) and log-map orientation (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
}

/// Force (N) and moment (N·mm) applied at the end-effector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
}

/// Small end-effector displacement: translation (mm) and rotation vector (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Deflection {
    pub translation: Vector3<f64>,
    pub rotation: Vector3<f64>,
}

macro_rules! six_vector {
    ($ty:ident, $lin:ident, $ang:ident) => {
        impl $ty {
            pub fn new($lin: Vector3<f64>, $ang: Vector3<f64>) -> Self {
                Self { $lin, $ang }
            }

            pub fn zero() -> Self {
                Self::default()
            }

            pub fn from_vector(v: &Vector6<f64>) -> Self {
                Self {
                    $lin: v.fixed_rows::<3>(0).into_owned(),
                    $ang: v.fixed_rows::<3>(3).into_owned(),
                }
            }

            pub fn from_array(a: [f64; 6]) -> Self {
                Self::from_vector(&Vector6::from_row_slice(&a))
            }

            pub fn to_vector(&self) -> Vector6<f64> {
                let mut v = Vector6::zeros();
                v.fixed_rows_mut::<3>(0).copy_from(&self.$lin);
                v.fixed_rows_mut::<3>(3).copy_from(&self.$ang);
                v
            }

            pub fn to_array(&self) -> [f64; 6] {
                let v = self.to_vector();
                [v[0], v[1], v[2], v[3], v[4], v[5]]
            }

            pub fn is_finite(&self) -> bool {
                self.$lin.iter().chain(self.$ang.iter()).all(|x| x.is_finite())
            }

            pub fn is_zero(&self) -> bool {
                self.$lin.iter().chain(self.$ang.iter()).all(|x| *x == 0.0)
            }
        }

        impl Add for $ty {
            type Output = $ty;
            fn add(self, rhs: $ty) -> $ty {
                $ty {
                    $lin: self.$lin + rhs.$lin,
                    $ang: self.$ang + rhs.$ang,
                }
            }
        }

        impl Sub for $ty {
            type Output = $ty;
            fn sub(self, rhs: $ty) -> $ty {
                $ty {
                    $lin: self.$lin - rhs.$lin,
                    $ang: self.$ang - rhs.$ang,
                }
            }
        }

        impl Neg for $ty {
            type Output = $ty;
            fn neg(self) -> $ty {
                $ty {
                    $lin: -self.$lin,
                    $ang: -self.$ang,
                }
            }
        }

        impl Mul<f64> for $ty {
            type Output = $ty;
            fn mul(self, s: f64) -> $ty {
                $ty {
                    $lin: self.$lin * s,
                    $ang: self.$ang * s,
                }
            }
        }

        impl Sum for $ty {
            fn sum<I: Iterator<Item = $ty>>(iter: I) -> $ty {
                iter.fold($ty::zero(), |acc, x| acc + x)
            }
        }
    };
}

six_vector!(Wrench, force, moment);
six_vector!(Deflection, translation, rotation);
