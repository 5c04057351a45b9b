//! Rigid-body transform algebra.
//!
//! Every pose in the system is a [`RigidTransform`]: a unit quaternion stored
//! with a non-negative scalar part plus a translation in metres. The module
//! also provides the pose distance used by all proximity tests, the residual
//! vector minimised by the pose-graph optimiser and dual quaternion blending.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Number of bytes in the little-endian wire/file encoding of a pose.
pub const POSE_BYTES: usize = 56;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Se3Error {
    #[error("no samples to blend")]
    NoSamples,
    #[error("{samples} samples but {weights} weights")]
    WeightCount { samples: usize, weights: usize },
    #[error("blend weights must be finite and non-negative, with at least one positive")]
    BadWeights,
    #[error("quaternion ({0}, {1}, {2}, {3}) cannot be normalised")]
    DegenerateQuaternion(f64, f64, f64, f64),
    #[error("expected {expected} pose values, found {found}")]
    WrongLength { expected: usize, found: usize },
}

/// A rigid transform in SE(3).
///
/// `compose(a, b)` (or `a * b`) applies `b` first, then `a`.
#[derive(Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    // Renormalise on every construction so long composition chains stay unit.
    let q = UnitQuaternion::new_normalize(*q.quaternion());
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    /// Builds a transform from raw quaternion components, normalising them.
    pub fn from_wxyz(
        w: f64,
        x: f64,
        y: f64,
        z: f64,
        translation: Vector3<f64>,
    ) -> Result<Self, Se3Error> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Se3Error::DegenerateQuaternion(w, x, y, z));
        }
        Ok(Self::new(UnitQuaternion::new_normalize(q), translation))
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle_rad: f64) -> Self {
        match Unit::try_new(*axis, 1e-15) {
            Some(axis) => Self::new(
                UnitQuaternion::from_axis_angle(&axis, angle_rad),
                Vector3::zeros(),
            ),
            None => Self::identity(),
        }
    }

    /// Rotation by the given rotation vector (axis times angle in radians).
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(*v), Vector3::zeros())
    }

    pub fn from_rotation_matrix(m: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotate_x(deg: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), deg.to_radians())
    }

    pub fn rotate_y(deg: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), deg.to_radians())
    }

    pub fn rotate_z(deg: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), deg.to_radians())
    }

    pub fn with_translation(mut self, translation: Vector3<f64>) -> Self {
        self.translation = translation;
        self
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Quaternion components in (w, x, y, z) order, with w >= 0.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle of this transform, in degrees.
    pub fn angle_deg(&self) -> f64 {
        quaternion_angle_deg(self.rotation.quaternion(), &Quaternion::identity())
    }

    /// (w, x, y, z, tx, ty, tz).
    pub fn to_array(&self) -> [f64; 7] {
        let [w, x, y, z] = self.quaternion_wxyz();
        let t = self.translation;
        [w, x, y, z, t.x, t.y, t.z]
    }

    pub fn from_array(v: &[f64]) -> Result<Self, Se3Error> {
        if v.len() != 7 {
            return Err(Se3Error::WrongLength {
                expected: 7,
                found: v.len(),
            });
        }
        Self::from_wxyz(v[0], v[1], v[2], v[3], Vector3::new(v[4], v[5], v[6]))
    }

    pub fn to_le_bytes(&self) -> [u8; POSE_BYTES] {
        let mut out = [0u8; POSE_BYTES];
        for (chunk, v) in out.chunks_exact_mut(8).zip(self.to_array()) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes 56 little-endian bytes. Stored values are used as-is so a
    /// round trip reproduces the pose exactly.
    pub fn from_le_bytes(bytes: &[u8; POSE_BYTES]) -> Result<Self, Se3Error> {
        let mut v = [0.0; 7];
        for (slot, chunk) in v.iter_mut().zip(bytes.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        let n = q.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 || v[4..].iter().any(|x| !x.is_finite()) {
            return Err(Se3Error::DegenerateQuaternion(v[0], v[1], v[2], v[3]));
        }
        // Keep the exact stored components when they are already canonical.
        let rotation = if (n - 1.0).abs() <= f64::EPSILON * 4.0 && v[0] >= 0.0 {
            UnitQuaternion::new_unchecked(q)
        } else {
            canonical(UnitQuaternion::new_normalize(q))
        };
        Ok(Self {
            rotation,
            translation: Vector3::new(v[4], v[5], v[6]),
        })
    }

    /// Parses seven whitespace-separated numbers.
    pub fn parse_text(s: &str) -> Result<Self, Se3Error> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        if vals.len() != 7 {
            return Err(Se3Error::WrongLength {
                expected: 7,
                found: vals.len(),
            });
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Se3Error::DegenerateQuaternion(
                vals[0], vals[1], vals[2], vals[3],
            ));
        }
        let mut bytes = [0u8; POSE_BYTES];
        for (chunk, v) in bytes.chunks_exact_mut(8).zip(&vals) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        Self::from_le_bytes(&bytes)
    }

    /// Canonical text form: seven shortest round-trip decimal numbers.
    pub fn to_text(&self) -> String {
        let a = self.to_array();
        format!(
            "{} {} {} {} {} {} {}",
            a[0], a[1], a[2], a[3], a[4], a[5], a[6]
        )
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.quaternion_wxyz();
        let t = self.translation;
        write!(
            f,
            "RigidTransform {{ q: ({w:.6}, {x:.6}, {y:.6}, {z:.6}), t: ({:.6}, {:.6}, {:.6}) }}",
            t.x, t.y, t.z
        )
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = <[f64; 7]>::deserialize(d)?;
        RigidTransform::from_array(&v).map_err(serde::de::Error::custom)
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Translation and rotation difference between two poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDistance {
    pub translation_m: f64,
    pub angle_deg: f64,
}

impl PoseDistance {
    pub const ZERO: PoseDistance = PoseDistance {
        translation_m: 0.0,
        angle_deg: 0.0,
    };

    /// Strictly inside both bounds.
    pub fn is_within(&self, max_translation_m: f64, max_angle_deg: f64) -> bool {
        self.translation_m < max_translation_m && self.angle_deg < max_angle_deg
    }

    /// Inside or on both bounds.
    pub fn is_within_inclusive(&self, max_translation_m: f64, max_angle_deg: f64) -> bool {
        self.translation_m <= max_translation_m && self.angle_deg <= max_angle_deg
    }
}

fn quaternion_angle_deg(a: &Quaternion<f64>, b: &Quaternion<f64>) -> f64 {
    // atan2 keeps full precision near the identity where acos(|a.b|) does not.
    let rel = a.conjugate() * b;
    (2.0 * rel.imag().norm().atan2(rel.w.abs())).to_degrees()
}

/// Euclidean distance between translations and the angle of the relative
/// rotation `inv(R_a) * R_b`.
pub fn pose_distance(a: &RigidTransform, b: &RigidTransform) -> PoseDistance {
    PoseDistance {
        translation_m: (a.translation - b.translation).norm(),
        angle_deg: quaternion_angle_deg(a.rotation.quaternion(), b.rotation.quaternion()),
    }
}

/// The 6-vector residual of a transform: imaginary quaternion part (with the
/// scalar part made non-negative) followed by the translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseResidual {
    pub qvec: Vector3<f64>,
    pub tvec: Vector3<f64>,
}

impl PoseResidual {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.qvec.x,
            self.qvec.y,
            self.qvec.z,
            self.tvec.x,
            self.tvec.y,
            self.tvec.z,
        ]
    }

    /// L2 norm with the rotational components scaled by `rotation_weight`.
    pub fn weighted_norm(&self, rotation_weight: f64) -> f64 {
        ((rotation_weight * rotation_weight) * self.qvec.norm_squared() + self.tvec.norm_squared())
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.weighted_norm(1.0)
    }
}

pub fn error_vector(t: &RigidTransform) -> PoseResidual {
    let q = t.rotation.quaternion();
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    PoseResidual {
        qvec: Vector3::new(s * q.i, s * q.j, s * q.k),
        tvec: t.translation,
    }
}

/// A dual quaternion `real + eps * dual`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuaternion {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

impl DualQuaternion {
    pub fn from_transform(t: &RigidTransform) -> Self {
        let real = *t.rotation.quaternion();
        let tq = Quaternion::new(0.0, t.translation.x, t.translation.y, t.translation.z);
        DualQuaternion {
            real,
            dual: (tq * real) * 0.5,
        }
    }

    /// Normalises and converts back to a rigid transform. Returns `None` for a
    /// zero real part.
    pub fn to_transform(&self) -> Option<RigidTransform> {
        let n = self.real.norm();
        if !n.is_finite() || n < 1e-15 {
            return None;
        }
        let real = self.real / n;
        let mut dual = self.dual / n;
        // Project out the component violating real . dual = 0.
        dual -= real * real.dot(&dual);
        let t = (dual * real.conjugate()) * 2.0;
        Some(RigidTransform::new(
            UnitQuaternion::new_unchecked(real),
            Vector3::new(t.i, t.j, t.k),
        ))
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.real.norm() - 1.0).abs() <= tol && self.real.dot(&self.dual).abs() <= tol
    }
}

/// Dual quaternion blending of rigid transforms. `None` weights means uniform.
///
/// Each sample's dual quaternion is sign-flipped into the hemisphere of the
/// first sample's real part before summation.
pub fn dqb_blend(
    samples: &[RigidTransform],
    weights: Option<&[f64]>,
) -> Result<RigidTransform, Se3Error> {
    if samples.is_empty() {
        return Err(Se3Error::NoSamples);
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Se3Error::WeightCount {
                samples: samples.len(),
                weights: w.len(),
            });
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|x| *x == 0.0) {
            return Err(Se3Error::BadWeights);
        }
    }
    let pivot = *samples[0].rotation.quaternion();
    let mut real = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    let mut dual = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let dq = DualQuaternion::from_transform(s);
        let sign = if dq.real.dot(&pivot) < 0.0 { -w } else { w };
        real += dq.real * sign;
        dual += dq.dual * sign;
    }
    DualQuaternion { real, dual }
        .to_transform()
        .ok_or(Se3Error::BadWeights)
}
