//! Rigid and affine transforms mapping fixed-space points to moving-space points.
//!
//! Both kinds act as `p ↦ M (p − c) + c + t` with `c` the rotation/scaling center.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::rotation_from_vector;

const ORTHONORMAL_TOL: f64 = 1e-9;
const SINGULAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    center: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, center: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() >= ORTHONORMAL_TOL || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidInput("rigid rotation must be a proper orthonormal matrix".into()));
        }
        Ok(Self { rotation, translation, center })
    }

    pub fn identity(center: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros(), center }
    }

    /// From a rotation vector (axis × angle, rad) and a translation (mm).
    pub fn from_rotation_vector(w: Vector3<f64>, translation: Vector3<f64>, center: Vector3<f64>) -> Self {
        Self { rotation: rotation_from_vector(&w), translation, center }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.center) + self.center + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation), center: self.center }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let a = self.to_affine().compose(&other.to_affine());
        Self { rotation: orthonormal_part(a.matrix()), translation: a.translation, center: a.center }
    }

    pub fn to_affine(&self) -> AffineTransform {
        AffineTransform { matrix: self.rotation, translation: self.translation, center: self.center }
    }
}

fn orthonormal_part(m: &Matrix3<f64>) -> Matrix3<f64> {
    crate::volume::orthonormalize(m).unwrap_or(*m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix3<f64>,
    translation: Vector3<f64>,
    center: Vector3<f64>,
}

impl AffineTransform {
    pub fn new(matrix: Matrix3<f64>, translation: Vector3<f64>, center: Vector3<f64>) -> Result<Self> {
        if !(matrix.determinant().abs() > SINGULAR_TOL) || matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("affine matrix is singular".into()));
        }
        Ok(Self { matrix, translation, center })
    }

    pub fn identity(center: Vector3<f64>) -> Self {
        Self { matrix: Matrix3::identity(), translation: Vector3::zeros(), center }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    pub fn determinant(&self) -> f64 {
        self.matrix.determinant()
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * (p - self.center) + self.center + self.translation
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("affine matrix is singular".into()))?;
        Ok(Self { matrix: inv, translation: -(inv * self.translation), center: self.center })
    }

    /// `self ∘ other`: apply `other` first. The result keeps `other`'s center.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let matrix = self.matrix * other.matrix;
        // self(other(p)) = Ma Mb (p − cb) + Ma (cb + tb − ca) + ca + ta
        let translation =
            self.matrix * (other.center + other.translation - self.center) + self.center + self.translation - other.center;
        AffineTransform { matrix, translation, center: other.center }
    }

    /// Same map expressed about a different center.
    pub fn recentered(&self, center: Vector3<f64>) -> AffineTransform {
        // M (p − c) + c + t = M (p − c') + c' + [M (c' − c) + c − c' + t]
        let translation = self.matrix * (center - self.center) + self.center - center + self.translation;
        AffineTransform { matrix: self.matrix, translation, center }
    }

    pub fn save_json(&self, path: impl AsRef<Path>, kind: TransformKind) -> Result<()> {
        let doc = TransformFile {
            kind,
            matrix: [0, 1, 2].map(|r| [0, 1, 2].map(|c| self.matrix[(r, c)])),
            translation: [self.translation.x, self.translation.y, self.translation.z],
            center: [self.center.x, self.center.y, self.center.z],
            convention: CONVENTION.to_string(),
        };
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<(Self, TransformKind)> {
        let doc: TransformFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let m = Matrix3::from_fn(|r, c| doc.matrix[r][c]);
        let t = AffineTransform::new(m, Vector3::from(doc.translation), Vector3::from(doc.center))?;
        if doc.kind == TransformKind::Rigid {
            RigidTransform::new(m, t.translation, t.center)?;
        }
        Ok((t, doc.kind))
    }
}

impl From<RigidTransform> for AffineTransform {
    fn from(r: RigidTransform) -> Self {
        r.to_affine()
    }
}

pub const CONVENTION: &str = "maps fixed-space world points (mm) to moving-space points: y = matrix * (x - center) + center + translation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Rigid,
    Affine,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformFile {
    kind: TransformKind,
    matrix: [[f64; 3]; 3],
    translation: [f64; 3],
    center: [f64; 3],
    convention: String,
}
