//! 3D primitives, rigid transforms and the rotation samplers used by the
//! z and SO(3) augmentation regimes.

use std::f64::consts::TAU;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for orthogonality and unit determinant of rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Point3) -> Point3 {
        Point3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn distance_squared(self, other: Point3) -> f64 {
        (self - other).norm_squared()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Point3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Point3 {
    type Output = Point3;
    fn div(self, s: f64) -> Point3 {
        Point3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// An ordered point set with optional per-point part labels and an optional
/// class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    part_labels: Option<Vec<usize>>,
    class_label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud must not be empty".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!("point {i} has non-finite coordinates")));
        }
        Ok(Self {
            points,
            part_labels: None,
            class_label: None,
        })
    }

    pub fn with_part_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::InvalidInput(format!(
                "{} part labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.part_labels = Some(labels);
        Ok(self)
    }

    pub fn with_class_label(mut self, label: usize) -> Self {
        self.class_label = Some(label);
        self
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn part_labels(&self) -> Option<&[usize]> {
        self.part_labels.as_deref()
    }

    pub fn class_label(&self) -> Option<usize> {
        self.class_label
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same labels, new coordinates. Callers guarantee equal length.
    fn with_points(&self, points: Vec<Point3>) -> PointCloud {
        debug_assert_eq!(points.len(), self.points.len());
        PointCloud {
            points,
            part_labels: self.part_labels.clone(),
            class_label: self.class_label,
        }
    }

    /// Reorders points (and part labels) so that output `i` is input `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<PointCloud> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidInput("not a permutation of the cloud's indices".into()));
        }
        Ok(PointCloud {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            part_labels: self
                .part_labels
                .as_ref()
                .map(|l| perm.iter().map(|&i| l[i]).collect()),
            class_label: self.class_label,
        })
    }
}

pub type Matrix3 = [[f64; 3]; 3];

const IDENTITY3: Matrix3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mat_mul(a: &Matrix3, b: &Matrix3) -> Matrix3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Matrix3, p: Point3) -> Point3 {
    Point3::new(
        a[0][0] * p.x + a[0][1] * p.y + a[0][2] * p.z,
        a[1][0] * p.x + a[1][1] * p.y + a[1][2] * p.z,
        a[2][0] * p.x + a[2][1] * p.y + a[2][2] * p.z,
    )
}

fn determinant(a: &Matrix3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// A proper rotation followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3,
    translation: Point3,
}

impl RigidTransform {
    /// Rejects matrices that are not orthogonal with determinant +1.
    pub fn new(rotation: Matrix3, translation: Point3) -> Result<Self> {
        if !translation.is_finite() || rotation.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("rigid transform has non-finite entries".into()));
        }
        let mut rtr = [[0.0; 3]; 3];
        for (i, row) in rtr.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
            }
        }
        let off = rtr
            .iter()
            .flatten()
            .zip(IDENTITY3.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if off > ROTATION_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthogonal (max |RᵀR - I| = {off:e})"
            )));
        }
        let det = determinant(&rotation);
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidInput(format!("rotation determinant is {det}, expected +1")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY3,
            translation: Point3::ZERO,
        }
    }

    pub fn rotation(&self) -> &Matrix3 {
        &self.rotation
    }

    pub fn translation(&self) -> Point3 {
        self.translation
    }

    /// Same rotation, different translation.
    pub fn with_translation(mut self, translation: Point3) -> Self {
        self.translation = translation;
        self
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        mat_vec(&self.rotation, p) + self.translation
    }

    /// The transform that applies `first` and then `self`.
    pub fn after(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: mat_mul(&self.rotation, &first.rotation),
            translation: mat_vec(&self.rotation, first.translation) + self.translation,
        }
    }

    /// Rotation for the unit quaternion (w, x, y, z).
    fn from_unit_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let rotation = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Self {
            rotation,
            translation: Point3::ZERO,
        }
    }

    fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: Point3::ZERO,
        }
    }
}

pub fn apply_rigid(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    cloud.with_points(cloud.points().iter().map(|&p| t.apply(p)).collect())
}

/// Rotation about the z (gravity) axis by an angle uniform in [0, 2π).
pub fn sample_rotation_z<R: Rng + ?Sized>(rng: &mut R) -> RigidTransform {
    RigidTransform::about_z(rng.random::<f64>() * TAU)
}

/// Uniform rotation over SO(3), built from a uniformly distributed unit
/// quaternion (Shoemake's subgroup algorithm).
pub fn sample_rotation_so3<R: Rng + ?Sized>(rng: &mut R) -> RigidTransform {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = (TAU * u2).sin_cos();
    let (s3, c3) = (TAU * u3).sin_cos();
    RigidTransform::from_unit_quaternion(b * c3, a * s2, a * c2, b * s3)
}

/// Which rotations a data augmentation draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationKind {
    None,
    Z,
    So3,
}

impl RotationKind {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> RigidTransform {
        match self {
            RotationKind::None => RigidTransform::identity(),
            RotationKind::Z => sample_rotation_z(rng),
            RotationKind::So3 => sample_rotation_so3(rng),
        }
    }
}

pub fn centroid(points: &[Point3]) -> Result<Point3> {
    if points.is_empty() {
        return Err(Error::InvalidInput("centroid of an empty point set".into()));
    }
    let sum = points.iter().fold(Point3::ZERO, |acc, &p| acc + p);
    Ok(sum / points.len() as f64)
}

/// Centers the cloud on its centroid and scales it so the farthest point
/// lies at distance 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    let c = centroid(cloud.points())?;
    let centered: Vec<Point3> = cloud.points().iter().map(|&p| p - c).collect();
    let radius = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let scale = cloud
        .points()
        .iter()
        .map(|p| p.norm())
        .fold(0.0, f64::max)
        .max(1.0);
    if radius <= 1e-12 * scale {
        return Err(Error::InvalidInput(
            "cannot normalize a cloud whose points all coincide".into(),
        ));
    }
    Ok(cloud.with_points(centered.into_iter().map(|p| p / radius).collect()))
}
