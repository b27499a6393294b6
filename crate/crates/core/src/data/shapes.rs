use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_unit_sphere, Point3, PointCloud};

/// Smallest cloud `gen_shape` produces.
pub const MIN_SHAPE_POINTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
        }
    }

    /// Stable identifier, independent of where the class sits in a list.
    pub(crate) fn id(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown shape class '{s}' (expected sphere, cube, cylinder, cone or torus)"
                ))
            })
    }
}

/// How surface points are split into labeled parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartScheme {
    /// Flat end disks (label 0) versus the curved surface (label 1).
    /// Cylinders and cones.
    CapBody,
    /// One label per face, in the order +x, −x, +y, −y, +z, −z. Cubes.
    Faces,
}

impl PartScheme {
    pub fn part_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            PartScheme::CapBody => &["cap", "body"],
            PartScheme::Faces => &["+x", "-x", "+y", "-y", "+z", "-z"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn supports(self, class: ShapeClass) -> bool {
        matches!(
            (self, class),
            (PartScheme::CapBody, ShapeClass::Cylinder | ShapeClass::Cone) | (PartScheme::Faces, ShapeClass::Cube)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape_class: ShapeClass,
    pub n_points: usize,
    pub jitter_sigma: f64,
    pub part_scheme: Option<PartScheme>,
    pub seed: u64,
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    loop {
        let v = Point3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Antipodal pairs (plus one balanced triple when `n` is odd), so the
/// centroid is the origin up to rounding.
fn sphere<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Point3> {
    let mut pts = Vec::with_capacity(n);
    let pairs = if n.is_multiple_of(2) { n / 2 } else { (n - 3) / 2 };
    for _ in 0..pairs {
        let u = unit_vector(rng);
        pts.push(u);
        pts.push(-u);
    }
    if n % 2 == 1 {
        let a = unit_vector(rng);
        let helper = if a.x.abs() < 0.9 { Point3::new(1.0, 0.0, 0.0) } else { Point3::new(0.0, 1.0, 0.0) };
        let b = a.cross(helper);
        let b = b / b.norm();
        let c = a.cross(b);
        for k in 0..3 {
            let t = TAU * k as f64 / 3.0;
            pts.push(b * t.cos() + c * t.sin());
        }
    }
    pts
}

fn cube<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Point3>, Vec<usize>) {
    let mut pts = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(n);
    for _ in 0..n {
        let face = rng.random_range(0..6);
        let u = rng.random_range(-1.0..1.0);
        let v = rng.random_range(-1.0..1.0);
        let s = if face % 2 == 0 { 1.0 } else { -1.0 };
        pts.push(match face / 2 {
            0 => Point3::new(s, u, v),
            1 => Point3::new(u, s, v),
            _ => Point3::new(u, v, s),
        });
        faces.push(face);
    }
    (pts, faces)
}

/// Uniform point on a disk of radius `r` at height `z`.
fn disk<R: Rng + ?Sized>(r: f64, z: f64, rng: &mut R) -> Point3 {
    let rho = r * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..TAU);
    Point3::new(rho * t.cos(), rho * t.sin(), z)
}

/// Caps labeled 0, lateral surface 1.
fn cylinder<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Point3>, Vec<usize>) {
    let r: f64 = 1.0;
    let h = rng.random_range(1.6..3.2);
    let cap_area = PI * r * r;
    let side_area = TAU * r * h;
    let p_cap = 2.0 * cap_area / (2.0 * cap_area + side_area);
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.random::<f64>() < p_cap {
            let z = if rng.random::<bool>() { h / 2.0 } else { -h / 2.0 };
            pts.push(disk(r, z, rng));
            labels.push(0);
        } else {
            let t = rng.random_range(0.0..TAU);
            let z = rng.random_range(-h / 2.0..h / 2.0);
            pts.push(Point3::new(r * t.cos(), r * t.sin(), z));
            labels.push(1);
        }
    }
    (pts, labels)
}

/// Base disk labeled 0, lateral surface 1. Apex on +z.
fn cone<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Point3>, Vec<usize>) {
    let r: f64 = 1.0;
    let h = rng.random_range(1.5..2.5);
    let slant = (r * r + h * h).sqrt();
    let base_area = PI * r * r;
    let side_area = PI * r * slant;
    let p_base = base_area / (base_area + side_area);
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.random::<f64>() < p_base {
            pts.push(disk(r, 0.0, rng));
            labels.push(0);
        } else {
            // lateral area grows linearly with distance from the apex
            let f = rng.random::<f64>().sqrt();
            let t = rng.random_range(0.0..TAU);
            pts.push(Point3::new(f * r * t.cos(), f * r * t.sin(), h * (1.0 - f)));
            labels.push(1);
        }
    }
    (pts, labels)
}

fn torus<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Point3> {
    let big = 1.0;
    let small = rng.random_range(0.25..0.45);
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let theta = rng.random_range(0.0..TAU);
        // surface density is proportional to the distance from the axis
        if rng.random::<f64>() * (big + small) > big + small * theta.cos() {
            continue;
        }
        let phi = rng.random_range(0.0..TAU);
        let rho = big + small * theta.cos();
        pts.push(Point3::new(rho * phi.cos(), rho * phi.sin(), small * theta.sin()));
    }
    pts
}

/// Samples the surface of a primitive uniformly by area, jitters every
/// coordinate, and normalizes to the unit sphere. Cylinder, cone and torus
/// proportions vary per instance.
pub fn gen_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.n_points < MIN_SHAPE_POINTS {
        return Err(Error::Config(format!(
            "n_points must be at least {MIN_SHAPE_POINTS}, got {}",
            spec.n_points
        )));
    }
    if !(spec.jitter_sigma >= 0.0 && spec.jitter_sigma.is_finite()) {
        return Err(Error::Config("jitter_sigma must be a finite non-negative number".into()));
    }
    if let Some(scheme) = spec.part_scheme {
        if !scheme.supports(spec.shape_class) {
            return Err(Error::Config(format!(
                "part scheme {scheme:?} does not apply to {}",
                spec.shape_class
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_points;
    let (mut pts, labels) = match spec.shape_class {
        ShapeClass::Sphere => (sphere(n, &mut rng), None),
        ShapeClass::Cube => {
            let (p, l) = cube(n, &mut rng);
            (p, Some(l))
        }
        ShapeClass::Cylinder => {
            let (p, l) = cylinder(n, &mut rng);
            (p, Some(l))
        }
        ShapeClass::Cone => {
            let (p, l) = cone(n, &mut rng);
            (p, Some(l))
        }
        ShapeClass::Torus => (torus(n, &mut rng), None),
    };
    if spec.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.jitter_sigma).expect("validated sigma");
        for p in &mut pts {
            *p += Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    let mut cloud = normalize_unit_sphere(&PointCloud::new(pts)?)?;
    if spec.part_scheme.is_some() {
        cloud = cloud.with_part_labels(labels.expect("supported scheme has labels"))?;
    }
    Ok(cloud)
}
