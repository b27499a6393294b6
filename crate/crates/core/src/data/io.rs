use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::geom::{normalize_unit_sphere, Point3, PointCloud};

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses xyz text: one point per line, three reals and an optional integer
/// part label. Blank lines and lines starting with `#` are skipped. `origin`
/// names the source in error messages.
pub fn parse_xyz(text: &str, origin: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut labeled: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_err(
                origin,
                line_no,
                format!("expected 3 coordinates and an optional label, found {} fields", fields.len()),
            ));
        }
        let mut c = [0.0; 3];
        for (k, f) in fields[..3].iter().enumerate() {
            c[k] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(origin, line_no, format!("'{f}' is not a finite number")))?;
        }
        let has_label = fields.len() == 4;
        match labeled {
            None => labeled = Some(has_label),
            Some(l) if l != has_label => {
                return Err(parse_err(origin, line_no, "part labels must be given on every line or none"));
            }
            _ => {}
        }
        if has_label {
            labels.push(
                fields[3]
                    .parse::<usize>()
                    .map_err(|_| parse_err(origin, line_no, format!("'{}' is not a part label", fields[3])))?,
            );
        }
        points.push(Point3::from_array(c));
    }
    if points.is_empty() {
        return Err(parse_err(origin, 0, "no points"));
    }
    let cloud = PointCloud::new(points)?;
    if labeled == Some(true) {
        cloud.with_part_labels(labels)
    } else {
        Ok(cloud)
    }
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(&read(path)?, &path.display().to_string())
}

/// xyz text with 17 significant digits, so parsing it back is exact.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72);
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(out, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z);
        if let Some(l) = cloud.part_labels() {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

/// Triangle mesh. Polygons are fan-triangulated on load.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * (b - a).cross(c - a).norm()
    }
}

/// Parses an OFF mesh. The counts may share the header line (`OFF n m k`).
pub fn parse_off(text: &str, origin: &str) -> Result<Mesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| parse_err(origin, 1, "empty file"))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(origin, hline, "missing OFF header"))?
        .trim();
    let (cline, counts) = if rest.is_empty() {
        lines.next().ok_or_else(|| parse_err(origin, hline, "missing element counts"))?
    } else {
        (hline, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(origin, cline, "element counts must be non-negative integers"))?;
    if counts.len() < 2 {
        return Err(parse_err(origin, cline, "expected vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for v in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(origin, cline, format!("file ends before vertex {v}")))?;
        let c: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(origin, ln, "malformed vertex coordinates"))?;
        if c.len() != 3 || c.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(origin, ln, "a vertex needs three finite coordinates"));
        }
        vertices.push(Point3::new(c[0], c[1], c[2]));
    }
    let mut triangles = Vec::with_capacity(nf);
    for f in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(origin, cline, format!("file ends before face {f}")))?;
        let fields: Vec<usize> = l
            .split_whitespace()
            .map(|x| x.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(origin, ln, "malformed face"))?;
        let k = *fields.first().ok_or_else(|| parse_err(origin, ln, "empty face"))?;
        if k < 3 || fields.len() < k + 1 {
            return Err(parse_err(origin, ln, format!("face needs at least 3 vertex indices, got {k}")));
        }
        let idx = &fields[1..=k];
        if let Some(bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(parse_err(origin, ln, format!("vertex index {bad} out of range ({nv} vertices)")));
        }
        for j in 1..k - 1 {
            triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(Mesh { vertices, triangles })
}

pub fn load_off(path: &Path) -> Result<Mesh> {
    parse_off(&read(path)?, &path.display().to_string())
}

/// Area-weighted triangle choice followed by uniform barycentric sampling.
/// Returns the points and the triangle each came from.
pub fn sample_mesh_surface<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<(Vec<Point3>, Vec<usize>)> {
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t)).collect();
    let dist = WeightedIndex::new(&areas)
        .map_err(|_| Error::InvalidInput("mesh has no triangle with positive area".into()))?;
    let mut pts = Vec::with_capacity(n);
    let mut tris = Vec::with_capacity(n);
    for _ in 0..n {
        let t = dist.sample(rng);
        let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        pts.push(a + (b - a) * u + (c - a) * v);
        tris.push(t);
    }
    Ok((pts, tris))
}

/// Samples `n_points` from an OFF mesh and normalizes to the unit sphere.
pub fn load_off_sampled(path: &Path, n_points: usize, seed: u64) -> Result<PointCloud> {
    let mesh = load_off(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pts, _) = sample_mesh_surface(&mesh, n_points, &mut rng)?;
    normalize_unit_sphere(&PointCloud::new(pts)?)
}
