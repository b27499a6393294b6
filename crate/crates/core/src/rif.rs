//! Rotation-invariant local features and reference-axis binning.
//!
//! A local neighborhood around a reference point `p` is summarized by its
//! centroid `m`. The vector `pm = m - p` orients the neighborhood: each
//! neighbor `x` is described by `[|x - p|, |x - m|, ∠(p - x, pm), ∠(m - x, pm)]`,
//! and neighbors are ordered into bins by their projection onto `pm`. Both are
//! unchanged by any rigid motion of the neighborhood.

use crate::error::{Error, Result};
use crate::geom::{centroid, Point3};
use crate::sampling::knn;

/// `|pm|` below this fraction of the neighborhood radius triggers the
/// farthest-point fallback for `m`.
pub const DEGENERATE_EPSILON: f64 = 1e-6;

/// Relative distance tolerance under which fallback candidates count as
/// equidistant from `p`.
const FALLBACK_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborFrame {
    pub p_index: usize,
    pub p: Point3,
    pub neighbor_indices: Vec<usize>,
    pub neighbor_points: Vec<Point3>,
    pub m: Point3,
    pub pm: Point3,
    pub degenerate_fallback_used: bool,
}

impl NeighborFrame {
    /// Builds the frame of `p` from an explicit neighbor list.
    pub fn from_neighbors(
        p_index: usize,
        p: Point3,
        neighbor_indices: Vec<usize>,
        neighbor_points: Vec<Point3>,
    ) -> Result<Self> {
        if neighbor_indices.len() != neighbor_points.len() || neighbor_points.is_empty() {
            return Err(Error::InvalidInput(format!(
                "frame needs matching, non-empty neighbor lists ({} indices, {} points)",
                neighbor_indices.len(),
                neighbor_points.len()
            )));
        }
        let radius = neighbor_points.iter().map(|x| x.distance(p)).fold(0.0, f64::max);
        if radius == 0.0 {
            return Err(Error::DegenerateNeighborhood { index: p_index });
        }
        let mut m = centroid(&neighbor_points)?;
        let mut fallback = false;
        if m.distance(p) < DEGENERATE_EPSILON * radius {
            // farthest neighbor from p; near-equal distances resolve to the
            // lowest source index so the choice survives rounding noise
            let cutoff = radius * (1.0 - FALLBACK_TIE_TOLERANCE);
            let pick = neighbor_points
                .iter()
                .zip(&neighbor_indices)
                .filter(|(x, _)| x.distance(p) >= cutoff)
                .min_by_key(|(_, &i)| i)
                .map(|(&x, _)| x)
                .expect("the farthest neighbor passes its own cutoff");
            m = pick;
            fallback = true;
        }
        Ok(Self {
            p_index,
            p,
            neighbor_indices,
            neighbor_points,
            m,
            pm: m - p,
            degenerate_fallback_used: fallback,
        })
    }

    pub fn k(&self) -> usize {
        self.neighbor_points.len()
    }
}

/// Frame of cloud point `p_index` over its `k` nearest neighbors (the point
/// itself included).
pub fn build_frame(points: &[Point3], p_index: usize, k: usize) -> Result<NeighborFrame> {
    let p = *points
        .get(p_index)
        .ok_or_else(|| Error::InvalidInput(format!("reference index {p_index} out of range")))?;
    let idx = knn(points, p, k)?.into_indices();
    let pts = idx.iter().map(|&i| points[i]).collect();
    NeighborFrame::from_neighbors(p_index, p, idx, pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RIFeature {
    pub d0: f64,
    pub d1: f64,
    pub alpha0: f64,
    pub alpha1: f64,
}

impl RIFeature {
    pub fn to_array(self) -> [f64; 4] {
        [self.d0, self.d1, self.alpha0, self.alpha1]
    }
}

/// Unsigned angle in [0, π]; 0 if either vector has zero length.
pub fn angle_between(a: Point3, b: Point3) -> f64 {
    if a.norm_squared() == 0.0 || b.norm_squared() == 0.0 {
        return 0.0;
    }
    a.cross(b).norm().atan2(a.dot(b))
}

fn rif_of(x: Point3, p: Point3, m: Point3, pm: Point3) -> RIFeature {
    RIFeature {
        d0: x.distance(p),
        d1: x.distance(m),
        alpha0: angle_between(p - x, pm),
        alpha1: angle_between(m - x, pm),
    }
}

pub fn rif_features(frame: &NeighborFrame) -> Vec<RIFeature> {
    frame
        .neighbor_points
        .iter()
        .map(|&x| rif_of(x, frame.p, frame.m, frame.pm))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinAssignment {
    pub bin_of: Vec<usize>,
    pub n_bins: usize,
}

impl BinAssignment {
    pub fn new(bin_of: Vec<usize>, n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::InvalidInput("at least one bin is required".into()));
        }
        if let Some(&b) = bin_of.iter().find(|&&b| b >= n_bins) {
            return Err(Error::InvalidInput(format!("bin index {b} out of range for {n_bins} bins")));
        }
        Ok(Self { bin_of, n_bins })
    }

    /// Number of members per bin.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_bins];
        for &b in &self.bin_of {
            c[b] += 1;
        }
        c
    }
}

/// Splits the projections `t` of neighbors onto the reference axis into
/// `n_bins` equal intervals over `[min t, max t]`.
pub fn bins_from_projections(t: &[f64], n_bins: usize) -> Vec<usize> {
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if n_bins <= 1 || span.is_nan() || span <= 0.0 {
        return vec![0; t.len()];
    }
    t.iter()
        .map(|&v| (((v - lo) / span * n_bins as f64).floor() as usize).min(n_bins - 1))
        .collect()
}

pub fn bin_assign(frame: &NeighborFrame, n_bins: usize) -> Result<BinAssignment> {
    if n_bins == 0 {
        return Err(Error::InvalidInput("at least one bin is required".into()));
    }
    let len = frame.pm.norm();
    let t: Vec<f64> = if len > 0.0 {
        let axis = frame.pm / len;
        frame.neighbor_points.iter().map(|&x| (x - frame.p).dot(axis)).collect()
    } else {
        vec![0.0; frame.k()]
    };
    BinAssignment::new(bins_from_projections(&t, n_bins), n_bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{sample_rotation_so3, RigidTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        sample_rotation_so3(rng).with_translation(Point3::new(rng.random(), rng.random(), rng.random()))
    }

    /// Angle via the arccos of the normalized dot product, independent of the
    /// atan2 form used by the implementation.
    fn acos_angle(a: Point3, b: Point3) -> f64 {
        (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn hexagon_triggers_fallback() {
        let p = Point3::new(0.5, -1.0, 2.0);
        let mut pts = vec![p];
        for i in 0..6 {
            let a = i as f64 * TAU / 6.0;
            pts.push(p + Point3::new(a.cos(), a.sin(), 0.0));
        }
        let frame = build_frame(&pts, 0, 7).unwrap();
        assert!(frame.degenerate_fallback_used);
        // all six vertices are equidistant; the lowest index wins
        assert_eq!(frame.m, pts[1]);
        assert!((frame.pm.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_neighbor_frame() {
        let p = Point3::ZERO;
        let frame = NeighborFrame::from_neighbors(
            0,
            p,
            vec![1, 2],
            vec![Point3::new(1.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)],
        )
        .unwrap();
        assert_eq!(frame.m, Point3::new(2.0, 0.0, 0.0));
        assert_eq!(frame.pm, Point3::new(2.0, 0.0, 0.0));
        assert!(!frame.degenerate_fallback_used);
    }

    #[test]
    fn frame_centroid_matches_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 300);
        let frame = build_frame(&pts, 17, 64).unwrap();
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sz = 0.0;
        for &i in &frame.neighbor_indices {
            sx += pts[i].x;
            sy += pts[i].y;
            sz += pts[i].z;
        }
        let mean = Point3::new(sx / 64.0, sy / 64.0, sz / 64.0);
        assert!(frame.m.distance(mean) < 1e-12);
        assert_eq!(frame.neighbor_indices[0], 17);
    }

    #[test]
    fn coincident_neighborhood_is_rejected() {
        let pts = vec![Point3::new(1.0, 2.0, 3.0); 4];
        assert!(matches!(
            build_frame(&pts, 0, 4),
            Err(Error::DegenerateNeighborhood { index: 0 })
        ));
    }

    #[test]
    fn reference_point_feature() {
        let p = Point3::ZERO;
        let x = Point3::new(2.0, 0.0, 0.0);
        let frame = NeighborFrame::from_neighbors(0, p, vec![0, 1], vec![p, x]).unwrap();
        let f = rif_features(&frame);
        assert_eq!(f[0].to_array(), [0.0, 1.0, 0.0, 0.0]);
        // x = m exactly: zero-length x→m gives alpha1 = 0
        let g = rif_of(frame.m, p, frame.m, frame.pm);
        assert_eq!(g.d1, 0.0);
        assert_eq!(g.alpha1, 0.0);
    }

    #[test]
    fn hand_computed_feature() {
        let p = Point3::ZERO;
        let m = Point3::new(1.0, 0.0, 0.0);
        let x = Point3::new(1.0, 1.0, 0.0);
        let f = rif_of(x, p, m, m - p);
        assert!((f.d0 - 2f64.sqrt()).abs() < 1e-15);
        assert!((f.d1 - 1.0).abs() < 1e-15);
        assert!((f.alpha0 - 3.0 * PI / 4.0).abs() < 1e-15);
        assert!((f.alpha1 - FRAC_PI_2).abs() < 1e-15);
        assert!((f.alpha0 - acos_angle(p - x, m - p)).abs() < 1e-12);
    }

    #[test]
    fn features_agree_with_acos_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 100);
        let frame = build_frame(&pts, 5, 32).unwrap();
        for (x, f) in frame.neighbor_points.iter().zip(rif_features(&frame)) {
            if *x != frame.p {
                assert!((f.alpha0 - acos_angle(frame.p - *x, frame.pm)).abs() < 1e-7);
            }
            assert!((f.alpha1 - acos_angle(frame.m - *x, frame.pm)).abs() < 1e-7);
        }
    }

    #[test]
    fn features_are_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let pts = random_points(&mut rng, 80);
            let t = random_transform(&mut rng);
            let moved: Vec<Point3> = pts.iter().map(|&p| t.apply(p)).collect();
            let i = rng.random_range(0..80);
            let a = build_frame(&pts, i, 24).unwrap();
            let b = build_frame(&moved, i, 24).unwrap();
            assert_eq!(a.neighbor_indices, b.neighbor_indices);
            for (fa, fb) in rif_features(&a).iter().zip(rif_features(&b)) {
                for (u, v) in fa.to_array().iter().zip(fb.to_array()) {
                    assert!((u - v).abs() <= 1e-6);
                }
            }
            assert_eq!(bin_assign(&a, 4).unwrap(), bin_assign(&b, 4).unwrap());
        }
    }

    #[test]
    fn features_follow_neighbor_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 40);
        let frame = build_frame(&pts, 0, 16).unwrap();
        let mut order: Vec<usize> = (0..16).collect();
        order.reverse();
        order.swap(3, 9);
        let shuffled = NeighborFrame::from_neighbors(
            frame.p_index,
            frame.p,
            order.iter().map(|&j| frame.neighbor_indices[j]).collect(),
            order.iter().map(|&j| frame.neighbor_points[j]).collect(),
        )
        .unwrap();
        let fa = rif_features(&frame);
        let fb = rif_features(&shuffled);
        let ba = bin_assign(&frame, 3).unwrap();
        let bb = bin_assign(&shuffled, 3).unwrap();
        for (pos, &j) in order.iter().enumerate() {
            for (u, v) in fa[j].to_array().iter().zip(fb[pos].to_array()) {
                assert!((u - v).abs() < 1e-12);
            }
            assert_eq!(ba.bin_of[j], bb.bin_of[pos]);
        }
    }

    #[test]
    fn binning_examples() {
        assert_eq!(bins_from_projections(&[0.0, 1.0, 2.0, 3.0], 2), vec![0, 0, 1, 1]);
        assert_eq!(bins_from_projections(&[0.0, 1.0, 2.0, 3.0], 1), vec![0; 4]);
        assert_eq!(bins_from_projections(&[0.5; 3], 4), vec![0; 3]);

        let p = Point3::ZERO;
        let pts: Vec<Point3> = (0..4).map(|i| Point3::new(0.0, 0.0, i as f64)).collect();
        let frame = NeighborFrame::from_neighbors(0, p, (0..4).collect(), pts).unwrap();
        assert_eq!(bin_assign(&frame, 2).unwrap().bin_of, vec![0, 0, 1, 1]);
        assert_eq!(bin_assign(&frame, 1).unwrap().bin_of, vec![0; 4]);
        assert!(bin_assign(&frame, 0).is_err());
    }

    #[test]
    fn ranges_on_unit_sphere_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pts: Vec<Point3> = random_points(&mut rng, 128)
                .into_iter()
                .map(|p| p / p.norm().max(1.0))
                .collect();
            let frame = build_frame(&pts, rng.random_range(0..128), 32).unwrap();
            for f in rif_features(&frame) {
                assert!((0.0..=2.0).contains(&f.d0) && (0.0..=2.0).contains(&f.d1));
                assert!((0.0..=PI).contains(&f.alpha0) && (0.0..=PI).contains(&f.alpha1));
            }
        }
    }

    #[test]
    fn symmetric_neighborhoods_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in 2..40 {
            let t = random_transform(&mut rng);
            let mut pts = vec![t.apply(Point3::ZERO)];
            for i in 0..n {
                let a = i as f64 * TAU / n as f64;
                pts.push(t.apply(Point3::new(a.cos(), a.sin(), 0.0)));
            }
            let frame = build_frame(&pts, 0, n + 1).unwrap();
            assert!(frame.degenerate_fallback_used);
            for f in rif_features(&frame) {
                assert!(f.to_array().iter().all(|v| v.is_finite()));
            }
        }
    }
}
