//! Farthest point sampling and brute-force k-nearest-neighbor queries.
//!
//! Every comparison is made on squared distances with ties broken by the
//! lowest original index, so results are fully deterministic.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geom::{centroid, Point3};

/// Ordered, duplicate-free indices into a source cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleResult {
    indices: Vec<usize>,
}

impl SampleResult {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn into_indices(self) -> Vec<usize> {
        self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Index of the largest value, lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Selects `n` points by farthest point sampling.
///
/// The seed is the point farthest from the centroid; every further pick
/// maximizes the distance to the nearest already-selected point.
pub fn farthest_point_sampling(points: &[Point3], n: usize) -> Result<SampleResult> {
    farthest_point_sampling_traced(points, n).map(|(s, _)| s)
}

/// Like [`farthest_point_sampling`], also returning for every pick its
/// distance to the nearest previously selected point (the seed reports its
/// distance to the centroid).
pub fn farthest_point_sampling_traced(points: &[Point3], n: usize) -> Result<(SampleResult, Vec<f64>)> {
    if n == 0 || n > points.len() {
        return Err(Error::InvalidInput(format!(
            "farthest point sampling of {n} points from a cloud of {}",
            points.len()
        )));
    }
    let c = centroid(points)?;
    let from_centroid: Vec<f64> = points.iter().map(|p| p.distance_squared(c)).collect();
    let seed = argmax(&from_centroid);

    let mut indices = Vec::with_capacity(n);
    let mut trace = Vec::with_capacity(n);
    indices.push(seed);
    trace.push(from_centroid[seed].sqrt());

    let mut nearest: Vec<f64> = points.iter().map(|p| p.distance_squared(points[seed])).collect();
    nearest[seed] = f64::NEG_INFINITY;
    while indices.len() < n {
        let next = argmax(&nearest);
        trace.push(nearest[next].sqrt());
        indices.push(next);
        let q = points[next];
        for (d, p) in nearest.iter_mut().zip(points) {
            let dq = p.distance_squared(q);
            if dq < *d {
                *d = dq;
            }
        }
        // selected points must never win again, even when all remaining
        // distances are zero (duplicates)
        nearest[next] = f64::NEG_INFINITY;
    }
    Ok((SampleResult { indices }, trace))
}

/// The `k` points nearest to `query`, in nondecreasing distance.
pub fn knn(points: &[Point3], query: Point3, k: usize) -> Result<SampleResult> {
    let mut scratch = Vec::new();
    let mut out = Vec::new();
    knn_into(points, query, k, &mut scratch, &mut out)?;
    Ok(SampleResult { indices: out })
}

/// Allocation-reusing form of [`knn`].
pub fn knn_into(
    points: &[Point3],
    query: Point3,
    k: usize,
    scratch: &mut Vec<(f64, usize)>,
    out: &mut Vec<usize>,
) -> Result<()> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} nearest neighbors requested from a cloud of {}",
            points.len()
        )));
    }
    scratch.clear();
    scratch.extend(points.iter().enumerate().map(|(i, p)| (p.distance_squared(query), i)));
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, by_distance_then_index);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(by_distance_then_index);
    out.clear();
    out.extend(scratch.iter().map(|&(_, i)| i));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn fps_rejects_bad_counts() {
        let pts = vec![Point3::ZERO, Point3::new(1.0, 0.0, 0.0)];
        assert!(farthest_point_sampling(&pts, 0).is_err());
        assert!(farthest_point_sampling(&pts, 3).is_err());
    }

    #[test]
    fn fps_full_count_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 37);
        let mut idx = farthest_point_sampling(&pts, 37).unwrap().into_indices();
        idx.sort();
        assert_eq!(idx, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn fps_single_is_the_seed() {
        let pts = vec![
            Point3::new(0.1, 0.0, 0.0),
            Point3::new(5.0, 0.0, 0.0),
            Point3::new(-0.2, 0.1, 0.0),
        ];
        assert_eq!(farthest_point_sampling(&pts, 1).unwrap().indices(), &[1]);
    }

    #[test]
    fn fps_unit_square_corners() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let got = farthest_point_sampling(&pts, 2).unwrap().into_indices();
        // all corners tie for the seed, so the lowest index wins
        assert_eq!(got[0], 0);
        // exhaustive oracle: best pair containing the seed
        let best = (1..4)
            .max_by(|&a, &b| {
                pts[0]
                    .distance(pts[a])
                    .total_cmp(&pts[0].distance(pts[b]))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(got[1], best);
        assert_eq!(got, vec![0, 2]);
    }

    #[test]
    fn fps_handles_duplicates() {
        let pts = vec![Point3::ZERO, Point3::ZERO, Point3::new(1.0, 0.0, 0.0)];
        let mut idx = farthest_point_sampling(&pts, 3).unwrap().into_indices();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn fps_min_distances_are_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let pts = random_points(&mut rng, 200);
            let (_, trace) = farthest_point_sampling_traced(&pts, 64).unwrap();
            for w in trace[1..].windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn knn_examples() {
        let pts = vec![
            Point3::new(3.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        assert_eq!(knn(&pts, Point3::ZERO, 4).unwrap().indices(), &[1, 2, 3, 0]);
        assert_eq!(knn(&pts, pts[2], 1).unwrap().indices(), &[1]);
        assert!(knn(&pts, Point3::ZERO, 0).is_err());
        assert!(knn(&pts, Point3::ZERO, 5).is_err());
    }

    #[test]
    fn knn_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pts = random_points(&mut rng, 100);
            let q = Point3::new(rng.random(), rng.random(), rng.random());
            let mut all: Vec<usize> = (0..100).collect();
            all.sort_by(|&a, &b| {
                pts[a]
                    .distance_squared(q)
                    .total_cmp(&pts[b].distance_squared(q))
                    .then(a.cmp(&b))
            });
            assert_eq!(knn(&pts, q, 10).unwrap().indices(), &all[..10]);
        }
    }
}
