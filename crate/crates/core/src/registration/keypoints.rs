use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pc::{EigenFeatures, Point3, PointCloud, SpatialIndex};

/// Angle-criterion boundary detection. Each point's `k` nearest neighbors
/// are projected onto its tangent plane; the point is a boundary keypoint
/// when the widest angular gap between consecutive projections exceeds
/// `angle_gap_deg`. Returns indices in ascending order.
pub fn detect_boundary_keypoints(cloud: &PointCloud, k: usize, angle_gap_deg: f64) -> Result<Vec<usize>> {
    if k < 3 {
        return Err(Error::InvalidArgument("keypoint neighborhood needs k >= 3".into()));
    }
    if cloud.len() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "keypoint detection needs at least {} points, got {}",
            k + 1,
            cloud.len()
        )));
    }
    let index = SpatialIndex::new(&cloud.points);
    let threshold = angle_gap_deg.to_radians();
    Ok((0..cloud.len())
        .into_par_iter()
        .filter(|&i| {
            let p = cloud.points[i];
            let nbrs: Vec<Point3> = index
                .knn(&p, k + 1)
                .into_iter()
                .filter(|n| n.index != i)
                .map(|n| cloud.points[n.index])
                .collect();
            max_angular_gap(&p, &nbrs).is_some_and(|g| g > threshold)
        })
        .collect())
}

/// Largest gap (radians) between neighbor directions projected onto the
/// tangent plane at `p`. `None` when the normal is undefined.
pub fn max_angular_gap(p: &Point3, neighbors: &[Point3]) -> Option<f64> {
    let mut all = Vec::with_capacity(neighbors.len() + 1);
    all.push(*p);
    all.extend_from_slice(neighbors);
    let f = EigenFeatures::from_points(&all).ok()?;
    if f.lambda[1] <= 0.0 || f.normal.norm() == 0.0 {
        return None;
    }
    let n = f.normal;
    let u = f.principal;
    let v = n.cross(&u);
    let mut angles: Vec<f64> = neighbors
        .iter()
        .filter_map(|q| {
            let d = q - p;
            let (x, y) = (d.dot(&u), d.dot(&v));
            (x != 0.0 || y != 0.0).then(|| y.atan2(x))
        })
        .collect();
    if angles.len() < 2 {
        return None;
    }
    angles.sort_by(f64::total_cmp);
    let wrap = angles[0] + std::f64::consts::TAU - angles[angles.len() - 1];
    Some(angles.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max))
}

/// Greedy farthest-point subsampling of `candidates` down to `cap` points.
/// Starts from the candidate farthest from their centroid; ties go to the
/// lower index. Output keeps selection order.
pub fn farthest_point_sample(points: &[Point3], candidates: &[usize], cap: usize) -> Vec<usize> {
    if candidates.len() <= cap {
        return candidates.to_vec();
    }
    if cap == 0 {
        return Vec::new();
    }
    let n = candidates.len() as f64;
    let c = candidates.iter().fold(Point3::zeros(), |acc, &i| acc + points[i]) / n;
    let argmax = |d: &[f64]| {
        let mut best = 0;
        for (j, v) in d.iter().enumerate() {
            if *v > d[best] {
                best = j;
            }
        }
        best
    };
    let from_center: Vec<f64> = candidates.iter().map(|&i| (points[i] - c).norm_squared()).collect();
    let mut pick = argmax(&from_center);
    let mut selected = vec![candidates[pick]];
    let mut dist: Vec<f64> = candidates
        .iter()
        .map(|&i| (points[i] - points[candidates[pick]]).norm_squared())
        .collect();
    while selected.len() < cap {
        pick = argmax(&dist);
        let chosen = points[candidates[pick]];
        selected.push(candidates[pick]);
        for (d, &i) in dist.iter_mut().zip(candidates) {
            *d = d.min((points[i] - chosen).norm_squared());
        }
    }
    selected
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(n: usize) -> Vec<Point3> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Point3::new(i as f64 * 0.1, 0.0, j as f64 * 0.1));
            }
        }
        pts
    }

    fn gap_deg(pts: &[Point3], i: usize, k: usize) -> f64 {
        let index = SpatialIndex::new(pts);
        let nbrs: Vec<Point3> = index
            .knn(&pts[i], k + 1)
            .into_iter()
            .filter(|n| n.index != i)
            .map(|n| pts[n.index])
            .collect();
        max_angular_gap(&pts[i], &nbrs).unwrap().to_degrees()
    }

    #[test]
    fn gaps_on_square_patch() {
        let pts = patch(21);
        let interior = 10 * 21 + 10;
        let corner = 0;
        let edge = 10 * 21;
        assert!(gap_deg(&pts, interior, 8) < 91.0);
        assert!((gap_deg(&pts, corner, 8) - 270.0).abs() < 1e-9);
        assert!((gap_deg(&pts, edge, 8) - 180.0).abs() < 1e-9);

        let cloud = PointCloud::new(pts);
        let keys = detect_boundary_keypoints(&cloud, 8, 120.0).unwrap();
        assert!(keys.contains(&corner) && keys.contains(&edge));
        assert!(!keys.contains(&interior));
        // Only the outer ring of the patch should qualify.
        assert!(keys.iter().all(|&i| {
            let (a, b) = (i / 21, i % 21);
            a == 0 || b == 0 || a == 20 || b == 20
        }));
    }

    #[test]
    fn too_few_points_is_an_error() {
        let cloud = PointCloud::new(patch(2));
        assert!(detect_boundary_keypoints(&cloud, 8, 120.0).is_err());
    }

    #[test]
    fn fps_spreads_points() {
        let pts: Vec<Point3> = (0..=100).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let all: Vec<usize> = (0..pts.len()).collect();
        let mut picked = farthest_point_sample(&pts, &all, 3);
        picked.sort();
        assert_eq!(picked, vec![0, 50, 100]);
        assert_eq!(farthest_point_sample(&pts, &all[..5], 10), vec![0, 1, 2, 3, 4]);
    }
}
