use std::collections::HashMap;

use super::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};

pub(crate) type CellKey = (i64, i64, i64);

pub(crate) fn cell_of(p: &Point3, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Groups point indices by cubic cell. Indices within a cell stay ascending.
pub(crate) fn bin_points(points: &[Point3], cell: f64) -> HashMap<CellKey, Vec<usize>> {
    let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(cell_of(p, cell)).or_default().push(i);
    }
    cells
}

/// Keeps one point per occupied cubic cell: the one closest to the centroid
/// of that cell's points (lowest index on ties). Output is in input order.
pub fn grid_subsample(cloud: &PointCloud, cell: f64) -> Result<PointCloud> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::InvalidArgument(format!("grid cell must be positive, got {cell}")));
    }
    let mut keep: Vec<usize> = bin_points(&cloud.points, cell)
        .into_values()
        .map(|members| {
            let c = members.iter().fold(Point3::zeros(), |a, &i| a + cloud.points[i])
                / members.len() as f64;
            *members
                .iter()
                .min_by(|&&a, &&b| {
                    (cloud.points[a] - c)
                        .norm_squared()
                        .total_cmp(&(cloud.points[b] - c).norm_squared())
                        .then(a.cmp(&b))
                })
                .unwrap()
        })
        .collect();
    keep.sort_unstable();
    Ok(cloud.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pc::SemanticClass;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn near_points_share_a_cell() {
        let cloud = PointCloud::new(vec![Point3::new(0.001, 0.001, 0.001), Point3::new(0.011, 0.001, 0.001)]);
        assert_eq!(grid_subsample(&cloud, 0.03).unwrap().len(), 1);
    }

    #[test]
    fn far_points_keep_both() {
        let cloud = PointCloud::new(vec![Point3::zeros(), Point3::new(1.0, 0.0, 0.0)]);
        assert_eq!(grid_subsample(&cloud, 0.03).unwrap().len(), 2);
    }

    #[test]
    fn count_equals_brute_force_binning() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..1000)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let mut occupied = HashSet::new();
        for p in &pts {
            let k = |v: f64| (v / 0.03).floor() as i64;
            occupied.insert((k(p.x), k(p.y), k(p.z)));
        }
        let out = grid_subsample(&PointCloud::new(pts), 0.03).unwrap();
        assert_eq!(out.len(), occupied.len());
    }

    #[test]
    fn labels_follow_the_retained_point() {
        let cloud = PointCloud::new(vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.01, 0.0, 0.0),
            Point3::new(0.02, 0.0, 0.0),
        ])
        .with_labels(vec![SemanticClass::Ground, SemanticClass::Building, SemanticClass::Vegetation])
        .unwrap();
        let out = grid_subsample(&cloud, 0.03).unwrap();
        assert_eq!(out.points, vec![Point3::new(0.01, 0.0, 0.0)]);
        assert_eq!(out.labels.unwrap(), vec![SemanticClass::Building]);
    }

    #[test]
    fn rejects_bad_cell() {
        let cloud = PointCloud::new(vec![Point3::zeros()]);
        assert!(grid_subsample(&cloud, 0.0).is_err());
        assert!(grid_subsample(&cloud, -1.0).is_err());
    }

    #[test]
    fn idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point3> = (0..3000)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()) * 0.5)
            .collect();
        let once = grid_subsample(&PointCloud::new(pts), 0.05).unwrap();
        let twice = grid_subsample(&once, 0.05).unwrap();
        assert_eq!(once, twice);
    }
}
