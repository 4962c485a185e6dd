use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::keypoints::{detect_boundary_keypoints, farthest_point_sample};
use crate::bim::{sample_surface, BimModel, RigidTransform};
use crate::error::{CoarseStageCounts, Error, Result};
use crate::pc::{covariance, sym_eigen3, Aabb, Point3, PointCloud, SpatialIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseParams {
    /// Minimum separation of the two points in a pair (meters).
    pub eta: f64,
    /// Admissible angle between the two pairs of a basis (degrees).
    pub theta: [f64; 2],
    pub angle_match_tol: f64,
    pub distance_match_tol: f64,
    pub coplanarity_eps: f64,
    pub max_candidates: usize,
    pub max_keypoints: usize,
    pub max_bases: usize,
    pub keypoint_k: usize,
    pub angle_gap_deg: f64,
    /// Surface sampling density for pole models (points per m²).
    pub pole_sample_density: f64,
    pub seed: u64,
}

impl Default for CoarseParams {
    fn default() -> Self {
        CoarseParams {
            eta: 5.0,
            theta: [20.0, 160.0],
            angle_match_tol: 1.0,
            distance_match_tol: 0.5,
            coplanarity_eps: 0.01,
            max_candidates: 50_000,
            max_keypoints: 200,
            max_bases: 400,
            keypoint_k: 16,
            angle_gap_deg: 120.0,
            pole_sample_density: 400.0,
            seed: 42,
        }
    }
}

impl CoarseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        if !(self.theta[0] > 0.0 && self.theta[0] < self.theta[1] && self.theta[1] < 180.0) {
            return Err(Error::InvalidArgument("theta must lie inside (0, 180) degrees".into()));
        }
        if !(self.angle_match_tol > 0.0 && self.distance_match_tol > 0.0 && self.coplanarity_eps > 0.0) {
            return Err(Error::InvalidArgument("coarse tolerances must be positive".into()));
        }
        if self.max_candidates == 0 || self.max_keypoints < 4 || self.max_bases == 0 {
            return Err(Error::InvalidArgument("coarse caps are too small".into()));
        }
        Ok(())
    }
}

/// Two point pairs `(p[0], p[1])` and `(p[2], p[3])`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FourPointBasis {
    pub indices: [usize; 4],
    pub pair_lengths: [f64; 2],
    /// Distance between the two pair midpoints.
    pub pair_distance: f64,
    /// Angle between the two pair directions, degrees in [0, 180].
    pub angle_deg: f64,
    pub coplanarity: f64,
}

/// Tetrahedron volume divided by the cube of the largest pairwise distance.
pub fn coplanarity_measure(p: &[Point3; 4]) -> f64 {
    let vol = (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0])).abs() / 6.0;
    let mut l: f64 = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            l = l.max((p[i] - p[j]).norm());
        }
    }
    if l == 0.0 {
        0.0
    } else {
        vol / l.powi(3)
    }
}

fn pair_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

impl FourPointBasis {
    pub fn from_points(indices: [usize; 4], p: &[Point3; 4]) -> Self {
        let u = p[1] - p[0];
        let v = p[3] - p[2];
        FourPointBasis {
            indices,
            pair_lengths: [u.norm(), v.norm()],
            pair_distance: ((p[0] + p[1]) / 2.0 - (p[2] + p[3]) / 2.0).norm(),
            angle_deg: pair_angle_deg(&u, &v),
            coplanarity: coplanarity_measure(p),
        }
    }

    fn admissible(&self, eta: f64, params: &CoarseParams) -> bool {
        self.pair_lengths[0] > eta
            && self.pair_lengths[1] > eta
            && self.pair_distance > eta / 2.0
            && self.angle_deg >= params.theta[0]
            && self.angle_deg <= params.theta[1]
            && self.coplanarity > params.coplanarity_eps
    }

    fn matches(&self, other: &FourPointBasis, params: &CoarseParams) -> bool {
        (self.angle_deg - other.angle_deg).abs() < params.angle_match_tol
            && (self.pair_distance - other.pair_distance).abs() < params.distance_match_tol
    }
}

/// All admissible bases over `points`: both pairs longer than `eta`, pair
/// midpoints more than `eta / 2` apart, inter-pair angle within theta and
/// non-coplanar. Also returns the number of admissible pairs.
pub fn enumerate_bases(points: &[Point3], eta: f64, params: &CoarseParams) -> (usize, Vec<FourPointBasis>) {
    let n = points.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| (points[i] - points[j]).norm() > eta)
        .collect();
    let mut bases = Vec::new();
    for (a, &(i, j)) in pairs.iter().enumerate() {
        for &(k, l) in &pairs[a + 1..] {
            if k == i || k == j || l == i || l == j {
                continue;
            }
            let idx = [i, j, k, l];
            let b = FourPointBasis::from_points(idx, &idx.map(|x| points[x]));
            if b.admissible(eta, params) {
                bases.push(b);
            }
        }
    }
    (pairs.len(), bases)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseResult {
    pub transform: RigidTransform,
    /// Mean nearest-neighbor distance of the moved BIM vertices.
    pub score: f64,
    pub counts: CoarseStageCounts,
    pub evaluated: usize,
}

fn mean_nn_distance(index: &SpatialIndex, t: &RigidTransform, pts: &[Point3]) -> f64 {
    pts.iter()
        .map(|p| index.nearest(&t.apply(p)).map_or(f64::INFINITY, |n| n.distance()))
        .sum::<f64>()
        / pts.len() as f64
}

/// Boundary keypoints of a LiDAR instance, capped by farthest-point
/// subsampling.
pub fn building_keypoints(lidar: &PointCloud, params: &CoarseParams) -> Result<Vec<Point3>> {
    let keys = detect_boundary_keypoints(lidar, params.keypoint_k, params.angle_gap_deg)?;
    Ok(farthest_point_sample(&lidar.points, &keys, params.max_keypoints)
        .into_iter()
        .map(|i| lidar.points[i])
        .collect())
}

/// Four-point congruent-set alignment of a building model onto its LiDAR
/// instance. Keypoints are extracted from `lidar`; candidates are scored
/// against the full instance.
pub fn coarse_align_building(lidar: &PointCloud, bim: &BimModel, params: &CoarseParams) -> Result<CoarseResult> {
    params.validate()?;
    let keypoints = building_keypoints(lidar, params)?;
    let index = SpatialIndex::new(&lidar.points);
    coarse_align_with_keypoints(&keypoints, &index, bim, params)
}

pub fn coarse_align_with_keypoints(
    keypoints: &[Point3],
    lidar_index: &SpatialIndex,
    bim: &BimModel,
    params: &CoarseParams,
) -> Result<CoarseResult> {
    let verts = &bim.vertices;
    let diag = Aabb::from_points(verts).map_or(0.0, |b| b.diagonal());
    let eta = params.eta.min(0.3 * diag);
    let (bim_pairs, mut bases) = enumerate_bases(verts, eta, params);
    let mut counts = CoarseStageCounts {
        lidar_keypoints: keypoints.len(),
        bim_points: verts.len(),
        bim_pairs,
        bim_bases: bases.len(),
        matched_candidates: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    if bases.len() > params.max_bases {
        let mut keep = sample(&mut rng, bases.len(), params.max_bases).into_vec();
        keep.sort_unstable();
        bases = keep.into_iter().map(|i| bases[i]).collect();
    }

    let n = keypoints.len();
    let dist: Vec<f64> = (0..n * n)
        .map(|x| (keypoints[x / n] - keypoints[x % n]).norm())
        .collect();
    let d = |i: usize, j: usize| dist[i * n + j];
    let mut ordered_pairs: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| (d(i, j), i, j))
        .filter(|p| p.0 > eta)
        .collect();
    ordered_pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    let tol = params.distance_match_tol;
    let candidates: Vec<(usize, [usize; 4])> = bases
        .par_iter()
        .enumerate()
        .flat_map_iter(|(bi, basis)| {
            let [a, b, c, e] = basis.indices.map(|x| verts[x]);
            let (ab, ce) = ((b - a).norm(), (e - c).norm());
            let (ac, bc, ae, be) = ((c - a).norm(), (c - b).norm(), (e - a).norm(), (e - b).norm());
            let lo = ordered_pairs.partition_point(|p| p.0 < ab - tol);
            let mut out = Vec::new();
            for &(len, p, q) in &ordered_pairs[lo..] {
                if len > ab + tol {
                    break;
                }
                for r in 0..n {
                    if r == p || r == q || (d(p, r) - ac).abs() >= tol || (d(q, r) - bc).abs() >= tol {
                        continue;
                    }
                    for s in 0..n {
                        if s == p
                            || s == q
                            || s == r
                            || (d(r, s) - ce).abs() >= tol
                            || (d(p, s) - ae).abs() >= tol
                            || (d(q, s) - be).abs() >= tol
                        {
                            continue;
                        }
                        let idx = [p, q, r, s];
                        let lb = FourPointBasis::from_points(idx, &idx.map(|x| keypoints[x]));
                        if lb.admissible(eta, params) && basis.matches(&lb, params) {
                            out.push((bi, idx));
                        }
                    }
                }
            }
            out
        })
        .collect();
    counts.matched_candidates = candidates.len();
    if candidates.is_empty() {
        return Err(Error::CoarseAlignmentFailed(counts));
    }
    let chosen: Vec<usize> = if candidates.len() > params.max_candidates {
        let mut keep = sample(&mut rng, candidates.len(), params.max_candidates).into_vec();
        keep.sort_unstable();
        keep
    } else {
        (0..candidates.len()).collect()
    };

    let best = chosen
        .par_iter()
        .filter_map(|&ci| {
            let (bi, lidx) = candidates[ci];
            let src = bases[bi].indices.map(|x| verts[x]);
            let dst = lidx.map(|x| keypoints[x]);
            let t = RigidTransform::fit_points(&src, &dst)?;
            Some((mean_nn_distance(lidar_index, &t, verts), ci, t))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .ok_or_else(|| Error::CoarseAlignmentFailed(counts.clone()))?;
    Ok(CoarseResult {
        transform: best.2,
        score: best.0,
        counts,
        evaluated: chosen.len(),
    })
}

fn principal_axes(points: &[Point3]) -> (Point3, Matrix3<f64>, [f64; 3]) {
    let (mean, cov) = covariance(points);
    let eig = sym_eigen3(&cov);
    (mean, eig.vectors, eig.values)
}

/// Centroid plus principal-axis alignment of a pole model. The four proper
/// sign combinations are scored by mean nearest-neighbor residual; when the
/// secondary axes are not well separated, a roll search about the main axis
/// adds further candidates.
pub fn coarse_align_pole(lidar: &PointCloud, bim: &BimModel, params: &CoarseParams) -> Result<CoarseResult> {
    if lidar.len() < 3 {
        return Err(Error::InvalidArgument("pole alignment needs at least 3 LiDAR points".into()));
    }
    let samples = sample_surface(bim, params.pole_sample_density, params.seed)?.cloud.points;
    let model: Vec<Point3> = if samples.len() >= 3 { samples } else { bim.vertices.clone() };
    let (cl, vl, ll) = principal_axes(&lidar.points);
    let (cb, vb, lb) = principal_axes(&model);
    let index = SpatialIndex::new(&lidar.points);
    let step = model.len().div_ceil(2000).max(1);
    let probe: Vec<Point3> = model.iter().step_by(step).copied().collect();

    let make = |r: Matrix3<f64>| RigidTransform {
        rotation: r,
        translation: cl - r * cb,
    };
    let mut cands: Vec<RigidTransform> = Vec::new();
    let handed = vl.determinant() * vb.determinant();
    for (s0, s1) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let s2 = s0 * s1 * handed.signum();
        let s = Matrix3::from_diagonal(&Vector3::new(s0, s1, s2));
        cands.push(make(crate::bim::nearest_rotation(&(vl * s * vb.transpose()))));
    }
    let loose = |l: [f64; 3]| l[0] <= 0.0 || l[1] <= 1e-6 * l[0] || (l[1] - l[2]) < 0.1 * l[1];
    if loose(ll) || loose(lb) {
        let axis_l = vl.column(0).into_owned();
        let axis_b = vb.column(0).into_owned();
        for flip in [1.0, -1.0] {
            let base = Rotation3::rotation_between(&axis_b, &(axis_l * flip))
                .unwrap_or_else(|| Rotation3::from_axis_angle(&orthogonal_axis(&axis_b), std::f64::consts::PI));
            for k in 0..72 {
                let roll = Rotation3::from_axis_angle(&Unit::new_normalize(axis_l), (k as f64 * 5.0).to_radians());
                cands.push(make((roll * base).into_inner()));
            }
        }
    }
    let best = cands
        .into_iter()
        .enumerate()
        .map(|(i, t)| (mean_nn_distance(&index, &t, &probe), i, t))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .unwrap();
    Ok(CoarseResult {
        transform: best.2,
        score: best.0,
        counts: CoarseStageCounts {
            lidar_keypoints: lidar.len(),
            bim_points: model.len(),
            ..Default::default()
        },
        evaluated: best.1 + 1,
    })
}

fn orthogonal_axis(v: &Vector3<f64>) -> Unit<Vector3<f64>> {
    let helper = if v.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    Unit::new_normalize(v.cross(&helper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bim::ObjectKind;

    fn l_building() -> BimModel {
        let foot = [(0.0, 0.0), (14.0, 0.0), (14.0, 6.0), (6.0, 6.0), (6.0, 12.0), (0.0, 12.0)];
        let mut vertices: Vec<Point3> = foot.iter().map(|&(x, y)| Point3::new(x, y, 0.0)).collect();
        vertices.extend(foot.iter().map(|&(x, y)| Point3::new(x, y, 9.0)));
        let mut faces = Vec::new();
        for i in 0..6 {
            let j = (i + 1) % 6;
            faces.push([i, j, j + 6]);
            faces.push([i, j + 6, i + 6]);
        }
        for (a, b, c) in [(0, 1, 2), (0, 2, 3), (0, 3, 5), (3, 4, 5)] {
            faces.push([a, c, b]);
            faces.push([a + 6, b + 6, c + 6]);
        }
        BimModel::new("l", ObjectKind::Building, vertices, faces).unwrap()
    }

    #[test]
    fn coplanarity_of_known_shapes() {
        let flat = [Point3::zeros(), Point3::x(), Point3::y(), Point3::new(1.0, 1.0, 0.0)];
        assert_eq!(coplanarity_measure(&flat), 0.0);
        let tet = [Point3::zeros(), Point3::x(), Point3::y(), Point3::z()];
        assert!((coplanarity_measure(&tet) - 1.0 / 6.0 / 2f64.sqrt().powi(3)).abs() < 1e-12);
    }

    #[test]
    fn enumerated_bases_are_admissible() {
        let b = l_building();
        let params = CoarseParams::default();
        let (_, bases) = enumerate_bases(&b.vertices, 5.0, &params);
        assert!(!bases.is_empty());
        for basis in &bases {
            assert!(basis.coplanarity > params.coplanarity_eps);
            assert!(basis.pair_lengths.iter().all(|&l| l > 5.0));
            let mut idx = basis.indices.to_vec();
            idx.sort();
            idx.dedup();
            assert_eq!(idx.len(), 4);
        }
    }

    #[test]
    fn self_alignment_is_identity() {
        let b = l_building();
        let index = SpatialIndex::new(&b.vertices);
        let r = coarse_align_with_keypoints(&b.vertices, &index, &b, &CoarseParams::default()).unwrap();
        let (da, dt) = r.transform.difference(&RigidTransform::identity());
        assert!(da < 1e-6 && dt < 1e-6, "{da} {dt}");
        assert!(r.score < 1e-9);
    }

    #[test]
    fn no_keypoints_reports_stage_counts() {
        let b = l_building();
        let kp = vec![Point3::zeros(); 4];
        let index = SpatialIndex::new(&kp);
        match coarse_align_with_keypoints(&kp, &index, &b, &CoarseParams::default()) {
            Err(Error::CoarseAlignmentFailed(c)) => {
                assert_eq!(c.lidar_keypoints, 4);
                assert_eq!(c.bim_points, 12);
                assert!(c.bim_bases > 0);
                assert_eq!(c.matched_candidates, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
