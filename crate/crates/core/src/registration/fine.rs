use nalgebra::{Matrix6, Rotation3, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bim::{closest_point_on_triangle, sample_surface, BimModel, RigidTransform};
use crate::error::{Error, Result};
use crate::pc::{Point3, PointCloud, SpatialIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineParams {
    pub icp_max_iterations: usize,
    /// Weight of the reverse residuals, LiDAR point to the nearest model
    /// face plane, added to the refinement cost; 0 disables them.
    pub surface_weight: f64,
    pub icp_convergence: f64,
    pub correspondence_max_distance: f64,
    pub lm_max_iterations: usize,
    pub lm_lambda_init: f64,
    pub lm_tolerance: f64,
    /// Nearest LiDAR points searched for a non-collinear plane triple.
    pub plane_candidates: usize,
    /// Surface samples per m² added to the model vertices for refinement;
    /// 0 uses vertices only.
    pub model_sample_density: f64,
    /// Size of the model surface sample that LiDAR points are matched to
    /// during ICP.
    pub icp_model_points: usize,
    /// A residual is kept only when its LiDAR plane lies within this angle
    /// of a model face normal at that point; 90 disables the check.
    pub normal_tolerance_deg: f64,
    pub seed: u64,
}

impl Default for FineParams {
    fn default() -> Self {
        FineParams {
            icp_max_iterations: 50,
            surface_weight: 1.0,
            icp_convergence: 1e-6,
            correspondence_max_distance: 1.0,
            lm_max_iterations: 100,
            lm_lambda_init: 1e-3,
            lm_tolerance: 1e-9,
            plane_candidates: 10,
            model_sample_density: 2.0,
            icp_model_points: 20_000,
            normal_tolerance_deg: 30.0,
            seed: 42,
        }
    }
}

impl FineParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.icp_convergence,
            self.correspondence_max_distance,
            self.lm_lambda_init,
            self.lm_tolerance,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.icp_max_iterations == 0 || self.lm_max_iterations == 0 {
            return Err(Error::InvalidArgument("fine registration parameters must be positive".into()));
        }
        if !(self.surface_weight >= 0.0) || !self.surface_weight.is_finite() {
            return Err(Error::InvalidArgument("surface_weight must be >= 0".into()));
        }
        if !(self.normal_tolerance_deg > 0.0 && self.normal_tolerance_deg <= 90.0) {
            return Err(Error::InvalidArgument("normal_tolerance_deg must be in (0, 90]".into()));
        }
        if self.plane_candidates < 3 || !(self.model_sample_density >= 0.0) || self.icp_model_points < 3 {
            return Err(Error::InvalidArgument("plane_candidates must be >= 3 and density >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    /// Mean correspondence distance at the last iteration.
    pub mean_residual: f64,
    pub correspondences: usize,
}

/// Point-to-point ICP of `moving` onto `fixed`, starting from `seed`.
pub fn icp_point_to_point(
    moving: &PointCloud,
    fixed: &PointCloud,
    seed: &RigidTransform,
    params: &FineParams,
) -> Result<IcpResult> {
    params.validate()?;
    seed.validate()?;
    let index = SpatialIndex::new(&fixed.points);
    let max2 = params.correspondence_max_distance.powi(2);
    let mut t = *seed;
    let mut prev = f64::INFINITY;
    let mut mean = f64::INFINITY;
    let mut count = 0;
    for iter in 1..=params.icp_max_iterations {
        let pairs: Vec<(usize, usize, f64)> = moving
            .points
            .par_iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let n = index.nearest(&t.apply(p))?;
                (n.dist2 <= max2).then(|| (i, n.index, n.dist2.sqrt()))
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::RegistrationDiverged {
                iterations: iter,
                last: Box::new(t),
            });
        }
        count = pairs.len();
        mean = pairs.iter().map(|p| p.2).sum::<f64>() / count as f64;
        if mean < params.icp_convergence || (prev - mean).abs() < params.icp_convergence {
            return Ok(IcpResult {
                transform: t,
                iterations: iter,
                mean_residual: mean,
                correspondences: count,
            });
        }
        prev = mean;
        let src: Vec<Point3> = pairs.iter().map(|p| moving.points[p.0]).collect();
        let dst: Vec<Point3> = pairs.iter().map(|p| fixed.points[p.1]).collect();
        if let Some(next) = RigidTransform::fit_points(&src, &dst) {
            t = next.orthonormalized();
        } else {
            t = RigidTransform::from_translation(
                dst.iter().zip(&src).map(|(d, s)| d - t.apply(s)).sum::<Vector3<f64>>() / src.len() as f64,
            )
            .compose(&t);
        }
    }
    Ok(IcpResult {
        transform: t,
        iterations: params.icp_max_iterations,
        mean_residual: mean,
        correspondences: count,
    })
}

/// Triangle area over the squared longest side below 1e-6.
pub fn is_collinear(q1: &Point3, q2: &Point3, q3: &Point3) -> bool {
    let area = (q2 - q1).cross(&(q3 - q1)).norm() / 2.0;
    let longest = (q2 - q1).norm().max((q3 - q1).norm()).max((q3 - q2).norm());
    longest == 0.0 || area / (longest * longest) < 1e-6
}

/// Distance from `p` to the plane through three points: the scalar triple
/// product over the magnitude of the plane normal.
pub fn point_to_plane_distance(p: &Point3, q1: &Point3, q2: &Point3, q3: &Point3) -> Result<f64> {
    if is_collinear(q1, q2, q3) {
        return Err(Error::DegeneratePlane);
    }
    let n = (q2 - q1).cross(&(q3 - q1));
    Ok((p - q1).dot(&n).abs() / n.norm())
}

/// The first non-collinear triple, in lexicographic order, among the
/// `cap` nearest points within `max_distance` of `query`.
pub fn select_plane_triple(
    index: &SpatialIndex,
    query: &Point3,
    max_distance: f64,
    cap: usize,
) -> Option<[usize; 3]> {
    let nbrs: Vec<usize> = index
        .knn(query, cap)
        .into_iter()
        .filter(|n| n.dist2 <= max_distance * max_distance)
        .map(|n| n.index)
        .collect();
    let m = nbrs.len();
    for a in 0..m {
        for b in a + 1..m {
            for c in b + 1..m {
                let t = [nbrs[a], nbrs[b], nbrs[c]];
                if !is_collinear(index.point(t[0]), index.point(t[1]), index.point(t[2])) {
                    return Some(t);
                }
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    /// Index into the model point list (vertices first, then samples).
    pub bim_point: usize,
    pub triple: [usize; 3],
    /// Signed distance along the unit plane normal.
    pub distance: f64,
    #[serde(skip)]
    pub normal: Vector3<f64>,
    #[serde(skip)]
    pub moved: Point3,
}

/// Residual of `x` after the pose increment `delta = (ω, t)` applied about
/// `center`: `(R(ω)(x − c) + c + t − q1) · n`.
pub fn perturbed_residual(x: &Point3, center: &Point3, q1: &Point3, normal: &Vector3<f64>, delta: &[f64; 6]) -> f64 {
    let rot = Rotation3::new(Vector3::new(delta[0], delta[1], delta[2]));
    let moved = rot * (x - center) + center + Vector3::new(delta[3], delta[4], delta[5]);
    (moved - q1).dot(normal)
}

/// Analytic derivative of [`perturbed_residual`] at zero increment.
pub fn residual_jacobian(x: &Point3, center: &Point3, normal: &Vector3<f64>) -> [f64; 6] {
    let r = (x - center).cross(normal);
    [r.x, r.y, r.z, normal.x, normal.y, normal.z]
}

fn apply_increment(t: &RigidTransform, center: &Point3, delta: &Vector6<f64>) -> RigidTransform {
    let rot = Rotation3::new(Vector3::new(delta[0], delta[1], delta[2])).into_inner();
    let step = RigidTransform {
        rotation: rot,
        translation: center - rot * center + Vector3::new(delta[3], delta[4], delta[5]),
    };
    step.compose(t).orthonormalized()
}

fn build_residuals(
    model: &RefinementModel,
    index: &SpatialIndex,
    t: &RigidTransform,
    params: &FineParams,
) -> Vec<Residual> {
    let min_cos = params.normal_tolerance_deg.to_radians().cos();
    model
        .points
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let x = t.apply(p);
            let tri = select_plane_triple(index, &x, params.correspondence_max_distance, params.plane_candidates)?;
            let [q1, q2, q3] = tri.map(|k| *index.point(k));
            let normal = (q2 - q1).cross(&(q3 - q1)).normalize();
            let normals = model.normals.get(i).map_or(&[][..], |n| n.as_slice());
            if params.normal_tolerance_deg < 90.0
                && !normals.is_empty()
                && !normals.iter().any(|n| (t.rotation * n).dot(&normal).abs() >= min_cos)
            {
                return None;
            }
            let distance = (x - q1).dot(&normal);
            (distance.abs() <= params.correspondence_max_distance).then_some(Residual {
                bim_point: i,
                triple: tri,
                distance,
                normal,
                moved: x,
            })
        })
        .collect()
}

fn cost_of(res: &[Residual]) -> f64 {
    0.5 * res.iter().map(|r| r.distance * r.distance).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LmStep {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub residuals: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineResult {
    pub transform: RigidTransform,
    /// Root mean square of the retained point-to-plane distances.
    pub rmse: f64,
    pub converged: bool,
    pub residuals: usize,
    pub trace: Vec<LmStep>,
}

/// Model points for refinement with the normals of the faces they lie on.
#[derive(Debug, Clone, Default)]
pub struct RefinementModel {
    pub points: Vec<Point3>,
    /// Per point; an empty list skips the normal check for that point.
    pub normals: Vec<Vec<Vector3<f64>>>,
    /// Dense model-frame samples for the reverse residuals.
    pub surface: Option<SurfaceTerm>,
}

impl RefinementModel {
    pub fn from_points(points: Vec<Point3>) -> Self {
        RefinementModel {
            normals: vec![Vec::new(); points.len()],
            points,
            surface: None,
        }
    }
}

/// Dense model surface samples that locate the model face nearest to a
/// LiDAR point.
#[derive(Debug, Clone)]
pub struct SurfaceTerm {
    index: SpatialIndex,
    /// Source face of each sample.
    faces: Vec<usize>,
    triangles: Vec<[Point3; 3]>,
    normals: Vec<Vector3<f64>>,
    /// Mean distance between neighboring samples.
    spacing: f64,
}

impl SurfaceTerm {
    /// About `count` area-uniform samples over the faces with nonzero area.
    pub fn sample(bim: &BimModel, count: usize, seed: u64) -> Result<Self> {
        let density = count as f64 / bim.surface_area().max(1e-9);
        let s = sample_surface(bim, density, seed)?;
        Ok(SurfaceTerm {
            index: SpatialIndex::new(&s.cloud.points),
            faces: s.faces,
            triangles: (0..bim.faces.len()).map(|f| bim.triangle(f)).collect(),
            normals: (0..bim.faces.len()).map(|f| bim.face_normal(f).unwrap_or_else(Vector3::z)).collect(),
            spacing: density.max(1e-12).sqrt().recip(),
        })
    }

    /// Closest point to `y` over the faces sampled near it, and the unit
    /// direction from it to `y`. Faces are gathered from the samples within
    /// a few sample spacings of the nearest one.
    fn closest(&self, y: &Point3, max2: f64) -> Option<(Point3, Vector3<f64>)> {
        let nearest = self.index.nearest(y)?;
        if nearest.dist2 > max2 {
            return None;
        }
        let radius = nearest.dist2.sqrt() + SURFACE_SEARCH_SPACINGS * self.spacing;
        let mut faces: Vec<usize> = self.index.within_radius(y, radius).iter().map(|n| self.faces[n.index]).collect();
        faces.sort_unstable();
        faces.dedup();
        let (c, face) = faces
            .into_iter()
            .map(|f| (closest_point_on_triangle(y, &self.triangles[f]), f))
            .min_by(|a, b| (y - a.0).norm_squared().total_cmp(&(y - b.0).norm_squared()))?;
        Some((c, (y - c).try_normalize(1e-12).unwrap_or(self.normals[face])))
    }
}

/// Search radius beyond the nearest sample, in mean sample spacings.
const SURFACE_SEARCH_SPACINGS: f64 = 3.0;

/// All vertices, then surface samples, plus the dense reverse-residual
/// samples when `surface_weight` is positive.
pub fn refinement_points(bim: &BimModel, params: &FineParams) -> Result<RefinementModel> {
    let mut normals = vec![Vec::new(); bim.vertices.len()];
    for (f, face) in bim.faces.iter().enumerate() {
        if let Some(n) = bim.face_normal(f) {
            for &v in face {
                normals[v].push(n);
            }
        }
    }
    let mut model = RefinementModel {
        points: bim.vertices.clone(),
        normals,
        surface: None,
    };
    if params.surface_weight > 0.0 {
        model.surface = Some(SurfaceTerm::sample(bim, params.icp_model_points, params.seed)?);
    }
    if params.model_sample_density > 0.0 {
        let s = sample_surface(bim, params.model_sample_density, params.seed)?;
        for (p, f) in s.cloud.points.into_iter().zip(s.faces) {
            model.points.push(p);
            model.normals.push(bim.face_normal(f).into_iter().collect());
        }
    }
    Ok(model)
}

/// Levenberg–Marquardt minimization of half the summed squared
/// point-to-plane distances, rebuilding correspondences after every step.
pub fn refine_point_to_plane(
    bim: &BimModel,
    lidar: &PointCloud,
    seed: &RigidTransform,
    params: &FineParams,
) -> Result<FineResult> {
    params.validate()?;
    let model = refinement_points(bim, params)?;
    let index = SpatialIndex::new(&lidar.points);
    refine_model_points(&model, &index, seed, params)
}

pub fn refine_model_points(
    model: &RefinementModel,
    index: &SpatialIndex,
    seed: &RigidTransform,
    params: &FineParams,
) -> Result<FineResult> {
    seed.validate()?;
    let mut t = *seed;
    let mut res = build_residuals(model, index, &t, params);
    if res.len() < 6 {
        return Err(Error::Underconstrained(res.len()));
    }
    let mut surf = surface_residuals(model, index, &t, params);
    let mut cost = total_cost(&res, &surf, params.surface_weight);
    let mut lambda = params.lm_lambda_init;
    let mut converged = false;
    let mut trace = Vec::new();
    for iteration in 1..=params.lm_max_iterations {
        let center = res.iter().map(|r| r.moved).sum::<Point3>() / res.len() as f64;
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for r in &res {
            let j = Vector6::from(residual_jacobian(&r.moved, &center, &r.normal));
            h += j * j.transpose();
            g += j * r.distance;
        }
        for (p, n, r) in &surf {
            let j = -Vector6::from(residual_jacobian(p, &center, n));
            h += j * j.transpose() * params.surface_weight;
            g += j * (*r * params.surface_weight);
        }
        let mut a = h;
        for k in 0..6 {
            a[(k, k)] += lambda * h[(k, k)].max(1e-12);
        }
        let Some(chol) = a.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let delta = -chol.solve(&g);
        let candidate = apply_increment(&t, &center, &delta);
        let new_res = build_residuals(model, index, &candidate, params);
        let new_surf = surface_residuals(model, index, &candidate, params);
        let new_cost = total_cost(&new_res, &new_surf, params.surface_weight);
        let accepted = new_res.len() >= 6 && new_cost <= cost;
        trace.push(LmStep {
            iteration,
            cost: if accepted { new_cost } else { cost },
            lambda,
            residuals: if accepted { new_res.len() } else { res.len() },
            accepted,
        });
        if accepted {
            let gain = cost - new_cost;
            t = candidate;
            res = new_res;
            surf = new_surf;
            cost = new_cost;
            lambda = (lambda / 10.0).max(1e-12);
            if gain < params.lm_tolerance {
                converged = true;
                break;
            }
        } else {
            if (new_cost - cost).abs() < params.lm_tolerance && new_res.len() >= 6 {
                converged = true;
                break;
            }
            lambda *= 10.0;
        }
    }
    let rmse = (2.0 * cost_of(&res) / res.len() as f64).sqrt();
    Ok(FineResult {
        transform: t,
        rmse,
        converged,
        residuals: res.len(),
        trace,
    })
}

/// For each LiDAR point with a model sample within the correspondence
/// distance: the point, the direction from the closest point on that
/// sample's face in the LiDAR frame, and the distance along it.
fn surface_residuals(
    model: &RefinementModel,
    lidar: &SpatialIndex,
    t: &RigidTransform,
    params: &FineParams,
) -> Vec<(Point3, Vector3<f64>, f64)> {
    let Some(surface) = model.surface.as_ref().filter(|_| params.surface_weight > 0.0) else {
        return Vec::new();
    };
    let inverse = t.inverse();
    let max2 = params.correspondence_max_distance.powi(2);
    (0..lidar.len())
        .into_par_iter()
        .filter_map(|k| {
            let p = *lidar.point(k);
            let y = inverse.apply(&p);
            let (c, u) = surface.closest(&y, max2)?;
            Some((p, t.rotation * u, (y - c).dot(&u)))
        })
        .collect()
}

fn total_cost(res: &[Residual], surf: &[(Point3, Vector3<f64>, f64)], weight: f64) -> f64 {
    cost_of(res) + 0.5 * weight * surf.iter().map(|s| s.2 * s.2).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_distance_examples() {
        let q = [Point3::zeros(), Point3::x(), Point3::y()];
        assert_eq!(point_to_plane_distance(&Point3::z(), &q[0], &q[1], &q[2]).unwrap(), 1.0);
        assert_eq!(point_to_plane_distance(&Point3::new(0.2, 0.3, 0.0), &q[0], &q[1], &q[2]).unwrap(), 0.0);
        let plane = [Point3::new(1.0, 2.0, 1.0), Point3::new(-3.0, 0.5, 1.0), Point3::new(4.0, -2.0, 1.0)];
        let d = point_to_plane_distance(&Point3::new(0.3, 0.4, 2.5), &plane[0], &plane[1], &plane[2]).unwrap();
        assert!((d - 1.5).abs() < 1e-12);
        assert!(matches!(
            point_to_plane_distance(&Point3::z(), &q[0], &q[1], &(q[1] * 2.0)),
            Err(Error::DegeneratePlane)
        ));
    }

    #[test]
    fn plane_distance_symmetries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mut v = || Point3::new(rng.random::<f64>(), rng.random(), rng.random()) * 4.0;
            let (p, a, b, c, shift) = (v(), v(), v(), v(), v());
            let d = point_to_plane_distance(&p, &a, &b, &c).unwrap();
            assert!((d - point_to_plane_distance(&p, &a, &c, &b).unwrap()).abs() < 1e-9);
            let moved = point_to_plane_distance(&(p + shift), &(a + shift), &(b + shift), &(c + shift)).unwrap();
            assert!((d - moved).abs() < 1e-9);
        }
    }

    fn grid_cloud(shift: Vector3<f64>) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
                pts.push(Point3::new(x, y, 0.3 * (x * 2.0).sin() + 0.2 * y * y) + shift);
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn icp_identity_in_one_iteration() {
        let c = grid_cloud(Vector3::zeros());
        let r = icp_point_to_point(&c, &c, &RigidTransform::identity(), &FineParams::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.transform, RigidTransform::identity());
    }

    #[test]
    fn icp_recovers_small_offset() {
        let fixed = grid_cloud(Vector3::zeros());
        let moving = grid_cloud(Vector3::new(0.0, 0.0, 0.1));
        let r = icp_point_to_point(&moving, &fixed, &RigidTransform::identity(), &FineParams::default()).unwrap();
        let (da, dt) = r.transform.difference(&RigidTransform::from_translation(Vector3::new(0.0, 0.0, -0.1)));
        assert!(da < 1e-3 && dt < 1e-4, "{da} {dt} {:?}", r.transform);
    }

    #[test]
    fn icp_without_overlap_diverges() {
        let fixed = grid_cloud(Vector3::zeros());
        let moving = grid_cloud(Vector3::new(100.0, 0.0, 0.0));
        assert!(matches!(
            icp_point_to_point(&moving, &fixed, &RigidTransform::identity(), &FineParams::default()),
            Err(Error::RegistrationDiverged { iterations: 1, .. })
        ));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut v = |s: f64| Point3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * s;
            let (x, c, q1) = (v(20.0), v(20.0), v(20.0));
            let n = v(1.0).normalize();
            let analytic = residual_jacobian(&x, &c, &n);
            for k in 0..6 {
                let mut plus = [0.0; 6];
                let mut minus = [0.0; 6];
                plus[k] = 1e-6;
                minus[k] = -1e-6;
                let numeric = (perturbed_residual(&x, &c, &q1, &n, &plus) - perturbed_residual(&x, &c, &q1, &n, &minus)) / 2e-6;
                assert!((numeric - analytic[k]).abs() <= 1e-4 * analytic[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn refinement_on_exact_copy_is_stationary() {
        let c = grid_cloud(Vector3::zeros());
        let index = SpatialIndex::new(&c.points);
        let model = RefinementModel::from_points(c.points.iter().step_by(7).copied().collect());
        let r = refine_model_points(&model, &index, &RigidTransform::identity(), &FineParams::default()).unwrap();
        let (da, dt) = r.transform.difference(&RigidTransform::identity());
        assert!(da < 1e-8 && dt < 1e-8);
        assert!(r.rmse < 1e-9 && r.converged);
    }

    #[test]
    fn too_few_residuals_is_underconstrained() {
        let c = grid_cloud(Vector3::zeros());
        let index = SpatialIndex::new(&c.points);
        let model = RefinementModel::from_points(vec![Point3::zeros(); 3]);
        assert!(matches!(
            refine_model_points(&model, &index, &RigidTransform::identity(), &FineParams::default()),
            Err(Error::Underconstrained(3))
        ));
    }

    #[test]
    fn reverse_residuals_recover_height_of_walls_only_scan() {
        let model = crate::synth::l_shaped_building("b");
        let truth = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.15));
        let lidar = crate::synth::sample_facades(&model, &truth, 100.0, 0.0, 1).unwrap();
        let seed = RigidTransform::identity();
        let with = refine_point_to_plane(&model, &lidar, &seed, &FineParams::default()).unwrap();
        let params = FineParams { surface_weight: 0.0, ..Default::default() };
        let without = refine_point_to_plane(&model, &lidar, &seed, &params).unwrap();
        let (with, without) = (with.transform.difference(&truth).1, without.transform.difference(&truth).1);
        assert!(with < 0.01 && without > 3.0 * with, "{with} {without}");
    }
}
