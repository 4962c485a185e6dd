//! Rule-based training-sample labeling.
//!
//! Ground comes from the cloth filter. Non-ground points are split into
//! connected components; components passing the line-fit tests become
//! pole-like, large components are labeled building or vegetation by point
//! roughness, and labels are finally grown through 2 m voxels whose
//! neighborhood agrees.

use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ground::{filter_ground, GroundFilterParams, GroundSplit};
use crate::pc::grid::{cell_of, CellKey};
use crate::pc::{
    connected_components_indexed, covariance, eigen_features, sym_eigen3, Aabb, Neighborhood, Point3,
    PointCloud, SemanticClass, SpatialIndex,
};

/// A 3D line through `point` along the unit vector `direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line3 {
    pub point: Point3,
    pub direction: Vector3<f64>,
}

impl Line3 {
    pub fn distance(&self, p: &Point3) -> f64 {
        (p - self.point).cross(&self.direction).norm()
    }
}

/// Total-least-squares line: through the centroid, along the principal axis.
/// The direction's largest-magnitude component is made positive.
pub fn fit_line_3d(points: &[Point3]) -> Result<Line3> {
    if points.len() < 2 {
        return Err(Error::DegenerateLine);
    }
    let (mean, cov) = covariance(points);
    if cov.trace() <= 0.0 {
        return Err(Error::DegenerateLine);
    }
    let mut direction = sym_eigen3(&cov).vectors.column(0).into_owned();
    if direction[direction.iamax()] < 0.0 {
        direction = -direction;
    }
    Ok(Line3 { point: mean, direction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoleRuleParams {
    pub streetlight_min_height: f64,
    /// Body points lie at least this far below the cluster top.
    pub streetlight_body_exclusion: f64,
    pub streetlight_line_tol: f64,
    pub streetlight_proj_tol: f64,
    pub signal_height_range: [f64; 2],
    pub signal_body_exclusion: f64,
    pub signal_line_tol: f64,
    pub inlier_fraction: f64,
}

impl Default for PoleRuleParams {
    fn default() -> Self {
        PoleRuleParams {
            streetlight_min_height: 5.0,
            streetlight_body_exclusion: 1.0,
            streetlight_line_tol: 1.0,
            streetlight_proj_tol: 0.5,
            signal_height_range: [3.0, 4.0],
            signal_body_exclusion: 2.0,
            signal_line_tol: 0.2,
            inlier_fraction: 0.9,
        }
    }
}

impl PoleRuleParams {
    pub fn validate(&self) -> Result<()> {
        let tols = [
            self.streetlight_body_exclusion,
            self.streetlight_line_tol,
            self.streetlight_proj_tol,
            self.signal_body_exclusion,
            self.signal_line_tol,
        ];
        if tols.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidArgument("pole rule tolerances must be positive".into()));
        }
        if !(self.inlier_fraction > 0.0 && self.inlier_fraction <= 1.0) {
            return Err(Error::InvalidArgument("inlier_fraction must be in (0, 1]".into()));
        }
        if self.signal_height_range[0] > self.signal_height_range[1] {
            return Err(Error::InvalidArgument("signal height range is reversed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoleClass {
    Streetlight,
    TrafficSignal,
    NotPole,
}

fn inlier_fraction(points: &[Point3], line: &Line3, tol: f64) -> f64 {
    points.iter().filter(|p| line.distance(p) <= tol).count() as f64 / points.len() as f64
}

fn below_top(points: &[Point3], top: f64, gap: f64) -> Vec<Point3> {
    points.iter().filter(|p| p.z <= top - gap).copied().collect()
}

/// Line-fit tests for streetlights (tall, straight body, straight footprint)
/// and traffic signal poles (3–4 m, straight lower body).
pub fn classify_pole_cluster(points: &[Point3], params: &PoleRuleParams) -> PoleClass {
    let Some(bb) = Aabb::from_points(points) else {
        return PoleClass::NotPole;
    };
    let height = bb.max.z - bb.min.z;
    let top = bb.max.z;
    if height > params.streetlight_min_height {
        let body = below_top(points, top, params.streetlight_body_exclusion);
        let Ok(line) = fit_line_3d(&body) else {
            return PoleClass::NotPole;
        };
        if inlier_fraction(&body, &line, params.streetlight_line_tol) < params.inlier_fraction {
            return PoleClass::NotPole;
        }
        let flat: Vec<Point3> = points.iter().map(|p| Point3::new(p.x, p.y, 0.0)).collect();
        let Ok(foot) = fit_line_3d(&flat) else {
            return PoleClass::NotPole;
        };
        if inlier_fraction(&flat, &foot, params.streetlight_proj_tol) >= params.inlier_fraction {
            return PoleClass::Streetlight;
        }
    } else if (params.signal_height_range[0]..=params.signal_height_range[1]).contains(&height) {
        let body = below_top(points, top, params.signal_body_exclusion);
        let Ok(line) = fit_line_3d(&body) else {
            return PoleClass::NotPole;
        };
        if inlier_fraction(&body, &line, params.signal_line_tol) >= params.inlier_fraction {
            return PoleClass::TrafficSignal;
        }
    }
    PoleClass::NotPole
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoughnessRuleParams {
    pub building_max_roughness: f64,
    pub vegetation_min_roughness: f64,
    pub neighborhood_k: usize,
    /// Large-cluster gate: minimum point count.
    pub large_min_points: usize,
    /// Large-cluster gate: minimum bounding-box diagonal in meters.
    pub large_min_diagonal: f64,
    /// Fraction of a point's `neighborhood_k` neighbors that must carry the
    /// same roughness label for the label to be kept; 0 disables the check.
    pub min_consensus: f64,
}

impl Default for RoughnessRuleParams {
    fn default() -> Self {
        RoughnessRuleParams {
            building_max_roughness: 0.1,
            vegetation_min_roughness: 0.15,
            neighborhood_k: 20,
            large_min_points: 500,
            large_min_diagonal: 4.0,
            min_consensus: 0.5,
        }
    }
}

impl RoughnessRuleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.building_max_roughness < self.vegetation_min_roughness) {
            return Err(Error::InvalidArgument(
                "building_max_roughness must be below vegetation_min_roughness".into(),
            ));
        }
        if self.neighborhood_k < 3 {
            return Err(Error::InvalidArgument("neighborhood_k must be at least 3".into()));
        }
        if !(0.0..=1.0).contains(&self.min_consensus) {
            return Err(Error::InvalidArgument("min_consensus must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_large(&self, cluster_points: &[Point3]) -> bool {
        cluster_points.len() >= self.large_min_points
            && Aabb::from_points(cluster_points).is_some_and(|b| b.diagonal() >= self.large_min_diagonal)
    }
}

/// Building/vegetation labels for the points of one cluster. Clusters below
/// the large-cluster gate get nothing; roughness in the dead band between
/// the two thresholds stays unlabeled.
pub fn label_by_roughness(
    cloud: &PointCloud,
    cluster: &[usize],
    roughness: &[f64],
    params: &RoughnessRuleParams,
) -> Vec<(usize, SemanticClass)> {
    let pts: Vec<Point3> = cluster.iter().map(|&i| cloud.points[i]).collect();
    if !params.is_large(&pts) {
        return Vec::new();
    }
    cluster
        .iter()
        .filter_map(|&i| {
            let r = roughness[i];
            if r < params.building_max_roughness {
                Some((i, SemanticClass::Building))
            } else if r > params.vegetation_min_roughness {
                Some((i, SemanticClass::Vegetation))
            } else {
                None
            }
        })
        .collect()
}

/// Drops roughness labels not shared by at least `min_fraction` of the
/// point's `k` nearest neighbors. `raw` holds the unfiltered roughness label
/// of every indexed point.
pub fn consensus_filter(
    index: &SpatialIndex,
    fragment: Vec<(usize, SemanticClass)>,
    raw: &[Option<SemanticClass>],
    k: usize,
    min_fraction: f64,
) -> Vec<(usize, SemanticClass)> {
    if min_fraction <= 0.0 {
        return fragment;
    }
    fragment
        .into_par_iter()
        .filter(|&(i, c)| {
            let nbrs = index.knn(index.point(i), k);
            let agree = nbrs.iter().filter(|n| raw[n.index] == Some(c)).count();
            agree as f64 >= min_fraction * nbrs.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundFilter,
    PoleRule,
    RoughnessRule,
    VoxelExpansion,
    Manual,
}

impl Provenance {
    /// Id used by the PLY `provenance` property; 0 means unlabeled.
    pub fn id(self) -> u8 {
        match self {
            Provenance::GroundFilter => 1,
            Provenance::PoleRule => 2,
            Provenance::RoughnessRule => 3,
            Provenance::VoxelExpansion => 4,
            Provenance::Manual => 5,
        }
    }
}

/// Per-point optional class plus where each label came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakLabels {
    labels: Vec<Option<(SemanticClass, Provenance)>>,
}

impl WeakLabels {
    pub fn unlabeled(n: usize) -> Self {
        WeakLabels { labels: vec![None; n] }
    }

    pub fn from_entries(labels: Vec<Option<(SemanticClass, Provenance)>>) -> Self {
        WeakLabels { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<SemanticClass> {
        self.labels[i].map(|(c, _)| c)
    }

    pub fn provenance(&self, i: usize) -> Option<Provenance> {
        self.labels[i].map(|(_, p)| p)
    }

    pub fn entries(&self) -> &[Option<(SemanticClass, Provenance)>] {
        &self.labels
    }

    /// Sets a label unless the point already has one.
    pub fn set_if_unlabeled(&mut self, i: usize, class: SemanticClass, provenance: Provenance) -> bool {
        if self.labels[i].is_none() {
            self.labels[i] = Some((class, provenance));
            true
        } else {
            false
        }
    }

    pub fn classes(&self) -> Vec<Option<SemanticClass>> {
        self.labels.iter().map(|l| l.map(|(c, _)| c)).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn labeled_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.labeled_count() as f64 / self.labels.len() as f64
        }
    }

    pub fn class_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for (c, _) in self.labels.iter().flatten() {
            counts[c.index()] += 1;
        }
        counts
    }

    /// Overlays manual labels (e.g. the `others` class); they take precedence.
    pub fn merge_manual(&mut self, manual: &[Option<SemanticClass>]) -> Result<()> {
        if manual.len() != self.labels.len() {
            return Err(Error::LabelCountMismatch {
                expected: self.labels.len(),
                found: manual.len(),
            });
        }
        for (slot, m) in self.labels.iter_mut().zip(manual) {
            if let Some(c) = m {
                *slot = Some((*c, Provenance::Manual));
            }
        }
        Ok(())
    }
}

fn face_neighbors(k: CellKey) -> [CellKey; 6] {
    let (x, y, z) = k;
    [
        (x - 1, y, z),
        (x + 1, y, z),
        (x, y - 1, z),
        (x, y + 1, z),
        (x, y, z - 1),
        (x, y, z + 1),
    ]
}

/// One pass of voxel label growth against the incoming label snapshot.
///
/// A voxel holding exactly one labeled class, whose six face neighbors hold
/// no labels or only that class, passes the class to all its unlabeled
/// points.
pub fn voxel_expand_labels(cloud: &PointCloud, labels: &WeakLabels, voxel: f64) -> Result<WeakLabels> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size must be positive, got {voxel}")));
    }
    if labels.len() != cloud.len() {
        return Err(Error::LabelCountMismatch {
            expected: cloud.len(),
            found: labels.len(),
        });
    }
    let mut members: HashMap<CellKey, Vec<usize>> = HashMap::new();
    let mut classes: HashMap<CellKey, BTreeSet<SemanticClass>> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = cell_of(p, voxel);
        members.entry(key).or_default().push(i);
        if let Some(c) = labels.get(i) {
            classes.entry(key).or_default().insert(c);
        }
    }
    let mut out = labels.clone();
    for (key, set) in &classes {
        if set.len() != 1 {
            continue;
        }
        let class = *set.iter().next().unwrap();
        let agrees = face_neighbors(*key)
            .iter()
            .all(|n| classes.get(n).is_none_or(|s| s.len() == 1 && s.contains(&class)));
        if agrees {
            for &i in &members[key] {
                out.set_if_unlabeled(i, class, Provenance::VoxelExpansion);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerParams {
    pub pole: PoleRuleParams,
    pub roughness: RoughnessRuleParams,
    /// Connected-component link distance for non-ground points (meters).
    pub link_distance: f64,
    pub min_points: usize,
    pub voxel: f64,
}

impl Default for LabelerParams {
    fn default() -> Self {
        LabelerParams {
            pole: PoleRuleParams::default(),
            roughness: RoughnessRuleParams::default(),
            link_distance: 0.5,
            min_points: 10,
            voxel: 2.0,
        }
    }
}

impl LabelerParams {
    pub fn validate(&self) -> Result<()> {
        self.pole.validate()?;
        self.roughness.validate()?;
        if !(self.link_distance > 0.0 && self.voxel > 0.0) {
            return Err(Error::InvalidArgument("link distance and voxel must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct WeakLabelOutcome {
    pub labels: WeakLabels,
    pub ground: GroundSplit,
    pub components: usize,
    pub streetlights: usize,
    pub traffic_signals: usize,
    pub roughness_clusters: usize,
}

/// Full labeling chain: ground filter, components, pole rules, roughness
/// rules, voxel expansion. `others` is never assigned here.
pub fn generate_weak_labels(
    scene: &PointCloud,
    ground_params: &GroundFilterParams,
    params: &LabelerParams,
) -> Result<WeakLabelOutcome> {
    params.validate()?;
    let ground = filter_ground(scene, ground_params)?;
    let mut labels = WeakLabels::unlabeled(scene.len());
    for &i in &ground.ground {
        labels.set_if_unlabeled(i, SemanticClass::Ground, Provenance::GroundFilter);
    }
    let mut outcome = WeakLabelOutcome {
        labels: WeakLabels::unlabeled(0),
        ground: GroundSplit::default(),
        components: 0,
        streetlights: 0,
        traffic_signals: 0,
        roughness_clusters: 0,
    };

    if !ground.nonground.is_empty() {
        let nonground: Vec<Point3> = ground.nonground.iter().map(|&i| scene.points[i]).collect();
        let index = SpatialIndex::new(&nonground);
        let comps = connected_components_indexed(&index, params.link_distance, params.min_points)?;
        outcome.components = comps.clusters.len();

        let poles: Vec<PoleClass> = comps
            .clusters
            .par_iter()
            .map(|c| {
                let pts: Vec<Point3> = c.iter().map(|&i| nonground[i]).collect();
                classify_pole_cluster(&pts, &params.pole)
            })
            .collect();

        let local = PointCloud::new(nonground.clone());
        let k = params.roughness.neighborhood_k;
        let needs_roughness: Vec<usize> = comps
            .clusters
            .iter()
            .zip(&poles)
            .filter(|(c, p)| {
                **p == PoleClass::NotPole && {
                    let pts: Vec<Point3> = c.iter().map(|&i| nonground[i]).collect();
                    params.roughness.is_large(&pts)
                }
            })
            .flat_map(|(c, _)| c.iter().copied())
            .collect();
        let mut roughness = vec![f64::NAN; nonground.len()];
        let computed: Vec<(usize, f64)> = needs_roughness
            .par_iter()
            .map(|&i| {
                let r = eigen_features(&index, i, Neighborhood::K(k))
                    .map(|f| f.roughness)
                    .unwrap_or(f64::NAN);
                (i, r)
            })
            .collect();
        for (i, r) in computed {
            roughness[i] = r;
        }
        let raw: Vec<Option<SemanticClass>> = roughness
            .iter()
            .map(|&r| {
                if r < params.roughness.building_max_roughness {
                    Some(SemanticClass::Building)
                } else if r > params.roughness.vegetation_min_roughness {
                    Some(SemanticClass::Vegetation)
                } else {
                    None
                }
            })
            .collect();

        for (cluster, pole) in comps.clusters.iter().zip(&poles) {
            match pole {
                PoleClass::Streetlight | PoleClass::TrafficSignal => {
                    if *pole == PoleClass::Streetlight {
                        outcome.streetlights += 1;
                    } else {
                        outcome.traffic_signals += 1;
                    }
                    for &i in cluster {
                        labels.set_if_unlabeled(ground.nonground[i], SemanticClass::PoleLike, Provenance::PoleRule);
                    }
                }
                PoleClass::NotPole => {
                    let frag = consensus_filter(
                        &index,
                        label_by_roughness(&local, cluster, &roughness, &params.roughness),
                        &raw,
                        k,
                        params.roughness.min_consensus,
                    );
                    if !frag.is_empty() {
                        outcome.roughness_clusters += 1;
                    }
                    for (i, c) in frag {
                        labels.set_if_unlabeled(ground.nonground[i], c, Provenance::RoughnessRule);
                    }
                }
            }
        }
    }

    outcome.labels = voxel_expand_labels(scene, &labels, params.voxel)?;
    outcome.ground = ground;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn line_along_z_axis() {
        let pts: Vec<Point3> = (0..10).map(|i| Point3::new(0.0, 0.0, i as f64)).collect();
        let l = fit_line_3d(&pts).unwrap();
        assert!((l.direction - Vector3::z()).norm() < 1e-12);
        let down: Vec<Point3> = pts.iter().rev().copied().collect();
        assert!((fit_line_3d(&down).unwrap().direction - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn noisy_z_axis_within_one_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let pts: Vec<Point3> = (0..200)
            .map(|i| {
                Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), i as f64 * 0.03 + noise.sample(&mut rng))
            })
            .collect();
        let l = fit_line_3d(&pts).unwrap();
        assert!(l.direction.dot(&Vector3::z()).acos().to_degrees() < 1.0);
    }

    #[test]
    fn two_points_define_the_line() {
        let a = Point3::new(1.0, 2.0, 3.0);
        let b = Point3::new(4.0, 6.0, 3.0);
        let l = fit_line_3d(&[a, b]).unwrap();
        assert!(l.distance(&a) < 1e-12 && l.distance(&b) < 1e-12);
        assert!((l.direction - Vector3::new(0.6, 0.8, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn identical_points_are_degenerate() {
        assert!(matches!(fit_line_3d(&[Point3::x(); 4]), Err(Error::DegenerateLine)));
        assert!(matches!(fit_line_3d(&[Point3::x()]), Err(Error::DegenerateLine)));
    }

    fn cylinder(rng: &mut ChaCha8Rng, base: Point3, radius: f64, h0: f64, h1: f64, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                let a: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                base + Point3::new(radius * a.cos(), radius * a.sin(), rng.random_range(h0..h1))
            })
            .collect()
    }

    fn streetlight(rng: &mut ChaCha8Rng) -> Vec<Point3> {
        let mut pts = cylinder(rng, Point3::zeros(), 0.1, 0.0, 6.0, 3000);
        for _ in 0..400 {
            let t: f64 = rng.random();
            pts.push(Point3::new(1.5 * t, rng.random_range(-0.05..0.05), 5.8 + rng.random_range(-0.05..0.05)));
        }
        pts
    }

    #[test]
    fn streetlight_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = streetlight(&mut rng);
        let params = PoleRuleParams::default();
        // Direct computation of both inlier fractions.
        let top = pts.iter().map(|p| p.z).fold(f64::MIN, f64::max);
        let body: Vec<Point3> = pts.iter().filter(|p| p.z <= top - 1.0).copied().collect();
        let body_in = body.iter().filter(|p| (p.x * p.x + p.y * p.y).sqrt() <= 1.0).count() as f64 / body.len() as f64;
        assert!(body_in >= 0.9);
        assert_eq!(classify_pole_cluster(&pts, &params), PoleClass::Streetlight);
    }

    #[test]
    fn traffic_signal_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = cylinder(&mut rng, Point3::zeros(), 0.08, 0.0, 3.5, 2000);
        for _ in 0..300 {
            pts.push(Point3::new(
                rng.random_range(0.1..0.4),
                rng.random_range(-0.15..0.15),
                rng.random_range(3.2..3.5),
            ));
        }
        assert_eq!(classify_pole_cluster(&pts, &PoleRuleParams::default()), PoleClass::TrafficSignal);
    }

    #[test]
    fn blob_is_not_a_pole() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..500)
            .map(|_| {
                let v = Point3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                v.normalize() * 1.0 + Point3::new(0.0, 0.0, 1.0)
            })
            .collect();
        assert_eq!(classify_pole_cluster(&pts, &PoleRuleParams::default()), PoleClass::NotPole);
    }

    #[test]
    fn pole_rules_invariant_to_translation_and_yaw() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = streetlight(&mut rng);
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 1.234);
        let moved: Vec<Point3> = pts.iter().map(|p| rot * p + Vector3::new(512.0, -77.0, 12.5)).collect();
        let params = PoleRuleParams::default();
        assert_eq!(classify_pole_cluster(&pts, &params), classify_pole_cluster(&moved, &params));
    }

    #[test]
    fn roughness_rules_and_dead_band() {
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                pts.push(Point3::new(i as f64 * 0.2, 0.0, j as f64 * 0.2));
            }
        }
        let cloud = PointCloud::new(pts);
        let idx: Vec<usize> = (0..cloud.len()).collect();
        let params = RoughnessRuleParams::default();
        let mut r = vec![0.0; cloud.len()];
        r[1] = 0.3;
        r[2] = 0.12;
        let out: HashMap<usize, SemanticClass> = label_by_roughness(&cloud, &idx, &r, &params).into_iter().collect();
        assert_eq!(out[&0], SemanticClass::Building);
        assert_eq!(out[&1], SemanticClass::Vegetation);
        assert!(!out.contains_key(&2));
        // Small clusters are skipped entirely.
        assert!(label_by_roughness(&cloud, &idx[..100], &r, &params).is_empty());
    }

    fn voxel_fixture() -> PointCloud {
        // Voxel (0,0,0) holds points 0..53; voxel (1,0,0) holds 53..55.
        let mut pts: Vec<Point3> = (0..53).map(|i| Point3::new(0.1 + 0.03 * i as f64, 0.5, 0.5)).collect();
        pts.push(Point3::new(2.5, 0.5, 0.5));
        pts.push(Point3::new(2.6, 0.5, 0.5));
        PointCloud::new(pts)
    }

    #[test]
    fn voxel_expansion_fills_agreeing_voxel() {
        let cloud = voxel_fixture();
        let mut wl = WeakLabels::unlabeled(cloud.len());
        for i in 0..3 {
            wl.set_if_unlabeled(i, SemanticClass::Building, Provenance::RoughnessRule);
        }
        let out = voxel_expand_labels(&cloud, &wl, 2.0).unwrap();
        for i in 0..53 {
            assert_eq!(out.get(i), Some(SemanticClass::Building));
        }
        assert_eq!(out.provenance(0), Some(Provenance::RoughnessRule));
        assert_eq!(out.provenance(10), Some(Provenance::VoxelExpansion));
        assert_eq!(out.get(53), None);
    }

    #[test]
    fn voxel_expansion_skips_mixed_voxel() {
        let cloud = voxel_fixture();
        let mut wl = WeakLabels::unlabeled(cloud.len());
        wl.set_if_unlabeled(0, SemanticClass::Building, Provenance::RoughnessRule);
        wl.set_if_unlabeled(1, SemanticClass::Vegetation, Provenance::RoughnessRule);
        assert_eq!(voxel_expand_labels(&cloud, &wl, 2.0).unwrap(), wl);
    }

    #[test]
    fn voxel_expansion_vetoed_by_neighbor() {
        let cloud = voxel_fixture();
        let mut wl = WeakLabels::unlabeled(cloud.len());
        wl.set_if_unlabeled(0, SemanticClass::Building, Provenance::RoughnessRule);
        wl.set_if_unlabeled(53, SemanticClass::Vegetation, Provenance::RoughnessRule);
        assert_eq!(voxel_expand_labels(&cloud, &wl, 2.0).unwrap(), wl);
    }

    #[test]
    fn consensus_drops_isolated_labels() {
        let pts: Vec<Point3> = (0..30).map(|i| Point3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let index = SpatialIndex::new(&pts);
        let mut raw = vec![Some(SemanticClass::Building); 30];
        raw[15] = Some(SemanticClass::Vegetation);
        let frag: Vec<(usize, SemanticClass)> = (0..30).map(|i| (i, raw[i].unwrap())).collect();
        let kept = consensus_filter(&index, frag.clone(), &raw, 5, 0.5);
        assert_eq!(kept.len(), 29);
        assert!(kept.iter().all(|&(i, _)| i != 15));
        assert_eq!(consensus_filter(&index, frag, &raw, 5, 0.0).len(), 30);
    }

    #[test]
    fn manual_labels_override() {
        let mut wl = WeakLabels::unlabeled(3);
        wl.set_if_unlabeled(0, SemanticClass::Building, Provenance::RoughnessRule);
        wl.merge_manual(&[Some(SemanticClass::Others), None, Some(SemanticClass::Others)]).unwrap();
        assert_eq!(wl.get(0), Some(SemanticClass::Others));
        assert_eq!(wl.provenance(2), Some(Provenance::Manual));
        assert!(wl.merge_manual(&[None]).is_err());
    }

    #[test]
    fn flat_scene_gets_only_ground() {
        let pts: Vec<Point3> = (0..2500)
            .map(|i| Point3::new((i % 50) as f64 * 0.4, (i / 50) as f64 * 0.4, 0.0))
            .collect();
        let out = generate_weak_labels(&PointCloud::new(pts), &GroundFilterParams::default(), &LabelerParams::default())
            .unwrap();
        assert_eq!(out.labels.class_counts(), [0, 2500, 0, 0, 0]);
        assert_eq!(out.components, 0);
    }
}
