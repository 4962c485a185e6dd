//! Graph clustering of per-class components into object instances.
//!
//! Each connected component of each non-ground class becomes a graph
//! vertex. Nearby vertices are joined by edges weighted by distance,
//! roughness and anisotropy similarity; edges above the threshold merge
//! vertices, and every merged instance takes the class of its largest
//! member.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pc::{
    connected_components_indexed, eigen_features, Aabb, EigenFeatures, Neighborhood, Point3, PointCloud,
    SemanticClass, SpatialIndex, UnionFind,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Sorted indices into the scene cloud.
    pub indices: Vec<usize>,
    pub class: SemanticClass,
    pub roughness: f64,
    pub anisotropy: f64,
    pub bounds: Aabb,
}

impl Cluster {
    pub fn point_count(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphParams {
    pub link_distance: f64,
    pub candidate_radius: f64,
    pub threshold: f64,
    pub min_instance_points: usize,
    pub neighborhood_k: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            link_distance: 0.5,
            candidate_radius: 5.0,
            threshold: 0.75,
            min_instance_points: 50,
            neighborhood_k: 20,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.link_distance > 0.0 && self.candidate_radius >= 0.0) {
            return Err(Error::InvalidArgument("graph distances must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument("merge threshold must be in (0, 1]".into()));
        }
        if self.neighborhood_k < 3 {
            return Err(Error::InvalidArgument("neighborhood_k must be at least 3".into()));
        }
        Ok(())
    }
}

/// Per-point eigen features over the points of classes other than ground.
/// Ground points get default (zero) features.
pub fn non_ground_features(cloud: &PointCloud, labels: &[SemanticClass], k: usize) -> Vec<EigenFeatures> {
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| labels[i] != SemanticClass::Ground).collect();
    let pts: Vec<Point3> = keep.iter().map(|&i| cloud.points[i]).collect();
    let index = SpatialIndex::new(&pts);
    let computed: Vec<EigenFeatures> = (0..pts.len())
        .into_par_iter()
        .map(|i| eigen_features(&index, i, Neighborhood::K(k)).unwrap_or_default())
        .collect();
    let mut out = vec![EigenFeatures::default(); cloud.len()];
    for (slot, f) in keep.into_iter().zip(computed) {
        out[slot] = f;
    }
    out
}

/// Connected components computed separately inside each non-ground class.
/// Clusters are ordered by class id, then by smallest point index.
pub fn build_primitives(
    cloud: &PointCloud,
    labels: &[SemanticClass],
    link_distance: f64,
    features: &[EigenFeatures],
) -> Result<Vec<Cluster>> {
    if labels.len() != cloud.len() || features.len() != cloud.len() {
        return Err(Error::LabelCountMismatch {
            expected: cloud.len(),
            found: labels.len().min(features.len()),
        });
    }
    let mut clusters = Vec::new();
    for class in SemanticClass::ALL {
        if class == SemanticClass::Ground {
            continue;
        }
        let members: Vec<usize> = (0..cloud.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let pts: Vec<Point3> = members.iter().map(|&i| cloud.points[i]).collect();
        let index = SpatialIndex::new(&pts);
        let comps = connected_components_indexed(&index, link_distance, 1)?;
        for comp in comps.clusters {
            let mut indices: Vec<usize> = comp.iter().map(|&j| members[j]).collect();
            indices.sort_unstable();
            let n = indices.len() as f64;
            let roughness = indices.iter().map(|&i| features[i].roughness).sum::<f64>() / n;
            let anisotropy = indices.iter().map(|&i| features[i].anisotropy).sum::<f64>() / n;
            let bounds = Aabb::from_points(indices.iter().map(|&i| &cloud.points[i])).unwrap();
            clusters.push(Cluster {
                indices,
                class,
                roughness,
                anisotropy,
                bounds,
            });
        }
    }
    Ok(clusters)
}

/// Connection weight between two clusters. A zero sigma drops its term.
pub fn edge_weight(d: f64, r_i: f64, r_j: f64, a_i: f64, a_j: f64, sigmas: [f64; 3]) -> f64 {
    let term = |x: f64, s: f64| if s > 0.0 { (x / s).powi(2) } else { 0.0 };
    let e = term(d, sigmas[0]) + term(r_i - r_j, sigmas[1]) + term(a_i - a_j, sigmas[2]);
    (-e / 3.0).exp()
}

fn min_distance_indexed(index_b: &SpatialIndex, points_a: &[Point3]) -> f64 {
    let mut best = f64::INFINITY;
    for p in points_a {
        if let Some(n) = index_b.nearest(p) {
            best = best.min(n.dist2);
            if best == 0.0 {
                break;
            }
        }
    }
    best.sqrt()
}

/// Minimum Euclidean distance over all cross pairs of points.
pub fn min_cluster_distance(cloud: &PointCloud, a: &Cluster, b: &Cluster) -> f64 {
    let (small, large) = if a.point_count() <= b.point_count() { (a, b) } else { (b, a) };
    let pa: Vec<Point3> = small.indices.iter().map(|&i| cloud.points[i]).collect();
    if large.point_count() <= 16 {
        return pa
            .iter()
            .flat_map(|p| large.indices.iter().map(move |&j| (cloud.points[j] - p).norm()))
            .fold(f64::INFINITY, f64::min);
    }
    let pb: Vec<Point3> = large.indices.iter().map(|&i| cloud.points[i]).collect();
    min_distance_indexed(&SpatialIndex::new(&pb), &pa)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGraph {
    pub vertices: Vec<Cluster>,
    /// Candidate edges with `i < j`, sorted by `(i, j)`.
    pub edges: Vec<Edge>,
    /// Population standard deviations of distance, roughness, anisotropy.
    pub sigmas: [f64; 3],
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl ClusterGraph {
    /// Candidate edges join cluster pairs whose minimum point distance is
    /// within `candidate_radius`. The distance sigma is taken over the edge
    /// distances; the roughness and anisotropy sigmas over the endpoint
    /// values of all candidate edges.
    pub fn build(cloud: &PointCloud, vertices: Vec<Cluster>, candidate_radius: f64) -> ClusterGraph {
        let indexes: Vec<SpatialIndex> = vertices
            .par_iter()
            .map(|c| {
                let pts: Vec<Point3> = c.indices.iter().map(|&i| cloud.points[i]).collect();
                SpatialIndex::new(&pts)
            })
            .collect();
        let n = vertices.len();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| vertices[i].bounds.distance_to(&vertices[j].bounds) <= candidate_radius)
            .collect();
        let mut candidates: Vec<(usize, usize, f64)> = pairs
            .par_iter()
            .filter_map(|&(i, j)| {
                let (s, l) = if vertices[i].point_count() <= vertices[j].point_count() { (i, j) } else { (j, i) };
                let pts: Vec<Point3> = vertices[s].indices.iter().map(|&k| cloud.points[k]).collect();
                let d = min_distance_indexed(&indexes[l], &pts);
                (d <= candidate_radius).then_some((i, j, d))
            })
            .collect();
        candidates.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let ds: Vec<f64> = candidates.iter().map(|c| c.2).collect();
        let rs: Vec<f64> = candidates
            .iter()
            .flat_map(|c| [vertices[c.0].roughness, vertices[c.1].roughness])
            .collect();
        let as_: Vec<f64> = candidates
            .iter()
            .flat_map(|c| [vertices[c.0].anisotropy, vertices[c.1].anisotropy])
            .collect();
        let sigmas = [population_std(&ds), population_std(&rs), population_std(&as_)];
        let edges = candidates
            .into_iter()
            .map(|(i, j, d)| Edge {
                i,
                j,
                distance: d,
                weight: edge_weight(
                    d,
                    vertices[i].roughness,
                    vertices[j].roughness,
                    vertices[i].anisotropy,
                    vertices[j].anisotropy,
                    sigmas,
                ),
            })
            .collect();
        ClusterGraph { vertices, edges, sigmas }
    }

    /// Plain-text dump of vertices and edges for debugging.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "sigmas distance={:.6} roughness={:.6} anisotropy={:.6}",
            self.sigmas[0], self.sigmas[1], self.sigmas[2]
        );
        let _ = writeln!(s, "vertices {}", self.vertices.len());
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = writeln!(
                s,
                "v {i} class={} points={} roughness={:.6} anisotropy={:.6}",
                v.class.name(),
                v.point_count(),
                v.roughness,
                v.anisotropy
            );
        }
        let _ = writeln!(s, "edges {}", self.edges.len());
        for e in &self.edges {
            let _ = writeln!(s, "e {} {} distance={:.6} weight={:.6}", e.i, e.j, e.distance, e.weight);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// 1-based; 0 marks points outside any instance.
    pub id: u32,
    pub class: SemanticClass,
    /// Member vertex indices into the graph.
    pub clusters: Vec<usize>,
    /// Sorted scene point indices.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Instances {
    pub instances: Vec<Instance>,
    /// Points of groups below the minimum instance size.
    pub outliers: Vec<usize>,
}

impl Instances {
    /// Per-point instance id; ground and outlier points get 0.
    pub fn point_ids(&self, n: usize) -> Vec<u32> {
        let mut ids = vec![0; n];
        for inst in &self.instances {
            for &i in &inst.indices {
                ids[i] = inst.id;
            }
        }
        ids
    }

    /// Relabels instance points to their instance class.
    pub fn relabel(&self, labels: &[SemanticClass]) -> Vec<SemanticClass> {
        let mut out = labels.to_vec();
        for inst in &self.instances {
            for &i in &inst.indices {
                out[i] = inst.class;
            }
        }
        out
    }
}

/// Unions vertices joined by edges with weight strictly above `threshold`.
pub fn merge_clusters(graph: &ClusterGraph, threshold: f64, min_instance_points: usize) -> Instances {
    let mut uf = UnionFind::new(graph.vertices.len());
    for e in &graph.edges {
        if e.weight > threshold {
            uf.union(e.i, e.j);
        }
    }
    let mut out = Instances::default();
    for group in uf.groups() {
        let size: usize = group.iter().map(|&v| graph.vertices[v].point_count()).sum();
        let mut indices: Vec<usize> = group.iter().flat_map(|&v| graph.vertices[v].indices.iter().copied()).collect();
        indices.sort_unstable();
        if size < min_instance_points {
            out.outliers.extend(indices);
            continue;
        }
        let lead = *group
            .iter()
            .max_by(|&&a, &&b| {
                graph.vertices[a]
                    .point_count()
                    .cmp(&graph.vertices[b].point_count())
                    .then(b.cmp(&a))
            })
            .unwrap();
        out.instances.push(Instance {
            id: out.instances.len() as u32 + 1,
            class: graph.vertices[lead].class,
            clusters: group,
            indices,
        });
    }
    out.outliers.sort_unstable();
    out
}

#[derive(Debug, Clone)]
pub struct InstanceOutcome {
    pub graph: ClusterGraph,
    pub instances: Instances,
    pub labels: Vec<SemanticClass>,
    pub instance_ids: Vec<u32>,
}

/// Primitives, graph, merge and relabeling in one call.
pub fn segment_instances(cloud: &PointCloud, labels: &[SemanticClass], params: &GraphParams) -> Result<InstanceOutcome> {
    params.validate()?;
    if labels.len() != cloud.len() {
        return Err(Error::LabelCountMismatch {
            expected: cloud.len(),
            found: labels.len(),
        });
    }
    let features = non_ground_features(cloud, labels, params.neighborhood_k);
    let clusters = build_primitives(cloud, labels, params.link_distance, &features)?;
    let graph = ClusterGraph::build(cloud, clusters, params.candidate_radius);
    let instances = merge_clusters(&graph, params.threshold, params.min_instance_points);
    let relabeled = instances.relabel(labels);
    let instance_ids = instances.point_ids(cloud.len());
    Ok(InstanceOutcome {
        graph,
        instances,
        labels: relabeled,
        instance_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cluster_at(cloud: &mut Vec<Point3>, origin: Point3, n: usize, class: SemanticClass) -> Cluster {
        let start = cloud.len();
        for i in 0..n {
            cloud.push(origin + Point3::new(0.0, (i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1));
        }
        let indices: Vec<usize> = (start..start + n).collect();
        let bounds = Aabb::from_points(indices.iter().map(|&i| &cloud[i])).unwrap();
        Cluster {
            indices,
            class,
            roughness: 0.0,
            anisotropy: 0.5,
            bounds,
        }
    }

    #[test]
    fn weight_closed_forms() {
        let s = [1.0, 0.1, 0.2];
        assert_eq!(edge_weight(0.0, 0.05, 0.05, 0.3, 0.3, s), 1.0);
        assert!((edge_weight(1.0, 0.0, 0.0, 0.0, 0.0, s) - (-1.0f64 / 3.0).exp()).abs() < 1e-15);
        assert!((edge_weight(1.0, 0.1, 0.0, 0.2, 0.0, s) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(edge_weight(0.0, 0.3, 0.0, 0.0, 0.0, [1.0, 0.0, 0.0]), 1.0);
        let w = edge_weight(0.2, 0.0, 0.0, 0.0, 0.0, [1.0, 1.0, 1.0]);
        assert!((w - (-0.04f64 / 3.0).exp()).abs() < 1e-15 && w > 0.75);
    }

    #[test]
    fn distance_examples() {
        let cloud = PointCloud::new(vec![Point3::zeros(), Point3::x(), Point3::x()]);
        let mk = |idx: Vec<usize>| Cluster {
            bounds: Aabb::from_points(idx.iter().map(|&i| &cloud.points[i])).unwrap(),
            indices: idx,
            class: SemanticClass::Building,
            roughness: 0.0,
            anisotropy: 0.0,
        };
        assert_eq!(min_cluster_distance(&cloud, &mk(vec![0]), &mk(vec![1])), 1.0);
        assert_eq!(min_cluster_distance(&cloud, &mk(vec![0, 1]), &mk(vec![2])), 0.0);
    }

    #[test]
    fn separated_buildings_and_touching_classes() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (x, class) in [(0.0, SemanticClass::Building), (20.0, SemanticClass::Building)] {
            for i in 0..200 {
                pts.push(Point3::new(x + (i % 20) as f64 * 0.2, 0.0, (i / 20) as f64 * 0.2));
                labels.push(class);
            }
        }
        // A pole-labeled column touching a vegetation blob.
        for i in 0..30 {
            pts.push(Point3::new(40.0, 0.0, i as f64 * 0.2));
            labels.push(SemanticClass::PoleLike);
        }
        for i in 0..30 {
            pts.push(Point3::new(40.3, 0.0, i as f64 * 0.2));
            labels.push(SemanticClass::Vegetation);
        }
        let cloud = PointCloud::new(pts);
        let feats = vec![EigenFeatures::default(); cloud.len()];
        let clusters = build_primitives(&cloud, &labels, 0.5, &feats).unwrap();
        let count = |c| clusters.iter().filter(|k| k.class == c).count();
        assert_eq!(count(SemanticClass::Building), 2);
        assert_eq!(count(SemanticClass::PoleLike), 1);
        assert_eq!(count(SemanticClass::Vegetation), 1);
    }

    #[test]
    fn majority_relabels_small_fragment() {
        let mut pts = Vec::new();
        let a = cluster_at(&mut pts, Point3::zeros(), 5000, SemanticClass::Building);
        let b = cluster_at(&mut pts, Point3::new(0.2, 0.0, 0.0), 30, SemanticClass::Vegetation);
        let far = cluster_at(&mut pts, Point3::new(100.0, 0.0, 0.0), 40, SemanticClass::Vegetation);
        let cloud = PointCloud::new(pts);
        let graph = ClusterGraph::build(&cloud, vec![a, b, far], 5.0);
        assert_eq!(graph.edges.len(), 1);
        assert_eq!(graph.edges[0].weight, 1.0);
        let inst = merge_clusters(&graph, 0.75, 50);
        assert_eq!(inst.instances.len(), 1);
        assert_eq!(inst.instances[0].class, SemanticClass::Building);
        assert_eq!(inst.instances[0].indices.len(), 5030);
        assert_eq!(inst.outliers.len(), 40);
        let labels: Vec<SemanticClass> = (0..cloud.len())
            .map(|i| if i < 5000 { SemanticClass::Building } else { SemanticClass::Vegetation })
            .collect();
        let relabeled = inst.relabel(&labels);
        assert!(relabeled[..5030].iter().all(|&c| c == SemanticClass::Building));
        assert!(relabeled[5030..].iter().all(|&c| c == SemanticClass::Vegetation));
    }

    #[test]
    fn low_weight_does_not_merge() {
        let mut pts = Vec::new();
        let a = cluster_at(&mut pts, Point3::zeros(), 100, SemanticClass::Building);
        let b = cluster_at(&mut pts, Point3::new(1.0, 0.0, 0.0), 100, SemanticClass::Building);
        let graph = ClusterGraph {
            vertices: vec![a, b],
            edges: vec![Edge { i: 0, j: 1, distance: 1.0, weight: 0.5 }],
            sigmas: [1.0, 1.0, 1.0],
        };
        assert_eq!(merge_clusters(&graph, 0.75, 50).instances.len(), 2);
    }

    fn brute_partition(cloud: &PointCloud, labels: &[SemanticClass], link: f64) -> Vec<Vec<usize>> {
        let n = cloud.len();
        let mut uf = UnionFind::new(n);
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] == labels[j]
                    && labels[i] != SemanticClass::Ground
                    && (cloud.points[i] - cloud.points[j]).norm() <= link
                {
                    uf.union(i, j);
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = uf
            .groups()
            .into_iter()
            .filter(|g| labels[g[0]] != SemanticClass::Ground)
            .collect();
        groups.sort();
        groups
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn primitives_match_brute_force(seed in any::<u64>(), n in 1usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point3> = (0..n)
                .map(|_| Point3::new(rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), rng.random_range(0.0..2.0)))
                .collect();
            let labels: Vec<SemanticClass> = (0..n).map(|_| SemanticClass::ALL[rng.random_range(0..5)]).collect();
            let cloud = PointCloud::new(pts);
            let feats = vec![EigenFeatures::default(); n];
            let mut got: Vec<Vec<usize>> = build_primitives(&cloud, &labels, 0.7, &feats)
                .unwrap()
                .into_iter()
                .map(|c| c.indices)
                .collect();
            got.sort();
            prop_assert_eq!(got, brute_partition(&cloud, &labels, 0.7));
        }

        #[test]
        fn min_distance_matches_brute_force(seed in any::<u64>(), na in 1usize..80, nb in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point3> = (0..na + nb)
                .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                .collect();
            let cloud = PointCloud::new(pts);
            let mk = |idx: Vec<usize>| Cluster {
                bounds: Aabb::from_points(idx.iter().map(|&i| &cloud.points[i])).unwrap(),
                indices: idx,
                class: SemanticClass::Building,
                roughness: 0.0,
                anisotropy: 0.0,
            };
            let a = mk((0..na).collect());
            let b = mk((na..na + nb).collect());
            let brute = (0..na)
                .flat_map(|i| (na..na + nb).map(move |j| (i, j)))
                .map(|(i, j)| (cloud.points[i] - cloud.points[j]).norm())
                .fold(f64::INFINITY, f64::min);
            prop_assert!((min_cluster_distance(&cloud, &a, &b) - brute).abs() < 1e-12);
        }

        #[test]
        fn merge_independent_of_edge_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = Vec::new();
            let vertices: Vec<Cluster> = (0..12)
                .map(|k| cluster_at(&mut pts, Point3::new(k as f64, 0.0, 0.0), 10 + k * 7, SemanticClass::ALL[2 + k % 3]))
                .collect();
            let mut edges = Vec::new();
            for i in 0..12 {
                for j in i + 1..12 {
                    if rng.random_bool(0.3) {
                        edges.push(Edge { i, j, distance: 0.0, weight: rng.random() });
                    }
                }
            }
            let g1 = ClusterGraph { vertices: vertices.clone(), edges: edges.clone(), sigmas: [1.0; 3] };
            edges.reverse();
            let g2 = ClusterGraph { vertices, edges, sigmas: [1.0; 3] };
            let m1 = merge_clusters(&g1, 0.75, 50);
            let m2 = merge_clusters(&g2, 0.75, 50);
            prop_assert_eq!(&m1, &m2);
            let covered: usize = m1.instances.iter().map(|i| i.indices.len()).sum::<usize>() + m1.outliers.len();
            prop_assert_eq!(covered, pts.len());
        }
    }
}
