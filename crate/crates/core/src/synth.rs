//! Deterministic synthetic street scenes with ground truth.
//!
//! A scene holds a ground plane, facade-only buildings, streetlights,
//! traffic signal poles and optional trees. Every object except trees comes
//! with its design mesh in a local frame and the rigid transform placing it
//! in the scene.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bim::{sample_faces, BimModel, ObjectKind, RigidTransform};
use crate::error::{Error, Result};
use crate::pc::{Point3, PointCloud, SemanticClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub buildings: usize,
    pub streetlights: usize,
    pub traffic_signals: usize,
    pub trees: usize,
    /// Points per m² of ground.
    pub ground_density: f64,
    /// Points per m² of building wall.
    pub facade_density: f64,
    /// Points per m² of pole surface.
    pub pole_density: f64,
    /// Points per m³ of tree canopy.
    pub canopy_density: f64,
    /// Multiplies every density.
    pub density_scale: f64,
    /// Isotropic Gaussian noise, meters.
    pub noise: f64,
    pub slope_deg: f64,
    /// Object yaw is drawn uniformly from ±this range, degrees.
    pub yaw_range_deg: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            buildings: 2,
            streetlights: 3,
            traffic_signals: 1,
            trees: 0,
            ground_density: 50.0,
            facade_density: 100.0,
            pole_density: 400.0,
            canopy_density: 60.0,
            density_scale: 1.0,
            noise: 0.01,
            slope_deg: 0.0,
            yaw_range_deg: 180.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let d = [
            self.ground_density,
            self.facade_density,
            self.pole_density,
            self.canopy_density,
            self.density_scale,
        ];
        if d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("scene densities must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(self.slope_deg.abs() < 45.0) || !(self.yaw_range_deg >= 0.0) {
            return Err(Error::InvalidArgument("invalid noise, slope or yaw range".into()));
        }
        Ok(())
    }

    /// Scene extent in x and y.
    pub fn extent(&self) -> (f64, f64) {
        let poles = self.streetlights + self.traffic_signals;
        let x = (28.0 * self.buildings as f64 + 4.0)
            .max(16.0 * poles as f64 + 4.0)
            .max(16.0 * self.trees as f64 + 8.0)
            .max(20.0);
        (x, 44.0)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticObject {
    /// Mesh in its local frame.
    pub model: BimModel,
    /// Maps the local mesh into the scene.
    pub truth: RigidTransform,
    pub instance_id: u32,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Carries truth labels and instance ids.
    pub cloud: PointCloud,
    pub objects: Vec<SyntheticObject>,
    pub spec: SceneSpec,
}

impl SyntheticScene {
    pub fn truth_labels(&self) -> &[SemanticClass] {
        self.cloud.labels.as_deref().unwrap()
    }

    pub fn truth_instances(&self) -> &[u32] {
        self.cloud.instance_ids.as_deref().unwrap()
    }
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
}

impl MeshBuilder {
    fn polygon(&mut self, pts: &[Point3]) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(pts);
        for i in 1..pts.len() - 1 {
            self.faces.push([base, base + i, base + i + 1]);
        }
    }

    fn cylinder(&mut self, center: Point3, radius: f64, height: f64, segments: usize) {
        let ring = |z: f64| -> Vec<Point3> {
            (0..segments)
                .map(|k| {
                    let a = k as f64 / segments as f64 * std::f64::consts::TAU;
                    center + Point3::new(radius * a.cos(), radius * a.sin(), z)
                })
                .collect()
        };
        let (bottom, top) = (ring(0.0), ring(height));
        for k in 0..segments {
            let j = (k + 1) % segments;
            self.polygon(&[bottom[k], bottom[j], top[j], top[k]]);
        }
        let rev: Vec<Point3> = bottom.iter().rev().copied().collect();
        self.polygon(&rev);
        self.polygon(&top);
    }

    fn cuboid(&mut self, min: Point3, max: Point3) {
        let c = |x: f64, y: f64, z: f64| Point3::new(x, y, z);
        let (a, b) = (min, max);
        self.polygon(&[c(a.x, a.y, a.z), c(a.x, b.y, a.z), c(b.x, b.y, a.z), c(b.x, a.y, a.z)]);
        self.polygon(&[c(a.x, a.y, b.z), c(b.x, a.y, b.z), c(b.x, b.y, b.z), c(a.x, b.y, b.z)]);
        self.polygon(&[c(a.x, a.y, a.z), c(b.x, a.y, a.z), c(b.x, a.y, b.z), c(a.x, a.y, b.z)]);
        self.polygon(&[c(a.x, b.y, a.z), c(a.x, b.y, b.z), c(b.x, b.y, b.z), c(b.x, b.y, a.z)]);
        self.polygon(&[c(a.x, a.y, a.z), c(a.x, a.y, b.z), c(a.x, b.y, b.z), c(a.x, b.y, a.z)]);
        self.polygon(&[c(b.x, a.y, a.z), c(b.x, b.y, a.z), c(b.x, b.y, b.z), c(b.x, a.y, b.z)]);
    }

    fn build(self, name: &str, kind: ObjectKind) -> BimModel {
        BimModel::new(name, kind, self.vertices, self.faces).expect("generated mesh is valid")
    }
}

/// Flat-roofed L-shaped building, 14 m × 12 m footprint, 9 m tall.
pub fn l_shaped_building(name: &str) -> BimModel {
    let foot = [(0.0, 0.0), (14.0, 0.0), (14.0, 6.0), (6.0, 6.0), (6.0, 12.0), (0.0, 12.0)];
    let h = 9.0;
    let mut vertices: Vec<Point3> = foot.iter().map(|&(x, y)| Point3::new(x, y, 0.0)).collect();
    vertices.extend(foot.iter().map(|&(x, y)| Point3::new(x, y, h)));
    let mut faces = Vec::new();
    for i in 0..6 {
        let j = (i + 1) % 6;
        faces.push([i, j, j + 6]);
        faces.push([i, j + 6, i + 6]);
    }
    for (a, b, c) in [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5)] {
        faces.push([a, c, b]);
        faces.push([a + 6, b + 6, c + 6]);
    }
    BimModel::new(name, ObjectKind::Building, vertices, faces).expect("valid building")
}

/// Gabled building on a 12 m × 8 m footprint with 7 m eaves and a 10 m
/// ridge set off-center at y = 5.
pub fn gabled_building(name: &str) -> BimModel {
    let v = |x: f64, y: f64, z: f64| Point3::new(x, y, z);
    let vertices = vec![
        v(0.0, 0.0, 0.0),
        v(12.0, 0.0, 0.0),
        v(12.0, 8.0, 0.0),
        v(0.0, 8.0, 0.0),
        v(0.0, 0.0, 7.0),
        v(12.0, 0.0, 7.0),
        v(12.0, 8.0, 7.0),
        v(0.0, 8.0, 7.0),
        v(0.0, 5.0, 10.0),
        v(12.0, 5.0, 10.0),
    ];
    let faces = vec![
        [0, 1, 5],
        [0, 5, 4],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 8],
        [3, 8, 7],
        [1, 2, 6],
        [1, 6, 9],
        [1, 9, 5],
        [4, 5, 9],
        [4, 9, 8],
        [6, 7, 8],
        [6, 8, 9],
        [0, 3, 2],
        [0, 2, 1],
    ];
    BimModel::new(name, ObjectKind::Building, vertices, faces).expect("valid building")
}

/// The building meshes used by generated scenes, in placement order.
pub fn standard_buildings(count: usize) -> Vec<BimModel> {
    (0..count)
        .map(|i| {
            let name = format!("building_{}", i + 1);
            if i % 2 == 0 {
                l_shaped_building(&name)
            } else {
                gabled_building(&name)
            }
        })
        .collect()
}

/// 6 m pole with a 1.5 m arm along +x and a lamp head at its end.
pub fn streetlight_model(name: &str) -> BimModel {
    let mut m = MeshBuilder::default();
    m.cylinder(Point3::zeros(), 0.1, 6.0, 12);
    m.cuboid(Point3::new(0.1, -0.04, 5.8), Point3::new(1.5, 0.04, 5.88));
    m.cuboid(Point3::new(1.2, -0.12, 5.62), Point3::new(1.6, 0.12, 5.8));
    m.build(name, ObjectKind::Streetlight)
}

/// 3.8 m pole carrying a signal head box on its +x side.
pub fn traffic_signal_model(name: &str) -> BimModel {
    let mut m = MeshBuilder::default();
    m.cylinder(Point3::zeros(), 0.08, 3.8, 12);
    m.cuboid(Point3::new(0.08, -0.15, 3.0), Point3::new(0.38, 0.15, 3.8));
    m.build(name, ObjectKind::TrafficSignal)
}

fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
    }
    inside
}

fn footprint(model: &BimModel) -> Vec<(f64, f64)> {
    let bottom: Vec<&Point3> = model.vertices.iter().filter(|v| v.z == 0.0).collect();
    bottom.iter().map(|v| (v.x, v.y)).collect()
}

fn placement(model: &BimModel, center: (f64, f64), yaw: f64, ground_z: f64) -> RigidTransform {
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner();
    let foot = footprint(model);
    let n = foot.len().max(1) as f64;
    let local = Vector3::new(foot.iter().map(|p| p.0).sum::<f64>() / n, foot.iter().map(|p| p.1).sum::<f64>() / n, 0.0);
    let t = Vector3::new(center.0, center.1, ground_z) - rot * local;
    RigidTransform {
        rotation: rot,
        translation: t,
    }
}

/// Builds a scene from `spec`; identical inputs give identical output.
pub fn generate_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let slope = spec.slope_deg.to_radians().tan();
    let ground_z = |x: f64| slope * x;
    let (ex, ey) = spec.extent();
    let yaw = |rng: &mut ChaCha8Rng| {
        let r = spec.yaw_range_deg.to_radians();
        if r > 0.0 {
            rng.random_range(-r..=r)
        } else {
            0.0
        }
    };

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut instances = Vec::new();
    let mut objects = Vec::new();
    let mut footprints: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut next_id = 1u32;

    let mut push = |pts: Vec<Point3>, class: SemanticClass, id: u32, rng: &mut ChaCha8Rng| {
        for p in pts {
            let jitter = Point3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
            points.push(p + jitter);
            labels.push(class);
            instances.push(id);
        }
    };

    for (i, model) in standard_buildings(spec.buildings).into_iter().enumerate() {
        let center = (16.0 + 28.0 * i as f64, 30.0);
        let truth = placement(&model, center, yaw(&mut rng), ground_z(center.0));
        let walls: Vec<usize> = (0..model.faces.len())
            .filter(|&f| model.face_normal(f).is_some_and(|n| n.z.abs() < 0.1))
            .collect();
        let sample = sample_faces(&model, &walls, spec.facade_density * spec.density_scale, &mut rng)?;
        let world: Vec<Point3> = sample.cloud.points.iter().map(|p| truth.apply(p)).collect();
        footprints.push(
            footprint(&model)
                .iter()
                .map(|&(x, y)| {
                    let w = truth.apply(&Point3::new(x, y, 0.0));
                    (w.x, w.y)
                })
                .collect(),
        );
        push(world, SemanticClass::Building, next_id, &mut rng);
        objects.push(SyntheticObject {
            model,
            truth,
            instance_id: next_id,
        });
        next_id += 1;
    }

    let poles = spec.streetlights + spec.traffic_signals;
    for j in 0..poles {
        let model = if j < spec.streetlights {
            streetlight_model(&format!("streetlight_{}", j + 1))
        } else {
            traffic_signal_model(&format!("traffic_signal_{}", j - spec.streetlights + 1))
        };
        let x = 8.0 + 16.0 * j as f64;
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw(&mut rng)).into_inner();
        let truth = RigidTransform {
            rotation: rot,
            translation: Vector3::new(x, 8.0, ground_z(x)),
        };
        let all: Vec<usize> = (0..model.faces.len()).collect();
        let sample = sample_faces(&model, &all, spec.pole_density * spec.density_scale, &mut rng)?;
        let world: Vec<Point3> = sample
            .cloud
            .points
            .iter()
            .filter(|p| p.z > 0.0)
            .map(|p| truth.apply(p))
            .collect();
        push(world, SemanticClass::PoleLike, next_id, &mut rng);
        objects.push(SyntheticObject {
            model,
            truth,
            instance_id: next_id,
        });
        next_id += 1;
    }

    for k in 0..spec.trees {
        let base = Point3::new(12.0 + 16.0 * k as f64, 16.0, 0.0);
        let base = Point3::new(base.x, base.y, ground_z(base.x));
        let mut pts = Vec::new();
        let trunk = (2.0 * std::f64::consts::PI * 0.15 * 2.5 * spec.pole_density * spec.density_scale) as usize;
        for _ in 0..trunk {
            let a: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            pts.push(base + Point3::new(0.15 * a.cos(), 0.15 * a.sin(), rng.random_range(0.0..2.5)));
        }
        let radius: f64 = 2.0;
        let volume = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
        let canopy = (volume * spec.canopy_density * spec.density_scale) as usize;
        let center = base + Point3::new(0.0, 0.0, 4.3);
        while pts.len() < trunk + canopy {
            let v = Point3::new(
                rng.random_range(-radius..radius),
                rng.random_range(-radius..radius),
                rng.random_range(-radius..radius),
            );
            if v.norm() <= radius {
                pts.push(center + v);
            }
        }
        push(pts, SemanticClass::Vegetation, next_id, &mut rng);
        next_id += 1;
    }

    let ground_count = (ex * ey * spec.ground_density * spec.density_scale).round() as usize;
    let mut ground = Vec::with_capacity(ground_count);
    for _ in 0..ground_count {
        let (x, y) = (rng.random_range(0.0..ex), rng.random_range(0.0..ey));
        if footprints.iter().any(|f| point_in_polygon((x, y), f)) {
            continue;
        }
        ground.push(Point3::new(x, y, ground_z(x)));
    }
    push(ground, SemanticClass::Ground, 0, &mut rng);

    let cloud = PointCloud::new(points).with_labels(labels)?.with_instance_ids(instances)?;
    Ok(SyntheticScene {
        cloud,
        objects,
        spec: *spec,
    })
}

/// Facade-only LiDAR of a building placed by `truth`: wall samples only,
/// moved into the scene frame with Gaussian noise.
pub fn sample_facades(model: &BimModel, truth: &RigidTransform, density: f64, noise: f64, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let walls: Vec<usize> = (0..model.faces.len())
        .filter(|&f| model.face_normal(f).is_some_and(|n| n.z.abs() < 0.1))
        .collect();
    let sample = sample_faces(model, &walls, density, &mut rng)?;
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(PointCloud::new(
        sample
            .cloud
            .points
            .iter()
            .map(|p| truth.apply(p) + Point3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect(),
    ))
}

/// Full-surface LiDAR of a model placed by `truth`, with Gaussian noise.
pub fn sample_object(model: &BimModel, truth: &RigidTransform, density: f64, noise: f64, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..model.faces.len()).collect();
    let sample = sample_faces(model, &all, density, &mut rng)?;
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(PointCloud::new(
        sample
            .cloud
            .points
            .iter()
            .map(|p| truth.apply(p) + Point3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pc::SpatialIndex;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a = generate_synthetic_scene(&spec, 42).unwrap();
        let b = generate_synthetic_scene(&spec, 42).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.objects.len(), 6);
        let c = generate_synthetic_scene(&spec, 43).unwrap();
        assert_ne!(a.cloud.points, c.cloud.points);
    }

    #[test]
    fn facades_have_no_roof_points() {
        let scene = generate_synthetic_scene(&SceneSpec::default(), 1).unwrap();
        let obj = &scene.objects[0];
        let inv = obj.truth.inverse();
        let foot = footprint(&obj.model);
        for (p, l) in scene.cloud.points.iter().zip(scene.truth_labels()) {
            if *l != SemanticClass::Building {
                continue;
            }
            let q = inv.apply(p);
            if q.z > 8.5 {
                // Roof band: only wall points, which hug the footprint outline.
                let inset = [(0.5, 0.5), (13.5, 0.5), (13.5, 5.5), (5.5, 5.5), (5.5, 11.5), (0.5, 11.5)];
                assert!(!point_in_polygon((q.x, q.y), &inset) || !point_in_polygon((q.x, q.y), &foot));
            }
        }
    }

    #[test]
    fn truth_places_meshes_on_points() {
        let spec = SceneSpec::default();
        let scene = generate_synthetic_scene(&spec, 5).unwrap();
        for obj in &scene.objects {
            let pts: Vec<Point3> = scene
                .cloud
                .points
                .iter()
                .zip(scene.truth_instances())
                .filter(|(_, id)| **id == obj.instance_id)
                .map(|(p, _)| *p)
                .collect();
            assert!(pts.len() > 100);
            let moved = crate::bim::apply_transform(&obj.model, &obj.truth).unwrap();
            let dense = crate::bim::sample_surface(&moved, 500.0, 1).unwrap().cloud.points;
            let index = SpatialIndex::new(&dense);
            let mean = pts.iter().map(|p| index.nearest(p).unwrap().distance()).sum::<f64>() / pts.len() as f64;
            assert!(mean < 0.05, "{} mean {mean}", obj.model.name);
        }
    }

    #[test]
    fn objects_are_separated() {
        let scene = generate_synthetic_scene(&SceneSpec { trees: 2, ..Default::default() }, 9).unwrap();
        let ids = scene.truth_instances();
        let n_obj = *ids.iter().max().unwrap() as usize;
        let per: Vec<Vec<Point3>> = (1..=n_obj)
            .map(|id| {
                scene
                    .cloud
                    .points
                    .iter()
                    .zip(ids)
                    .filter(|(_, i)| **i as usize == id)
                    .map(|(p, _)| *p)
                    .collect()
            })
            .collect();
        for a in 0..n_obj {
            let index = SpatialIndex::new(&per[a]);
            for (b, pts) in per.iter().enumerate() {
                if a != b {
                    let d = pts.iter().map(|p| index.nearest(p).unwrap().distance()).fold(f64::INFINITY, f64::min);
                    assert!(d >= 3.0, "objects {a} and {b} are {d} m apart");
                }
            }
        }
    }
}
