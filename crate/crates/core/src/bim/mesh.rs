use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RigidTransform;
use crate::error::{Error, Result};
use crate::pc::{Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Building,
    Streetlight,
    TrafficSignal,
}

impl ObjectKind {
    pub fn is_pole(self) -> bool {
        matches!(self, ObjectKind::Streetlight | ObjectKind::TrafficSignal)
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Building => "building",
            ObjectKind::Streetlight => "streetlight",
            ObjectKind::TrafficSignal => "traffic_signal",
        }
    }
}

/// Triangulated design model of one object in its local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BimModel {
    pub name: String,
    pub kind: ObjectKind,
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl BimModel {
    pub fn new(
        name: impl Into<String>,
        kind: ObjectKind,
        vertices: Vec<Point3>,
        faces: Vec<[usize; 3]>,
    ) -> Result<Self> {
        let m = BimModel {
            name: name.into(),
            kind,
            vertices,
            faces,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidArgument(format!(
                "face {f:?} references a vertex outside 0..{n}"
            )));
        }
        if self.kind == ObjectKind::Building && !has_non_coplanar_quad(&self.vertices) {
            return Err(Error::InvalidArgument(format!(
                "building model {} needs four non-coplanar vertices",
                self.name
            )));
        }
        Ok(())
    }

    pub fn triangle(&self, face: usize) -> [Point3; 3] {
        self.faces[face].map(|i| self.vertices[i])
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Unit normal of a face, `None` for zero-area triangles.
    pub fn face_normal(&self, face: usize) -> Option<Vector3<f64>> {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a)).try_normalize(0.0)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn vertex_cloud(&self) -> PointCloud {
        PointCloud::new(self.vertices.clone())
    }

    pub fn centroid_of_vertices(&self) -> Point3 {
        crate::pc::centroid(&self.vertices).unwrap_or_else(Point3::zeros)
    }
}

fn has_non_coplanar_quad(v: &[Point3]) -> bool {
    if v.len() < 4 {
        return false;
    }
    let scale = v.iter().map(|p| (p - v[0]).norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return false;
    }
    let Some(a) = v.iter().position(|p| (p - v[0]).norm() > 1e-9 * scale) else {
        return false;
    };
    let e1 = v[a] - v[0];
    let Some(b) = v
        .iter()
        .position(|p| e1.cross(&(p - v[0])).norm() > 1e-9 * scale * scale)
    else {
        return false;
    };
    let n = e1.cross(&(v[b] - v[0]));
    v.iter().any(|p| n.dot(&(p - v[0])).abs() > 1e-9 * scale.powi(3))
}

/// Parses the `v` and `f` records of a Wavefront OBJ document.
///
/// Polygons are fan-triangulated, `v/vt/vn` index forms and negative
/// (relative) indices are accepted, and vertices with identical coordinates
/// are merged.
pub fn parse_obj(text: &str, name: &str, kind: ObjectKind) -> Result<BimModel> {
    let mut raw: Vec<Point3> = Vec::new();
    let mut faces_raw: Vec<(usize, Vec<usize>)> = Vec::new();
    for (li, line) in text.lines().enumerate() {
        let line_no = li + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in &mut c {
                    *slot = tok
                        .next()
                        .and_then(|s| s.parse::<f64>().ok())
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::parse_line(line_no, "malformed vertex"))?;
                }
                raw.push(Point3::from(c));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in tok {
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| Error::parse_line(line_no, format!("bad face index {t:?}")))?;
                    let resolved = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        raw.len() as i64 + i
                    } else {
                        return Err(Error::parse_line(line_no, "face index 0 is invalid in OBJ"));
                    };
                    if resolved < 0 || resolved as usize >= raw.len() {
                        return Err(Error::parse_line(
                            line_no,
                            format!("face index {i} out of range (have {} vertices)", raw.len()),
                        ));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(Error::parse_line(line_no, "face with fewer than 3 vertices"));
                }
                faces_raw.push((line_no, idx));
            }
            _ => {}
        }
    }
    if faces_raw.is_empty() {
        return Err(Error::parse_line(text.lines().count().max(1), "OBJ has no faces"));
    }

    let mut remap = Vec::with_capacity(raw.len());
    let mut seen: HashMap<[u64; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    for p in &raw {
        let key = [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
        let id = *seen.entry(key).or_insert_with(|| {
            vertices.push(*p);
            vertices.len() - 1
        });
        remap.push(id);
    }
    let mut faces = Vec::new();
    for (_, poly) in &faces_raw {
        for k in 1..poly.len() - 1 {
            faces.push([remap[poly[0]], remap[poly[k]], remap[poly[k + 1]]]);
        }
    }
    BimModel::new(name, kind, vertices, faces)
}

pub fn load_mesh(path: &Path, kind: ObjectKind) -> Result<BimModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    parse_obj(&text, &name, kind)
}

/// OBJ text with 9-decimal fixed coordinates, shifted by `offset`.
pub fn encode_obj(model: &BimModel, offset: &Vector3<f64>) -> String {
    let mut out = String::new();
    writeln!(out, "o {}", model.name).unwrap();
    for v in &model.vertices {
        let a = v + offset;
        writeln!(out, "v {:.9} {:.9} {:.9}", a.x, a.y, a.z).unwrap();
    }
    for f in &model.faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    out
}

pub fn save_obj(path: &Path, model: &BimModel, offset: &Vector3<f64>) -> Result<()> {
    fs::write(path, encode_obj(model, offset)).map_err(|e| Error::io(path, e))
}

/// Maps every vertex through `x → R·x + T`; faces are unchanged.
pub fn apply_transform(model: &BimModel, t: &RigidTransform) -> Result<BimModel> {
    t.validate()?;
    Ok(BimModel {
        name: model.name.clone(),
        kind: model.kind,
        vertices: model.vertices.iter().map(|v| t.apply(v)).collect(),
        faces: model.faces.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct SurfaceSample {
    pub cloud: PointCloud,
    /// Source face of each sample.
    pub faces: Vec<usize>,
    /// Set when the selected faces have no area.
    pub zero_area: bool,
}

/// Area-weighted uniform sampling over all faces.
pub fn sample_surface(model: &BimModel, density: f64, seed: u64) -> Result<SurfaceSample> {
    let all: Vec<usize> = (0..model.faces.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_faces(model, &all, density, &mut rng)
}

/// Area-weighted uniform sampling over a subset of faces. The sample count
/// is `round(density × area)`.
pub fn sample_faces<R: Rng>(
    model: &BimModel,
    faces: &[usize],
    density: f64,
    rng: &mut R,
) -> Result<SurfaceSample> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::InvalidArgument(format!("sampling density must be positive, got {density}")));
    }
    let areas: Vec<f64> = faces.iter().map(|&f| model.face_area(f)).collect();
    let total: f64 = areas.iter().sum();
    let count = (density * total).round() as usize;
    if total <= 0.0 || count == 0 {
        if total <= 0.0 {
            log::warn!("mesh {} has zero sampled area", model.name);
        }
        return Ok(SurfaceSample {
            cloud: PointCloud::new(Vec::new()),
            faces: Vec::new(),
            zero_area: total <= 0.0,
        });
    }
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cdf.push(acc);
    }
    let mut points = Vec::with_capacity(count);
    let mut src = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random::<f64>() * total;
        let k = cdf.partition_point(|&c| c <= u).min(faces.len() - 1);
        // Skip past zero-area faces sharing the same cumulative value.
        let k = (k..faces.len()).find(|&j| areas[j] > 0.0).unwrap_or(k);
        let [a, b, c] = model.triangle(faces[k]);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        points.push(a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2));
        src.push(faces[k]);
    }
    Ok(SurfaceSample {
        cloud: PointCloud::new(points),
        faces: src,
        zero_area: false,
    })
}

/// Closest point to `p` on the triangle `abc`, including its edges.
pub fn closest_point_on_triangle(p: &Point3, [a, b, c]: &[Point3; 3]) -> Point3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = va + vb + vc;
    if denom == 0.0 {
        // Degenerate triangle: fall back to the closest of its edges.
        return [(a, b), (b, c), (c, a)]
            .into_iter()
            .map(|(u, v)| {
                let e = v - u;
                let t = if e.norm_squared() > 0.0 { ((p - u).dot(&e) / e.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
                u + e * t
            })
            .min_by(|x, y| (p - x).norm_squared().total_cmp(&(p - y).norm_squared()))
            .unwrap_or(*a);
    }
    a + ab * (vb / denom) + ac * (vc / denom)
}
