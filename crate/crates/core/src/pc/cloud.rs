use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in meters, relative to its cloud's origin offset.
pub type Point3 = Vector3<f64>;

/// The five semantic categories of an urban scene.
///
/// The discriminants are the on-disk class ids used by label files and the
/// PLY `label` property.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum SemanticClass {
    Others = 0,
    Ground = 1,
    Building = 2,
    Vegetation = 3,
    PoleLike = 4,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 5] = [
        SemanticClass::Others,
        SemanticClass::Ground,
        SemanticClass::Building,
        SemanticClass::Vegetation,
        SemanticClass::PoleLike,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: i64) -> Option<Self> {
        match id {
            0 => Some(SemanticClass::Others),
            1 => Some(SemanticClass::Ground),
            2 => Some(SemanticClass::Building),
            3 => Some(SemanticClass::Vegetation),
            4 => Some(SemanticClass::PoleLike),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Others => "others",
            SemanticClass::Ground => "ground",
            SemanticClass::Building => "building",
            SemanticClass::Vegetation => "vegetation",
            SemanticClass::PoleLike => "pole_like",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for SemanticClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut bb = Aabb {
            min: first,
            max: first,
        };
        for p in it {
            bb.grow(p);
        }
        Some(bb)
    }

    pub fn grow(&mut self, p: &Point3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn extent(&self) -> Point3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Euclidean gap between two boxes; zero when they overlap.
    pub fn distance_to(&self, other: &Aabb) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let gap = (other.min[k] - self.max[k]).max(self.min[k] - other.max[k]);
            if gap > 0.0 {
                d2 += gap * gap;
            }
        }
        d2.sqrt()
    }
}

/// An ordered set of points with optional per-point semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub labels: Option<Vec<SemanticClass>>,
    pub instance_ids: Option<Vec<u32>>,
    /// Subtracted from the file coordinates at load time.
    pub origin_offset: Vector3<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud {
            points,
            labels: None,
            instance_ids: None,
            origin_offset: Vector3::zeros(),
        }
    }

    pub fn with_labels(mut self, labels: Vec<SemanticClass>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::LabelCountMismatch {
                expected: self.points.len(),
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_instance_ids(mut self, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != self.points.len() {
            return Err(Error::LabelCountMismatch {
                expected: self.points.len(),
                found: ids.len(),
            });
        }
        self.instance_ids = Some(ids);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Option<Aabb> {
        Aabb::from_points(&self.points)
    }

    /// Copy of the points at `indices`, carrying labels, ids and the offset.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            instance_ids: self
                .instance_ids
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            origin_offset: self.origin_offset,
        }
    }

    /// Checks the container invariants: finite coordinates and aligned
    /// per-point attributes.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.points.len() {
                return Err(Error::LabelCountMismatch {
                    expected: self.points.len(),
                    found: l.len(),
                });
            }
        }
        if let Some(l) = &self.instance_ids {
            if l.len() != self.points.len() {
                return Err(Error::LabelCountMismatch {
                    expected: self.points.len(),
                    found: l.len(),
                });
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Option<Point3> {
        centroid(&self.points)
    }
}

pub fn centroid(points: &[Point3]) -> Option<Point3> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Point3::zeros(), |acc, p| acc + p);
    Some(sum / points.len() as f64)
}
