//! Classification metrics and model positioning error.

use serde::Serialize;

use crate::bim::{BimModel, ObjectKind};
use crate::error::{Error, Result};
use crate::pc::{PointCloud, SemanticClass, SpatialIndex};
use crate::registration::{point_to_plane_distance, select_plane_triple};

/// 5×5 counts indexed `(truth, prediction)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 5]; 5],
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[SemanticClass], predicted: &[SemanticClass]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::LabelCountMismatch {
                expected: truth.len(),
                found: predicted.len(),
            });
        }
        let mut cm = ConfusionMatrix::default();
        for (t, p) in truth.iter().zip(predicted) {
            cm.counts[t.index()][p.index()] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..5).map(|i| self.counts[i][i]).sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: SemanticClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of points whose true class is this one.
    pub support: u64,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub per_class: Vec<ClassMetrics>,
    /// Mean F1 over the classes with non-zero support.
    pub average_f1: f64,
    pub overall_accuracy: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-class precision TP/(TP+FP), recall TP/(TP+FN), their harmonic
/// mean, the average F1 and overall accuracy.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    if cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let per_class: Vec<ClassMetrics> = SemanticClass::ALL
        .iter()
        .map(|&class| {
            let c = class.index();
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..5).map(|t| cm.counts[t][c]).sum();
            let support: u64 = cm.counts[c].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, support);
            let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class,
                precision,
                recall,
                f1,
                support,
                undefined: p.is_none() || r.is_none(),
            }
        })
        .collect();
    let supported: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let average_f1 = supported.iter().map(|m| m.f1).sum::<f64>() / supported.len() as f64;
    Ok(ClassificationMetrics {
        per_class,
        average_f1,
        overall_accuracy: cm.overall_accuracy(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    pub rmse: f64,
}

/// Min, max, mean and root mean square of a set of distances.
pub fn summarize_distances(d: &[f64]) -> Option<DistanceSummary> {
    if d.is_empty() {
        return None;
    }
    let n = d.len() as f64;
    Some(DistanceSummary {
        count: d.len(),
        min: d.iter().copied().fold(f64::INFINITY, f64::min),
        max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        avg: d.iter().sum::<f64>() / n,
        rmse: (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositioningEntry {
    pub name: String,
    pub kind: ObjectKind,
    pub distances: Vec<f64>,
    /// Corners without a usable LiDAR plane.
    pub skipped: usize,
    pub summary: DistanceSummary,
}

/// Distances from every model corner to the plane through its three
/// nearest non-collinear LiDAR points within `max_distance`.
pub fn positioning_error(bim: &BimModel, lidar: &PointCloud, max_distance: f64) -> Result<PositioningEntry> {
    let index = SpatialIndex::new(&lidar.points);
    let mut distances = Vec::new();
    let mut skipped = 0;
    for v in &bim.vertices {
        match select_plane_triple(&index, v, max_distance, 10) {
            Some(t) => {
                let [a, b, c] = t.map(|i| lidar.points[i]);
                distances.push(point_to_plane_distance(v, &a, &b, &c)?);
            }
            None => skipped += 1,
        }
    }
    let summary = summarize_distances(&distances).ok_or(Error::NoOverlap)?;
    Ok(PositioningEntry {
        name: bim.name.clone(),
        kind: bim.kind,
        distances,
        skipped,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindAggregate {
    pub kind: ObjectKind,
    pub objects: usize,
    pub summary: DistanceSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositioningReport {
    pub entries: Vec<PositioningEntry>,
    /// Pooled over the corners of all objects of one kind.
    pub per_kind: Vec<KindAggregate>,
    pub combined: Option<DistanceSummary>,
}

impl PositioningReport {
    pub fn new(entries: Vec<PositioningEntry>) -> Self {
        let mut per_kind = Vec::new();
        for kind in [ObjectKind::Building, ObjectKind::Streetlight, ObjectKind::TrafficSignal] {
            let of_kind: Vec<&PositioningEntry> = entries.iter().filter(|e| e.kind == kind).collect();
            let pooled: Vec<f64> = of_kind.iter().flat_map(|e| e.distances.iter().copied()).collect();
            if let Some(summary) = summarize_distances(&pooled) {
                per_kind.push(KindAggregate {
                    kind,
                    objects: of_kind.len(),
                    summary,
                });
            }
        }
        let all: Vec<f64> = entries.iter().flat_map(|e| e.distances.iter().copied()).collect();
        PositioningReport {
            combined: summarize_distances(&all),
            entries,
            per_kind,
        }
    }
}
