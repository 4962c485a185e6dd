use nalgebra::Vector3;
use serde::Serialize;

use super::{JobConfig, ObjectResult, ObjectSpec, RunOutcome};
use crate::bim::ObjectKind;
use crate::eval::{ClassificationMetrics, DistanceSummary, PositioningReport};
use crate::pc::SemanticClass;

/// Rounds to three decimals, the precision of every reported quantity.
fn r3(x: f64) -> f64 {
    let r = (x * 1000.0).round() / 1000.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StageSummary {
    pub ground_points: usize,
    pub weak_labeled_fraction: f64,
    pub streetlights: usize,
    pub traffic_signals: usize,
    pub primitives: usize,
    pub graph_edges: usize,
    pub instances: usize,
    pub outlier_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub class: SemanticClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationSummary {
    pub overall_accuracy: f64,
    pub average_f1: f64,
    pub classes: Vec<ClassRow>,
}

impl From<&ClassificationMetrics> for ClassificationSummary {
    fn from(m: &ClassificationMetrics) -> Self {
        ClassificationSummary {
            overall_accuracy: r3(m.overall_accuracy),
            average_f1: r3(m.average_f1),
            classes: m
                .per_class
                .iter()
                .map(|c| ClassRow {
                    class: c.class,
                    precision: r3(c.precision),
                    recall: r3(c.recall),
                    f1: r3(c.f1),
                    support: c.support,
                    undefined: c.undefined,
                })
                .collect(),
        }
    }
}

/// Distances in meters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub corners: usize,
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    pub rmse: f64,
}

impl From<&DistanceSummary> for DistanceRow {
    fn from(s: &DistanceSummary) -> Self {
        DistanceRow {
            corners: s.count,
            min: r3(s.min),
            max: r3(s.max),
            avg: r3(s.avg),
            rmse: r3(s.rmse),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectSummary {
    pub name: String,
    pub kind: ObjectKind,
    pub status: &'static str,
    pub error: Option<String>,
    pub instance_id: Option<u32>,
    pub points: usize,
    pub coarse_score_m: Option<f64>,
    pub fine_rmse_m: Option<f64>,
    pub skipped_corners: usize,
    pub positioning: Option<DistanceRow>,
}

impl ObjectSummary {
    fn new(spec: &ObjectSpec, result: &Result<ObjectResult, String>) -> Self {
        let mut s = ObjectSummary {
            name: spec.name.clone(),
            kind: spec.kind,
            status: "ok",
            error: None,
            instance_id: None,
            points: 0,
            coarse_score_m: None,
            fine_rmse_m: None,
            skipped_corners: 0,
            positioning: None,
        };
        match result {
            Ok(r) => {
                s.instance_id = Some(r.instance_id);
                s.points = r.points;
                s.coarse_score_m = Some(r3(r.registration.coarse.score));
                s.fine_rmse_m = Some(r3(r.registration.fine.rmse));
                s.skipped_corners = r.positioning.skipped;
                s.positioning = Some((&r.positioning.summary).into());
            }
            Err(e) => {
                s.status = "failed";
                s.error = Some(e.clone());
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindRow {
    pub kind: ObjectKind,
    pub objects: usize,
    #[serde(flatten)]
    pub distances: DistanceRow,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PositioningSummary {
    pub per_kind: Vec<KindRow>,
    pub combined: Option<DistanceRow>,
}

impl From<&PositioningReport> for PositioningSummary {
    fn from(p: &PositioningReport) -> Self {
        PositioningSummary {
            per_kind: p
                .per_kind
                .iter()
                .map(|k| KindRow {
                    kind: k.kind,
                    objects: k.objects,
                    distances: (&k.summary).into(),
                })
                .collect(),
            combined: p.combined.as_ref().map(Into::into),
        }
    }
}

/// Machine-readable run report. Field order is fixed by declaration and
/// every real number is rounded to three decimals, so equal runs produce
/// byte-identical files.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub points: usize,
    pub stages: StageSummary,
    pub classification: Option<ClassificationSummary>,
    pub classification_pre_merge: Option<ClassificationSummary>,
    pub objects: Vec<ObjectSummary>,
    pub positioning: PositioningSummary,
    pub failed_objects: usize,
}

impl Summary {
    pub fn build(config: &JobConfig, run: &RunOutcome) -> Self {
        let seg = &run.segmentation;
        let graph = &seg.instancing.graph;
        Summary {
            seed: config.seed,
            points: run.cloud.len(),
            stages: StageSummary {
                ground_points: seg.weak.ground.ground.len(),
                weak_labeled_fraction: r3(seg.weak.labels.labeled_fraction()),
                streetlights: seg.weak.streetlights,
                traffic_signals: seg.weak.traffic_signals,
                primitives: graph.vertices.len(),
                graph_edges: graph.edges.len(),
                instances: seg.instances().instances.len(),
                outlier_points: seg.instances().outliers.len(),
            },
            classification: run.metrics.as_ref().map(Into::into),
            classification_pre_merge: run.pre_merge_metrics.as_ref().map(Into::into),
            objects: run.objects.iter().map(|(s, r)| ObjectSummary::new(s, r)).collect(),
            positioning: (&run.positioning()).into(),
            failed_objects: run.failed_objects(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

/// Geo-referencing result of one object: `matrix` maps the model frame
/// into the scene frame shifted by `-origin_offset`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformRecord {
    pub object_name: String,
    pub kind: ObjectKind,
    pub matrix: [[f64; 4]; 4],
    pub origin_offset: [f64; 3],
    pub rmse_m: f64,
}

impl TransformRecord {
    pub fn new(spec: &ObjectSpec, r: &ObjectResult, offset: &Vector3<f64>) -> Self {
        TransformRecord {
            object_name: spec.name.clone(),
            kind: spec.kind,
            matrix: r.registration.transform.to_rows(),
            origin_offset: [offset.x, offset.y, offset.z],
            rmse_m: r.registration.fine.rmse,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_three_decimals_without_negative_zero() {
        assert_eq!(r3(0.12345), 0.123);
        assert_eq!(r3(2.0005), 2.001);
        assert_eq!(r3(-0.0001).to_string(), "0");
        assert_eq!(serde_json::to_string(&r3(0.1 + 0.2)).unwrap(), "0.3");
    }
}
