//! Dense labeling from sparse weak labels, and label-file import/export.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pc::{Point3, PointCloud, SemanticClass, SpatialIndex};

pub const DEFAULT_PROPAGATION_K: usize = 10;

/// Assigns every unlabeled point the majority class among its `k` nearest
/// labeled points. Ties go to the class with the smallest summed distance,
/// then to the lower class id. Labeled points keep their label.
pub fn propagate_labels(
    cloud: &PointCloud,
    weak: &[Option<SemanticClass>],
    k: usize,
) -> Result<Vec<SemanticClass>> {
    if weak.len() != cloud.len() {
        return Err(Error::LabelCountMismatch {
            expected: cloud.len(),
            found: weak.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let seeds: Vec<usize> = (0..weak.len()).filter(|&i| weak[i].is_some()).collect();
    if seeds.is_empty() {
        return Err(Error::NoLabeledPoints);
    }
    let seed_points: Vec<Point3> = seeds.iter().map(|&i| cloud.points[i]).collect();
    let index = SpatialIndex::new(&seed_points);
    Ok((0..cloud.len())
        .into_par_iter()
        .map(|i| {
            if let Some(c) = weak[i] {
                return c;
            }
            let mut votes = [0usize; 5];
            let mut dist = [0.0f64; 5];
            for n in index.knn(&cloud.points[i], k) {
                let c = weak[seeds[n.index]].unwrap().index();
                votes[c] += 1;
                dist[c] += n.distance();
            }
            let best = (0..5)
                .filter(|&c| votes[c] > 0)
                .min_by(|&a, &b| {
                    votes[b]
                        .cmp(&votes[a])
                        .then(dist[a].total_cmp(&dist[b]))
                        .then(a.cmp(&b))
                })
                .unwrap();
            SemanticClass::ALL[best]
        })
        .collect())
}

fn parse_ids(text: &str) -> Result<Vec<(usize, i64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id: i64 = line
            .parse()
            .map_err(|_| Error::parse_line(n + 1, format!("expected an integer class id, got {line:?}")))?;
        out.push((n + 1, id));
    }
    Ok(out)
}

/// Parses a label file: one class id (0 to 4) per line.
pub fn parse_labels(text: &str, expected: usize) -> Result<Vec<SemanticClass>> {
    let ids = parse_ids(text)?;
    if ids.len() != expected {
        return Err(Error::LabelCountMismatch {
            expected,
            found: ids.len(),
        });
    }
    ids.into_iter()
        .map(|(line, id)| SemanticClass::from_id(id).ok_or(Error::UnknownClassId { line, id }))
        .collect()
}

/// Like [`parse_labels`] but `-1` marks an unlabeled point.
pub fn parse_optional_labels(text: &str, expected: usize) -> Result<Vec<Option<SemanticClass>>> {
    let ids = parse_ids(text)?;
    if ids.len() != expected {
        return Err(Error::LabelCountMismatch {
            expected,
            found: ids.len(),
        });
    }
    ids.into_iter()
        .map(|(line, id)| match id {
            -1 => Ok(None),
            _ => SemanticClass::from_id(id).map(Some).ok_or(Error::UnknownClassId { line, id }),
        })
        .collect()
}

pub fn import_labels(cloud: &PointCloud, path: &Path) -> Result<Vec<SemanticClass>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, cloud.len())
}

pub fn write_labels(path: &Path, labels: &[SemanticClass]) -> Result<()> {
    let mut buf = Vec::with_capacity(labels.len() * 2);
    for l in labels {
        writeln!(buf, "{}", l.id()).expect("write to vec");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes one class id per line, `-1` for unlabeled points.
pub fn write_optional_labels(path: &Path, labels: &[Option<SemanticClass>]) -> Result<()> {
    let mut buf = Vec::with_capacity(labels.len() * 3);
    for l in labels {
        writeln!(buf, "{}", l.map_or(-1, |c| c.id() as i64)).expect("write to vec");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
