use std::collections::HashMap;

use super::cloud::{Aabb, Point3, PointCloud};
use super::grid::{bin_points, CellKey};
use super::spatial::SpatialIndex;
use crate::error::{Error, Result};

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    /// Groups of element indices, each ascending, ordered by smallest member.
    pub fn groups(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut slot = vec![usize::MAX; n];
        let mut out: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            let r = self.find(i);
            if slot[r] == usize::MAX {
                slot[r] = out.len();
                out.push(Vec::new());
            }
            out[slot[r]].push(i);
        }
        out
    }
}

/// Result of Euclidean connected-component labeling.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Components {
    /// Point indices per accepted component, ordered by smallest index.
    pub clusters: Vec<Vec<usize>>,
    /// Points of components smaller than the minimum size.
    pub noise: Vec<usize>,
}

/// Links every pair of points closer than `link_distance` and returns the
/// resulting components.
pub fn connected_components(
    cloud: &PointCloud,
    link_distance: f64,
    min_points: usize,
) -> Result<Components> {
    let index = SpatialIndex::new(&cloud.points);
    connected_components_indexed(&index, link_distance, min_points)
}

pub fn connected_components_indexed(
    index: &SpatialIndex,
    link_distance: f64,
    min_points: usize,
) -> Result<Components> {
    if !(link_distance > 0.0 && link_distance.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "link distance must be positive, got {link_distance}"
        )));
    }
    let n = index.len();
    let pts: Vec<Point3> = (0..n).map(|i| *index.point(i)).collect();
    // Cells small enough that any two points sharing one are linked.
    let cell = link_distance / 3f64.sqrt() * (1.0 - 1e-9);
    let mut cells: Vec<(CellKey, Vec<usize>)> = bin_points(&pts, cell).into_iter().collect();
    cells.sort_unstable_by_key(|c| c.0);
    let slot: HashMap<CellKey, usize> = cells.iter().enumerate().map(|(i, c)| (c.0, i)).collect();
    let boxes: Vec<Aabb> = cells
        .iter()
        .map(|c| Aabb::from_points(c.1.iter().map(|&i| &pts[i])).unwrap())
        .collect();
    let r2 = link_distance * link_distance;
    let mut cell_uf = UnionFind::new(cells.len());
    for (a, (key, members)) in cells.iter().enumerate() {
        for dx in -2..=2i64 {
            for dy in -2..=2i64 {
                for dz in -2..=2i64 {
                    let Some(&b) = slot.get(&(key.0 + dx, key.1 + dy, key.2 + dz)) else {
                        continue;
                    };
                    if b <= a || boxes[a].distance_to(&boxes[b]) > link_distance || cell_uf.find(a) == cell_uf.find(b) {
                        continue;
                    }
                    let linked = members
                        .iter()
                        .any(|&i| cells[b].1.iter().any(|&j| (pts[i] - pts[j]).norm_squared() <= r2));
                    if linked {
                        cell_uf.union(a, b);
                    }
                }
            }
        }
    }
    let mut uf = UnionFind::new(n);
    for (c, (_, members)) in cells.iter().enumerate() {
        let root = cells[cell_uf.find(c)].1[0];
        for &i in members {
            uf.union(root, i);
        }
    }
    let mut out = Components::default();
    for group in uf.groups() {
        if group.len() >= min_points {
            out.clusters.push(group);
        } else {
            out.noise.extend(group);
        }
    }
    out.noise.sort_unstable();
    Ok(out)
}
