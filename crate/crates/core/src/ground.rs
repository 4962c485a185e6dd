//! Ground extraction by cloth simulation.
//!
//! The cloud is flipped upside down and a grid of particles falls onto it
//! under gravity. Particles that hit the inverted surface freeze; springs
//! between neighbors keep the cloth from sinking into the pits left by
//! buildings and poles. Points close to the settled cloth are ground.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pc::PointCloud;

const GRAVITY: f64 = 0.2;
const DAMPING: f64 = 0.01;
const BUFFER_CELLS: usize = 2;
const MAX_PARTICLES: usize = 50_000_000;

// Fraction of the height difference removed per constraint, indexed by
// rigidness (one or both particles movable).
const SINGLE_MOVE: [f64; 14] = [
    0.0, 0.3, 0.51, 0.657, 0.7599, 0.83193, 0.88235, 0.91765, 0.94235, 0.95965, 0.97175, 0.98023,
    0.98616, 0.99031,
];
const DOUBLE_MOVE: [f64; 14] = [
    0.0, 0.3, 0.42, 0.468, 0.4872, 0.4949, 0.498, 0.4992, 0.4997, 0.4999, 0.4999, 0.5, 0.5, 0.5,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundFilterParams {
    /// Particle spacing in meters.
    pub cloth_resolution: f64,
    /// Maximum point-to-cloth distance for ground, in meters.
    #[serde(rename = "threshold")]
    pub classification_threshold: f64,
    pub rigidness: u32,
    pub max_iterations: usize,
    pub time_step: f64,
    /// Iteration stops once no particle moves more than this (meters).
    pub convergence: f64,
}

impl Default for GroundFilterParams {
    fn default() -> Self {
        GroundFilterParams {
            cloth_resolution: 0.5,
            classification_threshold: 0.5,
            rigidness: 2,
            max_iterations: 500,
            time_step: 0.65,
            convergence: 0.005,
        }
    }
}

impl GroundFilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cloth_resolution > 0.0 && self.classification_threshold > 0.0 && self.time_step > 0.0) {
            return Err(Error::InvalidArgument(
                "cloth resolution, threshold and time step must be positive".into(),
            ));
        }
        if self.rigidness == 0 {
            return Err(Error::InvalidArgument("rigidness must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundSplit {
    pub ground: Vec<usize>,
    pub nonground: Vec<usize>,
    /// The cloud was too small to span a cloth cell; everything is ground.
    pub degenerate: bool,
    pub iterations: usize,
}

impl GroundSplit {
    pub fn clouds(&self, cloud: &PointCloud) -> (PointCloud, PointCloud) {
        (cloud.select(&self.ground), cloud.select(&self.nonground))
    }
}

/// Settled cloth heights, in the inverted frame.
#[derive(Debug, Clone)]
pub struct Cloth {
    origin: (f64, f64),
    resolution: f64,
    nx: usize,
    ny: usize,
    heights: Vec<f64>,
}

impl Cloth {
    /// Bilinear cloth height (inverted frame) at a planimetric position.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let fx = ((x - self.origin.0) / self.resolution).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((y - self.origin.1) / self.resolution).clamp(0.0, (self.ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.nx - 2);
        let j0 = (fy.floor() as usize).min(self.ny - 2);
        let (tx, ty) = (fx - i0 as f64, fy - j0 as f64);
        let h = |i: usize, j: usize| self.heights[j * self.nx + i];
        let a = h(i0, j0) * (1.0 - tx) + h(i0 + 1, j0) * tx;
        let b = h(i0, j0 + 1) * (1.0 - tx) + h(i0 + 1, j0 + 1) * tx;
        a * (1.0 - ty) + b * ty
    }
}

pub fn filter_ground(cloud: &PointCloud, params: &GroundFilterParams) -> Result<GroundSplit> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("ground filter needs a non-empty cloud".into()));
    }
    let bb = cloud.bounds().unwrap();
    let ext = bb.extent();
    if cloud.len() < 4 || (ext.x < params.cloth_resolution && ext.y < params.cloth_resolution) {
        log::warn!(
            "ground filter: cloud of {} points spans less than one cloth cell; labeling all as ground",
            cloud.len()
        );
        return Ok(GroundSplit {
            ground: (0..cloud.len()).collect(),
            nonground: Vec::new(),
            degenerate: true,
            iterations: 0,
        });
    }
    let (cloth, iterations) = simulate_cloth(cloud, params)?;
    let mut split = GroundSplit {
        iterations,
        ..Default::default()
    };
    for (i, p) in cloud.points.iter().enumerate() {
        let d = (cloth.height_at(p.x, p.y) - (-p.z)).abs();
        if d <= params.classification_threshold {
            split.ground.push(i);
        } else {
            split.nonground.push(i);
        }
    }
    Ok(split)
}

pub fn simulate_cloth(cloud: &PointCloud, params: &GroundFilterParams) -> Result<(Cloth, usize)> {
    let bb = cloud.bounds().ok_or_else(|| Error::InvalidArgument("empty cloud".into()))?;
    let res = params.cloth_resolution;
    let buffer = BUFFER_CELLS as f64 * res;
    let origin = (bb.min.x - buffer, bb.min.y - buffer);
    let nx = ((bb.max.x - bb.min.x) / res).ceil() as usize + 2 * BUFFER_CELLS + 1;
    let ny = ((bb.max.y - bb.min.y) / res).ceil() as usize + 2 * BUFFER_CELLS + 1;
    let n = nx.checked_mul(ny).filter(|&n| n <= MAX_PARTICLES).ok_or_else(|| {
        Error::InvalidArgument(format!("cloth grid {nx}x{ny} too large; raise cloth_resolution"))
    })?;

    // Collision height per particle: the highest inverted point (lowest
    // original point) among points whose nearest particle it is.
    let mut collide = vec![f64::NEG_INFINITY; n];
    let mut top = f64::NEG_INFINITY;
    for p in &cloud.points {
        let i = (((p.x - origin.0) / res).round() as usize).min(nx - 1);
        let j = (((p.y - origin.1) / res).round() as usize).min(ny - 1);
        let h = -p.z;
        let c = &mut collide[j * nx + i];
        *c = c.max(h);
        top = top.max(h);
    }
    fill_missing(&mut collide, nx, ny);

    let neighbors = spring_neighbors(nx, ny);
    let rig = (params.rigidness as usize).min(SINGLE_MOVE.len() - 1);
    let (single, double) = (SINGLE_MOVE[rig], DOUBLE_MOVE[rig]);
    let accel = -GRAVITY * params.time_step * params.time_step;

    let start = top + 1.0;
    let mut pos = vec![start; n];
    let mut old = vec![start; n];
    let mut movable = vec![true; n];
    let mut iterations = 0;
    let mut before = vec![0.0; n];
    for _ in 0..params.max_iterations {
        iterations += 1;
        before.copy_from_slice(&pos);
        for k in 0..n {
            if movable[k] {
                let next = pos[k] + (pos[k] - old[k]) * (1.0 - DAMPING) + accel;
                old[k] = pos[k];
                pos[k] = next;
            }
        }
        for a in 0..n {
            for &b in &neighbors[a] {
                let corr = pos[b] - pos[a];
                match (movable[a], movable[b]) {
                    (true, true) => {
                        pos[a] += corr * double;
                        pos[b] -= corr * double;
                    }
                    (true, false) => pos[a] += corr * single,
                    (false, true) => pos[b] -= corr * single,
                    (false, false) => {}
                }
            }
        }
        let mut max_move = 0.0f64;
        for k in 0..n {
            if movable[k] && pos[k] < collide[k] {
                pos[k] = collide[k];
                old[k] = collide[k];
                movable[k] = false;
            }
            max_move = max_move.max((pos[k] - before[k]).abs());
        }
        if max_move < params.convergence {
            break;
        }
    }
    Ok((
        Cloth {
            origin,
            resolution: res,
            nx,
            ny,
            heights: pos,
        },
        iterations,
    ))
}

/// Particles with no points take the collision height of the nearest
/// (grid-BFS) particle that has one.
fn fill_missing(h: &mut [f64], nx: usize, ny: usize) {
    let mut queue: VecDeque<usize> = (0..h.len()).filter(|&k| h[k].is_finite()).collect();
    while let Some(k) = queue.pop_front() {
        let (i, j) = (k % nx, k / nx);
        let mut visit = |m: usize| {
            if !h[m].is_finite() {
                h[m] = h[k];
                queue.push_back(m);
            }
        };
        if i > 0 {
            visit(k - 1);
        }
        if i + 1 < nx {
            visit(k + 1);
        }
        if j > 0 {
            visit(k - nx);
        }
        if j + 1 < ny {
            visit(k + nx);
        }
    }
}

/// Structural, shear and bending springs, registered on both endpoints.
fn spring_neighbors(nx: usize, ny: usize) -> Vec<Vec<usize>> {
    let mut nb = vec![Vec::new(); nx * ny];
    let id = |i: usize, j: usize| j * nx + i;
    let mut link = |a: usize, b: usize| {
        nb[a].push(b);
        nb[b].push(a);
    };
    for step in [1usize, 2] {
        for j in 0..ny {
            for i in 0..nx {
                if i + step < nx {
                    link(id(i, j), id(i + step, j));
                }
                if j + step < ny {
                    link(id(i, j), id(i, j + step));
                }
                if i + step < nx && j + step < ny {
                    link(id(i, j), id(i + step, j + step));
                    link(id(i + step, j), id(i, j + step));
                }
            }
        }
    }
    nb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pc::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(n_side: usize, size: f64, slope_deg: f64) -> Vec<Point3> {
        let t = slope_deg.to_radians().tan();
        let mut pts = Vec::new();
        for a in 0..n_side {
            for b in 0..n_side {
                let x = a as f64 * size / (n_side - 1) as f64;
                let y = b as f64 * size / (n_side - 1) as f64;
                pts.push(Point3::new(x, y, x * t));
            }
        }
        pts
    }

    #[test]
    fn flat_plane_is_all_ground() {
        let cloud = PointCloud::new(plane(100, 30.0, 0.0));
        let s = filter_ground(&cloud, &GroundFilterParams::default()).unwrap();
        assert_eq!(s.ground.len(), 10_000);
        assert!(!s.degenerate);
    }

    #[test]
    fn gentle_slope_is_all_ground() {
        let cloud = PointCloud::new(plane(100, 30.0, 5.0));
        let s = filter_ground(&cloud, &GroundFilterParams::default()).unwrap();
        assert_eq!(s.nonground.len(), 0, "{} slope points rejected", s.nonground.len());
    }

    #[test]
    fn cube_on_plane_is_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = plane(120, 30.0, 0.0);
        let ground_n = pts.len();
        // 3 m cube at (12..15, 12..15): four walls and a roof.
        for _ in 0..6000 {
            let (u, v): (f64, f64) = (rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0);
            let p = match rng.random_range(0..5) {
                0 => Point3::new(12.0 + u, 12.0, v),
                1 => Point3::new(12.0 + u, 15.0, v),
                2 => Point3::new(12.0, 12.0 + u, v),
                3 => Point3::new(15.0, 12.0 + u, v),
                _ => Point3::new(12.0 + u, 12.0 + v, 3.0),
            };
            pts.push(p);
        }
        let cloud = PointCloud::new(pts.clone());
        let s = filter_ground(&cloud, &GroundFilterParams::default()).unwrap();
        assert_eq!(s.ground.len() + s.nonground.len(), cloud.len());
        let ground: std::collections::HashSet<usize> = s.ground.iter().copied().collect();
        // Plane points far from the cube stay ground.
        for i in 0..ground_n {
            let p = pts[i];
            let inside = (11.5..15.5).contains(&p.x) && (11.5..15.5).contains(&p.y);
            if !inside {
                assert!(ground.contains(&i), "plane point {p:?} rejected");
            }
        }
        // Wall and roof points well above the threshold are not ground.
        for i in ground_n..pts.len() {
            if pts[i].z > 0.75 {
                assert!(!ground.contains(&i), "cube point {:?} marked ground", pts[i]);
            }
        }
    }

    #[test]
    fn threshold_monotone_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point3> = (0..5000)
            .map(|_| {
                let (x, y): (f64, f64) = (rng.random::<f64>() * 20.0, rng.random::<f64>() * 20.0);
                let bump = if (8.0..12.0).contains(&x) && (8.0..12.0).contains(&y) { rng.random::<f64>() * 4.0 } else { 0.0 };
                Point3::new(x, y, 0.05 * rng.random::<f64>() + bump)
            })
            .collect();
        let cloud = PointCloud::new(pts);
        let mut prev = 0;
        for th in [0.1, 0.3, 0.5, 1.0, 2.0] {
            let params = GroundFilterParams { classification_threshold: th, ..Default::default() };
            let a = filter_ground(&cloud, &params).unwrap();
            let b = filter_ground(&cloud, &params).unwrap();
            assert_eq!(a, b);
            assert!(a.ground.len() >= prev);
            prev = a.ground.len();
        }
    }

    #[test]
    fn tiny_cloud_is_flagged() {
        let cloud = PointCloud::new(vec![Point3::zeros(), Point3::new(0.1, 0.1, 2.0)]);
        let s = filter_ground(&cloud, &GroundFilterParams::default()).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.ground, vec![0, 1]);
    }

    #[test]
    fn invalid_params() {
        let cloud = PointCloud::new(vec![Point3::zeros()]);
        let p = GroundFilterParams { cloth_resolution: 0.0, ..Default::default() };
        assert!(filter_ground(&cloud, &p).is_err());
        assert!(filter_ground(&PointCloud::new(vec![]), &GroundFilterParams::default()).is_err());
    }
}
