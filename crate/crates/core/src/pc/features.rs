//! Covariance eigen-analysis of local neighborhoods.
//!
//! Roughness is `λ2 / (λ0 + λ1 + λ2)` and anisotropy `(λ0 − λ2) / λ0`, with
//! the eigenvalues of the neighborhood covariance sorted descending.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::cloud::Point3;
use super::spatial::SpatialIndex;
use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric 3x3 matrix, sorted descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEigen {
    pub values: [f64; 3],
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix3<f64>,
}

/// Cyclic Jacobi rotations; converges to machine precision for 3x3 input.
pub fn sym_eigen3(m: &Matrix3<f64>) -> SymEigen {
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = Matrix3::<f64>::identity();
    let scale = a.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    if scale > 0.0 {
        for _sweep in 0..64 {
            let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
            if off <= (f64::EPSILON * scale).powi(2) * 1e-4 {
                break;
            }
            for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut rot = Matrix3::<f64>::identity();
                rot[(p, p)] = c;
                rot[(q, q)] = c;
                rot[(p, q)] = s;
                rot[(q, p)] = -s;
                a = rot.transpose() * a * rot;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                v *= rot;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let mut vectors = Matrix3::zeros();
    let mut values = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = a[(src, src)];
        vectors.set_column(dst, &v.column(src));
    }
    SymEigen { values, vectors }
}

/// Population covariance about the neighborhood mean.
pub fn covariance(points: &[Point3]) -> (Point3, Matrix3<f64>) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Point3::zeros(), |acc, p| acc + p) / n;
    let mut c = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        c += d * d.transpose();
    }
    (mean, c / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EigenFeatures {
    /// λ0 ≥ λ1 ≥ λ2 ≥ 0.
    pub lambda: [f64; 3],
    pub roughness: f64,
    pub anisotropy: f64,
    /// Eigenvector of the smallest eigenvalue.
    pub normal: Vector3<f64>,
    /// Eigenvector of the largest eigenvalue.
    pub principal: Vector3<f64>,
}

impl EigenFeatures {
    pub fn from_points(points: &[Point3]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::DegenerateNeighborhood(points.len()));
        }
        let (_, c) = covariance(points);
        Ok(Self::from_covariance(&c))
    }

    pub fn from_covariance(c: &Matrix3<f64>) -> Self {
        let eig = sym_eigen3(c);
        let lambda = eig.values.map(|l| l.max(0.0));
        let total = lambda[0] + lambda[1] + lambda[2];
        let (roughness, anisotropy) = if total > 0.0 && lambda[0] > 0.0 {
            (lambda[2] / total, (lambda[0] - lambda[2]) / lambda[0])
        } else {
            (0.0, 0.0)
        };
        EigenFeatures {
            lambda,
            roughness,
            anisotropy,
            normal: eig.vectors.column(2).into_owned(),
            principal: eig.vectors.column(0).into_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Neighborhood {
    /// The k nearest points, the query point included.
    K(usize),
    /// All points within the radius, the query point included.
    Radius(f64),
}

impl Neighborhood {
    pub fn gather(&self, index: &SpatialIndex, query: &Point3) -> Vec<usize> {
        match *self {
            Neighborhood::K(k) => index.knn(query, k).into_iter().map(|n| n.index).collect(),
            Neighborhood::Radius(r) => index
                .within_radius(query, r)
                .into_iter()
                .map(|n| n.index)
                .collect(),
        }
    }
}

/// Features of the neighborhood around point `point` of the indexed cloud.
pub fn eigen_features(
    index: &SpatialIndex,
    point: usize,
    neighborhood: Neighborhood,
) -> Result<EigenFeatures> {
    let q = *index.point(point);
    let nb: Vec<Point3> = neighborhood
        .gather(index, &q)
        .into_iter()
        .map(|i| *index.point(i))
        .collect();
    EigenFeatures::from_points(&nb)
}

/// Features for every point of the indexed cloud, computed in parallel.
pub fn features_for_all(
    index: &SpatialIndex,
    neighborhood: Neighborhood,
) -> Vec<Result<EigenFeatures>> {
    (0..index.len())
        .into_par_iter()
        .map(|i| eigen_features(index, i, neighborhood))
        .collect()
}
