//! Point cloud container, file formats, spatial index, subsampling,
//! eigen-features and connected components.

mod cloud;
mod components;
mod features;
pub(crate) mod grid;
pub mod io;
mod spatial;

pub use cloud::{centroid, Aabb, Point3, PointCloud, SemanticClass};
pub use components::{connected_components, connected_components_indexed, Components, UnionFind};
pub use features::{
    covariance, eigen_features, features_for_all, sym_eigen3, EigenFeatures, Neighborhood, SymEigen,
};
pub use grid::grid_subsample;
pub use io::{encode_ply, load_cloud, parse_ply, parse_xyz, write_ply, write_xyz, CloudFormat, ExtraProperty, PlyEncoding};
pub use spatial::{Neighbor, SpatialIndex};
