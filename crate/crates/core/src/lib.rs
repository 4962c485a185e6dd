//! Urban LiDAR instance segmentation and BIM geo-referencing.
//!
//! The crate segments a projected LiDAR scene into ground, building,
//! vegetation and pole-like instances, then rigidly registers each
//! instance's design mesh onto its points: a congruent four-point search
//! (buildings) or principal-axes alignment (poles), followed by ICP and a
//! Levenberg–Marquardt point-to-plane refinement.

pub mod bim;
pub mod error;
pub mod eval;
pub mod ground;
pub mod instance;
pub mod pipeline;
pub mod weak_labels;
pub mod pc;
pub mod registration;
pub mod semantic;
pub mod synth;

pub use bim::{BimModel, ObjectKind, RigidTransform};
pub use error::{Error, Result};
pub use pc::{EigenFeatures, Point3, PointCloud, SemanticClass, SpatialIndex};
