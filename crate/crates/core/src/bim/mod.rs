//! Design-model geometry: OBJ ingestion, rigid transforms, surface sampling.

mod mesh;
mod transform;

pub use mesh::{
    apply_transform, closest_point_on_triangle, encode_obj, load_mesh, parse_obj, sample_faces, sample_surface, save_obj,
    BimModel, ObjectKind, SurfaceSample,
};
pub(crate) use transform::nearest_rotation;
pub use transform::RigidTransform;
