//! Model-to-scan registration: boundary keypoints, coarse alignment, and
//! ICP plus point-to-plane refinement.

mod coarse;
mod fine;
mod keypoints;

pub use coarse::{
    building_keypoints, coarse_align_building, coarse_align_pole, coarse_align_with_keypoints,
    coplanarity_measure, enumerate_bases, CoarseParams, CoarseResult, FourPointBasis,
};
pub use fine::{
    icp_point_to_point, is_collinear, perturbed_residual, point_to_plane_distance, refine_model_points,
    refine_point_to_plane, refinement_points, residual_jacobian, RefinementModel, select_plane_triple, SurfaceTerm, FineParams, FineResult,
    IcpResult, LmStep, Residual,
};
pub use keypoints::{detect_boundary_keypoints, farthest_point_sample, max_angular_gap};

use crate::bim::{sample_surface, BimModel, RigidTransform};
use crate::error::Result;
use crate::pc::PointCloud;

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub coarse: CoarseResult,
    pub icp: IcpResult,
    pub fine: FineResult,
    /// Maps the model into the LiDAR frame.
    pub transform: RigidTransform,
}

/// Coarse alignment by object kind, then ICP of the LiDAR onto a dense model
/// surface sample, then point-to-plane refinement.
pub fn register_model(
    bim: &BimModel,
    lidar: &PointCloud,
    coarse_params: &CoarseParams,
    fine_params: &FineParams,
) -> Result<Registration> {
    fine_params.validate()?;
    let coarse = if bim.kind.is_pole() {
        coarse_align_pole(lidar, bim, coarse_params)?
    } else {
        coarse_align_building(lidar, bim, coarse_params)?
    };
    let density = fine_params.icp_model_points as f64 / bim.surface_area().max(1e-9);
    let model = sample_surface(bim, density, fine_params.seed)?.cloud;
    let icp = icp_point_to_point(lidar, &model, &coarse.transform.inverse(), fine_params)?;
    let fine = refine_point_to_plane(bim, lidar, &icp.transform.inverse(), fine_params)?;
    Ok(Registration {
        transform: fine.transform,
        coarse,
        icp,
        fine,
    })
}
