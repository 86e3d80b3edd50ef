//! Pinhole geometry, differentiable warping and point-cloud export.

mod camera;
mod depth;
mod ply;
mod transform;
mod warp;

pub use camera::CameraIntrinsics;
pub use depth::{
    depth_to_disparity, disparity_to_depth, inv_depth_from_sigmoid, sigmoid_to_depth, DepthMap, DisparityMap,
    MAX_DEPTH, MIN_DEPTH,
};
pub use ply::{export_point_cloud, read_ply, write_point_cloud, PlyVertex};
pub use transform::{pose_from_axis_angle, PoseVar, RigidTransform};
pub use warp::{
    backproject, bilinear_sample, project, warp_sequence, warp_stereo, project_depth, Projection, StereoDirection, Warped,
    BEHIND_CAMERA_EPS,
};
