//! The 22-joint articulated body: rotations, forward kinematics, state
//! layout and pose corruption.

pub mod body;
pub mod fk;
pub mod frame;
pub mod motion;
pub mod rotation;

pub use body::{
    shape_to_bone_scales, BodyShape, KinematicTree, Observation3D, PoseState, NUM_BETAS, NUM_BODY_JOINTS,
    NUM_JOINTS, NUM_MARKERS, NUM_POINTS, OBS_DIM, STATE_DIM,
};
pub use frame::{heading, nearest_equivalent, RootFrame};
pub use fk::{fk_flat, fk_node, forward_kinematics, forward_kinematics_with};
pub use motion::{compute_velocities, inject_pose_noise, RawPose};
pub use rotation::{log_map, rodrigues, Mat3, Vec3};
