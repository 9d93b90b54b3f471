//! Hierarchical scene coordinate classification and regression for visual
//! localization: scene-coordinate label trees, a FiLM-conditioned network
//! with hand-written gradients, training, PnP-RANSAC pose estimation and a
//! synthetic room generator.

pub mod eval;
pub mod geometry;
pub mod hierarchy;
pub mod network;
pub mod pose_solver;
pub mod scene_sim;
pub mod tensor;
pub mod training;

pub use eval::{evaluate, evaluate_frames, localize_frame, EvalError, EvalReport, FrameResult, RunConfig};
pub use geometry::{pose_error, project, backproject, CameraIntrinsics, PoseError, RigidPose, SceneCoordinate};
pub use hierarchy::{reconstruct, regression_target, LabelPath, LabelTree, TreeBuildOptions};
pub use network::{predict_coordinates, CoordinateMap, HscNet, HscNetConfig, LabelMap, NetworkOutput};
pub use pose_solver::{estimate_pose, CorrespondenceSet, PoseEstimate, RansacConfig, SolverError};
pub use scene_sim::{FrameSample, RoomSpec, SceneFile, Split, SyntheticScene};
pub use tensor::Tensor;
pub use training::{train, AugmentSpec, LossWeights, TrainOptions, TrainSchedule};
