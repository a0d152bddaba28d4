//! HybridGen: two-stage augmentation of robot manipulation demonstrations.
//!
//! Stage 1 adapts the data-dependent parts of a few source demonstrations to
//! new scenes and replans the rest under keypoint constraints; stage 2 scales
//! the result up with pose-only adaptation. Every kept demonstration is
//! replayed in a kinematic simulator and filtered on task success.

pub mod adapt;
pub mod constraints;
pub mod demos;
pub mod gateway;
pub mod geometry;
pub mod jsonfmt;
pub mod keypoints;
pub mod pipeline;
pub mod planner;
pub mod selection;
pub mod simenv;
