//! Kinematic desk-scale simulator: scene sampling, trajectory playback with
//! grasp attach/detach, and task success predicates.

mod exec;
mod scene;
mod tasks;

pub use exec::*;
pub use scene::*;
pub use tasks::*;
