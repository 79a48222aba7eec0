//! Mode-switching core for low-DoF teleoperation of a 7-DoF end-effector.

pub mod episode;
pub mod events;
pub mod gateway;
pub mod grounding;
pub mod learning;
pub mod model;
pub mod sim;
pub mod switcher;
