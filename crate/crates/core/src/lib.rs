//! Physics-grounded trajectory rewards and group-relative policy optimization
//! for ego-vehicle planning.
//!
//! The planner is a small diagonal-Gaussian policy over bird's-eye-view
//! waypoints. Its samples are serialized into the `<think>…</think><answer>…</answer>`
//! response grammar, scored with a format reward plus a weighted sum of
//! position, heading, speed and smoothness errors, and optimized with
//! group-standardized advantages under a KL penalty to a frozen reference.
//!
//! Modules:
//! - [`model`]: domain types, finite-difference motion and the constant
//!   acceleration rollout.
//! - [`response`]: response grammar, format reward and reasoning-stage scan.
//! - [`reward`]: accuracy error terms and the total response reward.
//! - [`kinematics`]: turning radius, friction, jerk and suspension checks.
//! - [`grpo`]: policy, advantages, surrogate objective and training loop.
//! - [`harness`]: scenario files, horizon L2 evaluation, ablations and reports.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grpo;
pub mod harness;
pub mod kinematics;
pub mod model;
pub mod response;
pub mod reward;

pub use error::{Error, Result};
pub use model::{
    History, MotionProfile, Scenario, ScenarioKind, Trajectory, Vec2, VehicleSpec, VehicleState,
};
