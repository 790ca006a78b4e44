//! Mobile-base extension: a holonomic base carrying a planar arm, with
//! whole-body sphere velocities and base motion entering the safety rows.

mod kmpc;
mod robot;

pub use kmpc::{
    build_floating_kmpc, floating_model_spec, run_floating, BaseMode, FloatingEpisode, FloatingLog,
    FloatingProblem,
};
pub use robot::{
    body_geometry, floating_constraint_row, sample_floating_dataset, whole_body_velocity,
    BodyGeometry, FloatingPlant, FloatingRobot, FloatingState,
};
