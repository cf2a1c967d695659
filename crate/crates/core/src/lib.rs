//! Interpretable temporal prototype network for predicting depression from
//! irregularly timed walking-test accelerometer recordings.

pub mod autodiff;
pub mod sensor;
pub mod eval;
pub mod gait;
pub mod encoder;
pub mod prototype;
pub mod synth;
pub mod model;
pub mod interpret;
pub mod experiments;
