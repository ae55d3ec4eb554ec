//! Layered-canvas conditioning for a small flow-matching transformer.

pub mod canvas;
pub mod codec;
pub mod color;
pub mod manifest;
pub mod model;
pub mod parallel;
pub mod sampler;
pub mod synth;
pub mod train;
