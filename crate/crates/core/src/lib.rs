pub mod association;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod io;
pub mod objects;
pub mod pipeline;
pub mod raycast;
pub mod synth;
pub mod tracking;
pub mod tsdf;

/// Model identifier: 0 is the background, objects count up from 1.
pub type ModelId = u32;

pub const BACKGROUND_ID: ModelId = 0;
