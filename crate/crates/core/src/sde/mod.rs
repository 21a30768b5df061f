//! Time grids, Brownian noise, one-step schemes, frozen-flow simulation and
//! the Picard solver for the measure flow.

pub mod grid;
pub mod noise;
pub mod paths;
pub mod picard;
pub mod scheme;

pub use grid::TimeGrid;
pub use noise::{derive_seed, sample_noise, substream, NoiseBundle};
pub use paths::{simulate_frozen_flow, InitSampler, ParticlePaths};
pub use picard::{flow_distance, picard_solve, PicardOptions, PicardResult};
pub use scheme::{step, Scheme};
