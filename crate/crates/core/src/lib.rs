//! McKean-Vlasov SDEs: Picard iteration for the measure flow, interacting
//! and decoupled particle systems, pathwise Malliavin derivatives and
//! Wasserstein-2 distances between empirical measures.
//!
//! Everything is generic over the scalar type (`f64` or `f32`); the
//! `f64` aliases below cover the common case.

pub mod error;
pub mod experiments;
pub mod malliavin;
pub mod measure;
pub mod model;
pub mod particle;
pub mod scalar;
pub mod sde;

pub use error::{Error, Result};
pub use experiments::{
    run_cross_decay_study, run_derivative_studies, run_diagonal_convergence_study, run_mean_field_psi_study,
    run_moment_bound_study, run_poc_study, StudyConfig, StudyResult,
};
pub use malliavin::{
    directional_derivative, finite_difference_oracle, malliavin_ips, malliavin_limit, malliavin_limit_all,
    propagate_limit, MalliavinIpsField, MalliavinLimitField, OracleSystem,
};
pub use measure::{
    exact_assignment_w2, first_moment, second_moment, sliced_w2, sorted_pairing_w2, wasserstein2, wasserstein2_with,
    EmpiricalMeasure, MeasureFlow, W2Method, W2Options, W2,
};
pub use model::{BuiltinModel, Model, Regularity};
pub use particle::{poc_gap, poc_gap_paths, simulate_coupled, simulate_ips, simulate_non_ips, CoupledSystems, PocGap};
pub use scalar::Scalar;

pub use sde::{
    picard_solve, sample_noise, simulate_frozen_flow, InitSampler, NoiseBundle, ParticlePaths, PicardOptions,
    PicardResult, Scheme, TimeGrid,
};

pub type Measure = EmpiricalMeasure<f64>;
pub type Flow = MeasureFlow<f64>;
pub type Grid = TimeGrid<f64>;
pub type Noise = NoiseBundle<f64>;
pub type Paths = ParticlePaths<f64>;
pub type Builtin = BuiltinModel<f64>;
pub type LimitField = MalliavinLimitField<f64>;
pub type IpsField = MalliavinIpsField<f64>;

pub type Measure32 = EmpiricalMeasure<f32>;
pub type Grid32 = TimeGrid<f32>;
pub type Paths32 = ParticlePaths<f32>;
pub type Builtin32 = BuiltinModel<f32>;

/// Version of this crate, recorded in study metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
