//! Sequential maximum-a-posteriori inference for an infinite hidden Markov
//! model whose hidden states are smooth vector fields with multi-response
//! Gaussian-process priors.
//!
//! The numerical modules are generic over the scalar type ([`Real`], i.e.
//! `f32` or `f64`); the aliases below fix the common `f64` instantiation.
//!
//! ```
//! use flowfield::{simulate, run, EngineConfig, RbfKernel, SimConfig};
//!
//! let sim = simulate(&SimConfig { steps: 5, mean_points: 10.0, ..SimConfig::default() }).unwrap();
//! let cfg = EngineConfig::planar(1.0, RbfKernel::new(1.0, 1.0).unwrap());
//! let fit = run(cfg, &sim.frames).unwrap();
//! assert_eq!(fit.assignments.len(), 5);
//! ```

pub mod engine;
pub mod error;
pub mod frame;
pub mod ihmm;
pub mod kernel;
pub mod mrgp;
pub mod num;
pub mod simulator;

pub use engine::{run, run_with, Assignment, ConfigSummary, Engine, EngineConfig, EngineState, FitResult};
pub use error::{Error, Result};
pub use frame::Frame;
pub use ihmm::{state_posterior, HmmCounts, StateDecision, TransitionMatrix};
pub use kernel::{gram_matrix, kernel_matrix, kron_equicorr, obs_covariance, rbf_eval, Equicorr, Locations, RbfKernel};
pub use mrgp::{
    clamp_rho, gaussian_logpdf, rho_moment_match, spectral_inverse, ClusterModel, FieldEstimate, Mrgp, RhoEstimate,
    RhoMode, SpectralInverse,
};
pub use num::Real;
pub use simulator::{builtin_fields, gen_transition, simulate, Domain, SimConfig, SimOutput, VectorField};

pub type FrameF64 = Frame<f64>;
pub type FrameF32 = Frame<f32>;
pub type ClusterModelF64 = ClusterModel<f64>;
pub type ClusterModelF32 = ClusterModel<f32>;
pub type MrgpF64 = Mrgp<f64>;
pub type MrgpF32 = Mrgp<f32>;
pub type EngineConfigF64 = EngineConfig<f64>;
pub type EngineConfigF32 = EngineConfig<f32>;
pub type FitResultF64 = FitResult<f64>;
pub type HmmCountsF64 = HmmCounts<f64>;
pub type LocationsF64 = Locations<f64>;
