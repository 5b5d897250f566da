//! Tabular mean-field Q-learning: softmin policies, the coupled drift
//! operators, two- and three-timescale learners, and exact fixed-point
//! oracles to check them against.

pub mod envs;
pub mod error;
pub mod operators;
pub mod oracles;
pub mod policy;
pub mod schedules;
pub mod spaces;
pub mod trainers;

pub use error::{Error, Result};
pub use policy::{argmin_e, softmin, ActionDistribution, PolicyTable};
pub use schedules::{rate_at, RateSchedule, Regime, TimescaleConfig};
pub use spaces::{
    ActionSpace, IgnoreLocal, MeanFieldEnv, QTable, Rng, SimplexVector, StateSpace,
    TabularMFEnvironment, ThreePopEnv, ThreePopEnvironment,
};
pub use trainers::{RunTrace, TrainerConfig};
