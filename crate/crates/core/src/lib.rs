//! Stochastic weight averaging, end to end, at desk scale.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod landscape;
pub mod model;
pub mod param;
pub mod quadratic;
pub mod report;
pub mod schedules;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Activation, Batch, Matrix, MlpSpec, MlpState, Mode};
pub use param::ParamVector;
pub use schedules::LrSchedule;
pub use trainer::{SwaRun, SwaState, TrainerConfig, TrajectoryLog};
