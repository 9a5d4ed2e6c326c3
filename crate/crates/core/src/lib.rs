//! Planning and simulation of collaborative Transformer training across a
//! pool of trusted, wirelessly connected edge devices.
//!
//! The crate is organised along the training workflow:
//!
//! * [`workload`] derives parameters, FLOPs and memory of a Transformer job.
//! * [`platform`] describes devices, their power states and the network.
//! * [`parallelism`] turns a job into data/sequence/tensor/pipeline plans with
//!   their communication schedules and memory requirements.
//! * [`sim`] executes a plan in a deterministic discrete-event engine.
//! * [`scheduler`] searches devices, parallelism, stage order and checkpoint
//!   interval against an objective.
//! * [`config`] holds the on-disk schemas for domains, jobs and plans.

pub mod config;
pub mod error;
pub mod parallelism;
pub mod platform;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
pub use parallelism::{CommEvent, CommOp, ParallelKind, ParallelPlan, Partition};
pub use platform::{DeviceProfile, ExecMode, FaultModel, NetworkModel, TrustedDomain};
pub use scheduler::{Objective, OrchestrationStrategy};
pub use sim::{SimConfig, SimulationResult};
pub use workload::{TrainingJob, TransformerSpec};
