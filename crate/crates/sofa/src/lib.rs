//! Self-organized fund allocation: every scientist receives an equal base
//! grant and passes a fixed fraction of everything they receive on to peers
//! of their choosing. The crate simulates the resulting flows, checks them
//! for conflicts of interest and collusion, and measures how concentrated
//! the outcome is.

pub mod error;
pub mod integrity;
pub mod io;
pub mod mechanism;
pub mod metrics;
pub mod policy;
pub mod population;
pub mod rng;
pub mod simulation;

pub use error::{ConfigIssue, Error, Result};
pub use mechanism::{run_fixed_point, AllocationPlan, FixedPointResult, FundingState};
pub use population::{Agent, AgentId, Community};
pub use simulation::{run_scenario, ScenarioConfig, ScenarioResult};
