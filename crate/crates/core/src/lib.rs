//! Link-level model of a lens-antenna-subarray UAV downlink with rate-splitting
//! multiple access, and a meta-initialized DDPG allocator for it.

pub mod allocator;
pub mod array_channel;
pub mod config;
pub mod ddpg;
pub mod error;
pub mod experiment;
pub mod mdp_env;
pub mod meta;
pub mod nn;
pub mod precoding;
pub mod rsma_rates;

pub use array_channel::{draw_channel, steering_vector, user_geometry, ChannelRealization, GroundUser, LasConfig, UavPose};
pub use error::{Error, Result};
pub use precoding::{BeamAssignment, PrecoderSet};
pub use rsma_rates::{CommonRateSplit, PowerAllocation, PowerModel, RateOptions, RateReport};
pub use allocator::SearchConfig;
pub use config::{ExperimentConfig, RunConfig, SweepConfig};
pub use ddpg::{AgentConfig, DdpgAgent, Environment};
pub use experiment::{Assertion, Experiment};
pub use mdp_env::{LasEnv, ScenarioConfig, Task};
pub use meta::{MetaConfig, MetaParams};
