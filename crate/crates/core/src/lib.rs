//! Turn-level reinforcement learning for tool-use agents.
//!
//! Interactions are modelled as an episodic MDP whose actions are complete
//! assistant turns. On top of that the crate provides:
//!
//! - synthetic tool-use environments with planted branching ("pivot") states,
//! - exact value, advantage-gap and policy-gradient oracles for enumerable
//!   environments,
//! - functional-matching verifiers (strict, field-wise IOU, judge),
//! - the offline pivot pipeline: decomposition, reward profiling and
//!   variance/difficulty filtering,
//! - a group-normalized clipped policy optimizer operating at pivot states,
//! - numerical checks of the KL-projection and reward-variance identities.

pub mod action;
pub mod mdp;
pub mod pipeline;
pub mod policy;
pub mod record;
pub mod seed;
pub mod state;
pub mod synth;
pub mod theory;
pub mod trainer;
pub mod values;
pub mod verifier;

pub use action::{
    ActionError, ActionKind, FieldKind, Observation, ToolContext, ToolSpec, TurnAction,
};
pub use mdp::{EnvSuite, MdpError, Outcome, StateGraph, TurnEnv};
pub use policy::{ParamKey, ParamVec, PolicyError, PolicySnapshot, SnapshotRole, TurnPolicy};
pub use state::{InteractionState, Step, Trajectory};
