//! Interaction prefixes and trajectories.

use serde::{Deserialize, Serialize};

use crate::action::{Observation, TurnAction};
use crate::seed::content_hash;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub action: TurnAction,
    pub observation: Observation,
}

/// An interaction prefix: the context id plus every (turn, observation) pair
/// so far. Identity is a content hash of that transcript, so a state can be
/// rebuilt from stored data without the rollout that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "StateRepr", into = "StateRepr")]
pub struct InteractionState {
    pub context_id: String,
    pub transcript: Vec<TranscriptEntry>,
    pub depth: usize,
    pub terminal: bool,
    pub state_key: String,
}

#[derive(Serialize, Deserialize)]
struct StateRepr {
    context_id: String,
    transcript: Vec<TranscriptEntry>,
    #[serde(default)]
    terminal: bool,
}

impl From<StateRepr> for InteractionState {
    fn from(r: StateRepr) -> Self {
        InteractionState::from_transcript(r.context_id, r.transcript, r.terminal)
    }
}

impl From<InteractionState> for StateRepr {
    fn from(s: InteractionState) -> Self {
        StateRepr {
            context_id: s.context_id,
            transcript: s.transcript,
            terminal: s.terminal,
        }
    }
}

fn state_key(context_id: &str, transcript: &[TranscriptEntry]) -> String {
    let mut fields: Vec<&[u8]> = Vec::with_capacity(1 + 3 * transcript.len());
    fields.push(context_id.as_bytes());
    for entry in transcript {
        fields.push(entry.action.canonical_key().as_bytes());
        fields.push(if entry.observation.is_error {
            b"E"
        } else {
            b"O"
        });
        fields.push(entry.observation.payload.as_bytes());
    }
    content_hash(fields)
}

impl InteractionState {
    pub fn initial(context_id: impl Into<String>) -> Self {
        Self::from_transcript(context_id.into(), Vec::new(), false)
    }

    pub fn from_transcript(
        context_id: String,
        transcript: Vec<TranscriptEntry>,
        terminal: bool,
    ) -> Self {
        let state_key = state_key(&context_id, &transcript);
        Self {
            depth: transcript.len(),
            context_id,
            transcript,
            terminal,
            state_key,
        }
    }

    /// The state reached by appending one (turn, observation) pair.
    pub fn successor(&self, action: TurnAction, observation: Observation, terminal: bool) -> Self {
        let mut transcript = self.transcript.clone();
        transcript.push(TranscriptEntry {
            action,
            observation,
        });
        Self::from_transcript(self.context_id.clone(), transcript, terminal)
    }

    pub fn key(&self) -> &str {
        &self.state_key
    }

    /// True if any observation so far was an error.
    pub fn has_error(&self) -> bool {
        self.transcript.iter().any(|e| e.observation.is_error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: InteractionState,
    pub action: TurnAction,
    pub observation: Observation,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub context_id: String,
    pub steps: Vec<Step>,
    pub final_return: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("trajectory `{trajectory}` step {step}: {reason}")]
pub struct MalformedTrajectory {
    pub trajectory: String,
    pub step: usize,
    pub reason: String,
}

/// Discounted return `sum_t gamma^t r_t` of a step-reward sequence.
pub fn discounted_return(rewards: impl IntoIterator<Item = f64>, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for r in rewards {
        total += weight * r;
        weight *= gamma;
    }
    total
}

impl Trajectory {
    pub fn return_of(&self, gamma: f64) -> f64 {
        discounted_return(self.steps.iter().map(|s| s.reward), gamma)
    }

    /// The state after the last step, or `None` for an empty trajectory.
    pub fn final_state(&self) -> Option<InteractionState> {
        self.steps.last().map(|s| {
            s.state
                .successor(s.action.clone(), s.observation.clone(), true)
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks the alternation invariant: every state extends its predecessor
    /// by exactly the recorded (action, observation) pair.
    pub fn validate(&self, horizon_max: Option<usize>) -> Result<(), MalformedTrajectory> {
        let fail = |step: usize, reason: String| MalformedTrajectory {
            trajectory: self.id.clone(),
            step,
            reason,
        };
        if let Some(h) = horizon_max {
            if self.steps.len() > h {
                return Err(fail(
                    h,
                    format!("{} steps exceed horizon {h}", self.steps.len()),
                ));
            }
        }
        for (t, step) in self.steps.iter().enumerate() {
            if step.state.context_id != self.context_id {
                return Err(fail(t, "state belongs to a different context".into()));
            }
            if step.state.depth != t || step.state.transcript.len() != t {
                return Err(fail(
                    t,
                    format!("state depth {} does not match position", step.state.depth),
                ));
            }
            if step.state.terminal {
                return Err(fail(t, "action taken in a terminal state".into()));
            }
            if !step.reward.is_finite() {
                return Err(fail(t, "non-finite step reward".into()));
            }
            if t > 0 {
                let prev = &self.steps[t - 1];
                let expected =
                    prev.state
                        .successor(prev.action.clone(), prev.observation.clone(), false);
                if expected.state_key != step.state.state_key {
                    return Err(fail(
                        t,
                        "state does not extend the previous transcript".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
