//! The episodic turn-level MDP: environments, stepping, rollouts and exact
//! state enumeration.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::Rng;
use thiserror::Error;

use crate::action::{ActionError, Observation, ToolContext, TurnAction};
use crate::policy::{action_support, sample_index, PolicyError, TurnPolicy};
use crate::state::{InteractionState, Step, Trajectory, TranscriptEntry};

/// Default bound on the number of reachable states an enumeration may visit.
pub const DEFAULT_STATE_CAP: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MdpError {
    #[error("state at depth {0} is terminal")]
    TerminalState(usize),
    #[error("invalid action: {0}")]
    InvalidAction(#[from] ActionError),
    #[error("no actions available at non-terminal state (depth {0})")]
    NoActions(usize),
    #[error("environment is not enumerable within {cap} states")]
    NotEnumerable { cap: usize },
    #[error("observation at depth {depth} is not a possible outcome")]
    ImpossibleObservation { depth: usize },
    #[error("context `{0}` is not part of this suite")]
    UnknownContext(String),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
}

/// One possible result of taking an action.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub prob: f64,
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
}

impl Outcome {
    pub fn certain(observation: Observation, reward: f64, terminal: bool) -> Self {
        Self {
            prob: 1.0,
            observation,
            reward,
            terminal,
        }
    }
}

/// A finite turn-level environment with an explicit transition table.
pub trait TurnEnv: Send + Sync {
    fn context(&self) -> &ToolContext;

    fn initial_state(&self) -> InteractionState {
        InteractionState::initial(self.context().id.clone())
    }

    /// Available turns at `state`; empty when terminal.
    fn actions(&self, state: &InteractionState) -> Vec<TurnAction>;

    /// Outcome distribution of `action` at `state`. Probabilities sum to 1.
    fn outcomes(
        &self,
        state: &InteractionState,
        action: &TurnAction,
    ) -> Result<Vec<Outcome>, MdpError>;

    /// Verifier outcome for a finished episode.
    fn accepts(&self, terminal: &InteractionState) -> bool;

    fn enumerable(&self) -> bool {
        true
    }
}

/// Executes one turn. Draws from `rng` only when the outcome is stochastic.
pub fn step<E, R>(
    env: &E,
    state: &InteractionState,
    action: &TurnAction,
    rng: &mut R,
) -> Result<(InteractionState, f64), MdpError>
where
    E: TurnEnv + ?Sized,
    R: Rng + ?Sized,
{
    if state.terminal {
        return Err(MdpError::TerminalState(state.depth));
    }
    env.context().validate_action(action)?;
    let outcomes = env.outcomes(state, action)?;
    let chosen = match outcomes.len() {
        0 => return Err(MdpError::NoActions(state.depth)),
        1 => &outcomes[0],
        _ => {
            let probs: Vec<f64> = outcomes.iter().map(|o| o.prob).collect();
            &outcomes[sample_index(&probs, rng)]
        }
    };
    let next = successor(env, state, action, chosen);
    Ok((next, chosen.reward))
}

fn successor<E: TurnEnv + ?Sized>(
    env: &E,
    state: &InteractionState,
    action: &TurnAction,
    outcome: &Outcome,
) -> InteractionState {
    let terminal = outcome.terminal || state.depth + 1 >= env.context().horizon_max;
    state.successor(action.clone(), outcome.observation.clone(), terminal)
}

/// Runs `policy` from `s0` until a terminal state.
pub fn rollout<E, P, R>(
    env: &E,
    policy: &P,
    s0: &InteractionState,
    rng: &mut R,
    id: impl Into<String>,
) -> Result<Trajectory, MdpError>
where
    E: TurnEnv + ?Sized,
    P: TurnPolicy,
    R: Rng + ?Sized,
{
    if s0.terminal {
        return Err(MdpError::TerminalState(s0.depth));
    }
    let mut state = s0.clone();
    let mut steps = Vec::new();
    while !state.terminal {
        let support = action_support(env, &state);
        if support.is_empty() {
            return Err(MdpError::NoActions(state.depth));
        }
        let action = policy.sample(&state, &support, rng)?;
        let (next, reward) = step(env, &state, &action, rng)?;
        let observation = next
            .transcript
            .last()
            .expect("successor has an entry")
            .observation
            .clone();
        steps.push(Step {
            state,
            action,
            observation,
            reward,
        });
        state = next;
    }
    let mut traj = Trajectory {
        id: id.into(),
        context_id: s0.context_id.clone(),
        steps,
        final_return: 0.0,
        accepted: env.accepts(&state),
    };
    traj.final_return = traj.return_of(env.context().discount);
    Ok(traj)
}

/// Rebuilds a state from a stored transcript, checking that every
/// observation is a possible outcome of its turn.
pub fn replay<E: TurnEnv + ?Sized>(
    env: &E,
    transcript: &[TranscriptEntry],
) -> Result<InteractionState, MdpError> {
    let mut state = env.initial_state();
    for entry in transcript {
        if state.terminal {
            return Err(MdpError::TerminalState(state.depth));
        }
        env.context().validate_action(&entry.action)?;
        let outcomes = env.outcomes(&state, &entry.action)?;
        let outcome = outcomes
            .iter()
            .find(|o| o.observation == entry.observation && o.prob > 0.0)
            .ok_or(MdpError::ImpossibleObservation { depth: state.depth })?;
        state = successor(env, &state, &entry.action, outcome);
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub prob: f64,
    pub reward: f64,
    pub next: usize,
}

#[derive(Debug, Clone)]
pub struct StateNode {
    pub state: InteractionState,
    /// Canonically ordered support; empty at terminal states.
    pub actions: Vec<TurnAction>,
    /// Outcome edges aligned with `actions`.
    pub edges: Vec<Vec<Edge>>,
}

/// Every reachable state of an environment, in breadth-first order (so
/// depth is non-decreasing and node 0 is the initial state).
#[derive(Debug, Clone)]
pub struct StateGraph {
    pub nodes: Vec<StateNode>,
    pub gamma: f64,
    index: HashMap<String, usize>,
}

impl StateGraph {
    pub fn build<E: TurnEnv + ?Sized>(env: &E) -> Result<Self, MdpError> {
        Self::build_with_cap(env, DEFAULT_STATE_CAP)
    }

    pub fn build_with_cap<E: TurnEnv + ?Sized>(env: &E, cap: usize) -> Result<Self, MdpError> {
        if !env.enumerable() {
            return Err(MdpError::NotEnumerable { cap });
        }
        let s0 = env.initial_state();
        let mut nodes: Vec<StateNode> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut queue: VecDeque<usize> = VecDeque::new();
        index.insert(s0.key().to_string(), 0);
        nodes.push(StateNode {
            state: s0,
            actions: Vec::new(),
            edges: Vec::new(),
        });
        queue.push_back(0);
        while let Some(i) = queue.pop_front() {
            let state = nodes[i].state.clone();
            if state.terminal {
                continue;
            }
            let actions = action_support(env, &state);
            if actions.is_empty() {
                return Err(MdpError::NoActions(state.depth));
            }
            let mut edges = Vec::with_capacity(actions.len());
            for action in &actions {
                let mut out = Vec::new();
                for outcome in env.outcomes(&state, action)? {
                    if outcome.prob <= 0.0 {
                        continue;
                    }
                    let next = successor(env, &state, action, &outcome);
                    let j = match index.get(next.key()) {
                        Some(&j) => j,
                        None => {
                            if nodes.len() >= cap {
                                return Err(MdpError::NotEnumerable { cap });
                            }
                            let j = nodes.len();
                            index.insert(next.key().to_string(), j);
                            nodes.push(StateNode {
                                state: next,
                                actions: Vec::new(),
                                edges: Vec::new(),
                            });
                            queue.push_back(j);
                            j
                        }
                    };
                    out.push(Edge {
                        prob: outcome.prob,
                        reward: outcome.reward,
                        next: j,
                    });
                }
                edges.push(out);
            }
            nodes[i].actions = actions;
            nodes[i].edges = edges;
        }
        Ok(Self {
            nodes,
            gamma: env.context().discount,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, state_key: &str) -> Option<usize> {
        self.index.get(state_key).copied()
    }

    pub fn node(&self, state_key: &str) -> Option<&StateNode> {
        self.node_index(state_key).map(|i| &self.nodes[i])
    }

    pub fn root(&self) -> &StateNode {
        &self.nodes[0]
    }

    pub fn non_terminal(&self) -> impl Iterator<Item = (usize, &StateNode)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.state.terminal)
    }
}

/// Every reachable state exactly once, breadth-first.
pub fn enumerate_states<E: TurnEnv + ?Sized>(env: &E) -> Result<Vec<InteractionState>, MdpError> {
    Ok(StateGraph::build(env)?
        .nodes
        .into_iter()
        .map(|n| n.state)
        .collect())
}

/// Environments keyed by context id.
#[derive(Debug, Clone)]
pub struct EnvSuite<E> {
    envs: BTreeMap<String, E>,
}

impl<E: TurnEnv> EnvSuite<E> {
    pub fn new(envs: impl IntoIterator<Item = E>) -> Self {
        Self {
            envs: envs
                .into_iter()
                .map(|e| (e.context().id.clone(), e))
                .collect(),
        }
    }

    pub fn single(env: E) -> Self {
        Self::new([env])
    }

    pub fn get(&self, context_id: &str) -> Result<&E, MdpError> {
        self.envs
            .get(context_id)
            .ok_or_else(|| MdpError::UnknownContext(context_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.envs.values()
    }

    pub fn context_ids(&self) -> impl Iterator<Item = &str> {
        self.envs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }
}
