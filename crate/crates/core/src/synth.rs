//! Synthetic tool-use environments with planted branching states.
//!
//! An episode has `horizon_max` turns. Depths `0..horizon_max-1` are tool
//! depths and the final depth is a closing turn whose planted actions are
//! terminations. Each tool depth is either
//!
//! - a *pivot*: a few acceptable calls (correct tool, near-identical query)
//!   and distractor calls (wrong tool, same arguments). A distractor derails
//!   the episode, except that with probability `value_leak` the tool call
//!   recovers, or
//! - *mechanical*: two syntactically different, functionally equivalent
//!   turns with identical continuations.
//!
//! An episode succeeds (reward 1 on the closing turn) iff no observation in
//! its transcript is an error.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{
    ActionKind, ArgField, FieldKind, Observation, ToolContext, ToolSpec, TurnAction,
};
use crate::mdp::{replay, step, EnvSuite, MdpError, Outcome, StateGraph, TurnEnv};
use crate::policy::{ActionPrior, PolicyError, TabularSoftmaxPolicy};
use crate::seed::{rng_for, sub_seed};
use crate::state::{InteractionState, Step, Trajectory};

const TOOL_NAMES: [&str; 12] = [
    "search", "lookup", "update", "create", "remove", "list", "fetch", "notify", "assign",
    "archive", "escalate", "tag",
];

pub const DEFAULT_VOCAB: [&str; 24] = [
    "open", "closed", "tickets", "invoice", "refund", "order", "account", "billing", "status",
    "priority", "customer", "shipment", "address", "payment", "pending", "urgent", "report",
    "weekly", "summary", "team", "queue", "region", "north", "latest",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("infeasible environment spec: {0}")]
    SpecInfeasible(String),
    #[error("state `{0}` is not reachable in this environment")]
    UnknownState(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PivotPlan {
    pub pivot_depths: Vec<usize>,
    pub acceptable_per_pivot: usize,
    pub distractors_per_pivot: usize,
    /// Probability that a distractor at an on-track pivot still recovers.
    pub value_leak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthEnvSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_id: Option<String>,
    pub num_tools: usize,
    pub vocab: Vec<String>,
    pub horizon_max: usize,
    pub plan: PivotPlan,
    pub seed: u64,
}

impl SynthEnvSpec {
    /// A spec over [`DEFAULT_VOCAB`].
    pub fn new(horizon_max: usize, plan: PivotPlan, seed: u64) -> Self {
        let tools = (plan.distractors_per_pivot + 1).max(4);
        Self {
            context_id: None,
            num_tools: tools,
            vocab: DEFAULT_VOCAB.iter().map(|w| w.to_string()).collect(),
            horizon_max,
            plan,
            seed,
        }
    }

    pub fn context_name(&self) -> String {
        self.context_id
            .clone()
            .unwrap_or_else(|| format!("synth-{:016x}", self.seed))
    }

    fn distinct_vocab(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.vocab.iter().map(|w| w.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::SpecInfeasible(m));
        let plan = &self.plan;
        if self.horizon_max == 0 {
            return bad("horizon_max must be at least 1".into());
        }
        if plan.acceptable_per_pivot == 0 || plan.distractors_per_pivot == 0 {
            return bad("pivots need at least one acceptable and one distractor action".into());
        }
        if !(0.0..0.5).contains(&plan.value_leak) {
            return bad(format!("value_leak {} outside [0, 0.5)", plan.value_leak));
        }
        if self.num_tools < plan.distractors_per_pivot + 1 {
            return bad(format!(
                "{} tools cannot host 1 correct and {} distractor tools",
                self.num_tools, plan.distractors_per_pivot
            ));
        }
        if let Some(w) = self
            .vocab
            .iter()
            .find(|w| w.is_empty() || w.split_whitespace().count() != 1)
        {
            return bad(format!("vocabulary entry `{w}` is not a single word"));
        }
        let needed = 3 + plan.acceptable_per_pivot.saturating_sub(1).max(1);
        let have = self.distinct_vocab().len();
        if have < needed {
            return bad(format!(
                "vocabulary has {have} distinct words, needs {needed}"
            ));
        }
        let mut last = None;
        for &d in &plan.pivot_depths {
            if last.is_some_and(|l| d <= l) {
                return bad("pivot_depths must be strictly increasing".into());
            }
            // the last turn is reserved for closing the episode
            if d + 1 >= self.horizon_max {
                return bad(format!(
                    "pivot depth {d} leaves no closing turn within horizon {}",
                    self.horizon_max
                ));
            }
            last = Some(d);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthRole {
    Pivot,
    Mechanical,
    Closing,
}

/// Planted actions of one depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPlan {
    pub depth: usize,
    pub role: DepthRole,
    /// Sorted by canonical key.
    pub actions: Vec<TurnAction>,
    pub acceptable: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct SynthEnv {
    spec: SynthEnvSpec,
    ctx: ToolContext,
    depths: Vec<DepthPlan>,
}

fn pick<'a, R: Rng + ?Sized>(items: &'a [String], rng: &mut R) -> &'a str {
    &items[rng.random_range(0..items.len())]
}

fn tool_call(tool: &str, target: &str, query: &[String]) -> TurnAction {
    TurnAction::tool_call(
        tool,
        [("target", target.to_string()), ("query", query.join(" "))],
    )
}

impl SynthEnv {
    fn generate(spec: &SynthEnvSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let id = spec.context_name();
        let mut rng = rng_for(spec.seed, &["synth", &id]);
        let vocab = spec.distinct_vocab();

        let mut names: Vec<String> = TOOL_NAMES.iter().map(|s| s.to_string()).collect();
        for i in names.len()..spec.num_tools {
            names.push(format!("tool{i}"));
        }
        names.shuffle(&mut rng);
        names.truncate(spec.num_tools);
        let mut tools: Vec<ToolSpec> = names
            .iter()
            .map(|n| ToolSpec {
                name: n.clone(),
                arg_fields: vec![
                    ArgField {
                        name: "target".into(),
                        kind: FieldKind::SingleWord,
                    },
                    ArgField {
                        name: "query".into(),
                        kind: FieldKind::MultiWord,
                    },
                ],
                description: format!("{n} records matching a target and a free-text query"),
            })
            .collect();
        tools.sort_by(|a, b| a.name.cmp(&b.name));
        let mut ctx = ToolContext::new(id, tools, spec.horizon_max)
            .map_err(|e| SynthError::SpecInfeasible(e.to_string()))?;
        ctx.seed = spec.seed;

        let plan = &spec.plan;
        let pivots: BTreeSet<usize> = plan.pivot_depths.iter().copied().collect();
        let mut depths = Vec::with_capacity(spec.horizon_max);
        for depth in 0..spec.horizon_max {
            let mut words = vocab.clone();
            words.shuffle(&mut rng);
            let target = pick(&vocab, &mut rng).to_string();
            let base = &words[..3];
            let (role, actions, acceptable): (DepthRole, Vec<TurnAction>, Option<Vec<TurnAction>>) =
                if depth + 1 == spec.horizon_max {
                    let acts = vec![
                        TurnAction::terminate("done"),
                        TurnAction::terminate("complete"),
                    ];
                    (DepthRole::Closing, acts, None)
                } else if pivots.contains(&depth) {
                    let mut order: Vec<usize> = (0..names.len()).collect();
                    order.shuffle(&mut rng);
                    let correct = &names[order[0]];
                    let mut good = vec![tool_call(correct, &target, base)];
                    for j in 1..plan.acceptable_per_pivot {
                        let mut q = base.to_vec();
                        q.push(words[2 + j].clone());
                        good.push(tool_call(correct, &target, &q));
                    }
                    let mut all = good.clone();
                    for &t in &order[1..=plan.distractors_per_pivot] {
                        all.push(tool_call(&names[t], &target, base));
                    }
                    (DepthRole::Pivot, all, Some(good))
                } else if rng.random_bool(0.5) {
                    let tool = pick(&names, &mut rng).to_string();
                    let mut longer = base.to_vec();
                    longer.push(words[3].clone());
                    let acts = vec![
                        tool_call(&tool, &target, base),
                        tool_call(&tool, &target, &longer),
                    ];
                    (DepthRole::Mechanical, acts, None)
                } else {
                    let short = format!("noting {} {}", base[0], base[1]);
                    let long = format!("{short} {}", base[2]);
                    let acts = vec![
                        TurnAction::language_act(&short),
                        TurnAction::language_act(&long),
                    ];
                    (DepthRole::Mechanical, acts, None)
                };
            let mut actions = actions;
            actions.sort();
            let acceptable: BTreeSet<String> = acceptable
                .as_ref()
                .unwrap_or(&actions)
                .iter()
                .map(|a| a.canonical_key().to_string())
                .collect();
            depths.push(DepthPlan {
                depth,
                role,
                actions,
                acceptable,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            ctx,
            depths,
        })
    }

    pub fn spec(&self) -> &SynthEnvSpec {
        &self.spec
    }

    pub fn depth_plan(&self, depth: usize) -> Option<&DepthPlan> {
        self.depths.get(depth)
    }

    pub fn depth_plans(&self) -> &[DepthPlan] {
        &self.depths
    }

    pub fn pivot_depths(&self) -> &[usize] {
        &self.spec.plan.pivot_depths
    }

    pub fn value_leak(&self) -> f64 {
        self.spec.plan.value_leak
    }

    /// True for non-terminal, error-free states at a pivot depth.
    pub fn is_planted_pivot(&self, state: &InteractionState) -> bool {
        !state.terminal
            && !state.has_error()
            && self
                .depths
                .get(state.depth)
                .is_some_and(|p| p.role == DepthRole::Pivot)
    }

    /// Depth-level reference logits: at mechanical and closing depths the
    /// smallest-key action gets `margin`; at pivots every acceptable action
    /// gets `pivot_bias`. Everything else is 0.
    pub fn reference_prior(&self, margin: f64, pivot_bias: f64) -> ActionPrior {
        let mut prior = ActionPrior::new();
        for plan in &self.depths {
            match plan.role {
                DepthRole::Pivot => {
                    for key in &plan.acceptable {
                        prior.set(&self.ctx.id, plan.depth, key, pivot_bias);
                    }
                }
                _ => prior.set(
                    &self.ctx.id,
                    plan.depth,
                    plan.actions[0].canonical_key(),
                    margin,
                ),
            }
        }
        prior
    }

    pub fn describe(&self) -> EnvDescription {
        let graph = StateGraph::build(self).ok();
        EnvDescription {
            context_id: self.ctx.id.clone(),
            horizon_max: self.ctx.horizon_max,
            value_leak: self.spec.plan.value_leak,
            tools: self.ctx.tools.iter().map(|t| t.name.clone()).collect(),
            pivot_depths: self.spec.plan.pivot_depths.clone(),
            depths: self
                .depths
                .iter()
                .map(|p| DepthSummary {
                    depth: p.depth,
                    role: p.role,
                    actions: p
                        .actions
                        .iter()
                        .map(|a| a.canonical_key().to_string())
                        .collect(),
                    acceptable: p.acceptable.iter().cloned().collect(),
                })
                .collect(),
            reachable_states: graph.as_ref().map(|g| g.len()),
            planted_pivot_states: graph.as_ref().map(|g| {
                g.nodes
                    .iter()
                    .filter(|n| self.is_planted_pivot(&n.state))
                    .count()
            }),
        }
    }
}

/// Transition-table summary of a synthetic environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDescription {
    pub context_id: String,
    pub horizon_max: usize,
    pub value_leak: f64,
    pub tools: Vec<String>,
    pub pivot_depths: Vec<usize>,
    pub depths: Vec<DepthSummary>,
    pub reachable_states: Option<usize>,
    pub planted_pivot_states: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSummary {
    pub depth: usize,
    pub role: DepthRole,
    pub actions: Vec<String>,
    pub acceptable: Vec<String>,
}

impl TurnEnv for SynthEnv {
    fn context(&self) -> &ToolContext {
        &self.ctx
    }

    fn actions(&self, state: &InteractionState) -> Vec<TurnAction> {
        if state.terminal {
            return Vec::new();
        }
        self.depths
            .get(state.depth)
            .map(|p| p.actions.clone())
            .unwrap_or_default()
    }

    fn outcomes(
        &self,
        state: &InteractionState,
        action: &TurnAction,
    ) -> Result<Vec<Outcome>, MdpError> {
        if state.terminal {
            return Err(MdpError::TerminalState(state.depth));
        }
        let d = state.depth;
        let plan = self.depths.get(d).ok_or(MdpError::NoActions(d))?;
        let on_track = !state.has_error();
        let key = action.canonical_key();
        let failed = || Observation::error(format!("error: turn {d} did not succeed"));
        if plan.role == DepthRole::Closing {
            let outcome = if plan.acceptable.contains(key) {
                let reward = if on_track { 1.0 } else { 0.0 };
                Outcome::certain(Observation::ok("ok: episode closed"), reward, true)
            } else {
                Outcome::certain(failed(), 0.0, true)
            };
            return Ok(vec![outcome]);
        }
        if action.kind == ActionKind::Terminate {
            return Ok(vec![Outcome::certain(
                Observation::error(format!("error: episode ended early at turn {d}")),
                0.0,
                true,
            )]);
        }
        if plan.acceptable.contains(key) {
            return Ok(vec![Outcome::certain(
                Observation::ok(format!("ok: turn {d} done")),
                0.0,
                false,
            )]);
        }
        let leak = self.spec.plan.value_leak;
        if plan.role == DepthRole::Pivot && on_track && leak > 0.0 {
            return Ok(vec![
                Outcome {
                    prob: leak,
                    observation: Observation::ok(format!("ok: turn {d} recovered")),
                    reward: 0.0,
                    terminal: false,
                },
                Outcome {
                    prob: 1.0 - leak,
                    observation: failed(),
                    reward: 0.0,
                    terminal: false,
                },
            ]);
        }
        Ok(vec![Outcome::certain(failed(), 0.0, false)])
    }

    fn accepts(&self, terminal: &InteractionState) -> bool {
        terminal.depth == self.ctx.horizon_max
            && !terminal.has_error()
            && terminal
                .transcript
                .last()
                .is_some_and(|e| e.action.kind == ActionKind::Terminate)
    }
}

/// Ground-truth acceptable sets. Computed structurally on demand: on-track
/// states accept the planted acceptable set of their depth, states already
/// derailed by an error accept nothing (no completion can succeed).
#[derive(Debug, Clone)]
pub struct AcceptOracle {
    envs: BTreeMap<String, SynthEnv>,
}

impl AcceptOracle {
    pub fn new(envs: impl IntoIterator<Item = SynthEnv>) -> Self {
        Self {
            envs: envs.into_iter().map(|e| (e.ctx.id.clone(), e)).collect(),
        }
    }

    fn env_for(&self, state: &InteractionState) -> Result<&SynthEnv, SynthError> {
        self.envs
            .get(&state.context_id)
            .ok_or_else(|| SynthError::UnknownState(state.key().to_string()))
    }

    pub fn accept_set(&self, state: &InteractionState) -> Result<BTreeSet<String>, SynthError> {
        let env = self.env_for(state)?;
        let replayed = replay(env, &state.transcript)
            .map_err(|_| SynthError::UnknownState(state.key().to_string()))?;
        if replayed.terminal || state.terminal {
            return Err(SynthError::UnknownState(state.key().to_string()));
        }
        if state.has_error() {
            return Ok(BTreeSet::new());
        }
        Ok(env.depths[state.depth].acceptable.clone())
    }

    pub fn oracle_accept(
        &self,
        state: &InteractionState,
        action: &TurnAction,
    ) -> Result<bool, SynthError> {
        Ok(self.accept_set(state)?.contains(action.canonical_key()))
    }

    /// Explicit map over every reachable non-terminal state.
    pub fn materialize(&self) -> Result<BTreeMap<String, BTreeSet<String>>, SynthError> {
        let mut out = BTreeMap::new();
        for env in self.envs.values() {
            let graph = StateGraph::build(env)?;
            for (_, node) in graph.non_terminal() {
                let set = if node.state.has_error() {
                    BTreeSet::new()
                } else {
                    env.depths[node.state.depth].acceptable.clone()
                };
                out.insert(node.state.key().to_string(), set);
            }
        }
        Ok(out)
    }

    pub fn env(&self, context_id: &str) -> Option<&SynthEnv> {
        self.envs.get(context_id)
    }
}

pub fn build_env(spec: &SynthEnvSpec) -> Result<(SynthEnv, AcceptOracle), SynthError> {
    let env = SynthEnv::generate(spec)?;
    let oracle = AcceptOracle::new([env.clone()]);
    Ok((env, oracle))
}

/// `contexts` environments sharing the plan, with per-context seeds.
pub fn build_suite(
    spec: &SynthEnvSpec,
    contexts: usize,
) -> Result<(EnvSuite<SynthEnv>, AcceptOracle), SynthError> {
    let mut envs = Vec::with_capacity(contexts);
    for i in 0..contexts {
        let id = format!("ctx{i:03}");
        let mut s = spec.clone();
        s.seed = sub_seed(spec.seed, &["context", &id]);
        s.context_id = Some(id);
        envs.push(SynthEnv::generate(&s)?);
    }
    let oracle = AcceptOracle::new(envs.iter().cloned());
    Ok((EnvSuite::new(envs), oracle))
}

/// Merged reference prior over a suite.
pub fn suite_prior(suite: &EnvSuite<SynthEnv>, margin: f64, pivot_bias: f64) -> ActionPrior {
    let mut prior = ActionPrior::new();
    for env in suite.iter() {
        prior.merge(&env.reference_prior(margin, pivot_bias));
    }
    prior
}

/// Reference policy over a suite's depth-level prior.
pub fn reference_policy(
    suite: &EnvSuite<SynthEnv>,
    margin: f64,
    pivot_bias: f64,
    temperature: f64,
) -> Result<TabularSoftmaxPolicy, PolicyError> {
    TabularSoftmaxPolicy::with_prior(suite_prior(suite, margin, pivot_bias))
        .with_temperature(temperature)
}

/// Probability mass on the acceptable set at a pivot under the reference
/// prior at the given temperature.
pub fn acceptable_mass(
    acceptable: usize,
    distractors: usize,
    pivot_bias: f64,
    temperature: f64,
) -> f64 {
    let a = acceptable as f64 * (pivot_bias / temperature).exp();
    a / (a + distractors as f64)
}

/// Temperature putting the acceptable mass at `target`, by bisection on
/// `[1e-3, 1e3]`. `None` if the target is outside the reachable range.
pub fn calibrate_temperature(
    acceptable: usize,
    distractors: usize,
    pivot_bias: f64,
    target: f64,
) -> Option<f64> {
    let mass = |t: f64| acceptable_mass(acceptable, distractors, pivot_bias, t);
    let (mut lo, mut hi) = (1e-3, 1e3);
    let (m_lo, m_hi) = (mass(lo), mass(hi));
    if pivot_bias == 0.0 {
        // temperature has no effect on an unbiased pivot
        return ((m_lo - target).abs() < 1e-12).then_some(1.0);
    }
    if (target - m_lo) * (target - m_hi) > 0.0 {
        return None;
    }
    let increasing = m_hi > m_lo;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (mass(mid) < target) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// The teacher: the smallest-key acceptable action at every depth.
pub fn expert_trajectory<R: Rng + ?Sized>(
    env: &SynthEnv,
    oracle: &AcceptOracle,
    rng: &mut R,
    id: impl Into<String>,
) -> Result<Trajectory, SynthError> {
    let mut state = env.initial_state();
    let mut steps = Vec::new();
    while !state.terminal {
        let accept = oracle.accept_set(&state)?;
        let action = env
            .actions(&state)
            .into_iter()
            .find(|a| accept.contains(a.canonical_key()))
            .ok_or_else(|| SynthError::UnknownState(state.key().to_string()))?;
        let (next, reward) = step(env, &state, &action, rng)?;
        let observation = next
            .transcript
            .last()
            .expect("one entry per turn")
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
        context_id: env.ctx.id.clone(),
        steps,
        final_return: 0.0,
        accepted: env.accepts(&state),
    };
    traj.final_return = traj.return_of(env.ctx.discount);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(pivots: &[usize], acc: usize, dis: usize, leak: f64, horizon: usize) -> SynthEnvSpec {
        SynthEnvSpec::new(
            horizon,
            PivotPlan {
                pivot_depths: pivots.to_vec(),
                acceptable_per_pivot: acc,
                distractors_per_pivot: dis,
                value_leak: leak,
            },
            17,
        )
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut s = spec(&[1], 1, 3, 0.0, 4);
        s.num_tools = 3;
        assert!(matches!(build_env(&s), Err(SynthError::SpecInfeasible(_))));
        let s = spec(&[3], 1, 3, 0.0, 4);
        assert!(matches!(build_env(&s), Err(SynthError::SpecInfeasible(_))));
        let mut s = spec(&[1], 4, 3, 0.0, 4);
        s.vocab.truncate(5);
        assert!(matches!(build_env(&s), Err(SynthError::SpecInfeasible(_))));
        assert!(build_env(&spec(&[1], 1, 3, 0.5, 4)).is_err());
    }

    #[test]
    fn pivot_support_has_planted_counts() {
        let (env, _) = build_env(&spec(&[1, 3], 2, 3, 0.05, 5)).unwrap();
        assert_eq!(env.depth_plan(1).unwrap().actions.len(), 5);
        assert_eq!(env.depth_plan(1).unwrap().acceptable.len(), 2);
        assert_eq!(env.depth_plan(0).unwrap().actions.len(), 2);
        assert_eq!(env.depth_plan(4).unwrap().role, DepthRole::Closing);
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _) = build_env(&spec(&[1, 3], 2, 3, 0.05, 5)).unwrap();
        let (b, _) = build_env(&spec(&[1, 3], 2, 3, 0.05, 5)).unwrap();
        assert_eq!(a.depth_plans(), b.depth_plans());
    }

    #[test]
    fn acceptable_step_stays_on_track() {
        let (env, oracle) = build_env(&spec(&[0], 1, 3, 0.0, 3)).unwrap();
        let s0 = env.initial_state();
        let good = env
            .actions(&s0)
            .into_iter()
            .find(|a| oracle.oracle_accept(&s0, a).unwrap())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s1, r) = step(&env, &s0, &good, &mut rng).unwrap();
        assert!(!s1.has_error() && r == 0.0 && s1.depth == 1);
        for a in env.actions(&s0) {
            if a != good {
                let (s, _) = step(&env, &s0, &a, &mut rng).unwrap();
                assert!(s.has_error());
                assert!(oracle.accept_set(&s).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn expert_is_accepted_and_deterministic() {
        let (env, oracle) = build_env(&spec(&[1, 2, 4], 2, 3, 0.1, 6)).unwrap();
        let a = expert_trajectory(&env, &oracle, &mut ChaCha8Rng::seed_from_u64(1), "e").unwrap();
        let b = expert_trajectory(&env, &oracle, &mut ChaCha8Rng::seed_from_u64(2), "e").unwrap();
        assert_eq!(a, b);
        assert!(a.accepted && a.final_return == 1.0 && a.len() == 6);
        assert!(a.validate(Some(6)).is_ok());
    }

    #[test]
    fn early_termination_fails() {
        let (env, _) = build_env(&spec(&[], 1, 1, 0.0, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, r) = step(
            &env,
            &env.initial_state(),
            &TurnAction::terminate("bye"),
            &mut rng,
        )
        .unwrap();
        assert!(s.terminal && r == 0.0 && !env.accepts(&s));
    }

    #[test]
    fn unreachable_states_are_unknown() {
        let (env, oracle) = build_env(&spec(&[0], 1, 3, 0.0, 3)).unwrap();
        let fake = env.initial_state().successor(
            TurnAction::language_act("hello there"),
            Observation::ok("?"),
            false,
        );
        assert!(matches!(
            oracle.accept_set(&fake),
            Err(SynthError::UnknownState(_))
        ));
    }

    #[test]
    fn calibration_hits_the_target() {
        let t = calibrate_temperature(1, 3, 2.0, 0.5).unwrap();
        assert!((acceptable_mass(1, 3, 2.0, t) - 0.5).abs() < 1e-9);
        assert_eq!(calibrate_temperature(1, 3, 0.0, 0.25), Some(1.0));
        assert_eq!(calibrate_temperature(1, 3, 0.0, 0.5), None);
    }

    #[test]
    fn suite_contexts_differ() {
        let (suite, oracle) = build_suite(&spec(&[1], 1, 3, 0.0, 3), 3).unwrap();
        assert_eq!(suite.len(), 3);
        let ids: Vec<_> = suite.context_ids().collect();
        assert_eq!(ids, ["ctx000", "ctx001", "ctx002"]);
        assert!(oracle.env("ctx001").is_some());
        let plans: BTreeSet<_> = suite
            .iter()
            .map(|e| {
                e.depth_plan(1).unwrap().actions[0]
                    .canonical_key()
                    .to_string()
            })
            .collect();
        assert!(plans.len() > 1);
    }
}
