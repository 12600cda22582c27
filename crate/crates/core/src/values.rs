//! Exact values, advantage gaps, occupancy and turn-level policy gradients
//! on enumerable environments.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{MdpError, StateGraph, TurnEnv};
use crate::policy::{ParamVec, PolicyError, TurnPolicy};
use crate::state::{InteractionState, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValuesError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("state `{0}` is not in the value table")]
    UnknownState(String),
    #[error("teacher trajectory `{0}` was not accepted")]
    TeacherRejected(String),
}

/// Values of one enumerated state. Per-action vectors are aligned with the
/// graph node's action list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateValues {
    pub state_key: String,
    pub depth: usize,
    pub terminal: bool,
    pub actions: Vec<String>,
    pub probs: Vec<f64>,
    pub q: Vec<f64>,
    pub advantage: Vec<f64>,
    pub v: f64,
    pub gap: f64,
}

/// Exact `Q`, `V`, `A = Q - V` and `Gap = max_a A` for every reachable state,
/// aligned with the nodes of the [`StateGraph`] it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub gamma: f64,
    pub states: Vec<StateValues>,
    index: HashMap<String, usize>,
}

impl ValueTable {
    pub fn get(&self, state_key: &str) -> Option<&StateValues> {
        self.index.get(state_key).map(|&i| &self.states[i])
    }

    pub fn v(&self, state_key: &str) -> Result<f64, ValuesError> {
        self.get(state_key)
            .map(|s| s.v)
            .ok_or_else(|| ValuesError::UnknownState(state_key.to_string()))
    }

    pub fn q(&self, state_key: &str, action_key: &str) -> Option<f64> {
        let s = self.get(state_key)?;
        s.actions
            .iter()
            .position(|a| a == action_key)
            .map(|i| s.q[i])
    }

    /// `V(s0)`, the expected return.
    pub fn root_value(&self) -> f64 {
        self.states[0].v
    }
}

fn policy_probs<P: TurnPolicy>(
    graph: &StateGraph,
    policy: &P,
) -> Result<Vec<Vec<f64>>, ValuesError> {
    graph
        .nodes
        .iter()
        .map(|n| {
            if n.state.terminal {
                Ok(Vec::new())
            } else {
                Ok(policy.probabilities(&n.state, &n.actions)?)
            }
        })
        .collect()
}

/// Backward induction over the graph.
pub fn exact_values<P: TurnPolicy>(
    graph: &StateGraph,
    policy: &P,
) -> Result<ValueTable, ValuesError> {
    let probs = policy_probs(graph, policy)?;
    let n = graph.len();
    let mut v = vec![0.0; n];
    let mut states: Vec<Option<StateValues>> = vec![None; n];
    // Breadth-first order has non-decreasing depth and every edge goes one
    // level deeper, so the reverse order visits successors first.
    for i in (0..n).rev() {
        let node = &graph.nodes[i];
        let actions: Vec<String> = node
            .actions
            .iter()
            .map(|a| a.canonical_key().to_string())
            .collect();
        let q: Vec<f64> = node
            .edges
            .iter()
            .map(|edges| {
                edges
                    .iter()
                    .map(|e| e.prob * (e.reward + graph.gamma * v[e.next]))
                    .sum()
            })
            .collect();
        let (vi, advantage) = if q.is_empty() {
            (0.0, Vec::new())
        } else if q.iter().all(|x| x.to_bits() == q[0].to_bits()) {
            // keep flat states exactly flat
            (q[0], vec![0.0; q.len()])
        } else {
            let vi: f64 = probs[i].iter().zip(&q).map(|(p, x)| p * x).sum();
            (vi, q.iter().map(|x| x - vi).collect())
        };
        v[i] = vi;
        let gap = advantage.iter().copied().fold(0.0, f64::max);
        states[i] = Some(StateValues {
            state_key: node.state.key().to_string(),
            depth: node.state.depth,
            terminal: node.state.terminal,
            actions,
            probs: probs[i].clone(),
            q,
            advantage,
            v: vi,
            gap,
        });
    }
    let states: Vec<StateValues> = states
        .into_iter()
        .map(|s| s.expect("every node visited"))
        .collect();
    let index = states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.state_key.clone(), i))
        .collect();
    Ok(ValueTable {
        gamma: graph.gamma,
        states,
        index,
    })
}

/// Builds the state graph and evaluates `policy` on it.
pub fn exact_values_for<E: TurnEnv + ?Sized, P: TurnPolicy>(
    env: &E,
    policy: &P,
) -> Result<(StateGraph, ValueTable), ValuesError> {
    let graph = StateGraph::build(env)?;
    let table = exact_values(&graph, policy)?;
    Ok((graph, table))
}

/// `J = V(s0)`.
pub fn expected_return<P: TurnPolicy>(graph: &StateGraph, policy: &P) -> Result<f64, ValuesError> {
    Ok(exact_values(graph, policy)?.root_value())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum PivotRule {
    /// `Gap(s) >= delta`.
    Threshold { delta: f64 },
    /// The `k` largest-gap states of each source trajectory.
    TopKPerTrajectory { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotSet {
    pub rule: PivotRule,
    pub members: BTreeSet<String>,
}

impl PivotSet {
    pub fn contains(&self, state_key: &str) -> bool {
        self.members.contains(state_key)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn from_states<'a>(
        rule: PivotRule,
        states: impl IntoIterator<Item = &'a InteractionState>,
    ) -> Self {
        Self {
            rule,
            members: states.into_iter().map(|s| s.key().to_string()).collect(),
        }
    }
}

/// Selects pivots. Top-K ranks each trajectory's states by gap descending,
/// then depth ascending, then state key ascending.
pub fn mine_pivots(
    table: &ValueTable,
    rule: &PivotRule,
    trajectories: &[Trajectory],
) -> Result<PivotSet, ValuesError> {
    let members = match rule {
        PivotRule::Threshold { delta } => table
            .states
            .iter()
            .filter(|s| !s.terminal && s.gap >= *delta)
            .map(|s| s.state_key.clone())
            .collect(),
        PivotRule::TopKPerTrajectory { k } => {
            let mut members = BTreeSet::new();
            for traj in trajectories {
                let mut ranked = Vec::with_capacity(traj.len());
                for step in &traj.steps {
                    let sv = table
                        .get(step.state.key())
                        .ok_or_else(|| ValuesError::UnknownState(step.state.key().to_string()))?;
                    ranked.push(sv);
                }
                ranked.sort_by(|a, b| {
                    b.gap
                        .total_cmp(&a.gap)
                        .then(a.depth.cmp(&b.depth))
                        .then(a.state_key.cmp(&b.state_key))
                });
                members.extend(ranked.into_iter().take(*k).map(|s| s.state_key.clone()));
            }
            members
        }
    };
    Ok(PivotSet {
        rule: rule.clone(),
        members,
    })
}

/// Discounted state visitation over non-terminal states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTable {
    /// Normalized weights; sum to 1.
    pub weights: BTreeMap<String, f64>,
    /// Normalizer: `sum_s gamma^depth(s) * Pr[reach s]`, the expected
    /// discounted episode length.
    pub mass: f64,
}

/// Unnormalized `gamma^depth * Pr[reach]` per node (0 for terminal nodes).
fn discounted_reach(graph: &StateGraph, probs: &[Vec<f64>]) -> Vec<f64> {
    let mut reach = vec![0.0; graph.len()];
    reach[0] = 1.0;
    for (i, node) in graph.nodes.iter().enumerate() {
        if node.state.terminal || reach[i] == 0.0 {
            continue;
        }
        for (a, edges) in node.edges.iter().enumerate() {
            for e in edges {
                reach[e.next] += reach[i] * probs[i][a] * e.prob;
            }
        }
    }
    graph
        .nodes
        .iter()
        .zip(&reach)
        .map(|(n, r)| {
            if n.state.terminal {
                0.0
            } else {
                r * graph.gamma.powi(n.state.depth as i32)
            }
        })
        .collect()
}

pub fn occupancy<P: TurnPolicy>(
    graph: &StateGraph,
    policy: &P,
) -> Result<OccupancyTable, ValuesError> {
    let probs = policy_probs(graph, policy)?;
    let w = discounted_reach(graph, &probs);
    let mass: f64 = w.iter().sum();
    let weights = graph
        .nodes
        .iter()
        .zip(&w)
        .filter(|(n, _)| !n.state.terminal)
        .map(|(n, x)| (n.state.key().to_string(), x / mass))
        .collect();
    Ok(OccupancyTable { weights, mass })
}

/// `sum_a pi(a|s) A(s,a) grad log pi(a|s)` at one node.
fn state_gradient<P: TurnPolicy>(
    graph: &StateGraph,
    table: &ValueTable,
    policy: &P,
    i: usize,
) -> Result<ParamVec, ValuesError> {
    let node = &graph.nodes[i];
    let sv = &table.states[i];
    let mut g = ParamVec::new();
    for (a, action) in node.actions.iter().enumerate() {
        let weight = sv.probs[a] * sv.advantage[a];
        if weight != 0.0 {
            g.add_scaled(
                &policy.score_grad(&node.state, &node.actions, action)?,
                weight,
            );
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnGradient {
    /// `grad J`: the unnormalized discounted-visitation sum.
    pub grad: ParamVec,
    /// Occupancy normalizer; `grad / mass` is the expectation under the
    /// normalized occupancy.
    pub mass: f64,
}

/// Exact turn-level policy gradient
/// `sum_s gamma^t Pr[s] sum_a pi(a|s) A(s,a) grad log pi(a|s)`.
pub fn full_turn_gradient<P: TurnPolicy>(
    graph: &StateGraph,
    policy: &P,
) -> Result<TurnGradient, ValuesError> {
    let table = exact_values(graph, policy)?;
    let reach = discounted_reach(
        graph,
        &table
            .states
            .iter()
            .map(|s| s.probs.clone())
            .collect::<Vec<_>>(),
    );
    let mut grad = ParamVec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        if node.state.terminal || reach[i] == 0.0 {
            continue;
        }
        grad.add_scaled(&state_gradient(graph, &table, policy, i)?, reach[i]);
    }
    Ok(TurnGradient {
        grad,
        mass: reach.iter().sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateContribution {
    pub state_key: String,
    pub depth: usize,
    pub pivot: bool,
    /// `|| sum_a pi A score ||_2` at this state.
    pub norm: f64,
    /// `max_a || score(s,a) ||_2`.
    pub score_norm: f64,
    /// `max_a |A(s,a)|`.
    pub max_abs_advantage: f64,
}

/// Full versus pivot-restricted gradient under the normalized occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct PivotGradient {
    pub full: ParamVec,
    pub pivot_only: ParamVec,
    /// `|| full - pivot_only ||_2`.
    pub truncation_gap: f64,
    /// `G = max_{s,a} || score(s,a) ||_2` over non-terminal states.
    pub g_max: f64,
    /// `eps = max |A(s,a)|` over non-pivot non-terminal states.
    pub eps_nonpivot: f64,
    pub per_state: Vec<StateContribution>,
}

impl PivotGradient {
    pub fn bound(&self) -> f64 {
        self.g_max * self.eps_nonpivot
    }
}

pub fn pivot_only_gradient<P: TurnPolicy>(
    graph: &StateGraph,
    policy: &P,
    pivots: &PivotSet,
) -> Result<PivotGradient, ValuesError> {
    let table = exact_values(graph, policy)?;
    let probs: Vec<Vec<f64>> = table.states.iter().map(|s| s.probs.clone()).collect();
    let reach = discounted_reach(graph, &probs);
    let mass: f64 = reach.iter().sum();
    let mut full = ParamVec::new();
    let mut pivot_only = ParamVec::new();
    let mut g_max: f64 = 0.0;
    let mut eps_nonpivot: f64 = 0.0;
    let mut per_state = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        if node.state.terminal {
            continue;
        }
        let sv = &table.states[i];
        let pivot = pivots.contains(node.state.key());
        let mut score_norm: f64 = 0.0;
        for action in &node.actions {
            score_norm = score_norm.max(
                policy
                    .score_grad(&node.state, &node.actions, action)?
                    .norm(),
            );
        }
        let max_abs_advantage = sv.advantage.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        g_max = g_max.max(score_norm);
        if !pivot {
            eps_nonpivot = eps_nonpivot.max(max_abs_advantage);
        }
        let g = state_gradient(graph, &table, policy, i)?;
        per_state.push(StateContribution {
            state_key: sv.state_key.clone(),
            depth: sv.depth,
            pivot,
            norm: g.norm(),
            score_norm,
            max_abs_advantage,
        });
        let w = reach[i] / mass;
        if w != 0.0 {
            full.add_scaled(&g, w);
            if pivot {
                pivot_only.add_scaled(&g, w);
            }
        }
    }
    let truncation_gap = full.sub(&pivot_only).norm();
    Ok(PivotGradient {
        full,
        pivot_only,
        truncation_gap,
        g_max,
        eps_nonpivot,
        per_state,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyEntry {
    pub state_key: String,
    pub depth: usize,
    pub teacher_action: String,
    /// `p = pi(a_T | s)`, which is also the proxy value.
    pub p: f64,
    pub v: f64,
    pub v_proxy: f64,
    /// `V - V_proxy`.
    pub baseline_error: f64,
}

impl ProxyEntry {
    /// Proxy advantage `1[a = a_T] - p`.
    pub fn proxy_advantage(&self, action_key: &str) -> f64 {
        let q = if action_key == self.teacher_action {
            1.0
        } else {
            0.0
        };
        q - self.v_proxy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyValueTable {
    pub teacher_id: String,
    pub entries: Vec<ProxyEntry>,
}

/// Teacher-proxy value at one state: `Q~(s,a) = 1[a = a_T]`, so the proxy
/// value is `pi(a_T|s)`.
pub fn proxy_at<P: TurnPolicy>(
    graph: &StateGraph,
    table: &ValueTable,
    policy: &P,
    state: &InteractionState,
    teacher_action: &crate::action::TurnAction,
) -> Result<ProxyEntry, ValuesError> {
    let node = graph
        .node(state.key())
        .ok_or_else(|| ValuesError::UnknownState(state.key().to_string()))?;
    let v = table.v(state.key())?;
    let p = policy
        .log_prob(&node.state, &node.actions, teacher_action)?
        .exp();
    Ok(ProxyEntry {
        state_key: state.key().to_string(),
        depth: state.depth,
        teacher_action: teacher_action.canonical_key().to_string(),
        p,
        v,
        v_proxy: p,
        baseline_error: v - p,
    })
}

pub fn proxy_values<P: TurnPolicy>(
    graph: &StateGraph,
    table: &ValueTable,
    policy: &P,
    teacher: &Trajectory,
) -> Result<ProxyValueTable, ValuesError> {
    if !teacher.accepted {
        return Err(ValuesError::TeacherRejected(teacher.id.clone()));
    }
    let entries = teacher
        .steps
        .iter()
        .map(|s| proxy_at(graph, table, policy, &s.state, &s.action))
        .collect::<Result<_, _>>()?;
    Ok(ProxyValueTable {
        teacher_id: teacher.id.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{Observation, ToolContext, TurnAction};
    use crate::mdp::tests::BinaryEnv;
    use crate::mdp::Outcome;
    use crate::policy::{ParamKey, TabularSoftmaxPolicy, Trainable};
    use crate::synth::{build_env, expert_trajectory, AcceptOracle, PivotPlan, SynthEnvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synth(
        pivots: &[usize],
        acc: usize,
        dis: usize,
        leak: f64,
        horizon: usize,
    ) -> (crate::synth::SynthEnv, AcceptOracle) {
        build_env(&SynthEnvSpec::new(
            horizon,
            PivotPlan {
                pivot_depths: pivots.to_vec(),
                acceptable_per_pivot: acc,
                distractors_per_pivot: dis,
                value_leak: leak,
            },
            5,
        ))
        .unwrap()
    }

    /// Probability 1 on the first oracle-acceptable action.
    struct Greedy<'a>(&'a AcceptOracle);

    impl TurnPolicy for Greedy<'_> {
        fn probabilities(
            &self,
            state: &InteractionState,
            support: &[TurnAction],
        ) -> Result<Vec<f64>, PolicyError> {
            let ok = self.0.accept_set(state).unwrap_or_default();
            let first = support
                .iter()
                .position(|a| ok.contains(a.canonical_key()))
                .unwrap_or(0);
            Ok((0..support.len())
                .map(|i| if i == first { 1.0 } else { 0.0 })
                .collect())
        }

        fn log_prob(
            &self,
            state: &InteractionState,
            support: &[TurnAction],
            action: &TurnAction,
        ) -> Result<f64, PolicyError> {
            let i = crate::policy::position(support, action)?;
            Ok(self.probabilities(state, support)?[i].ln())
        }

        fn score_grad(
            &self,
            _: &InteractionState,
            _: &[TurnAction],
            _: &TurnAction,
        ) -> Result<ParamVec, PolicyError> {
            Ok(ParamVec::new())
        }
    }

    struct Silent {
        ctx: ToolContext,
    }

    impl TurnEnv for Silent {
        fn context(&self) -> &ToolContext {
            &self.ctx
        }
        fn actions(&self, s: &InteractionState) -> Vec<TurnAction> {
            if s.terminal {
                vec![]
            } else {
                vec![TurnAction::language_act("a"), TurnAction::language_act("b")]
            }
        }
        fn outcomes(&self, _: &InteractionState, a: &TurnAction) -> Result<Vec<Outcome>, MdpError> {
            Ok(vec![Outcome::certain(
                Observation::ok(a.canonical_key()),
                0.0,
                false,
            )])
        }
        fn accepts(&self, _: &InteractionState) -> bool {
            false
        }
    }

    #[test]
    fn zero_reward_env_has_zero_values() {
        let env = Silent {
            ctx: ToolContext::new("z", vec![], 3).unwrap(),
        };
        let (_, t) = exact_values_for(&env, &TabularSoftmaxPolicy::uniform()).unwrap();
        assert!(t
            .states
            .iter()
            .all(|s| s.v == 0.0 && s.q.iter().all(|q| *q == 0.0)));
    }

    #[test]
    fn greedy_teacher_succeeds_surely() {
        let (env, oracle) = synth(&[1], 1, 3, 0.0, 4);
        let (_, t) = exact_values_for(&env, &Greedy(&oracle)).unwrap();
        assert_eq!(t.root_value(), 1.0);
    }

    #[test]
    fn uniform_one_of_four_pivot() {
        let (env, _) = synth(&[1], 1, 3, 0.0, 4);
        let (g, t) = exact_values_for(&env, &TabularSoftmaxPolicy::uniform()).unwrap();
        for (i, n) in g.non_terminal() {
            let sv = &t.states[i];
            if env.is_planted_pivot(&n.state) {
                assert_eq!(sv.v, 0.25);
                assert_eq!(sv.gap, 0.75);
            } else {
                assert_eq!(sv.gap, 0.0);
            }
        }
    }

    #[test]
    fn bellman_consistency() {
        let (env, _) = synth(&[0, 2], 2, 2, 0.1, 4);
        let mut policy = TabularSoftmaxPolicy::uniform();
        let g = StateGraph::build(&env).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in &g.nodes {
            for a in &n.actions {
                policy.set_logit(&n.state, a, rand::Rng::random_range(&mut rng, -2.0..2.0));
            }
        }
        let t = exact_values(&g, &policy).unwrap();
        for (i, n) in g.non_terminal() {
            let sv = &t.states[i];
            let vq: f64 = sv.probs.iter().zip(&sv.q).map(|(p, q)| p * q).sum();
            assert!((vq - sv.v).abs() <= 1e-10);
            for (a, edges) in n.edges.iter().enumerate() {
                let backup: f64 = edges
                    .iter()
                    .map(|e| e.prob * (e.reward + t.states[e.next].v))
                    .sum();
                assert!((backup - sv.q[a]).abs() <= 1e-10);
            }
            assert!(sv.gap >= 0.0);
        }
    }

    #[test]
    fn threshold_rule_edges() {
        let (env, _) = synth(&[1, 3], 2, 3, 0.05, 5);
        let (g, t) = exact_values_for(&env, &TabularSoftmaxPolicy::uniform()).unwrap();
        let all = mine_pivots(&t, &PivotRule::Threshold { delta: 0.0 }, &[]).unwrap();
        assert_eq!(all.len(), g.non_terminal().count());
        assert!(mine_pivots(&t, &PivotRule::Threshold { delta: 2.0 }, &[])
            .unwrap()
            .is_empty());
        let mined = mine_pivots(&t, &PivotRule::Threshold { delta: 0.1 }, &[]).unwrap();
        let planted: BTreeSet<String> = g
            .nodes
            .iter()
            .filter(|n| env.is_planted_pivot(&n.state))
            .map(|n| n.state.key().to_string())
            .collect();
        assert_eq!(mined.members, planted);
    }

    #[test]
    fn top_k_follows_the_tie_break() {
        let (env, oracle) = synth(&[1, 3], 1, 3, 0.0, 5);
        let (_, t) = exact_values_for(&env, &TabularSoftmaxPolicy::uniform()).unwrap();
        let e = expert_trajectory(&env, &oracle, &mut ChaCha8Rng::seed_from_u64(0), "e").unwrap();
        let top1 = mine_pivots(
            &t,
            &PivotRule::TopKPerTrajectory { k: 1 },
            std::slice::from_ref(&e),
        )
        .unwrap();
        // the depth-3 pivot has the larger gap (0.75 vs 0.1875)
        assert_eq!(top1.members.iter().next().unwrap(), e.steps[3].state.key());
        let top3 = mine_pivots(
            &t,
            &PivotRule::TopKPerTrajectory { k: 3 },
            std::slice::from_ref(&e),
        )
        .unwrap();
        // third place is a zero-gap tie, broken by depth
        assert!(top3.contains(e.steps[0].state.key()));
    }

    #[test]
    fn occupancy_follows_branch_probabilities() {
        let env = BinaryEnv::new(2);
        let g = StateGraph::build(&env).unwrap();
        let s0 = env.initial_state();
        let mut policy = TabularSoftmaxPolicy::uniform();
        policy.set_logit(&s0, &TurnAction::language_act("left"), 0.3f64.ln());
        policy.set_logit(&s0, &TurnAction::language_act("right"), 0.7f64.ln());
        let occ = occupancy(&g, &policy).unwrap();
        let left = g.root().edges[0][0].next;
        let right = g.root().edges[1][0].next;
        let wl = occ.weights[g.nodes[left].state.key()];
        let wr = occ.weights[g.nodes[right].state.key()];
        assert!((wl / wr - 0.3 / 0.7).abs() < 1e-12);
        assert!((occ.weights.values().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((occ.weights[s0.key()] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let env = BinaryEnv::new(3);
        let g = StateGraph::build(&env).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut policy = TabularSoftmaxPolicy::uniform();
        for n in &g.nodes {
            for a in &n.actions {
                policy.set_logit(&n.state, a, rand::Rng::random_range(&mut rng, -1.0..1.0));
            }
        }
        let grad = full_turn_gradient(&g, &policy).unwrap().grad;
        let h = 1e-5;
        for key in policy.stored_params() {
            let mut up = policy.clone();
            up.set_param(&key, policy.param(&key) + h);
            let mut down = policy.clone();
            down.set_param(&key, policy.param(&key) - h);
            let fd = (expected_return(&g, &up).unwrap() - expected_return(&g, &down).unwrap())
                / (2.0 * h);
            assert!(
                (fd - grad.get(&key)).abs() < 1e-8,
                "{key:?}: {fd} vs {}",
                grad.get(&key)
            );
        }
    }

    #[test]
    fn flat_env_has_zero_gradient() {
        let (env, _) = synth(&[], 1, 1, 0.0, 4);
        let g = StateGraph::build(&env).unwrap();
        let grad = full_turn_gradient(&g, &TabularSoftmaxPolicy::uniform())
            .unwrap()
            .grad;
        assert!(grad.is_zero());
    }

    #[test]
    fn truncation_is_exact_without_nonpivot_advantage() {
        let (env, _) = synth(&[1, 2], 1, 3, 0.0, 4);
        let g = StateGraph::build(&env).unwrap();
        let policy = TabularSoftmaxPolicy::uniform();
        let pivots = PivotSet::from_states(
            PivotRule::Threshold { delta: 0.0 },
            g.nodes
                .iter()
                .filter(|n| env.is_planted_pivot(&n.state))
                .map(|n| &n.state),
        );
        let pg = pivot_only_gradient(&g, &policy, &pivots).unwrap();
        assert_eq!(pg.truncation_gap, 0.0);
        let everything = PivotSet::from_states(
            PivotRule::Threshold { delta: 0.0 },
            g.nodes.iter().map(|n| &n.state),
        );
        assert_eq!(
            pivot_only_gradient(&g, &policy, &everything)
                .unwrap()
                .truncation_gap,
            0.0
        );
        let key = ParamKey::new(g.root().state.key(), g.root().actions[0].canonical_key());
        assert_eq!(pg.full.get(&key), 0.0);
    }

    #[test]
    fn proxy_single_distractor_is_tight() {
        let (env, oracle) = synth(&[0], 1, 1, 0.1, 2);
        let (g, t) = exact_values_for(&env, &TabularSoftmaxPolicy::uniform()).unwrap();
        let e = expert_trajectory(&env, &oracle, &mut ChaCha8Rng::seed_from_u64(0), "e").unwrap();
        let proxy = proxy_values(&g, &t, &TabularSoftmaxPolicy::uniform(), &e).unwrap();
        let pivot = &proxy.entries[0];
        assert!((pivot.v - 0.55).abs() < 1e-15);
        assert_eq!(pivot.v_proxy, 0.5);
        assert!((pivot.baseline_error - 0.05).abs() < 1e-15);
        assert_eq!(pivot.proxy_advantage(&pivot.teacher_action), 0.5);
        let mut rejected = e.clone();
        rejected.accepted = false;
        assert!(matches!(
            proxy_values(&g, &t, &TabularSoftmaxPolicy::uniform(), &rejected),
            Err(ValuesError::TeacherRejected(_))
        ));
    }
}
