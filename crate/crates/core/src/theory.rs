//! Single-state identities behind the trainer, checked numerically: the
//! KL projection onto a target matching-set mass, the reward-variance form
//! of the local group-normalized signal, and the reweighting that turns
//! imitation into a policy gradient.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::StateGraph;
use crate::policy::{ParamVec, TurnPolicy};
use crate::state::Trajectory;
use crate::values::{exact_values, occupancy, ValuesError};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("reference distribution must be strictly positive and sum to 1: {0}")]
    InvalidReference(String),
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("{method} did not converge in {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("no state has gap above {delta}")]
    EmptyPivotSet { delta: f64 },
    #[error("expert state `{0}` has zero occupancy under the policy")]
    ExpertOffSupport(String),
    #[error("expert state `{0}` is not in the state graph")]
    UnknownState(String),
    #[error(transparent)]
    Values(#[from] ValuesError),
}

fn check_reference(pi0: &[f64]) -> Result<(), TheoryError> {
    if pi0.is_empty() || pi0.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(TheoryError::InvalidReference("non-positive entry".into()));
    }
    let total: f64 = pi0.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(TheoryError::InvalidReference(format!("sum {total}")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<(), TheoryError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(TheoryError::InvalidBeta(beta))
    }
}

/// `pi0(a) exp(r(a) / beta) / Z`.
pub fn tilted_policy(pi0: &[f64], rewards: &[f64], beta: f64) -> Result<Vec<f64>, TheoryError> {
    check_reference(pi0)?;
    check_beta(beta)?;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(pi0.to_vec());
    }
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = pi0
        .iter()
        .zip(rewards)
        .map(|(p, r)| p * ((r - max) / beta).exp())
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Mean and population variance of `r` under `pi`.
pub fn moments(pi: &[f64], r: &[f64]) -> (f64, f64) {
    let q: f64 = pi.iter().zip(r).map(|(p, x)| p * x).sum();
    let var: f64 = pi.iter().zip(r).map(|(p, x)| p * (x - q).powi(2)).sum();
    (q, var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlProjectionResult {
    /// Reference mass of the matching set.
    pub rho: f64,
    /// Target mass.
    pub q_beta: f64,
    pub pi_star: Vec<f64>,
    /// `KL(pi_star || pi0)`.
    pub kl: f64,
}

fn mass_of(pi: &[f64], members: &BTreeSet<usize>) -> f64 {
    members.iter().map(|i| pi[*i]).sum()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Blockwise rescaling of `pi0`: mass `q` on `members`, `1 - q` off them.
fn rescale(pi0: &[f64], members: &BTreeSet<usize>, rho: f64, q: f64) -> Vec<f64> {
    pi0.iter()
        .enumerate()
        .map(|(i, p)| {
            if members.contains(&i) {
                p * q / rho
            } else {
                p * (1.0 - q) / (1.0 - rho)
            }
        })
        .collect()
}

/// Maximizer of `E_pi[1_M] - beta KL(pi || pi0)` in closed form.
pub fn kl_projection_closed_form(
    pi0: &[f64],
    members: &BTreeSet<usize>,
    beta: f64,
) -> Result<KlProjectionResult, TheoryError> {
    check_reference(pi0)?;
    check_beta(beta)?;
    let rho = mass_of(pi0, members);
    if members.is_empty() || members.len() == pi0.len() {
        return Ok(KlProjectionResult {
            rho,
            q_beta: rho,
            pi_star: pi0.to_vec(),
            kl: 0.0,
        });
    }
    // rho e^{1/b} / ((1 - rho) + rho e^{1/b}), written to avoid overflow
    let q_beta = rho / (rho + (1.0 - rho) * (-1.0 / beta).exp());
    let pi_star = rescale(pi0, members, rho, q_beta);
    let kl = kl(&pi_star, pi0);
    Ok(KlProjectionResult {
        rho,
        q_beta,
        pi_star,
        kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericProjection {
    /// Block mass found by bisection on the scalar derivative.
    pub q_bisection: f64,
    pub bisection: Vec<f64>,
    pub descent: Vec<f64>,
    pub descent_iterations: usize,
}

const BISECTION_ITERS: usize = 200;
const DESCENT_BUDGET: usize = 500_000;
const DESCENT_TOL: f64 = 1e-12;

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, x) in u.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Two oracles for the projection that do not use the closed form:
/// bisection on the derivative of the scalar block-mass objective, and
/// projected gradient descent over the whole simplex. Neither shares code
/// with [`kl_projection_closed_form`].
pub fn kl_minimize_numeric(
    pi0: &[f64],
    members: &BTreeSet<usize>,
    beta: f64,
) -> Result<NumericProjection, TheoryError> {
    check_reference(pi0)?;
    check_beta(beta)?;
    let rho = mass_of(pi0, members);
    let boundary = members.is_empty() || members.len() == pi0.len();

    let q_bisection = if boundary {
        rho
    } else {
        // phi'(q) = -1 + beta [ln(q / rho) - ln((1 - q) / (1 - rho))], increasing in q
        let dphi = |q: f64| -1.0 + beta * ((q / rho).ln() - ((1.0 - q) / (1.0 - rho)).ln());
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..BISECTION_ITERS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if dphi(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = 0.5 * (lo + hi);
        if dphi(q).abs() > 1e-6 && hi - lo > 1e-15 {
            return Err(TheoryError::ConvergenceFailure {
                method: "bisection",
                iterations: BISECTION_ITERS,
                residual: dphi(q).abs(),
            });
        }
        q
    };
    let off_mass = 1.0 - q_bisection;
    let bisection: Vec<f64> = if boundary {
        pi0.to_vec()
    } else {
        pi0.iter()
            .enumerate()
            .map(|(i, p)| {
                if members.contains(&i) {
                    q_bisection * (p / rho)
                } else {
                    off_mass * (p / (1.0 - rho))
                }
            })
            .collect()
    };

    let r: Vec<f64> = (0..pi0.len())
        .map(|i| if members.contains(&i) { 1.0 } else { 0.0 })
        .collect();
    let gradient = |pi: &[f64]| -> Vec<f64> {
        pi.iter()
            .zip(pi0)
            .zip(&r)
            .map(|((p, p0), x)| -x + beta * ((p / p0).ln() + 1.0))
            .collect()
    };
    // stationarity on the interior: all partials equal
    let spread = |g: &[f64]| {
        let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = g.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    };
    // The Hessian is diag(beta / pi), so a step of min(pi) / (2 beta) stays
    // below the local inverse curvature of every coordinate.
    let mut pi = pi0.to_vec();
    let mut iterations = 0;
    loop {
        let g = gradient(&pi);
        let residual = spread(&g);
        if residual <= DESCENT_TOL * beta.max(1.0) {
            break;
        }
        if iterations >= DESCENT_BUDGET {
            return Err(TheoryError::ConvergenceFailure {
                method: "projected descent",
                iterations,
                residual,
            });
        }
        let mut step = pi.iter().copied().fold(f64::INFINITY, f64::min) / (2.0 * beta);
        loop {
            let trial: Vec<f64> = pi.iter().zip(&g).map(|(p, d)| p - step * d).collect();
            let next = project_simplex(&trial);
            if next.iter().all(|p| *p > 0.0) {
                pi = next;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
    }
    Ok(NumericProjection {
        q_bisection,
        bisection,
        descent: pi,
        descent_iterations: iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Closed,
    Numeric,
}

/// Default central-difference step in beta.
pub const FD_STEP: f64 = 1e-5;

/// `d/d beta log pi_beta(a)` by central differences.
pub fn dbeta_log_prob_numeric(
    pi0: &[f64],
    rewards: &[f64],
    beta: f64,
    h: f64,
) -> Result<Vec<f64>, TheoryError> {
    let plus = tilted_policy(pi0, rewards, beta + h)?;
    let minus = tilted_policy(pi0, rewards, beta - h)?;
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p.ln() - m.ln()) / (2.0 * h))
        .collect())
}

/// `-(r(a) - q) / beta^2` with `q` the mean reward under the tilted policy.
pub fn dbeta_log_prob_closed(
    pi0: &[f64],
    rewards: &[f64],
    beta: f64,
) -> Result<Vec<f64>, TheoryError> {
    let pi = tilted_policy(pi0, rewards, beta)?;
    let (q, _) = moments(&pi, rewards);
    Ok(rewards.iter().map(|r| -(r - q) / (beta * beta)).collect())
}

/// Local signal strength along the tilted path. Closed mode gives
/// `sigma / beta^2`; numeric mode evaluates
/// `-E[((r - q) / sigma) d/d beta log pi]` with central differences.
/// Constant rewards give exactly 0 in both modes.
pub fn grpo_score(
    pi0: &[f64],
    rewards: &[f64],
    beta: f64,
    mode: ScoreMode,
    h: f64,
) -> Result<f64, TheoryError> {
    let pi = tilted_policy(pi0, rewards, beta)?;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(0.0);
    }
    let (q, var) = moments(&pi, rewards);
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Ok(0.0);
    }
    match mode {
        ScoreMode::Closed => Ok(sigma / (beta * beta)),
        ScoreMode::Numeric => {
            let d = dbeta_log_prob_numeric(pi0, rewards, beta, h)?;
            Ok(-pi
                .iter()
                .zip(rewards)
                .zip(&d)
                .map(|((p, r), dl)| p * ((r - q) / sigma) * dl)
                .sum::<f64>())
        }
    }
}

/// `sqrt(Var_pi(r))`.
pub fn natural_grad_norm(pi: &[f64], rewards: &[f64]) -> f64 {
    moments(pi, rewards).1.sqrt()
}

/// Fisher metric between the tangent vectors `pi * u` and `pi * v`, from
/// the definition `sum_a du(a) dv(a) / pi(a)`.
pub fn fisher_inner(pi: &[f64], u: &[f64], v: &[f64]) -> f64 {
    pi.iter()
        .zip(u)
        .zip(v)
        .filter(|((p, _), _)| **p > 0.0)
        .map(|((p, a), b)| (p * a) * (p * b) / p)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeEntry {
    pub state_key: String,
    pub action_key: String,
    /// State-action occupancy `d(s) pi(a|s)`.
    pub d_pi: f64,
    pub d_sft: f64,
    pub w_sft: f64,
    pub r_sft: f64,
    pub gap: f64,
    pub w_pivot: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeWeights {
    pub entries: Vec<BridgeEntry>,
    /// `E_d[1(Gap > delta)]`.
    pub z: f64,
    /// `-E_{d pi}[w_sft score r_sft]`.
    pub is_gradient: ParamVec,
    /// Mean negative log-likelihood gradient over the expert turns.
    pub nll_gradient: ParamVec,
    /// `E_d[w_pivot 1(Gap > delta)]`, which should be 1.
    pub pivot_normalization: f64,
    /// Pivot-weighted importance form.
    pub pivot_gradient: ParamVec,
    /// Occupancy-weighted imitation gradient restricted to pivot states.
    pub pivot_imitation: ParamVec,
}

impl BridgeWeights {
    pub fn sft_residual(&self) -> f64 {
        self.is_gradient.sub(&self.nll_gradient).max_abs()
    }

    pub fn pivot_residual(&self) -> f64 {
        self.pivot_gradient.sub(&self.pivot_imitation).max_abs()
    }
}

/// Reweighting of the expert imitation gradient as a policy gradient under
/// the policy's own normalized occupancy, plus the pivot-indicator weights.
pub fn bridge_weights<P: TurnPolicy>(
    graph: &StateGraph,
    policy: &P,
    experts: &[Trajectory],
    delta: f64,
) -> Result<BridgeWeights, TheoryError> {
    let table = exact_values(graph, policy)?;
    let occ = occupancy(graph, policy)?;

    // empirical (s, a*) measure of the expert set
    let mut counts: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut turns = 0.0;
    let mut nll = ParamVec::new();
    for t in experts {
        for step in &t.steps {
            let node = graph
                .node(step.state.key())
                .ok_or_else(|| TheoryError::UnknownState(step.state.key().to_string()))?;
            nll.add_scaled(
                &policy
                    .score_grad(&node.state, &node.actions, &step.action)
                    .map_err(ValuesError::from)?,
                -1.0,
            );
            *counts
                .entry((
                    step.state.key().to_string(),
                    step.action.canonical_key().to_string(),
                ))
                .or_default() += 1.0;
            turns += 1.0;
        }
    }
    let nll_gradient = if turns > 0.0 {
        nll.scaled(1.0 / turns)
    } else {
        nll
    };

    let z: f64 = table
        .states
        .iter()
        .filter(|s| !s.terminal && s.gap > delta)
        .map(|s| occ.weights.get(&s.state_key).copied().unwrap_or(0.0))
        .sum();
    if z == 0.0 {
        return Err(TheoryError::EmptyPivotSet { delta });
    }

    let mut entries = Vec::new();
    let mut is_gradient = ParamVec::new();
    let mut pivot_gradient = ParamVec::new();
    let mut pivot_imitation = ParamVec::new();
    let mut pivot_normalization = 0.0;
    for (state_key, _) in counts.keys() {
        if occ.weights.get(state_key).copied().unwrap_or(0.0) <= 0.0 {
            return Err(TheoryError::ExpertOffSupport(state_key.clone()));
        }
    }
    for (i, node) in graph.nodes.iter().enumerate() {
        if node.state.terminal {
            continue;
        }
        let sv = &table.states[i];
        let d_s = occ.weights.get(node.state.key()).copied().unwrap_or(0.0);
        let pivot = sv.gap > delta;
        let w_pivot = if pivot { 1.0 / z } else { 0.0 };
        if pivot {
            pivot_normalization += d_s * w_pivot;
        }
        for (a, action) in node.actions.iter().enumerate() {
            let key = (
                node.state.key().to_string(),
                action.canonical_key().to_string(),
            );
            let d_sft = counts.get(&key).copied().unwrap_or(0.0) / turns.max(1.0);
            let r_sft = if d_sft > 0.0 { 1.0 } else { 0.0 };
            let d_pi = d_s * sv.probs[a];
            let w_sft = if d_pi > 0.0 { d_sft / d_pi } else { 0.0 };
            if r_sft != 0.0 {
                let score = policy
                    .score_grad(&node.state, &node.actions, action)
                    .map_err(ValuesError::from)?;
                is_gradient.add_scaled(&score, -d_pi * w_sft * r_sft);
                if pivot {
                    // importance form: a ~ pi, weight r_sft / pi(a|s)
                    pivot_gradient
                        .add_scaled(&score, -d_s * w_pivot * sv.probs[a] * (r_sft / sv.probs[a]));
                    pivot_imitation.add_scaled(&score, -d_s / z);
                }
            }
            entries.push(BridgeEntry {
                state_key: key.0,
                action_key: key.1,
                d_pi,
                d_sft,
                w_sft,
                r_sft,
                gap: sv.gap,
                w_pivot,
            });
        }
    }
    Ok(BridgeWeights {
        entries,
        z,
        is_gradient,
        nll_gradient,
        pivot_normalization,
        pivot_gradient,
        pivot_imitation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::StateGraph;
    use crate::policy::TabularSoftmaxPolicy;
    use crate::synth::{build_env, expert_trajectory, PivotPlan, SynthEnvSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn tilted_examples() {
        let e = std::f64::consts::E;
        let p = tilted_policy(&[0.5, 0.5], &[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(
            tilted_policy(&[0.2, 0.8], &[3.0, 3.0], 0.1).unwrap(),
            vec![0.2, 0.8]
        );
        let sharp = tilted_policy(&[0.9, 0.1], &[0.0, 1.0], 1e-3).unwrap();
        assert!(sharp[1] > 1.0 - 1e-12);
        assert!(tilted_policy(&[0.5, 0.5], &[1.0, 0.0], 0.0).is_err());
        assert!(tilted_policy(&[1.0, 0.0], &[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn projection_examples() {
        let e = std::f64::consts::E;
        let r = kl_projection_closed_form(&[0.5, 0.5], &set(&[0]), 1.0).unwrap();
        assert!((r.pi_star[0] - e / (1.0 + e)).abs() < 1e-12);
        let n = kl_minimize_numeric(&[0.5, 0.5], &set(&[0]), 1.0).unwrap();
        assert!((n.q_bisection - e / (1.0 + e)).abs() < 1e-10);
        let full = kl_projection_closed_form(&[0.3, 0.7], &set(&[0, 1]), 1.0).unwrap();
        assert_eq!(full.pi_star, vec![0.3, 0.7]);
        let none = kl_projection_closed_form(&[0.3, 0.7], &set(&[]), 1.0).unwrap();
        assert_eq!(none.pi_star, vec![0.3, 0.7]);
        let loose = kl_minimize_numeric(&[0.1, 0.2, 0.7], &set(&[1]), 1e3).unwrap();
        let tv: f64 = loose
            .descent
            .iter()
            .zip([0.1, 0.2, 0.7])
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 1e-3);
    }

    #[test]
    fn projection_oracles_agree_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let n = rng.random_range(2..=8);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let pi0: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let m: BTreeSet<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
            let beta = [0.5, 1.0, 2.0][rng.random_range(0..3)];
            let c = kl_projection_closed_form(&pi0, &m, beta).unwrap();
            let o = kl_minimize_numeric(&pi0, &m, beta).unwrap();
            for i in 0..n {
                assert!((c.pi_star[i] - o.bisection[i]).abs() < 1e-9);
                assert!((o.bisection[i] - o.descent[i]).abs() < 1e-8);
            }
            assert!(c.q_beta >= c.rho);
        }
    }

    #[test]
    fn score_identity_examples() {
        assert_eq!(
            grpo_score(&[0.5, 0.5], &[1.0, 1.0], 1.0, ScoreMode::Numeric, FD_STEP).unwrap(),
            0.0
        );
        // mass 0.5 on the rewarded action after tilting
        let e = std::f64::consts::E;
        let pi0 = [1.0 / (1.0 + e), e / (1.0 + e)];
        let g = grpo_score(&pi0, &[1.0, 0.0], 1.0, ScoreMode::Closed, FD_STEP).unwrap();
        assert!((g - 0.5).abs() < 1e-12);
        let n = grpo_score(&pi0, &[1.0, 0.0], 1.0, ScoreMode::Numeric, FD_STEP).unwrap();
        assert!((n - 0.5).abs() / 0.5 < 1e-6);
        assert_eq!(natural_grad_norm(&[0.5, 0.5], &[1.0, 0.0]), 0.5);
        let pi = [0.2, 0.3, 0.5];
        let r = [0.4, -1.0, 2.0];
        let (q, var) = moments(&pi, &r);
        let c: Vec<f64> = r.iter().map(|x| x - q).collect();
        assert!((fisher_inner(&pi, &c, &c) - var).abs() < 1e-12);
    }

    #[test]
    fn bridge_identities_on_a_planted_env() {
        let (env, oracle) = build_env(&SynthEnvSpec::new(
            4,
            PivotPlan {
                pivot_depths: vec![1],
                acceptable_per_pivot: 1,
                distractors_per_pivot: 2,
                value_leak: 0.0,
            },
            4,
        ))
        .unwrap();
        let graph = StateGraph::build(&env).unwrap();
        let t = expert_trajectory(&env, &oracle, &mut ChaCha8Rng::seed_from_u64(0), "e").unwrap();
        let p = TabularSoftmaxPolicy::uniform();
        let b = bridge_weights(&graph, &p, std::slice::from_ref(&t), 0.1).unwrap();
        assert!(b.sft_residual() < 1e-12);
        assert!((b.pivot_normalization - 1.0).abs() < 1e-12);
        assert!(b.pivot_residual() < 1e-12);
        assert!(matches!(
            bridge_weights(&graph, &p, &[t], 2.0),
            Err(TheoryError::EmptyPivotSet { .. })
        ));
    }
}
