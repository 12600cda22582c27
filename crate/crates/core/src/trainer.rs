//! Group-normalized clipped policy optimization at pivot states.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::TurnAction;
use crate::mdp::{replay, rollout, EnvSuite, MdpError, TurnEnv};
use crate::pipeline::{FilterTag, PivotCandidate};
use crate::policy::{
    action_support, kl_divergence, ParamVec, PolicyError, PolicySnapshot, SnapshotRole, Trainable,
    TurnPolicy,
};
use crate::seed::{rng_for, sub_seed};
use crate::state::InteractionState;
use crate::verifier::{r_func, JudgeClient, MatchRule, VerifierError};

/// Allowed disagreement between stored and recomputed old log-probs.
pub const STALE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("group needs at least 2 samples, got {0}")]
    GroupTooSmall(usize),
    #[error(
        "group {group}: stored log-prob of sample {index} is off by {diff:e} from the old snapshot"
    )]
    StaleSnapshot {
        group: String,
        index: usize,
        diff: f64,
    },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub eps_std: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub inner_epochs: usize,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Evaluation episodes per context.
    pub eval_episodes: usize,
    pub tag: Option<FilterTag>,
    pub seed: u64,
    pub rule: MatchRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.0,
            eps_std: 1e-4,
            learning_rate: 0.5,
            steps: 400,
            batch_size: 4,
            inner_epochs: 1,
            eval_every: 50,
            eval_episodes: 32,
            tag: None,
            seed: 0,
            rule: MatchRule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must be in (0, 1)");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be finite and >= 0");
        }
        if self.eps_std.is_nan() || self.eps_std <= 0.0 {
            return bad("eps_std must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and > 0");
        }
        if self.batch_size == 0 || self.inner_epochs == 0 || self.eval_episodes == 0 {
            return bad("batch_size, inner_epochs and eval_episodes must be >= 1");
        }
        self.rule.validate()?;
        Ok(())
    }
}

/// `(r_i - mean) / (std + eps_std)` with the population std. Constant
/// groups give exact zeros without touching the arithmetic.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>, TrainerError> {
    let g = rewards.len();
    if g < 2 {
        return Err(TrainerError::GroupTooSmall(g));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; g]);
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
    Ok(rewards
        .iter()
        .map(|r| (r - mean) / (std + eps_std))
        .collect())
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub group_id: String,
    pub state: InteractionState,
    pub support: Vec<TurnAction>,
    pub actions: Vec<TurnAction>,
    pub rewards: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new<P: TurnPolicy>(
        group_id: impl Into<String>,
        state: InteractionState,
        support: Vec<TurnAction>,
        actions: Vec<TurnAction>,
        rewards: Vec<f64>,
        old: &P,
        eps_std: f64,
    ) -> Result<Self, TrainerError> {
        let advantages = group_advantages(&rewards, eps_std)?;
        let old_log_probs = actions
            .iter()
            .map(|a| old.log_prob(&state, &support, a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            group_id: group_id.into(),
            state,
            support,
            actions,
            rewards,
            old_log_probs,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Samples `g` turns from `old` and scores them against the expert turn.
#[allow(clippy::too_many_arguments)]
pub fn sample_group<P: TurnPolicy, R: Rng + ?Sized>(
    group_id: impl Into<String>,
    old: &P,
    state: &InteractionState,
    support: &[TurnAction],
    expert: &TurnAction,
    cfg: &TrainConfig,
    judge: Option<&dyn JudgeClient>,
    rng: &mut R,
) -> Result<RolloutGroup, TrainerError> {
    let mut actions = Vec::with_capacity(cfg.group_size);
    let mut rewards = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let a = old.sample(state, support, rng)?;
        rewards.push(r_func(&cfg.rule, state, &a, expert, judge)?);
        actions.push(a);
    }
    RolloutGroup::new(
        group_id,
        state.clone(),
        support.to_vec(),
        actions,
        rewards,
        old,
        cfg.eps_std,
    )
}

fn clipped(w: f64, eps: f64) -> f64 {
    w.clamp(1.0 - eps, 1.0 + eps)
}

/// Per-group clipped surrogate `mean_i min(w_i A_i, clip(w_i) A_i)`.
pub fn group_surrogate<P: TurnPolicy>(
    policy: &P,
    group: &RolloutGroup,
    clip_eps: f64,
) -> Result<f64, TrainerError> {
    let mut total = 0.0;
    for ((a, adv), old_lp) in group
        .actions
        .iter()
        .zip(&group.advantages)
        .zip(&group.old_log_probs)
    {
        let w = (policy.log_prob(&group.state, &group.support, a)? - old_lp).exp();
        total += (w * adv).min(clipped(w, clip_eps) * adv);
    }
    Ok(total / group.len() as f64)
}

/// Exact `KL(policy || reference)` over the group's support.
pub fn state_kl<P: TurnPolicy>(
    policy: &P,
    reference: &P,
    state: &InteractionState,
    support: &[TurnAction],
) -> Result<f64, TrainerError> {
    Ok(kl_divergence(
        &policy.probabilities(state, support)?,
        &reference.probabilities(state, support)?,
    ))
}

/// Batch objective: mean over groups of surrogate minus `beta` times KL.
pub fn batch_objective<P: TurnPolicy>(
    policy: &P,
    reference: &P,
    batch: &[RolloutGroup],
    clip_eps: f64,
    beta: f64,
) -> Result<f64, TrainerError> {
    let mut total = 0.0;
    for g in batch {
        total += group_surrogate(policy, g, clip_eps)?;
        if beta != 0.0 {
            total -= beta * state_kl(policy, reference, &g.state, &g.support)?;
        }
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Gradient of [`batch_objective`]. A sample contributes `w A score` unless
/// its clipped branch is active; the KL term contributes
/// `-beta sum_a pi(a) (log pi(a) - log pi0(a)) score(a)`.
pub fn batch_gradient<P: TurnPolicy>(
    policy: &P,
    reference: &P,
    batch: &[RolloutGroup],
    clip_eps: f64,
    beta: f64,
) -> Result<(ParamVec, usize), TrainerError> {
    let mut grad = ParamVec::new();
    let mut clipped_samples = 0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for g in batch {
        let inv_g = 1.0 / g.len() as f64;
        for ((a, adv), old_lp) in g.actions.iter().zip(&g.advantages).zip(&g.old_log_probs) {
            if *adv == 0.0 {
                continue;
            }
            let w = (policy.log_prob(&g.state, &g.support, a)? - old_lp).exp();
            let active = (*adv > 0.0 && w > 1.0 + clip_eps) || (*adv < 0.0 && w < 1.0 - clip_eps);
            if active {
                clipped_samples += 1;
                continue;
            }
            grad.add_scaled(
                &policy.score_grad(&g.state, &g.support, a)?,
                scale * inv_g * w * adv,
            );
        }
        if beta != 0.0 {
            let p = policy.probabilities(&g.state, &g.support)?;
            let p0 = reference.probabilities(&g.state, &g.support)?;
            for ((a, pa), p0a) in g.support.iter().zip(&p).zip(&p0) {
                if *pa == 0.0 {
                    continue;
                }
                let coef = pa * (pa.ln() - p0a.ln());
                grad.add_scaled(
                    &policy.score_grad(&g.state, &g.support, a)?,
                    -scale * beta * coef,
                );
            }
        }
    }
    Ok((grad, clipped_samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepUpdate {
    pub grad: ParamVec,
    pub grad_norm: f64,
    pub surrogate: f64,
    pub kl_ref: f64,
    pub clip_fraction: f64,
}

/// One ascent step on the batch objective. Checks the batch against the
/// old snapshot first.
pub fn pivot_step<P: Trainable>(
    policy: &mut P,
    old: &PolicySnapshot<P>,
    reference: &PolicySnapshot<P>,
    batch: &[RolloutGroup],
    cfg: &TrainConfig,
) -> Result<StepUpdate, TrainerError> {
    let mut samples = 0;
    let mut kl = 0.0;
    for g in batch {
        if g.len() < 2 {
            return Err(TrainerError::GroupTooSmall(g.len()));
        }
        for (i, (a, lp)) in g.actions.iter().zip(&g.old_log_probs).enumerate() {
            let fresh = old.log_prob(&g.state, &g.support, a)?;
            let diff = (fresh - lp).abs();
            if diff > STALE_TOLERANCE || !diff.is_finite() {
                return Err(TrainerError::StaleSnapshot {
                    group: g.group_id.clone(),
                    index: i,
                    diff,
                });
            }
        }
        samples += g.len();
        kl += state_kl(policy, reference.policy(), &g.state, &g.support)?;
    }
    let surrogate = batch_objective(policy, reference.policy(), batch, cfg.clip_eps, 0.0)?;
    let (grad, clipped_samples) =
        batch_gradient(policy, reference.policy(), batch, cfg.clip_eps, cfg.kl_beta)?;
    policy.apply_update(&grad, cfg.learning_rate);
    Ok(StepUpdate {
        grad_norm: grad.norm(),
        grad,
        surrogate,
        kl_ref: kl / batch.len().max(1) as f64,
        clip_fraction: if samples == 0 {
            0.0
        } else {
            clipped_samples as f64 / samples as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean over groups of the within-group population reward std.
    pub reward_std: f64,
    pub grad_norm: f64,
    pub kl_ref: f64,
    pub clip_fraction: f64,
    pub groups: usize,
    pub skipped_groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHeader {
    pub config: TrainConfig,
    pub dataset_size: usize,
    pub initial_success: Option<f64>,
    #[serde(default)]
    pub echo: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub header: TrainHeader,
    pub steps: Vec<StepMetrics>,
    /// Groups skipped because sampling or scoring failed.
    pub failures: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Header(TrainHeader),
    Step(StepMetrics),
}

impl TrainLog {
    pub fn final_success(&self) -> Option<f64> {
        self.steps.iter().rev().find_map(|s| s.eval_success)
    }

    /// Mean batch reward std over the second half of the steps.
    pub fn second_half_reward_std(&self) -> f64 {
        let half = &self.steps[self.steps.len() / 2..];
        if half.is_empty() {
            return 0.0;
        }
        half.iter().map(|s| s.reward_std).sum::<f64>() / half.len() as f64
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<(), TrainerError> {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&LogLine::Header(self.header.clone()))
                .expect("header serializes")
        )?;
        for s in &self.steps {
            writeln!(
                out,
                "{}",
                serde_json::to_string(&LogLine::Step(s.clone())).expect("step serializes")
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, TrainerError> {
        let mut header = None;
        let mut steps = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| TrainerError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })? {
                LogLine::Header(h) => header = Some(h),
                LogLine::Step(s) => steps.push(s),
            }
        }
        Ok(Self {
            header: header.ok_or(TrainerError::Parse {
                line: 0,
                message: "missing header record".into(),
            })?,
            steps,
            failures: Vec::new(),
        })
    }
}

/// Fraction of full rollouts from the initial state that are accepted.
pub fn evaluate<E: TurnEnv, P: TurnPolicy, R: Rng + ?Sized>(
    policy: &P,
    env: &E,
    episodes: usize,
    rng: &mut R,
) -> Result<f64, TrainerError> {
    let s0 = env.initial_state();
    let mut accepted = 0;
    for ep in 0..episodes.max(1) {
        if rollout(env, policy, &s0, rng, format!("eval-{ep}"))?.accepted {
            accepted += 1;
        }
    }
    Ok(accepted as f64 / episodes.max(1) as f64)
}

/// Mean success over a suite. Episode `i` of context `c` always uses the
/// generator for `(seed, c, i)`, so two policies are compared on common
/// random numbers.
pub fn evaluate_suite<E: TurnEnv, P: TurnPolicy>(
    policy: &P,
    suite: &EnvSuite<E>,
    episodes: usize,
    seed: u64,
) -> Result<f64, TrainerError> {
    let mut accepted = 0usize;
    let mut total = 0usize;
    for env in suite.iter() {
        let ctx = env.context();
        let s0 = env.initial_state();
        for ep in 0..episodes.max(1) {
            let mut rng = rng_for(seed, &["eval", &ctx.id, &ep.to_string()]);
            if rollout(env, policy, &s0, &mut rng, format!("eval-{ep}"))?.accepted {
                accepted += 1;
            }
            total += 1;
        }
    }
    Ok(accepted as f64 / total.max(1) as f64)
}

/// Training loop: each step samples `B` dataset states, snapshots the
/// policy, samples and scores `G` turns per state, and applies
/// `inner_epochs` clipped steps. `hook` sees the policy after every step.
#[allow(clippy::too_many_arguments)]
pub fn train_with_hook<E, P, F>(
    dataset: &[PivotCandidate],
    suite: &EnvSuite<E>,
    initial: P,
    reference: &PolicySnapshot<P>,
    cfg: &TrainConfig,
    judge: Option<&dyn JudgeClient>,
    mut hook: F,
) -> Result<(P, TrainLog), TrainerError>
where
    E: TurnEnv,
    P: Trainable,
    F: FnMut(usize, &P) -> Result<(), TrainerError>,
{
    cfg.validate()?;
    let mut failures = Vec::new();
    // Replay once so every training state carries the env's own flags.
    let mut usable = Vec::new();
    for c in dataset {
        let prepared = suite
            .get(&c.state.context_id)
            .and_then(|env| Ok((env, replay(env, &c.state.transcript)?)));
        match prepared {
            Ok((env, state)) if !state.terminal => {
                let support = action_support(env, &state);
                usable.push((c, state, support));
            }
            Ok(_) => failures.push(format!("{}: terminal state", c.candidate_id)),
            Err(e) => failures.push(format!("{}: {e}", c.candidate_id)),
        }
    }
    if usable.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let eval_seed = sub_seed(cfg.seed, &["eval"]);
    let initial_success = Some(evaluate_suite(
        &initial,
        suite,
        cfg.eval_episodes,
        eval_seed,
    )?);
    let mut policy = initial;
    let mut rng = rng_for(cfg.seed, &["train"]);
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let old = PolicySnapshot::take(&policy, SnapshotRole::Old);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut skipped = 0;
        for b in 0..cfg.batch_size {
            let (c, state, support) = &usable[rng.random_range(0..usable.len())];
            let gid = format!("{step}/{b}/{}", c.candidate_id);
            match sample_group(
                gid.clone(),
                old.policy(),
                state,
                support,
                &c.expert_action,
                cfg,
                judge,
                &mut rng,
            ) {
                Ok(g) => batch.push(g),
                Err(e) => {
                    skipped += 1;
                    failures.push(format!("{gid}: {e}"));
                }
            }
        }
        let mut update = None;
        if !batch.is_empty() {
            for _ in 0..cfg.inner_epochs {
                let u = pivot_step(&mut policy, &old, reference, &batch, cfg)?;
                update.get_or_insert(u);
            }
        }
        let rewards: Vec<f64> = batch
            .iter()
            .flat_map(|g| g.rewards.iter().copied())
            .collect();
        let n_groups = batch.len().max(1) as f64;
        let last = step + 1 == cfg.steps;
        let eval_due = last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0);
        let eval_success = if eval_due {
            Some(evaluate_suite(
                &policy,
                suite,
                cfg.eval_episodes,
                eval_seed,
            )?)
        } else {
            None
        };
        steps.push(StepMetrics {
            step: step + 1,
            mean_reward: if rewards.is_empty() {
                0.0
            } else {
                rewards.iter().sum::<f64>() / rewards.len() as f64
            },
            reward_std: batch
                .iter()
                .map(|g| population_std(&g.rewards))
                .sum::<f64>()
                / n_groups,
            grad_norm: update.as_ref().map_or(0.0, |u| u.grad_norm),
            kl_ref: update.as_ref().map_or(0.0, |u| u.kl_ref),
            clip_fraction: update.as_ref().map_or(0.0, |u| u.clip_fraction),
            groups: batch.len(),
            skipped_groups: skipped,
            eval_success,
        });
        hook(step + 1, &policy)?;
    }
    let log = TrainLog {
        header: TrainHeader {
            config: cfg.clone(),
            dataset_size: dataset.len(),
            initial_success,
            echo: BTreeMap::new(),
        },
        steps,
        failures,
    };
    Ok((policy, log))
}

pub fn train<E: TurnEnv, P: Trainable>(
    dataset: &[PivotCandidate],
    suite: &EnvSuite<E>,
    initial: P,
    reference: &PolicySnapshot<P>,
    cfg: &TrainConfig,
    judge: Option<&dyn JudgeClient>,
) -> Result<(P, TrainLog), TrainerError> {
    train_with_hook(
        dataset,
        suite,
        initial,
        reference,
        cfg,
        judge,
        |_, _| Ok(()),
    )
}
