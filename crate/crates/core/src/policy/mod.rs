//! Turn policies with exact log-probabilities and score gradients.
//!
//! Every call receives the finite action support of the state (as returned
//! by [`TurnEnv::actions`](crate::mdp::TurnEnv::actions)); probabilities are
//! normalized over that support.

mod checkpoint;
mod tabular;
mod token;

use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::TurnAction;
use crate::mdp::TurnEnv;
use crate::state::InteractionState;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointHeader, PolicyKind,
};
pub use tabular::{ActionPrior, PriorKey, TabularSoftmaxPolicy};
pub use token::{TokenFactoredPolicy, END_OF_TURN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("action `{0}` is not representable at this state")]
    UnsupportedAction(String),
    #[error("empty action support")]
    EmptySupport,
    #[error("invalid policy parameter: {0}")]
    InvalidParameter(String),
}

/// Coordinate of a policy parameter: a scope (state key or token
/// conditioning key) and an item (action key or token).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub scope: String,
    pub item: String,
}

impl ParamKey {
    pub fn new(scope: impl Into<String>, item: impl Into<String>) -> Self {
        Self {
            scope: scope.into(),
            item: item.into(),
        }
    }
}

/// Sparse parameter-indexed vector. Ordered so that sums are reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVec(BTreeMap<ParamKey, f64>);

impl ParamVec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &ParamKey) -> f64 {
        self.0.get(key).copied().unwrap_or(0.0)
    }

    pub fn add(&mut self, key: ParamKey, value: f64) {
        *self.0.entry(key).or_insert(0.0) += value;
    }

    pub fn add_scaled(&mut self, other: &ParamVec, scale: f64) {
        for (k, v) in &other.0 {
            self.add(k.clone(), scale * v);
        }
    }

    pub fn scaled(&self, scale: f64) -> ParamVec {
        ParamVec(self.0.iter().map(|(k, v)| (k.clone(), v * scale)).collect())
    }

    pub fn sub(&self, other: &ParamVec) -> ParamVec {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn dot(&self, other: &ParamVec) -> f64 {
        self.0.iter().map(|(k, v)| v * other.get(k)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &f64)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when every stored coordinate is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.0.values().all(|v| *v == 0.0)
    }
}

impl FromIterator<(ParamKey, f64)> for ParamVec {
    fn from_iter<T: IntoIterator<Item = (ParamKey, f64)>>(iter: T) -> Self {
        let mut v = ParamVec::new();
        for (k, x) in iter {
            v.add(k, x);
        }
        v
    }
}

pub trait TurnPolicy {
    /// Probabilities aligned with `support`.
    fn probabilities(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
    ) -> Result<Vec<f64>, PolicyError>;

    fn log_prob(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
        action: &TurnAction,
    ) -> Result<f64, PolicyError>;

    /// Gradient of `log pi(action | state)` with respect to the parameters.
    fn score_grad(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
        action: &TurnAction,
    ) -> Result<ParamVec, PolicyError>;

    fn sample<R: Rng + ?Sized>(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
        rng: &mut R,
    ) -> Result<TurnAction, PolicyError> {
        let probs = self.probabilities(state, support)?;
        Ok(support[sample_index(&probs, rng)].clone())
    }
}

/// Policies whose parameters can be read and written coordinatewise.
pub trait Trainable: TurnPolicy + Clone {
    fn param(&self, key: &ParamKey) -> f64;
    fn set_param(&mut self, key: &ParamKey, value: f64);
    /// Coordinates with explicitly stored values.
    fn stored_params(&self) -> Vec<ParamKey>;

    /// `theta += lr * direction`, skipping exact zeros.
    fn apply_update(&mut self, direction: &ParamVec, lr: f64) {
        for (k, v) in direction.iter() {
            let delta = lr * v;
            if delta != 0.0 {
                let cur = self.param(k);
                self.set_param(k, cur + delta);
            }
        }
    }
}

/// Inverse-CDF draw. Falls back to the last index with positive mass when
/// rounding leaves the cumulative sum just below the uniform draw.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Softmax of `logits / temperature`, computed stably. `-inf` entries get
/// probability zero.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log sum exp(logits / temperature)`.
pub fn log_sum_exp(logits: &[f64], temperature: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|z| ((z - max) / temperature).exp()).sum();
    max / temperature + total.ln()
}

pub(crate) fn position(support: &[TurnAction], action: &TurnAction) -> Result<usize, PolicyError> {
    support
        .iter()
        .position(|a| a.canonical_key() == action.canonical_key())
        .ok_or_else(|| PolicyError::UnsupportedAction(action.canonical_key().to_string()))
}

/// The finite action set at `state`, ordered by canonical key.
pub fn action_support<E: TurnEnv + ?Sized>(env: &E, state: &InteractionState) -> Vec<TurnAction> {
    let mut support = env.actions(state);
    support.sort();
    support.dedup_by(|a, b| a.canonical_key() == b.canonical_key());
    support
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotRole {
    Reference,
    Old,
}

/// Frozen deep copy of a policy.
#[derive(Debug, Clone)]
pub struct PolicySnapshot<P> {
    role: SnapshotRole,
    policy: Arc<P>,
}

impl<P: Clone> PolicySnapshot<P> {
    pub fn take(policy: &P, role: SnapshotRole) -> Self {
        Self {
            role,
            policy: Arc::new(policy.clone()),
        }
    }

    pub fn role(&self) -> SnapshotRole {
        self.role
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }
}

impl<P> Deref for PolicySnapshot<P> {
    type Target = P;

    fn deref(&self) -> &P {
        &self.policy
    }
}

/// `KL(p || q)` for aligned finite distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}
