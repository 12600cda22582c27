use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    log_sum_exp, position, softmax, ParamKey, ParamVec, PolicyError, Trainable, TurnPolicy,
};
use crate::action::TurnAction;
use crate::state::InteractionState;

/// Key of a fixed base logit: shared by every state of a context at the
/// same depth.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PriorKey {
    pub context_id: String,
    pub depth: usize,
    pub action_key: String,
}

/// Frozen base logits added under the trainable per-state logits. Plays the
/// role of a pretrained model's habits; missing entries are 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionPrior {
    entries: BTreeMap<PriorKey, f64>,
}

impl ActionPrior {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, context_id: &str, depth: usize, action_key: &str, logit: f64) {
        self.entries.insert(
            PriorKey {
                context_id: context_id.to_string(),
                depth,
                action_key: action_key.to_string(),
            },
            logit,
        );
    }

    pub fn get(&self, context_id: &str, depth: usize, action_key: &str) -> f64 {
        // Avoid allocating a key on the hot path when the prior is empty.
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries
            .get(&PriorKey {
                context_id: context_id.to_string(),
                depth,
                action_key: action_key.to_string(),
            })
            .copied()
            .unwrap_or(0.0)
    }

    pub fn merge(&mut self, other: &ActionPrior) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), *v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PriorKey, &f64)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Softmax over per-state logits keyed by (state key, action key).
///
/// Unvisited logits are lazily 0, so a fresh policy is uniform over every
/// support. An optional [`ActionPrior`] shifts the logits without being a
/// trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmaxPolicy {
    temperature: f64,
    logits: BTreeMap<ParamKey, f64>,
    prior: Option<Arc<ActionPrior>>,
}

impl Default for TabularSoftmaxPolicy {
    fn default() -> Self {
        Self::uniform()
    }
}

impl TabularSoftmaxPolicy {
    pub fn uniform() -> Self {
        Self {
            temperature: 1.0,
            logits: BTreeMap::new(),
            prior: None,
        }
    }

    pub fn with_prior(prior: ActionPrior) -> Self {
        Self {
            prior: Some(Arc::new(prior)),
            ..Self::uniform()
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self, PolicyError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PolicyError::InvalidParameter(format!(
                "temperature {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn prior(&self) -> Option<&ActionPrior> {
        self.prior.as_deref()
    }

    pub fn logits(&self) -> &BTreeMap<ParamKey, f64> {
        &self.logits
    }

    pub fn set_logit(&mut self, state: &InteractionState, action: &TurnAction, value: f64) {
        self.logits
            .insert(ParamKey::new(state.key(), action.canonical_key()), value);
    }

    fn effective_logits(&self, state: &InteractionState, support: &[TurnAction]) -> Vec<f64> {
        support
            .iter()
            .map(|a| {
                let base = self
                    .prior
                    .as_ref()
                    .map(|p| p.get(&state.context_id, state.depth, a.canonical_key()))
                    .unwrap_or(0.0);
                let own = if self.logits.is_empty() {
                    0.0
                } else {
                    self.logits
                        .get(&ParamKey::new(state.key(), a.canonical_key()))
                        .copied()
                        .unwrap_or(0.0)
                };
                base + own
            })
            .collect()
    }
}

impl TurnPolicy for TabularSoftmaxPolicy {
    fn probabilities(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
    ) -> Result<Vec<f64>, PolicyError> {
        if support.is_empty() {
            return Err(PolicyError::EmptySupport);
        }
        Ok(softmax(
            &self.effective_logits(state, support),
            self.temperature,
        ))
    }

    fn log_prob(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
        action: &TurnAction,
    ) -> Result<f64, PolicyError> {
        let idx = position(support, action)?;
        let z = self.effective_logits(state, support);
        Ok(z[idx] / self.temperature - log_sum_exp(&z, self.temperature))
    }

    fn score_grad(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
        action: &TurnAction,
    ) -> Result<ParamVec, PolicyError> {
        let idx = position(support, action)?;
        let probs = self.probabilities(state, support)?;
        let mut grad = ParamVec::new();
        // d log pi(a) / d z_b = (1[a = b] - pi(b)) / T
        for (b, (act, p)) in support.iter().zip(&probs).enumerate() {
            let indicator = if b == idx { 1.0 } else { 0.0 };
            let g = (indicator - p) / self.temperature;
            if g != 0.0 {
                grad.add(ParamKey::new(state.key(), act.canonical_key()), g);
            }
        }
        Ok(grad)
    }
}

impl Trainable for TabularSoftmaxPolicy {
    fn param(&self, key: &ParamKey) -> f64 {
        self.logits.get(key).copied().unwrap_or(0.0)
    }

    fn set_param(&mut self, key: &ParamKey, value: f64) {
        self.logits.insert(key.clone(), value);
    }

    fn stored_params(&self) -> Vec<ParamKey> {
        self.logits.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Observation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn actions(n: usize) -> Vec<TurnAction> {
        let mut v: Vec<_> = (0..n)
            .map(|i| TurnAction::language_act(&format!("option {i}")))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn uniform_log_prob() {
        let s = InteractionState::initial("c");
        let support = actions(4);
        let p = TabularSoftmaxPolicy::uniform();
        let lp = p.log_prob(&s, &support, &support[2]).unwrap();
        assert!((lp - (0.25f64).ln()).abs() < 1e-15);
        let single = actions(1);
        assert_eq!(p.log_prob(&s, &single, &single[0]).unwrap(), 0.0);
    }

    #[test]
    fn softmax_score_example() {
        let s = InteractionState::initial("c");
        let support = actions(2);
        let p = TabularSoftmaxPolicy::uniform();
        let g = p.score_grad(&s, &support, &support[0]).unwrap();
        assert_eq!(
            g.get(&ParamKey::new(s.key(), support[0].canonical_key())),
            0.5
        );
        assert_eq!(
            g.get(&ParamKey::new(s.key(), support[1].canonical_key())),
            -0.5
        );
        let single = actions(1);
        assert!(p.score_grad(&s, &single, &single[0]).unwrap().is_zero());
    }

    #[test]
    fn unsupported_action_is_rejected() {
        let s = InteractionState::initial("c");
        let support = actions(2);
        let other = TurnAction::terminate("x");
        assert!(matches!(
            TabularSoftmaxPolicy::uniform().log_prob(&s, &support, &other),
            Err(PolicyError::UnsupportedAction(_))
        ));
    }

    #[test]
    fn saturated_logit_dominates_sampling() {
        let s = InteractionState::initial("c");
        let support = actions(3);
        let mut p = TabularSoftmaxPolicy::uniform();
        p.set_logit(&s, &support[1], 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..10_000)
            .filter(|_| p.sample(&s, &support, &mut rng).unwrap() == support[1])
            .count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn two_way_uniform_frequency() {
        let s = InteractionState::initial("c");
        let support = actions(2);
        let p = TabularSoftmaxPolicy::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hits = (0..10_000)
            .filter(|_| p.sample(&s, &support, &mut rng).unwrap() == support[0])
            .count();
        assert!((hits as f64 / 10_000.0 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn prior_shifts_depth_level_logits() {
        let s = InteractionState::initial("c");
        let support = actions(2);
        let mut prior = ActionPrior::new();
        prior.set("c", 0, support[0].canonical_key(), 2f64.ln());
        let p = TabularSoftmaxPolicy::with_prior(prior);
        let probs = p.probabilities(&s, &support).unwrap();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-15);
        // a different state at another depth is unaffected
        let s1 = s.successor(support[0].clone(), Observation::ok("k"), false);
        assert_eq!(p.probabilities(&s1, &support).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn temperature_scales_score() {
        let s = InteractionState::initial("c");
        let support = actions(2);
        let p = TabularSoftmaxPolicy::uniform()
            .with_temperature(2.0)
            .unwrap();
        let g = p.score_grad(&s, &support, &support[0]).unwrap();
        assert_eq!(
            g.get(&ParamKey::new(s.key(), support[0].canonical_key())),
            0.25
        );
        assert!(TabularSoftmaxPolicy::uniform()
            .with_temperature(0.0)
            .is_err());
    }
}
