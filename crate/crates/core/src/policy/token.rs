use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::{
    log_sum_exp, sample_index, softmax, ParamKey, ParamVec, PolicyError, Trainable, TurnPolicy,
};
use crate::action::TurnAction;
use crate::seed::content_hash;
use crate::state::InteractionState;

pub const END_OF_TURN: &str = "<eot>";

/// A turn policy that emits one token at a time.
///
/// A turn is the token sequence of its canonical key followed by
/// [`END_OF_TURN`], and its probability is the product of the per-token
/// conditionals. Decoding is constrained to the state's action support: at
/// each prefix only tokens that continue some supported turn are eligible,
/// which keeps the turn distribution normalized over the support. Logits are
/// keyed by (hash of state key and emitted prefix, token) and lazily 0.
#[derive(Debug, Clone)]
pub struct TokenFactoredPolicy {
    vocab: Vec<String>,
    vocab_set: BTreeSet<String>,
    logits: BTreeMap<ParamKey, f64>,
    max_turn_tokens: usize,
    temperature: f64,
}

impl TokenFactoredPolicy {
    pub fn new(
        vocab: impl IntoIterator<Item = String>,
        max_turn_tokens: usize,
    ) -> Result<Self, PolicyError> {
        if max_turn_tokens == 0 {
            return Err(PolicyError::InvalidParameter(
                "max_turn_tokens must be positive".into(),
            ));
        }
        let mut vocab_set: BTreeSet<String> = vocab.into_iter().collect();
        vocab_set.insert(END_OF_TURN.to_string());
        Ok(Self {
            vocab: vocab_set.iter().cloned().collect(),
            vocab_set,
            logits: BTreeMap::new(),
            max_turn_tokens,
            temperature: 1.0,
        })
    }

    /// Vocabulary covering every token of the given turns.
    pub fn for_actions<'a>(
        actions: impl IntoIterator<Item = &'a TurnAction>,
        max_turn_tokens: usize,
    ) -> Result<Self, PolicyError> {
        let vocab: BTreeSet<String> = actions.into_iter().flat_map(|a| a.tokens()).collect();
        Self::new(vocab, max_turn_tokens)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn max_turn_tokens(&self) -> usize {
        self.max_turn_tokens
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
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

    pub fn logits(&self) -> &BTreeMap<ParamKey, f64> {
        &self.logits
    }

    pub fn conditioning_key(scope: &str, prefix: &[String]) -> String {
        let mut fields: Vec<&[u8]> = vec![scope.as_bytes()];
        fields.extend(prefix.iter().map(|t| t.as_bytes()));
        content_hash(fields)
    }

    pub fn set_token_logit(&mut self, scope: &str, prefix: &[String], token: &str, value: f64) {
        self.logits.insert(
            ParamKey::new(Self::conditioning_key(scope, prefix), token),
            value,
        );
    }

    /// Token sequence of a turn, terminated by the end-of-turn token.
    pub fn encode(&self, action: &TurnAction) -> Result<Vec<String>, PolicyError> {
        let mut seq = action.tokens();
        seq.push(END_OF_TURN.to_string());
        self.check_sequence(&seq)
            .map_err(|_| PolicyError::UnsupportedAction(action.canonical_key().to_string()))?;
        Ok(seq)
    }

    fn check_sequence(&self, seq: &[String]) -> Result<(), PolicyError> {
        let bad = || PolicyError::UnsupportedAction(seq.join(" "));
        if seq.is_empty() || seq.len() > self.max_turn_tokens {
            return Err(bad());
        }
        let (last, body) = seq.split_last().unwrap();
        if last != END_OF_TURN || body.iter().any(|t| t == END_OF_TURN) {
            return Err(bad());
        }
        if seq.iter().any(|t| !self.vocab_set.contains(t)) {
            return Err(bad());
        }
        Ok(())
    }

    fn allowed_next(seqs: &[Vec<String>], prefix: &[String]) -> Vec<String> {
        let next: BTreeSet<&String> = seqs
            .iter()
            .filter(|s| s.len() > prefix.len() && s[..prefix.len()] == *prefix)
            .map(|s| &s[prefix.len()])
            .collect();
        next.into_iter().cloned().collect()
    }

    fn logit(&self, ck: &str, token: &str) -> f64 {
        if self.logits.is_empty() {
            return 0.0;
        }
        self.logits
            .get(&ParamKey::new(ck, token))
            .copied()
            .unwrap_or(0.0)
    }

    /// Eligible next tokens after `prefix` and their probabilities.
    pub fn token_distribution(
        &self,
        scope: &str,
        seqs: &[Vec<String>],
        prefix: &[String],
    ) -> Result<(Vec<String>, Vec<f64>), PolicyError> {
        let allowed = Self::allowed_next(seqs, prefix);
        if allowed.is_empty() {
            return Err(PolicyError::EmptySupport);
        }
        let ck = Self::conditioning_key(scope, prefix);
        let z: Vec<f64> = allowed.iter().map(|t| self.logit(&ck, t)).collect();
        Ok((allowed, softmax(&z, self.temperature)))
    }

    /// `log pi(token | scope, prefix)` under constrained decoding.
    pub fn token_log_prob(
        &self,
        scope: &str,
        seqs: &[Vec<String>],
        prefix: &[String],
        token: &str,
    ) -> Result<f64, PolicyError> {
        let allowed = Self::allowed_next(seqs, prefix);
        let idx = allowed
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| PolicyError::UnsupportedAction(token.to_string()))?;
        let ck = Self::conditioning_key(scope, prefix);
        let z: Vec<f64> = allowed.iter().map(|t| self.logit(&ck, t)).collect();
        Ok(z[idx] / self.temperature - log_sum_exp(&z, self.temperature))
    }

    /// Score of a single token: `(1[x = token] - pi(x)) / T` on the logits
    /// of the eligible tokens at this prefix.
    pub fn token_score_grad(
        &self,
        scope: &str,
        seqs: &[Vec<String>],
        prefix: &[String],
        token: &str,
    ) -> Result<ParamVec, PolicyError> {
        let (allowed, probs) = self.token_distribution(scope, seqs, prefix)?;
        if !allowed.iter().any(|t| t == token) {
            return Err(PolicyError::UnsupportedAction(token.to_string()));
        }
        let ck = Self::conditioning_key(scope, prefix);
        let mut grad = ParamVec::new();
        for (t, p) in allowed.iter().zip(&probs) {
            let indicator = if t == token { 1.0 } else { 0.0 };
            let g = (indicator - p) / self.temperature;
            if g != 0.0 {
                grad.add(ParamKey::new(ck.clone(), t.clone()), g);
            }
        }
        Ok(grad)
    }

    fn check_member(seqs: &[Vec<String>], seq: &[String]) -> Result<(), PolicyError> {
        if seqs.iter().any(|s| s == seq) {
            Ok(())
        } else {
            Err(PolicyError::UnsupportedAction(seq.join(" ")))
        }
    }

    /// Turn log-probability: the sum of per-token log-probabilities.
    pub fn sequence_log_prob(
        &self,
        scope: &str,
        seqs: &[Vec<String>],
        seq: &[String],
    ) -> Result<f64, PolicyError> {
        self.check_sequence(seq)?;
        Self::check_member(seqs, seq)?;
        let mut total = 0.0;
        for k in 0..seq.len() {
            total += self.token_log_prob(scope, seqs, &seq[..k], &seq[k])?;
        }
        Ok(total)
    }

    /// Turn score gradient, accumulated position by position in one pass.
    pub fn sequence_score_grad(
        &self,
        scope: &str,
        seqs: &[Vec<String>],
        seq: &[String],
    ) -> Result<ParamVec, PolicyError> {
        self.check_sequence(seq)?;
        Self::check_member(seqs, seq)?;
        let mut grad = ParamVec::new();
        for k in 0..seq.len() {
            let prefix = &seq[..k];
            let (allowed, probs) = self.token_distribution(scope, seqs, prefix)?;
            let ck = Self::conditioning_key(scope, prefix);
            for (t, p) in allowed.iter().zip(&probs) {
                let indicator = if *t == seq[k] { 1.0 } else { 0.0 };
                let g = (indicator - p) / self.temperature;
                if g != 0.0 {
                    grad.add(ParamKey::new(ck.clone(), t.clone()), g);
                }
            }
        }
        Ok(grad)
    }

    /// Samples tokens until end-of-turn; returns the emitted sequence.
    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        scope: &str,
        seqs: &[Vec<String>],
        rng: &mut R,
    ) -> Result<Vec<String>, PolicyError> {
        let mut prefix: Vec<String> = Vec::new();
        loop {
            let (allowed, probs) = self.token_distribution(scope, seqs, &prefix)?;
            let token = allowed[sample_index(&probs, rng)].clone();
            let done = token == END_OF_TURN;
            prefix.push(token);
            if done || prefix.len() >= self.max_turn_tokens {
                return Ok(prefix);
            }
        }
    }

    fn encode_support(&self, support: &[TurnAction]) -> Result<Vec<Vec<String>>, PolicyError> {
        if support.is_empty() {
            return Err(PolicyError::EmptySupport);
        }
        support.iter().map(|a| self.encode(a)).collect()
    }

    /// Sets logits at `scope` so that the turn distribution over `seqs`
    /// equals `probs`: each token logit is the log of the probability mass
    /// of the turns continuing through it.
    pub fn fit_distribution(&mut self, scope: &str, seqs: &[Vec<String>], probs: &[f64]) {
        let mut mass: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        for (seq, p) in seqs.iter().zip(probs) {
            for k in 1..=seq.len() {
                *mass.entry(seq[..k].to_vec()).or_insert(0.0) += p;
            }
        }
        for (path, m) in &mass {
            let (token, prefix) = path.split_last().unwrap();
            let parent_mass = if prefix.is_empty() { 1.0 } else { mass[prefix] };
            if parent_mass > 0.0 {
                self.set_token_logit(scope, prefix, token, m.ln());
            }
        }
    }
}

impl TurnPolicy for TokenFactoredPolicy {
    fn probabilities(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
    ) -> Result<Vec<f64>, PolicyError> {
        let seqs = self.encode_support(support)?;
        seqs.iter()
            .map(|s| self.sequence_log_prob(state.key(), &seqs, s).map(f64::exp))
            .collect()
    }

    fn log_prob(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
        action: &TurnAction,
    ) -> Result<f64, PolicyError> {
        let seqs = self.encode_support(support)?;
        let seq = self.encode(action)?;
        self.sequence_log_prob(state.key(), &seqs, &seq)
    }

    fn score_grad(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
        action: &TurnAction,
    ) -> Result<ParamVec, PolicyError> {
        let seqs = self.encode_support(support)?;
        let seq = self.encode(action)?;
        self.sequence_score_grad(state.key(), &seqs, &seq)
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        state: &InteractionState,
        support: &[TurnAction],
        rng: &mut R,
    ) -> Result<TurnAction, PolicyError> {
        let seqs = self.encode_support(support)?;
        let seq = self.sample_sequence(state.key(), &seqs, rng)?;
        let idx = seqs
            .iter()
            .position(|s| *s == seq)
            .ok_or_else(|| PolicyError::UnsupportedAction(seq.join(" ")))?;
        Ok(support[idx].clone())
    }
}

impl Trainable for TokenFactoredPolicy {
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
    use crate::policy::TabularSoftmaxPolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn support() -> Vec<TurnAction> {
        let mut v = vec![
            TurnAction::tool_call("search", [("q", "open tickets")]),
            TurnAction::tool_call("search", [("q", "closed tickets")]),
            TurnAction::language_act("please confirm"),
            TurnAction::terminate("done"),
        ];
        v.sort();
        v
    }

    #[test]
    fn one_token_turn_is_one_token_log_prob() {
        let seqs = vec![
            vec![END_OF_TURN.to_string()],
            vec!["a".to_string(), END_OF_TURN.to_string()],
        ];
        let mut p = TokenFactoredPolicy::new(["a".to_string()], 4).unwrap();
        p.set_token_logit("s", &[], END_OF_TURN, 0.7);
        let whole = p.sequence_log_prob("s", &seqs, &seqs[0]).unwrap();
        let token = p.token_log_prob("s", &seqs, &[], END_OF_TURN).unwrap();
        assert_eq!(whole, token);
    }

    #[test]
    fn distribution_over_support_is_normalized() {
        let s = InteractionState::initial("c");
        let sup = support();
        let mut p = TokenFactoredPolicy::for_actions(&sup, 8).unwrap();
        let seqs: Vec<_> = sup.iter().map(|a| p.encode(a).unwrap()).collect();
        p.set_token_logit(s.key(), &[], "call", 1.3);
        p.set_token_logit(s.key(), &seqs[0][..3], &seqs[0][3], -0.4);
        let total: f64 = p.probabilities(&s, &sup).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_turns_end_with_eot_and_lie_in_support() {
        let s = InteractionState::initial("c");
        let sup = support();
        let p = TokenFactoredPolicy::for_actions(&sup, 8).unwrap();
        let seqs: Vec<_> = sup.iter().map(|a| p.encode(a).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let seq = p.sample_sequence(s.key(), &seqs, &mut rng).unwrap();
            assert_eq!(seq.last().unwrap(), END_OF_TURN);
            assert!(seqs.contains(&seq));
        }
    }

    #[test]
    fn too_long_or_unknown_turns_are_unsupported() {
        let sup = support();
        let p = TokenFactoredPolicy::for_actions(&sup, 3).unwrap();
        assert!(p.encode(&sup[0]).is_err());
        let q = TokenFactoredPolicy::for_actions(&sup[..1], 8).unwrap();
        assert!(q.encode(&TurnAction::terminate("bye")).is_err());
    }

    #[test]
    fn fitted_token_policy_matches_tabular() {
        let s = InteractionState::initial("c");
        let sup = support();
        let mut tab = TabularSoftmaxPolicy::uniform();
        for (i, a) in sup.iter().enumerate() {
            tab.set_logit(&s, a, 0.3 * i as f64 - 0.5);
        }
        let probs = tab.probabilities(&s, &sup).unwrap();
        let mut tok = TokenFactoredPolicy::for_actions(&sup, 8).unwrap();
        let seqs: Vec<_> = sup.iter().map(|a| tok.encode(a).unwrap()).collect();
        tok.fit_distribution(s.key(), &seqs, &probs);
        for a in &sup {
            let lt = tab.log_prob(&s, &sup, a).unwrap();
            let lk = tok.log_prob(&s, &sup, a).unwrap();
            assert!((lt - lk).abs() < 1e-10, "{lt} vs {lk}");
        }
    }
}
