//! Line-delimited policy checkpoints: one header record, then one record per
//! stored parameter or prior entry.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActionPrior, ParamKey, TabularSoftmaxPolicy, TokenFactoredPolicy, Trainable};
use crate::seed::content_hash;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint has no header record")]
    MissingHeader,
    #[error("vocabulary hash mismatch: header {expected}, recomputed {actual}")]
    VocabMismatch { expected: String, actual: String },
    #[error("non-finite value {value} at `{key}` cannot be stored")]
    NonFinite { key: String, value: f64 },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    TabularSoftmax,
    TokenFactored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: PolicyKind,
    pub temperature: f64,
    pub vocab_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_turn_tokens: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header(CheckpointHeader),
    Param {
        scope: String,
        item: String,
        value: f64,
    },
    Prior {
        context_id: String,
        depth: usize,
        action_key: String,
        value: f64,
    },
}

#[derive(Debug, Clone)]
pub enum Checkpoint {
    Tabular(TabularSoftmaxPolicy),
    Token(TokenFactoredPolicy),
}

fn vocab_hash(vocab: &[String]) -> String {
    content_hash(vocab.iter().map(|t| t.as_bytes()))
}

fn finite(key: impl FnOnce() -> String, value: f64) -> Result<f64, CheckpointError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CheckpointError::NonFinite { key: key(), value })
    }
}

fn write_record<W: Write>(out: &mut W, record: &Record) -> Result<(), CheckpointError> {
    let line =
        serde_json::to_string(record).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    writeln!(out, "{line}")?;
    Ok(())
}

fn write_params<W: Write, P: Trainable>(out: &mut W, policy: &P) -> Result<(), CheckpointError> {
    for key in policy.stored_params() {
        let value = finite(|| format!("{}/{}", key.scope, key.item), policy.param(&key))?;
        write_record(
            out,
            &Record::Param {
                scope: key.scope,
                item: key.item,
                value,
            },
        )?;
    }
    Ok(())
}

/// Writes a checkpoint. Records are emitted in parameter order, so equal
/// policies produce byte-identical files.
pub fn save_checkpoint<W: Write>(
    out: &mut W,
    checkpoint: &Checkpoint,
) -> Result<(), CheckpointError> {
    match checkpoint {
        Checkpoint::Tabular(p) => {
            write_record(
                out,
                &Record::Header(CheckpointHeader {
                    kind: PolicyKind::TabularSoftmax,
                    temperature: p.temperature(),
                    vocab_hash: vocab_hash(&[]),
                    vocab: None,
                    max_turn_tokens: None,
                }),
            )?;
            write_params(out, p)?;
            if let Some(prior) = p.prior() {
                for (k, v) in prior.iter() {
                    let value = finite(
                        || format!("prior {}/{}/{}", k.context_id, k.depth, k.action_key),
                        *v,
                    )?;
                    write_record(
                        out,
                        &Record::Prior {
                            context_id: k.context_id.clone(),
                            depth: k.depth,
                            action_key: k.action_key.clone(),
                            value,
                        },
                    )?;
                }
            }
        }
        Checkpoint::Token(p) => {
            write_record(
                out,
                &Record::Header(CheckpointHeader {
                    kind: PolicyKind::TokenFactored,
                    temperature: p.temperature(),
                    vocab_hash: vocab_hash(p.vocab()),
                    vocab: Some(p.vocab().to_vec()),
                    max_turn_tokens: Some(p.max_turn_tokens()),
                }),
            )?;
            write_params(out, p)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint, CheckpointError> {
    let mut header: Option<CheckpointHeader> = None;
    let mut params: Vec<(ParamKey, f64)> = Vec::new();
    let mut prior = ActionPrior::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CheckpointError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        match record {
            Record::Header(h) => {
                if header.is_some() {
                    return Err(CheckpointError::Parse {
                        line: lineno,
                        message: "duplicate header".into(),
                    });
                }
                header = Some(h);
            }
            _ if header.is_none() => return Err(CheckpointError::MissingHeader),
            Record::Param { scope, item, value } => {
                params.push((ParamKey::new(scope, item), value))
            }
            Record::Prior {
                context_id,
                depth,
                action_key,
                value,
            } => prior.set(&context_id, depth, &action_key, value),
        }
    }
    let header = header.ok_or(CheckpointError::MissingHeader)?;
    let invalid = |e: super::PolicyError| CheckpointError::Invalid(e.to_string());
    match header.kind {
        PolicyKind::TabularSoftmax => {
            let actual = vocab_hash(&[]);
            if header.vocab_hash != actual {
                return Err(CheckpointError::VocabMismatch {
                    expected: header.vocab_hash,
                    actual,
                });
            }
            let base = if prior.is_empty() {
                TabularSoftmaxPolicy::uniform()
            } else {
                TabularSoftmaxPolicy::with_prior(prior)
            };
            let mut policy = base.with_temperature(header.temperature).map_err(invalid)?;
            for (k, v) in &params {
                policy.set_param(k, *v);
            }
            Ok(Checkpoint::Tabular(policy))
        }
        PolicyKind::TokenFactored => {
            let vocab = header.vocab.ok_or_else(|| {
                CheckpointError::Invalid("token policy header lacks a vocabulary".into())
            })?;
            let max_turn_tokens = header.max_turn_tokens.ok_or_else(|| {
                CheckpointError::Invalid("token policy header lacks max_turn_tokens".into())
            })?;
            let mut policy = TokenFactoredPolicy::new(vocab, max_turn_tokens)
                .and_then(|p| p.with_temperature(header.temperature))
                .map_err(invalid)?;
            let actual = vocab_hash(policy.vocab());
            if header.vocab_hash != actual {
                return Err(CheckpointError::VocabMismatch {
                    expected: header.vocab_hash,
                    actual,
                });
            }
            for (k, v) in &params {
                policy.set_param(k, *v);
            }
            Ok(Checkpoint::Token(policy))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::TurnAction;
    use crate::policy::TurnPolicy;
    use crate::state::InteractionState;

    fn support() -> Vec<TurnAction> {
        let mut v = vec![
            TurnAction::tool_call("lookup", [("id", "a7")]),
            TurnAction::language_act("checking now"),
            TurnAction::terminate("done"),
        ];
        v.sort();
        v
    }

    #[test]
    fn tabular_round_trip_reproduces_log_probs() {
        let s = InteractionState::initial("c");
        let sup = support();
        let mut prior = ActionPrior::new();
        prior.set("c", 0, sup[1].canonical_key(), 0.123456789);
        let mut p = TabularSoftmaxPolicy::with_prior(prior)
            .with_temperature(0.7)
            .unwrap();
        p.set_logit(&s, &sup[0], 1.0 / 3.0);
        p.set_logit(&s, &sup[2], -std::f64::consts::E);
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &Checkpoint::Tabular(p.clone())).unwrap();
        let Checkpoint::Tabular(q) = load_checkpoint(buf.as_slice()).unwrap() else {
            panic!("wrong kind");
        };
        for a in &sup {
            assert_eq!(
                p.log_prob(&s, &sup, a).unwrap(),
                q.log_prob(&s, &sup, a).unwrap()
            );
        }
        let mut again = Vec::new();
        save_checkpoint(&mut again, &Checkpoint::Tabular(q)).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn token_round_trip_and_vocab_check() {
        let s = InteractionState::initial("c");
        let sup = support();
        let mut p = TokenFactoredPolicy::for_actions(&sup, 6).unwrap();
        p.set_token_logit(s.key(), &[], "say", 0.3);
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &Checkpoint::Token(p.clone())).unwrap();
        let Checkpoint::Token(q) = load_checkpoint(buf.as_slice()).unwrap() else {
            panic!("wrong kind");
        };
        for a in &sup {
            assert_eq!(
                p.log_prob(&s, &sup, a).unwrap(),
                q.log_prob(&s, &sup, a).unwrap()
            );
        }
        let text = String::from_utf8(buf).unwrap();
        let tampered = text.replacen("\"lookup\"", "\"lookups\"", 1);
        assert!(matches!(
            load_checkpoint(tampered.as_bytes()),
            Err(CheckpointError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn headerless_and_non_finite_are_rejected() {
        let line = r#"{"record":"param","scope":"s","item":"a","value":1.0}"#;
        assert!(matches!(
            load_checkpoint(line.as_bytes()),
            Err(CheckpointError::MissingHeader)
        ));
        let mut p = TabularSoftmaxPolicy::uniform();
        p.set_param(&ParamKey::new("s", "a"), f64::NEG_INFINITY);
        let mut buf = Vec::new();
        assert!(matches!(
            save_checkpoint(&mut buf, &Checkpoint::Tabular(p)),
            Err(CheckpointError::NonFinite { .. })
        ));
    }
}
