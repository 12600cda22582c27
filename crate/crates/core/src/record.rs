//! Line-delimited trajectory records.
//!
//! One trajectory per line: a leading system turn naming the context, then
//! alternating assistant turns (content is the canonical key) and
//! observation turns (role `tool` after a tool call, `user` otherwise).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionKind, Observation, TurnAction};
use crate::state::{InteractionState, Step, Trajectory};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}, field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_args: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_error: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub id: String,
    pub context_id: String,
    pub turns: Vec<TurnRecord>,
    pub final_return: f64,
    pub accepted: bool,
}

const CONTEXT_PREFIX: &str = "context ";

pub fn to_record(traj: &Trajectory) -> TrajectoryRecord {
    let mut turns = vec![TurnRecord {
        role: Role::System,
        content: format!("{CONTEXT_PREFIX}{}", traj.context_id),
        tool_name: None,
        tool_args: None,
        is_error: None,
        reward: None,
    }];
    for step in &traj.steps {
        let is_call = step.action.kind == ActionKind::ToolCall;
        turns.push(TurnRecord {
            role: Role::Assistant,
            content: step.action.canonical_key().to_string(),
            tool_name: step.action.tool_name.clone(),
            tool_args: is_call.then(|| step.action.args.clone()),
            is_error: None,
            reward: Some(step.reward),
        });
        turns.push(TurnRecord {
            role: if is_call { Role::Tool } else { Role::User },
            content: step.observation.payload.clone(),
            tool_name: None,
            tool_args: None,
            is_error: Some(step.observation.is_error),
            reward: None,
        });
    }
    TrajectoryRecord {
        id: traj.id.clone(),
        context_id: traj.context_id.clone(),
        turns,
        final_return: traj.final_return,
        accepted: traj.accepted,
    }
}

/// Rebuilds the trajectory, replaying the transcript into states.
pub fn from_record(record: &TrajectoryRecord, line: usize) -> Result<Trajectory, RecordError> {
    let fail = |field: String, message: String| RecordError::Malformed {
        line,
        field,
        message,
    };
    let mut turns = record.turns.iter().enumerate();
    match turns.next() {
        Some((_, t))
            if t.role == Role::System
                && t.content.strip_prefix(CONTEXT_PREFIX) == Some(record.context_id.as_str()) => {}
        _ => {
            return Err(fail(
                "turns[0]".into(),
                format!(
                    "expected system turn `{CONTEXT_PREFIX}{}`",
                    record.context_id
                ),
            ))
        }
    }
    let mut state = InteractionState::initial(record.context_id.clone());
    let mut steps = Vec::new();
    while let Some((i, turn)) = turns.next() {
        if turn.role != Role::Assistant {
            return Err(fail(
                format!("turns[{i}].role"),
                format!("expected assistant, found {:?}", turn.role),
            ));
        }
        let action = TurnAction::parse_key(&turn.content)
            .map_err(|e| fail(format!("turns[{i}].content"), e.to_string()))?;
        if action.kind == ActionKind::ToolCall {
            let named = TurnAction::new(
                ActionKind::ToolCall,
                turn.tool_name.clone(),
                turn.tool_args.clone().unwrap_or_default(),
                None,
            );
            if named != action {
                return Err(fail(
                    format!("turns[{i}].tool_args"),
                    "tool_name/tool_args disagree with content".into(),
                ));
            }
        }
        let reward = turn.reward.unwrap_or(0.0);
        if !reward.is_finite() {
            return Err(fail(
                format!("turns[{i}].reward"),
                "non-finite reward".into(),
            ));
        }
        let (j, obs) = turns.next().ok_or_else(|| {
            fail(
                format!("turns[{}]", i + 1),
                "missing observation after assistant turn".into(),
            )
        })?;
        let expected = if action.kind == ActionKind::ToolCall {
            Role::Tool
        } else {
            Role::User
        };
        if obs.role != expected {
            return Err(fail(
                format!("turns[{j}].role"),
                format!("expected {expected:?}, found {:?}", obs.role),
            ));
        }
        let observation = Observation {
            payload: obs.content.clone(),
            is_error: obs.is_error.unwrap_or(false),
        };
        let next = state.successor(action.clone(), observation.clone(), false);
        steps.push(Step {
            state,
            action,
            observation,
            reward,
        });
        state = next;
    }
    Ok(Trajectory {
        id: record.id.clone(),
        context_id: record.context_id.clone(),
        steps,
        final_return: record.final_return,
        accepted: record.accepted,
    })
}

pub fn write_trajectories<W: Write>(
    out: &mut W,
    trajectories: &[Trajectory],
) -> Result<(), RecordError> {
    for traj in trajectories {
        let line = serde_json::to_string(&to_record(traj)).expect("records serialize");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Trajectory>, RecordError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| RecordError::Malformed {
                line: lineno,
                field: format!("column {}", e.column()),
                message: e.to_string(),
            })?;
        out.push(from_record(&record, lineno)?);
    }
    Ok(out)
}
