//! Turn-level rewards: strict equality, field-wise functional matching and a
//! pluggable judge.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionKind, TurnAction};
use crate::seed::content_hash;
use crate::state::InteractionState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifierError {
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("judge rule requires a judge client")]
    MissingJudge,
    #[error("invalid match rule: {0}")]
    InvalidRule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Strict,
    ToolFunctional,
    Judge,
}

fn default_iou() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRule {
    pub kind: MatchKind,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_endpoint: Option<String>,
}

impl Default for MatchRule {
    fn default() -> Self {
        Self::tool_functional(default_iou())
    }
}

impl MatchRule {
    pub fn strict() -> Self {
        Self {
            kind: MatchKind::Strict,
            iou_threshold: default_iou(),
            judge_endpoint: None,
        }
    }

    pub fn tool_functional(iou_threshold: f64) -> Self {
        Self {
            kind: MatchKind::ToolFunctional,
            iou_threshold,
            judge_endpoint: None,
        }
    }

    pub fn judge(endpoint: Option<String>) -> Self {
        Self {
            kind: MatchKind::Judge,
            iou_threshold: default_iou(),
            judge_endpoint: endpoint,
        }
    }

    pub fn validate(&self) -> Result<(), VerifierError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(VerifierError::InvalidRule(format!(
                "iou_threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }

    /// Stable identifier recorded in dataset headers.
    pub fn rule_id(&self) -> String {
        match self.kind {
            MatchKind::Strict => "strict".into(),
            MatchKind::ToolFunctional => format!("tool_functional@{}", self.iou_threshold),
            MatchKind::Judge => {
                format!("judge@{}", self.judge_endpoint.as_deref().unwrap_or("stub"))
            }
        }
    }
}

pub fn word_set(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Jaccard overlap `|A n B| / |A u B|`, with `iou({}, {}) = 1`.
pub fn iou(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// 1 iff the canonical keys agree.
pub fn r_strict(a: &TurnAction, a_star: &TurnAction) -> f64 {
    if a.canonical_key() == a_star.canonical_key() {
        1.0
    } else {
        0.0
    }
}

/// Field comparison: values with at least two words in the expert turn are
/// compared by IOU, single words by equality.
fn field_matches(value: &str, expert: &str, threshold: f64) -> bool {
    let expert_words = word_set(expert);
    if expert.split_whitespace().count() >= 2 {
        iou(&word_set(value), &expert_words) >= threshold
    } else {
        value == expert
    }
}

fn functional_match(a: &TurnAction, a_star: &TurnAction, threshold: f64) -> bool {
    if a.kind != a_star.kind {
        return false;
    }
    match a.kind {
        ActionKind::ToolCall => {
            a.tool_name == a_star.tool_name
                && a.args.keys().eq(a_star.args.keys())
                && a_star
                    .args
                    .iter()
                    .all(|(field, expert)| field_matches(&a.args[field], expert, threshold))
        }
        ActionKind::LanguageAct => field_matches(
            a.act_label.as_deref().unwrap_or(""),
            a_star.act_label.as_deref().unwrap_or(""),
            threshold,
        ),
        // every way of ending the episode is equivalent
        ActionKind::Terminate => true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub state_digest: String,
    pub candidate_action: String,
    pub expert_action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub accept: bool,
    pub rationale: String,
    #[serde(default)]
    pub latency_ms: u64,
}

pub trait JudgeClient: Send + Sync {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeVerdict, VerifierError>;
}

/// Deterministic rule-based judge: accepts when the two canonical keys share
/// at least `threshold` of their words and start with the same kind marker.
#[derive(Debug, Clone)]
pub struct StubJudge {
    pub threshold: f64,
}

impl Default for StubJudge {
    fn default() -> Self {
        Self { threshold: 0.6 }
    }
}

impl JudgeClient for StubJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeVerdict, VerifierError> {
        let head = |k: &str| k.split(' ').next().unwrap_or("").to_string();
        let overlap = iou(
            &word_set(&request.candidate_action),
            &word_set(&request.expert_action),
        );
        let accept = head(&request.candidate_action) == head(&request.expert_action)
            && overlap >= self.threshold;
        Ok(JudgeVerdict {
            accept,
            rationale: format!("word overlap {overlap:.3}"),
            latency_ms: 0,
        })
    }
}

/// Judge behind an external program speaking one JSON request line on stdin
/// and one JSON verdict line on stdout. A fresh process per attempt.
#[derive(Debug, Clone)]
pub struct SubprocessJudge {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
    pub retries: usize,
}

impl SubprocessJudge {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            timeout: Duration::from_secs(5),
            retries: 2,
        }
    }

    fn attempt(&self, line: &str) -> Result<JudgeVerdict, String> {
        let start = Instant::now();
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("spawn `{}`: {e}", self.program))?;
        let mut stdin = child.stdin.take().ok_or("no stdin")?;
        let stdout = child.stdout.take().ok_or("no stdout")?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut buf = String::new();
            let res = BufReader::new(stdout).read_line(&mut buf).map(|_| buf);
            let _ = tx.send(res);
        });
        let write = writeln!(stdin, "{line}").and_then(|_| stdin.flush());
        drop(stdin);
        let received = rx.recv_timeout(self.timeout);
        let _ = child.kill();
        let _ = child.wait();
        write.map_err(|e| format!("write request: {e}"))?;
        let reply = match received {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(format!("read verdict: {e}")),
            Err(_) => return Err(format!("no verdict within {:?}", self.timeout)),
        };
        let mut verdict: JudgeVerdict =
            serde_json::from_str(reply.trim()).map_err(|e| format!("malformed verdict: {e}"))?;
        verdict.latency_ms = start.elapsed().as_millis() as u64;
        Ok(verdict)
    }
}

impl JudgeClient for SubprocessJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeVerdict, VerifierError> {
        let line = serde_json::to_string(request)
            .map_err(|e| VerifierError::JudgeUnavailable(e.to_string()))?;
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.attempt(&line) {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(VerifierError::JudgeUnavailable(last))
    }
}

/// Short digest of a state for judge requests.
pub fn state_digest(state: &InteractionState) -> String {
    content_hash([state.key().as_bytes()])
}

/// Functional-matching reward, 0 or 1.
pub fn r_func(
    rule: &MatchRule,
    state: &InteractionState,
    a: &TurnAction,
    a_star: &TurnAction,
    judge: Option<&dyn JudgeClient>,
) -> Result<f64, VerifierError> {
    let hit = match rule.kind {
        MatchKind::Strict => return Ok(r_strict(a, a_star)),
        MatchKind::ToolFunctional => functional_match(a, a_star, rule.iou_threshold),
        MatchKind::Judge => {
            let judge = judge.ok_or(VerifierError::MissingJudge)?;
            judge
                .judge(&JudgeRequest {
                    state_digest: state_digest(state),
                    candidate_action: a.canonical_key().to_string(),
                    expert_action: a_star.canonical_key().to_string(),
                })?
                .accept
        }
    };
    Ok(if hit { 1.0 } else { 0.0 })
}

/// `Pr[strict = 0 | func = 1]`; `None` when no pair has `func = 1`.
pub fn miss_rate(pairs: &[(u8, u8)]) -> Option<f64> {
    let matched: Vec<_> = pairs.iter().filter(|(_, f)| *f == 1).collect();
    if matched.is_empty() {
        return None;
    }
    let missed = matched.iter().filter(|(s, _)| *s == 0).count();
    Some(missed as f64 / matched.len() as f64)
}
