//! Tool contexts, turn actions and their canonical keys.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool `{tool}` has no argument field `{field}`")]
    UnknownField { tool: String, field: String },
    #[error("tool call without a tool name")]
    MissingToolName,
    #[error("invalid tool context: {0}")]
    InvalidContext(String),
    #[error("malformed canonical key `{0}`")]
    MalformedKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    SingleWord,
    MultiWord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgField {
    pub name: String,
    pub kind: FieldKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub arg_fields: Vec<ArgField>,
    #[serde(default)]
    pub description: String,
}

impl ToolSpec {
    pub fn field(&self, name: &str) -> Option<&ArgField> {
        self.arg_fields.iter().find(|f| f.name == name)
    }
}

/// Everything an episode is conditioned on: available tools, horizon and
/// discount.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolContext {
    pub id: String,
    pub tools: Vec<ToolSpec>,
    pub horizon_max: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_discount() -> f64 {
    1.0
}

impl ToolContext {
    pub fn new(
        id: impl Into<String>,
        tools: Vec<ToolSpec>,
        horizon_max: usize,
    ) -> Result<Self, ActionError> {
        let ctx = Self {
            id: id.into(),
            tools,
            horizon_max,
            discount: 1.0,
            seed: 0,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        if self.horizon_max < 1 {
            return Err(ActionError::InvalidContext(
                "horizon_max must be at least 1".into(),
            ));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(ActionError::InvalidContext(format!(
                "discount {} outside (0, 1]",
                self.discount
            )));
        }
        let mut names = BTreeSet::new();
        for tool in &self.tools {
            if !names.insert(tool.name.as_str()) {
                return Err(ActionError::InvalidContext(format!(
                    "duplicate tool `{}`",
                    tool.name
                )));
            }
            let mut fields = BTreeSet::new();
            for f in &tool.arg_fields {
                if !fields.insert(f.name.as_str()) {
                    return Err(ActionError::InvalidContext(format!(
                        "duplicate field `{}` in tool `{}`",
                        f.name, tool.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn tool(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }

    /// Checks a turn against the tool schemas of this context.
    pub fn validate_action(&self, action: &TurnAction) -> Result<(), ActionError> {
        if action.kind != ActionKind::ToolCall {
            return Ok(());
        }
        let name = action
            .tool_name
            .as_deref()
            .ok_or(ActionError::MissingToolName)?;
        let spec = self
            .tool(name)
            .ok_or_else(|| ActionError::UnknownTool(name.to_string()))?;
        for field in action.args.keys() {
            if spec.field(field).is_none() {
                return Err(ActionError::UnknownField {
                    tool: name.to_string(),
                    field: field.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ToolCall,
    LanguageAct,
    Terminate,
}

/// One complete assistant turn.
///
/// Content is normalized on construction (names lose inner whitespace,
/// values have whitespace collapsed, multi-word values are lowercased), so
/// two actions are equal exactly when their canonical keys are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "TurnActionRepr", into = "TurnActionRepr")]
pub struct TurnAction {
    pub kind: ActionKind,
    pub tool_name: Option<String>,
    pub args: BTreeMap<String, String>,
    pub act_label: Option<String>,
    canonical_key: String,
}

#[derive(Serialize, Deserialize)]
struct TurnActionRepr {
    kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_name: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    args: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_label: Option<String>,
}

impl From<TurnActionRepr> for TurnAction {
    fn from(r: TurnActionRepr) -> Self {
        TurnAction::new(r.kind, r.tool_name, r.args, r.act_label)
    }
}

impl From<TurnAction> for TurnActionRepr {
    fn from(a: TurnAction) -> Self {
        TurnActionRepr {
            kind: a.kind,
            tool_name: a.tool_name,
            args: a.args,
            act_label: a.act_label,
        }
    }
}

pub(crate) fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join("_")
}

pub(crate) fn normalize_value(value: &str) -> String {
    let words: Vec<&str> = value.split_whitespace().collect();
    let joined = words.join(" ");
    if words.len() >= 2 {
        joined.to_lowercase()
    } else {
        joined
    }
}

fn push_escaped_words(key: &mut String, text: &str) {
    for word in text.split(' ').filter(|w| !w.is_empty()) {
        key.push(' ');
        if word.starts_with('@') || word.starts_with('\\') {
            key.push('\\');
        }
        key.push_str(word);
    }
}

impl TurnAction {
    pub fn new(
        kind: ActionKind,
        tool_name: Option<String>,
        args: BTreeMap<String, String>,
        act_label: Option<String>,
    ) -> Self {
        let (tool_name, args, act_label) = match kind {
            ActionKind::ToolCall => (
                tool_name
                    .map(|n| normalize_name(&n))
                    .filter(|n| !n.is_empty()),
                args.into_iter()
                    .map(|(k, v)| (normalize_name(&k), normalize_value(&v)))
                    .collect(),
                None,
            ),
            ActionKind::LanguageAct | ActionKind::Terminate => (
                None,
                BTreeMap::new(),
                act_label
                    .map(|l| normalize_value(&l))
                    .filter(|l| !l.is_empty()),
            ),
        };
        let mut action = Self {
            kind,
            tool_name,
            args,
            act_label,
            canonical_key: String::new(),
        };
        action.canonical_key = action.compute_key();
        action
    }

    pub fn tool_call<K, V>(tool: &str, args: impl IntoIterator<Item = (K, V)>) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self::new(
            ActionKind::ToolCall,
            Some(tool.to_string()),
            args.into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            None,
        )
    }

    pub fn language_act(label: &str) -> Self {
        Self::new(
            ActionKind::LanguageAct,
            None,
            BTreeMap::new(),
            Some(label.to_string()),
        )
    }

    pub fn terminate(label: &str) -> Self {
        Self::new(
            ActionKind::Terminate,
            None,
            BTreeMap::new(),
            Some(label.to_string()),
        )
    }

    // call <tool> @field value words... / say <label> / end <label>
    fn compute_key(&self) -> String {
        let mut key = String::new();
        match self.kind {
            ActionKind::ToolCall => {
                key.push_str("call ");
                key.push_str(self.tool_name.as_deref().unwrap_or(""));
                for (field, value) in &self.args {
                    key.push_str(" @");
                    key.push_str(field);
                    push_escaped_words(&mut key, value);
                }
            }
            ActionKind::LanguageAct => {
                key.push_str("say");
                push_escaped_words(&mut key, self.act_label.as_deref().unwrap_or(""));
            }
            ActionKind::Terminate => {
                key.push_str("end");
                push_escaped_words(&mut key, self.act_label.as_deref().unwrap_or(""));
            }
        }
        key
    }

    pub fn canonical_key(&self) -> &str {
        &self.canonical_key
    }

    /// Inverse of [`canonical_key`](Self::canonical_key).
    pub fn parse_key(key: &str) -> Result<Self, ActionError> {
        let bad = || ActionError::MalformedKey(key.to_string());
        let mut words = key.split(' ');
        let head = words.next().ok_or_else(bad)?;
        let unescape = |w: &str| w.strip_prefix('\\').unwrap_or(w).to_string();
        match head {
            "call" => {
                let tool = words.next().ok_or_else(bad)?;
                let mut args: BTreeMap<String, Vec<String>> = BTreeMap::new();
                let mut field: Option<String> = None;
                for w in words {
                    if let Some(name) = w.strip_prefix('@') {
                        args.insert(name.to_string(), Vec::new());
                        field = Some(name.to_string());
                    } else {
                        let f = field.as_ref().ok_or_else(bad)?;
                        args.get_mut(f).expect("field opened").push(unescape(w));
                    }
                }
                let tool_name = (!tool.is_empty()).then(|| tool.to_string());
                let args = args.into_iter().map(|(k, v)| (k, v.join(" "))).collect();
                Ok(Self::new(ActionKind::ToolCall, tool_name, args, None))
            }
            "say" | "end" => {
                let label: Vec<String> = words.map(unescape).collect();
                let kind = if head == "say" {
                    ActionKind::LanguageAct
                } else {
                    ActionKind::Terminate
                };
                Ok(Self::new(
                    kind,
                    None,
                    BTreeMap::new(),
                    Some(label.join(" ")),
                ))
            }
            _ => Err(bad()),
        }
    }

    /// Word tokens of the canonical key; the token-factored policy emits
    /// these followed by an end-of-turn token.
    pub fn tokens(&self) -> Vec<String> {
        self.canonical_key.split(' ').map(str::to_string).collect()
    }
}

impl PartialOrd for TurnAction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TurnAction {
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical_key.cmp(&other.canonical_key)
    }
}

impl fmt::Display for TurnAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_key)
    }
}

/// What the environment (tool or user) returned after a turn.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub payload: String,
    #[serde(default)]
    pub is_error: bool,
}

impl Observation {
    pub fn ok(payload: impl Into<String>) -> Self {
        Self {
            payload: payload.into(),
            is_error: false,
        }
    }

    pub fn error(payload: impl Into<String>) -> Self {
        Self {
            payload: payload.into(),
            is_error: true,
        }
    }
}
