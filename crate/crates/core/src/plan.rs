//! Strict parsers for role replies. Anything outside the expected shape is a
//! [`ParseError`], so malformed output is visible instead of guessed at.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use crate::session::{AgentRole, CriticVerdict, PlanStep, ReasoningPathway, StepStatus};
use crate::tools::ToolDraft;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Plan { line: usize, message: String },
    #[error("empty reply")]
    Empty,
    #[error("reply must start with ACCEPT, REVISE or GAP, found {0:?}")]
    Verdict(String),
    #[error("GAP verdict without a gap description")]
    GapWithoutDescription,
    #[error("reply has neither a fenced script nor a TOOL/ARGS call")]
    NoAction,
    #[error("tool call: {0}")]
    ToolCall(String),
    #[error("tool draft: {0}")]
    ToolDraft(String),
}

/// Step id for the 1-based plan number `n`.
pub fn step_id(n: usize) -> String {
    format!("s{n}")
}

/// Plans are numbered lines, each followed by exactly one `DEPENDS:` line:
///
/// ```text
/// 1. Collect candidate genes
/// DEPENDS: none
/// 2. Rank them
/// DEPENDS: 1
/// ```
pub fn parse_plan(text: &str) -> Result<ReasoningPathway, ParseError> {
    let err = |line: usize, message: String| ParseError::Plan { line, message };
    let mut steps: Vec<PlanStep> = Vec::new();
    let mut awaiting_depends = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("DEPENDS:") {
            if !awaiting_depends {
                return Err(err(line_no, "DEPENDS line without a preceding step".into()));
            }
            let n = steps.len();
            let rest = rest.trim();
            let deps = if rest.eq_ignore_ascii_case("none") {
                Vec::new()
            } else {
                rest.split(',')
                    .map(|d| {
                        let d = d.trim();
                        match d.parse::<usize>() {
                            Ok(k) if k >= 1 && k < n => Ok(step_id(k)),
                            Ok(k) => Err(err(line_no, format!("step {n} depends on {k}, which is not an earlier step"))),
                            Err(_) => Err(err(line_no, format!("bad dependency {d:?}"))),
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?
            };
            steps.last_mut().expect("awaiting implies a step").depends_on = deps;
            awaiting_depends = false;
            continue;
        }
        let Some((num, desc)) = line.split_once('.') else {
            return Err(err(line_no, format!("expected \"N. description\" or \"DEPENDS:\", found {line:?}")));
        };
        let Ok(n) = num.trim().parse::<usize>() else {
            return Err(err(line_no, format!("expected \"N. description\" or \"DEPENDS:\", found {line:?}")));
        };
        if awaiting_depends {
            return Err(err(line_no, format!("step {} has no DEPENDS line", steps.len())));
        }
        if n != steps.len() + 1 {
            return Err(err(line_no, format!("expected step {}, found {n}", steps.len() + 1)));
        }
        let desc = desc.trim();
        if desc.is_empty() {
            return Err(err(line_no, format!("step {n} has no description")));
        }
        steps.push(PlanStep {
            id: step_id(n),
            description: desc.to_string(),
            assigned_role: AgentRole::Dev,
            depends_on: Vec::new(),
            status: StepStatus::Pending,
            result_ref: None,
        });
        awaiting_depends = true;
    }
    if awaiting_depends {
        return Err(err(text.lines().count(), format!("step {} has no DEPENDS line", steps.len())));
    }
    if steps.is_empty() {
        return Err(ParseError::Empty);
    }
    let pathway = ReasoningPathway { steps, template_origin: None };
    pathway.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(pathway)
}

/// First non-empty line, minus any leading `N.` or `-`.
pub fn parse_step_revision(text: &str) -> Result<String, ParseError> {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).ok_or(ParseError::Empty)?;
    let line = match line.split_once('.') {
        Some((n, rest)) if n.trim().parse::<usize>().is_ok() => rest.trim(),
        _ => line.trim_start_matches('-').trim(),
    };
    if line.is_empty() {
        return Err(ParseError::Empty);
    }
    Ok(line.to_string())
}

/// The verdict is the reply's first token; the rest is feedback (and, for
/// GAP, the gap description).
pub fn parse_critique(text: &str) -> Result<CriticVerdict, ParseError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(ParseError::Empty);
    }
    let split = text.find(char::is_whitespace).unwrap_or(text.len());
    let (token, rest) = text.split_at(split);
    let rest = rest.trim();
    match token.trim_end_matches([':', '.', ',']) {
        "ACCEPT" => Ok(CriticVerdict::accept(rest)),
        "REVISE" => Ok(CriticVerdict::revise(rest)),
        "GAP" if rest.is_empty() => Err(ParseError::GapWithoutDescription),
        "GAP" => Ok(CriticVerdict::gap(rest, rest)),
        other => Err(ParseError::Verdict(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DevAction {
    Script(String),
    Tool { name: String, args: BTreeMap<String, Value> },
}

fn fenced_block(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(body[..end].to_string())
}

pub fn parse_dev_reply(text: &str) -> Result<DevAction, ParseError> {
    if let Some(script) = fenced_block(text) {
        if script.trim().is_empty() {
            return Err(ParseError::NoAction);
        }
        return Ok(DevAction::Script(script));
    }
    let mut lines = text.lines().map(str::trim).skip_while(|l| l.is_empty());
    let Some(name) = lines.next().and_then(|l| l.strip_prefix("TOOL:")) else {
        return Err(ParseError::NoAction);
    };
    let name = name.trim().to_string();
    if name.is_empty() {
        return Err(ParseError::ToolCall("empty tool name".into()));
    }
    let rest: Vec<&str> = lines.collect();
    let args_text = rest.join("\n");
    let args_text = args_text.trim();
    let args = match args_text.strip_prefix("ARGS:") {
        Some(json) => match serde_json::from_str::<Value>(json.trim()) {
            Ok(Value::Object(o)) => o.into_iter().collect(),
            Ok(other) => return Err(ParseError::ToolCall(format!("ARGS must be a JSON object, got {other}"))),
            Err(e) => return Err(ParseError::ToolCall(format!("ARGS is not JSON: {e}"))),
        },
        None if args_text.is_empty() => BTreeMap::new(),
        None => return Err(ParseError::ToolCall("expected an ARGS: line after TOOL:".into())),
    };
    Ok(DevAction::Tool { name, args })
}

/// A tool draft is one JSON object, optionally inside a fenced block.
pub fn parse_tool_draft(text: &str) -> Result<ToolDraft, ParseError> {
    let body = fenced_block(text).unwrap_or_else(|| match (text.find('{'), text.rfind('}')) {
        (Some(a), Some(b)) if a < b => text[a..=b].to_string(),
        _ => text.to_string(),
    });
    serde_json::from_str(body.trim()).map_err(|e| ParseError::ToolDraft(e.to_string()))
}
