//! Session state, the workflow graph, and the event fold that rebuilds a
//! session from its log.
//!
//! Every mutation of a [`Session`] goes through [`Session::apply`] with a
//! [`SessionEvent`]. The orchestrator appends the event to the store first and
//! then applies it, so folding a stored log reproduces the live state exactly.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::hash::canonical_hash;
use crate::provider::{TokenCounts, Usage};
use crate::sandbox::{Artifact, ExitStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Manager,
    Dev,
    Critic,
    ToolCreator,
    Human,
}

impl AgentRole {
    pub const AGENTS: [AgentRole; 4] = [AgentRole::Manager, AgentRole::Dev, AgentRole::Critic, AgentRole::ToolCreator];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Manager => "manager",
            AgentRole::Dev => "dev",
            AgentRole::Critic => "critic",
            AgentRole::ToolCreator => "tool_creator",
            AgentRole::Human => "human",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "manager" => Some(AgentRole::Manager),
            "dev" => Some(AgentRole::Dev),
            "critic" => Some(AgentRole::Critic),
            "tool_creator" => Some(AgentRole::ToolCreator),
            "human" => Some(AgentRole::Human),
            _ => None,
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Planning,
    Executing,
    Critiquing,
    ToolGap,
    AwaitingHuman,
    Finalizing,
    Succeeded,
    Failed,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStatus::Succeeded | SessionStatus::Failed)
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).unwrap();
        f.write_str(v.as_str().unwrap())
    }
}

/// Why a status transition happened. Together with the endpoints this is
/// what the workflow graph checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionCause {
    PlanAdopted,
    GateOpened,
    GateApproved,
    HumanReject,
    StepCompleted,
    CriticAccept,
    CriticRevise,
    CapabilityGap,
    ToolReady,
    Finalized,
    Failure,
}

/// The declared workflow graph.
pub fn transition_allowed(from: SessionStatus, to: SessionStatus, cause: TransitionCause) -> bool {
    use SessionStatus::*;
    use TransitionCause::*;
    if from.is_terminal() {
        return false;
    }
    if to == Failed {
        return cause == Failure;
    }
    matches!(
        (from, to, cause),
        (Planning, Executing, PlanAdopted)
            | (Planning, AwaitingHuman, GateOpened)
            | (AwaitingHuman, Executing, GateApproved)
            | (AwaitingHuman, Planning, HumanReject)
            | (Executing, Critiquing, StepCompleted)
            | (Executing, Planning, HumanReject)
            | (Critiquing, Executing, CriticAccept)
            | (Critiquing, Finalizing, CriticAccept)
            | (Critiquing, Planning, CriticRevise | HumanReject)
            | (Critiquing, ToolGap, CapabilityGap)
            | (ToolGap, Executing, ToolReady)
            | (ToolGap, AwaitingHuman, GateOpened)
            | (ToolGap, Planning, HumanReject)
            | (Finalizing, Succeeded, Finalized)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Pending,
    Running,
    Done,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub id: String,
    pub description: String,
    pub assigned_role: AgentRole,
    pub depends_on: Vec<String>,
    pub status: StepStatus,
    pub result_ref: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReasoningPathway {
    pub steps: Vec<PlanStep>,
    pub template_origin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathwayError {
    #[error("pathway has no steps")]
    Empty,
    #[error("duplicate step id {0}")]
    DuplicateStep(String),
    #[error("step {step} depends on {dep}, which is not declared before it")]
    ForwardDependency { step: String, dep: String },
}

impl ReasoningPathway {
    /// Dependencies must reference earlier-declared steps, which also makes
    /// the dependency graph acyclic.
    pub fn validate(&self) -> Result<(), PathwayError> {
        if self.steps.is_empty() {
            return Err(PathwayError::Empty);
        }
        let mut seen = Vec::new();
        for s in &self.steps {
            if seen.contains(&s.id.as_str()) {
                return Err(PathwayError::DuplicateStep(s.id.clone()));
            }
            for d in &s.depends_on {
                if !seen.contains(&d.as_str()) {
                    return Err(PathwayError::ForwardDependency { step: s.id.clone(), dep: d.clone() });
                }
            }
            seen.push(&s.id);
        }
        Ok(())
    }

    pub fn step(&self, id: &str) -> Option<&PlanStep> {
        self.steps.iter().find(|s| s.id == id)
    }

    fn step_mut(&mut self, id: &str) -> Option<&mut PlanStep> {
        self.steps.iter_mut().find(|s| s.id == id)
    }

    /// First pending step whose dependencies are all done.
    pub fn next_ready(&self) -> Option<&PlanStep> {
        self.steps.iter().find(|s| {
            s.status == StepStatus::Pending
                && s.depends_on.iter().all(|d| self.step(d).is_some_and(|x| x.status == StepStatus::Done))
        })
    }

    pub fn all_done(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.status == StepStatus::Done)
    }

    /// `id` and every step that transitively depends on it, in declaration order.
    pub fn dependents_closure(&self, id: &str) -> Vec<String> {
        let mut out = vec![id.to_string()];
        for s in &self.steps {
            if s.depends_on.iter().any(|d| out.contains(d)) && !out.contains(&s.id) {
                out.push(s.id.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Plan,
    StepAssignment,
    StepResult,
    Critique,
    GapReport,
    ToolReady,
    HumanFeedback,
    FinalAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub seq: u64,
    pub from_role: AgentRole,
    pub to_role: AgentRole,
    pub kind: MessageKind,
    pub payload: Value,
    pub step_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Revise,
    CapabilityGap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub verdict: Verdict,
    pub feedback: String,
    pub gap_description: Option<String>,
}

impl CriticVerdict {
    pub fn accept(feedback: impl Into<String>) -> Self {
        Self { verdict: Verdict::Accept, feedback: feedback.into(), gap_description: None }
    }

    pub fn revise(feedback: impl Into<String>) -> Self {
        Self { verdict: Verdict::Revise, feedback: feedback.into(), gap_description: None }
    }

    pub fn gap(feedback: impl Into<String>, gap: impl Into<String>) -> Self {
        Self { verdict: Verdict::CapabilityGap, feedback: feedback.into(), gap_description: Some(gap.into()) }
    }

    pub fn is_consistent(&self) -> bool {
        (self.verdict == Verdict::CapabilityGap) == self.gap_description.as_deref().is_some_and(|g| !g.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    Approve,
    Reject,
    Comment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanFeedback {
    pub author: String,
    #[serde(default)]
    pub target_step: Option<String>,
    pub directive: Directive,
    #[serde(default)]
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "snake_case")]
pub enum Gate {
    PostPlan,
    PreToolRegistration { tool_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GateFlags {
    #[serde(default)]
    pub post_plan: bool,
    #[serde(default)]
    pub pre_tool_registration: bool,
}

/// Per-session knobs recorded in the creation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub max_iterations: u32,
    #[serde(default)]
    pub gates: GateFlags,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { max_iterations: 5, gates: GateFlags::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum ReplanScope {
    Full { feedback: String },
    Step { step_id: String, feedback: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StepOutcome {
    Completed,
    Failed { reason: String },
}

/// What one executed step produced; the critic always sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub step_id: String,
    pub outcome: StepOutcome,
    pub exit: Option<ExitStatus>,
    pub stdout: String,
    pub stderr: String,
    pub artifacts: Vec<Artifact>,
    pub tool_id: Option<String>,
}

impl StepResult {
    pub fn succeeded(&self) -> bool {
        self.outcome == StepOutcome::Completed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRef {
    pub step_id: String,
    pub event_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub answer: String,
    pub supporting: Vec<SupportRef>,
}

/// Every state transition of a session. Serialized into the event log with
/// the variant name as the event kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionCreated {
        goal: String,
        config: SessionConfig,
    },
    StatusChanged {
        from: SessionStatus,
        to: SessionStatus,
        cause: TransitionCause,
        reason: Option<String>,
    },
    IterationAdvanced {
        count: u32,
    },
    ReplanRequested {
        scope: ReplanScope,
    },
    PathwayAdopted {
        pathway: ReasoningPathway,
    },
    TemplateAdopted {
        template_id: String,
        score: f64,
    },
    StepReplanned {
        step_id: String,
        description: String,
        reset: Vec<String>,
    },
    StepStatusChanged {
        step_id: String,
        status: StepStatus,
        result_ref: Option<u64>,
    },
    ProviderExchange {
        role: AgentRole,
        request: String,
        response: String,
        tokens: TokenCounts,
    },
    WorkspaceReady {
        workspace: String,
        provision_failures: Vec<String>,
    },
    SandboxRun {
        step_id: Option<String>,
        workspace: String,
        exit: ExitStatus,
        stdout: String,
        stderr: String,
        artifacts: Vec<Artifact>,
    },
    StepResultRecorded {
        result: StepResult,
    },
    ToolDrafted {
        tool_id: String,
        attempt: u32,
    },
    ToolValidation {
        tool_id: String,
        passed: bool,
        diagnostics: Vec<String>,
    },
    ToolInvoked {
        tool_id: String,
        validated: bool,
        ok: bool,
        output: Value,
    },
    ToolAdopted {
        tool_id: String,
        created: bool,
    },
    GateOpened {
        gate: Gate,
    },
    Message(AgentMessage),
    FinalAnswerRecorded {
        answer: FinalAnswer,
        usage: Usage,
    },
}

impl SessionEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            SessionEvent::SessionCreated { .. } => "session_created",
            SessionEvent::StatusChanged { .. } => "status_changed",
            SessionEvent::IterationAdvanced { .. } => "iteration_advanced",
            SessionEvent::ReplanRequested { .. } => "replan_requested",
            SessionEvent::PathwayAdopted { .. } => "pathway_adopted",
            SessionEvent::TemplateAdopted { .. } => "template_adopted",
            SessionEvent::StepReplanned { .. } => "step_replanned",
            SessionEvent::StepStatusChanged { .. } => "step_status_changed",
            SessionEvent::ProviderExchange { .. } => "provider_exchange",
            SessionEvent::WorkspaceReady { .. } => "workspace_ready",
            SessionEvent::SandboxRun { .. } => "sandbox_run",
            SessionEvent::StepResultRecorded { .. } => "step_result_recorded",
            SessionEvent::ToolDrafted { .. } => "tool_drafted",
            SessionEvent::ToolValidation { .. } => "tool_validation",
            SessionEvent::ToolInvoked { .. } => "tool_invoked",
            SessionEvent::ToolAdopted { .. } => "tool_adopted",
            SessionEvent::GateOpened { .. } => "gate_opened",
            SessionEvent::Message(_) => "message",
            SessionEvent::FinalAnswerRecorded { .. } => "final_answer_recorded",
        }
    }

    /// Split into `(kind, payload)` for the event store.
    pub fn to_parts(&self) -> (String, Value) {
        let mut v = serde_json::to_value(self).expect("session events serialize");
        let payload = v.get_mut("payload").map(Value::take).unwrap_or(Value::Null);
        (self.kind().to_string(), payload)
    }

    pub fn from_parts(kind: &str, payload: &Value) -> Result<Self, serde_json::Error> {
        serde_json::from_value(serde_json::json!({"kind": kind, "payload": payload}))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("event {seq}: {reason}")]
pub struct FoldError {
    pub seq: u64,
    pub reason: String,
}

/// One research task's full lifecycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub goal: String,
    pub status: SessionStatus,
    pub pathway: ReasoningPathway,
    pub history: Vec<AgentMessage>,
    pub iteration_count: u32,
    pub max_iterations: u32,
    pub config: SessionConfig,
    pub pending_gate: Option<Gate>,
    pub replan: Option<ReplanScope>,
    pub step_results: BTreeMap<String, StepResult>,
    pub adopted_tools: Vec<String>,
    pub final_answer: Option<FinalAnswer>,
    pub failure: Option<String>,
    pub usage: Usage,
    pub workspace: Option<String>,
    pub last_seq: u64,
}

impl Session {
    fn from_created(id: &str, seq: u64, event: &SessionEvent) -> Result<Self, FoldError> {
        let SessionEvent::SessionCreated { goal, config } = event else {
            return Err(FoldError { seq, reason: format!("first event must be session_created, got {}", event.kind()) });
        };
        Ok(Session {
            id: id.to_string(),
            goal: goal.clone(),
            status: SessionStatus::Planning,
            pathway: ReasoningPathway::default(),
            history: Vec::new(),
            iteration_count: 0,
            max_iterations: config.max_iterations,
            config: config.clone(),
            pending_gate: None,
            replan: None,
            step_results: BTreeMap::new(),
            adopted_tools: Vec::new(),
            final_answer: None,
            failure: None,
            usage: Usage::default(),
            workspace: None,
            last_seq: seq,
        })
    }

    /// Fold one event into the session, enforcing the workflow invariants.
    pub fn apply(&mut self, seq: u64, event: &SessionEvent) -> Result<(), FoldError> {
        let fail = |reason: String| Err(FoldError { seq, reason });
        if seq != self.last_seq + 1 {
            return fail(format!("expected seq {}, got {seq}", self.last_seq + 1));
        }
        match event {
            SessionEvent::SessionCreated { .. } => return fail("duplicate session_created".into()),
            SessionEvent::StatusChanged { from, to, cause, reason } => {
                if *from != self.status {
                    return fail(format!("transition from {from} but session is {}", self.status));
                }
                if !transition_allowed(*from, *to, *cause) {
                    return fail(format!("illegal transition {from} -> {to} ({cause:?})"));
                }
                if *to == SessionStatus::Succeeded && self.final_answer.is_none() {
                    return fail("succeeded without a final answer".into());
                }
                if *to != SessionStatus::AwaitingHuman {
                    self.pending_gate = None;
                }
                if *to == SessionStatus::Executing {
                    self.replan = None;
                }
                if *to == SessionStatus::Failed {
                    self.failure = reason.clone();
                }
                self.status = *to;
            }
            SessionEvent::IterationAdvanced { count } => {
                if *count != self.iteration_count + 1 || *count > self.max_iterations {
                    return fail(format!("iteration {count} after {} (max {})", self.iteration_count, self.max_iterations));
                }
                self.iteration_count = *count;
            }
            SessionEvent::ReplanRequested { scope } => self.replan = Some(scope.clone()),
            SessionEvent::PathwayAdopted { pathway } => {
                if let Err(e) = pathway.validate() {
                    return fail(e.to_string());
                }
                self.pathway = pathway.clone();
                self.step_results.clear();
            }
            SessionEvent::TemplateAdopted { template_id, .. } => {
                self.pathway.template_origin = Some(template_id.clone());
            }
            SessionEvent::StepReplanned { step_id, description, reset } => {
                let Some(step) = self.pathway.step_mut(step_id) else {
                    return fail(format!("replan of unknown step {step_id}"));
                };
                step.description = description.clone();
                for id in reset {
                    if let Some(s) = self.pathway.step_mut(id) {
                        s.status = StepStatus::Pending;
                        s.result_ref = None;
                    }
                    self.step_results.remove(id);
                }
            }
            SessionEvent::StepStatusChanged { step_id, status, result_ref } => {
                let Some(step) = self.pathway.step_mut(step_id) else {
                    return fail(format!("status change of unknown step {step_id}"));
                };
                step.status = *status;
                if result_ref.is_some() {
                    step.result_ref = *result_ref;
                }
            }
            SessionEvent::ProviderExchange { tokens, .. } => {
                self.usage.calls += 1;
                self.usage.tokens += *tokens;
            }
            SessionEvent::WorkspaceReady { workspace, .. } => self.workspace = Some(workspace.clone()),
            SessionEvent::SandboxRun { .. } | SessionEvent::ToolDrafted { .. } | SessionEvent::ToolValidation { .. } => {}
            SessionEvent::ToolInvoked { tool_id, validated, .. } => {
                if !validated {
                    return fail(format!("invocation of non-validated tool {tool_id}"));
                }
            }
            SessionEvent::StepResultRecorded { result } => {
                self.step_results.insert(result.step_id.clone(), result.clone());
            }
            SessionEvent::ToolAdopted { tool_id, .. } => {
                if !self.adopted_tools.contains(tool_id) {
                    self.adopted_tools.push(tool_id.clone());
                }
            }
            SessionEvent::GateOpened { gate } => self.pending_gate = Some(gate.clone()),
            SessionEvent::Message(msg) => {
                let expected = self.history.len() as u64 + 1;
                if msg.seq != expected {
                    return fail(format!("message seq {} but expected {expected}", msg.seq));
                }
                if msg.kind == MessageKind::ToolReady && !self.history_has_gap_verdict() {
                    return fail("tool_ready without a preceding capability_gap verdict".into());
                }
                self.history.push(msg.clone());
            }
            SessionEvent::FinalAnswerRecorded { answer, usage } => {
                self.final_answer = Some(answer.clone());
                self.usage.latency_ms = usage.latency_ms;
            }
        }
        self.last_seq = seq;
        Ok(())
    }

    fn history_has_gap_verdict(&self) -> bool {
        self.history.iter().any(|m| {
            m.kind == MessageKind::Critique && m.payload.get("verdict").and_then(Value::as_str) == Some("capability_gap")
        })
    }

    /// Rebuild a session from `(seq, event)` pairs.
    pub fn fold<'a, I>(id: &str, events: I) -> Result<Session, FoldError>
    where
        I: IntoIterator<Item = (u64, &'a SessionEvent)>,
    {
        let mut iter = events.into_iter();
        let (seq, first) = iter.next().ok_or(FoldError { seq: 0, reason: "unknown session".into() })?;
        if seq != 1 {
            return Err(FoldError { seq, reason: "stream does not start at seq 1".into() });
        }
        let mut session = Session::from_created(id, seq, first)?;
        for (seq, ev) in iter {
            session.apply(seq, ev)?;
        }
        Ok(session)
    }

    /// Begin a new session from its creation event.
    pub fn start(id: &str, event: &SessionEvent) -> Result<Session, FoldError> {
        Session::from_created(id, 1, event)
    }

    /// Hash of the session state; contains no wall-clock data.
    pub fn state_hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn next_message_seq(&self) -> u64 {
        self.history.len() as u64 + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use SessionStatus::*;
    use TransitionCause::*;

    fn created() -> SessionEvent {
        SessionEvent::SessionCreated { goal: "g".into(), config: SessionConfig::default() }
    }

    fn step(id: &str, deps: &[&str]) -> PlanStep {
        PlanStep {
            id: id.into(),
            description: format!("step {id}"),
            assigned_role: AgentRole::Dev,
            depends_on: deps.iter().map(|d| d.to_string()).collect(),
            status: StepStatus::Pending,
            result_ref: None,
        }
    }

    #[test]
    fn workflow_graph_edges() {
        assert!(transition_allowed(Planning, Executing, PlanAdopted));
        assert!(transition_allowed(Critiquing, Planning, CriticRevise));
        assert!(transition_allowed(Executing, Planning, HumanReject));
        assert!(!transition_allowed(Executing, Planning, CriticAccept));
        assert!(!transition_allowed(Executing, Planning, PlanAdopted));
        assert!(!transition_allowed(Succeeded, Planning, HumanReject));
        assert!(!transition_allowed(Planning, Succeeded, Finalized));
        assert!(transition_allowed(Executing, Failed, Failure));
        assert!(!transition_allowed(Failed, Failed, Failure));
    }

    #[test]
    fn pathway_validation() {
        let ok = ReasoningPathway { steps: vec![step("1", &[]), step("2", &["1"])], template_origin: None };
        assert!(ok.validate().is_ok());
        let fwd = ReasoningPathway { steps: vec![step("1", &["2"]), step("2", &[])], template_origin: None };
        assert!(matches!(fwd.validate(), Err(PathwayError::ForwardDependency { .. })));
        let dup = ReasoningPathway { steps: vec![step("1", &[]), step("1", &[])], template_origin: None };
        assert!(matches!(dup.validate(), Err(PathwayError::DuplicateStep(_))));
        assert_eq!(ReasoningPathway::default().validate(), Err(PathwayError::Empty));
    }

    #[test]
    fn dependents_closure_is_transitive() {
        let p = ReasoningPathway {
            steps: vec![step("1", &[]), step("2", &["1"]), step("3", &[]), step("4", &["2"])],
            template_origin: None,
        };
        assert_eq!(p.dependents_closure("1"), vec!["1", "2", "4"]);
        assert_eq!(p.dependents_closure("3"), vec!["3"]);
    }

    #[test]
    fn fold_rejects_illegal_transition() {
        let events =
            [created(), SessionEvent::StatusChanged { from: Planning, to: Critiquing, cause: StepCompleted, reason: None }];
        let err = Session::fold("s", events.iter().enumerate().map(|(i, e)| (i as u64 + 1, e))).unwrap_err();
        assert_eq!(err.seq, 2);
    }

    #[test]
    fn succeeded_requires_final_answer() {
        let mut s = Session::start("s", &created()).unwrap();
        s.status = Finalizing;
        let e = SessionEvent::StatusChanged { from: Finalizing, to: Succeeded, cause: Finalized, reason: None };
        assert!(s.apply(2, &e).is_err());
    }

    #[test]
    fn tool_ready_requires_gap_verdict() {
        let mut s = Session::start("s", &created()).unwrap();
        let msg = AgentMessage {
            seq: 1,
            from_role: AgentRole::ToolCreator,
            to_role: AgentRole::Manager,
            kind: MessageKind::ToolReady,
            payload: json!({"tool_id": "t"}),
            step_ref: None,
        };
        assert!(s.apply(2, &SessionEvent::Message(msg)).is_err());
    }

    #[test]
    fn iteration_cannot_exceed_max() {
        let mut s = Session::start(
            "s",
            &SessionEvent::SessionCreated { goal: "g".into(), config: SessionConfig { max_iterations: 1, ..Default::default() } },
        )
        .unwrap();
        s.apply(2, &SessionEvent::IterationAdvanced { count: 1 }).unwrap();
        assert!(s.apply(3, &SessionEvent::IterationAdvanced { count: 2 }).is_err());
    }

    #[test]
    fn event_parts_round_trip() {
        let e = SessionEvent::StatusChanged { from: Planning, to: Executing, cause: PlanAdopted, reason: None };
        let (kind, payload) = e.to_parts();
        assert_eq!(kind, "status_changed");
        assert_eq!(payload["to"], "executing");
        assert_eq!(SessionEvent::from_parts(&kind, &payload).unwrap(), e);
        let m = SessionEvent::Message(AgentMessage {
            seq: 1,
            from_role: AgentRole::Manager,
            to_role: AgentRole::Dev,
            kind: MessageKind::Plan,
            payload: json!("x"),
            step_ref: None,
        });
        let (k, p) = m.to_parts();
        assert_eq!(SessionEvent::from_parts(&k, &p).unwrap(), m);
    }

    #[test]
    fn verdict_invariant() {
        assert!(CriticVerdict::gap("not actionable", "need perturbation screen").is_consistent());
        assert!(CriticVerdict::accept("ok").is_consistent());
        let bad = CriticVerdict { verdict: Verdict::CapabilityGap, feedback: String::new(), gap_description: None };
        assert!(!bad.is_consistent());
    }
}
