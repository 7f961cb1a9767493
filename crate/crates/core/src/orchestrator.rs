//! The session state machine: plan → execute → critique → (gap → tool) loop
//! across the four agent roles, with optional human gates.
//!
//! Every mutation is a [`SessionEvent`] that is first folded into a copy of
//! the session (so invariant violations never reach the log), then appended
//! to the event store. Commands for one session are serialized by its lock;
//! distinct sessions progress independently.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use thiserror::Error;

use crate::events::{EventStore, EventStoreError};
use crate::plan::{parse_critique, parse_dev_reply, parse_plan, parse_step_revision, DevAction, ParseError};
use crate::provider::{ChatMessage, Provider, ProviderError};
use crate::sandbox::{ExitStatus, KillReason, ResourceLimits, Sandbox, SandboxError, Workspace};
use crate::session::{
    AgentMessage, AgentRole, CriticVerdict, Directive, FinalAnswer, FoldError, Gate, HumanFeedback, MessageKind, ReplanScope,
    Session, SessionConfig, SessionEvent, SessionStatus, StepOutcome, StepResult, StepStatus, SupportRef, TransitionCause,
    Verdict,
};
use crate::templates::TemplateLibrary;
use crate::tools::{CreationOutcome, ToolError, ToolOcean, ToolStatus};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("{op} not allowed while session is {status}")]
    State { op: &'static str, status: SessionStatus },
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("provider: {0}")]
    Provider(#[from] ProviderError),
    #[error("{role} reply could not be parsed: {source}")]
    Parse { role: AgentRole, source: ParseError },
    #[error(transparent)]
    Store(#[from] EventStoreError),
    #[error("invariant: {0}")]
    Fold(#[from] FoldError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Tool(#[from] ToolError),
}

impl EngineError {
    /// Provider hiccups leave the session where it was.
    pub fn is_retryable(&self) -> bool {
        matches!(self, EngineError::Provider(e) if e.is_retryable())
    }
}

#[derive(Debug, Clone)]
pub struct EngineSettings {
    /// Minimum retrieval score for a template to seed planning.
    pub template_threshold: f64,
    pub step_limits: ResourceLimits,
    /// Python modules provisioned into each session workspace.
    pub env_spec: Vec<String>,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self { template_threshold: 0.35, step_limits: ResourceLimits::default(), env_spec: Vec::new() }
    }
}

/// What one call to [`Engine::advance`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum Advance {
    Planned {
        steps: usize,
    },
    Executed {
        step_id: String,
        ok: bool,
    },
    Critiqued(CriticVerdict),
    ToolReady {
        tool_id: String,
    },
    /// Waiting at a human gate.
    Blocked(Gate),
    Terminal(SessionStatus),
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Ack {
    pub seq: u64,
    pub status: SessionStatus,
}

struct Live {
    session: Session,
    workspace: Option<Workspace>,
    started: Instant,
    latency_ms: u64,
}

struct Slot {
    live: Mutex<Live>,
    wake: Condvar,
}

pub struct Engine {
    provider: Provider,
    templates: Arc<TemplateLibrary>,
    tools: Arc<ToolOcean>,
    sandbox: Arc<Sandbox>,
    store: Arc<EventStore>,
    settings: EngineSettings,
    sessions: RwLock<BTreeMap<String, Arc<Slot>>>,
}

const RESULT_EXCERPT: usize = 2000;

fn excerpt(text: &str) -> &str {
    let t = text.trim();
    match t.char_indices().nth(RESULT_EXCERPT) {
        Some((i, _)) => &t[..i],
        None => t,
    }
}

fn failure_reason(exit: &ExitStatus) -> String {
    match exit {
        ExitStatus::Exited { code } => format!("exit code {code}"),
        ExitStatus::Killed { reason: KillReason::Timeout } => "timeout".into(),
        ExitStatus::Killed { reason: KillReason::Memory } => "memory limit".into(),
        ExitStatus::Killed { reason: KillReason::CpuTime } => "cpu time limit".into(),
        ExitStatus::Killed { reason: KillReason::Signal } => "killed by signal".into(),
    }
}

/// Upper bound on provider calls for one session: each iteration can plan
/// once, run dev and critic once per step, and draft a tool up to
/// `creation_retries + 1` times; finalizing adds one call.
pub fn provider_call_bound(max_iterations: u32, steps: usize, creation_retries: u32) -> u64 {
    let per_iteration = 1 + 2 * steps as u64 + u64::from(creation_retries) + 1;
    (u64::from(max_iterations) + 1) * per_iteration + 1
}

impl Engine {
    pub fn new(
        provider: Provider,
        templates: Arc<TemplateLibrary>,
        tools: Arc<ToolOcean>,
        sandbox: Arc<Sandbox>,
        store: Arc<EventStore>,
    ) -> Self {
        Self {
            provider,
            templates,
            tools,
            sandbox,
            store,
            settings: EngineSettings::default(),
            sessions: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn with_settings(mut self, settings: EngineSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn provider(&self) -> &Provider {
        &self.provider
    }

    pub fn templates(&self) -> &Arc<TemplateLibrary> {
        &self.templates
    }

    pub fn tools(&self) -> &Arc<ToolOcean> {
        &self.tools
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }

    pub fn sandbox(&self) -> &Arc<Sandbox> {
        &self.sandbox
    }

    pub fn create_session(&self, goal: &str, config: SessionConfig) -> Result<Session, EngineError> {
        if goal.trim().is_empty() {
            return Err(EngineError::Validation("goal must not be empty".into()));
        }
        if config.max_iterations == 0 {
            return Err(EngineError::Validation("max_iterations must be at least 1".into()));
        }
        let id = self.store.open_next_stream("sess")?;
        let created = SessionEvent::SessionCreated { goal: goal.trim().to_string(), config };
        let session = Session::start(&id, &created)?;
        self.store.append_session_event(&id, &created, Some(0))?;
        let slot = Arc::new(Slot {
            live: Mutex::new(Live { session: session.clone(), workspace: None, started: Instant::now(), latency_ms: 0 }),
            wake: Condvar::new(),
        });
        self.sessions.write().unwrap().insert(id, slot);
        Ok(session)
    }

    /// Current state: live sessions from memory, others replayed from the log.
    pub fn session(&self, id: &str) -> Result<Session, EngineError> {
        if let Some(slot) = self.slot(id) {
            return Ok(slot.live.lock().unwrap().session.clone());
        }
        match self.store.replay(id) {
            Ok(r) => Ok(r.session),
            Err(EventStoreError::UnknownSession(_)) => Err(EngineError::UnknownSession(id.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.store.session_ids()
    }

    fn slot(&self, id: &str) -> Option<Arc<Slot>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    fn live_slot(&self, id: &str) -> Result<Arc<Slot>, EngineError> {
        match self.slot(id) {
            Some(s) => Ok(s),
            None if self.store.session_ids().iter().any(|s| s == id) => {
                let status = self.session(id)?.status;
                Err(EngineError::State { op: "command", status })
            }
            None => Err(EngineError::UnknownSession(id.to_string())),
        }
    }

    fn emit(&self, live: &mut Live, event: SessionEvent) -> Result<u64, EngineError> {
        let seq = live.session.last_seq + 1;
        let mut next = live.session.clone();
        next.apply(seq, &event)?;
        let elapsed = live.started.elapsed().as_millis() as u64;
        let stored = self.store.append_session_event(&live.session.id, &event, Some(elapsed))?;
        debug_assert_eq!(stored, seq);
        live.session = next;
        Ok(seq)
    }

    fn message(
        &self,
        live: &mut Live,
        from: AgentRole,
        to: AgentRole,
        kind: MessageKind,
        payload: Value,
        step_ref: Option<&str>,
    ) -> Result<u64, EngineError> {
        let msg = AgentMessage {
            seq: live.session.next_message_seq(),
            from_role: from,
            to_role: to,
            kind,
            payload,
            step_ref: step_ref.map(String::from),
        };
        self.emit(live, SessionEvent::Message(msg))
    }

    fn transition(
        &self,
        live: &mut Live,
        to: SessionStatus,
        cause: TransitionCause,
        reason: Option<String>,
    ) -> Result<(), EngineError> {
        let from = live.session.status;
        self.emit(live, SessionEvent::StatusChanged { from, to, cause, reason })?;
        if to.is_terminal() {
            self.wind_down(live);
        }
        Ok(())
    }

    fn fail(&self, live: &mut Live, reason: String) -> Result<(), EngineError> {
        self.transition(live, SessionStatus::Failed, TransitionCause::Failure, Some(reason))
    }

    /// Terminal housekeeping. Best effort: the terminal event is already durable.
    fn wind_down(&self, live: &mut Live) {
        if let Some(ws) = live.workspace.take() {
            let _ = self.sandbox.destroy_workspace(&ws);
        }
        let id = live.session.id.clone();
        let _ = self.store.close(&id);
        let _ = self.store.write_snapshot(&id, "templates", &self.templates.to_lines());
        let _ = self.store.write_snapshot(&id, "tools", &self.tools.to_lines());
    }

    /// Revise, gap and reject each cost one iteration; running out fails the session.
    fn spend_iteration(&self, live: &mut Live, why: &str) -> Result<bool, EngineError> {
        let s = &live.session;
        if s.iteration_count + 1 > s.max_iterations {
            let reason = format!("max_iterations ({}) exhausted: {why}", s.max_iterations);
            self.fail(live, reason)?;
            return Ok(false);
        }
        let count = s.iteration_count + 1;
        self.emit(live, SessionEvent::IterationAdvanced { count })?;
        Ok(true)
    }

    fn ask(&self, live: &mut Live, role: AgentRole, system: String, user: String) -> Result<String, EngineError> {
        let exchange = self.provider.complete(role, vec![ChatMessage::system(system), ChatMessage::user(user)])?;
        let request = exchange.request_messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n");
        live.latency_ms += exchange.latency_ms;
        self.emit(
            live,
            SessionEvent::ProviderExchange {
                role,
                request,
                response: exchange.response_text.clone(),
                tokens: exchange.token_counts,
            },
        )?;
        Ok(exchange.response_text)
    }

    fn human_notes(session: &Session) -> String {
        session
            .history
            .iter()
            .filter(|m| m.kind == MessageKind::HumanFeedback)
            .filter_map(|m| {
                m.payload.get("body").and_then(Value::as_str).filter(|b| !b.is_empty()).map(|b| format!("\nHUMAN: {b}"))
            })
            .collect()
    }

    fn require(live: &Live, op: &'static str, status: SessionStatus) -> Result<(), EngineError> {
        if live.session.status != status {
            return Err(EngineError::State { op, status: live.session.status });
        }
        Ok(())
    }

    /// Manager decomposes the goal (or revises one step after a step-level
    /// revise verdict). Parse failures leave the session in planning.
    pub fn plan(&self, id: &str) -> Result<Advance, EngineError> {
        let slot = self.live_slot(id)?;
        let mut live = slot.live.lock().unwrap();
        self.plan_locked(&mut live)
    }

    fn plan_locked(&self, live: &mut Live) -> Result<Advance, EngineError> {
        Self::require(live, "plan", SessionStatus::Planning)?;
        if let Some(ReplanScope::Step { step_id, feedback }) = live.session.replan.clone() {
            if live.session.pathway.step(&step_id).is_some() {
                return self.replan_step(live, &step_id, &feedback);
            }
        }
        let s = &live.session;
        let template =
            self.templates.retrieve(&s.goal, 1).into_iter().find(|(_, score)| *score >= self.settings.template_threshold);
        let mut user = format!("GOAL: {}", s.goal);
        if let Some((t, _)) = &template {
            user.push_str(&format!("\nTEMPLATE {}:", t.id));
            for (i, line) in t.pathway_skeleton.iter().enumerate() {
                user.push_str(&format!("\n{}. {line}", i + 1));
            }
        }
        if let Some(ReplanScope::Full { feedback } | ReplanScope::Step { feedback, .. }) = &s.replan {
            user.push_str(&format!("\nFEEDBACK: {feedback}"));
        }
        user.push_str(&Self::human_notes(s));
        let system = "[plan] You are the manager. Decompose the goal into numbered steps. Reply only with lines of the form\n\
                      1. <step description>\nDEPENDS: none\n2. <step description>\nDEPENDS: 1\n\
                      Every step is followed by exactly one DEPENDS line naming earlier step numbers."
            .to_string();
        let reply = self.ask(live, AgentRole::Manager, system, user)?;
        let mut pathway = parse_plan(&reply).map_err(|source| EngineError::Parse { role: AgentRole::Manager, source })?;
        let steps = pathway.steps.len();
        pathway.template_origin = None;
        self.emit(live, SessionEvent::PathwayAdopted { pathway: pathway.clone() })?;
        if let Some((t, score)) = template {
            self.emit(live, SessionEvent::TemplateAdopted { template_id: t.id.clone(), score })?;
            self.templates.record_usage(&t.id);
        }
        let plan_payload = json!({ "steps": pathway.steps.iter().map(|s| json!({"id": s.id, "description": s.description, "depends_on": s.depends_on})).collect::<Vec<_>>() });
        self.message(live, AgentRole::Manager, AgentRole::Dev, MessageKind::Plan, plan_payload, None)?;
        if live.session.config.gates.post_plan {
            self.emit(live, SessionEvent::GateOpened { gate: Gate::PostPlan })?;
            self.transition(live, SessionStatus::AwaitingHuman, TransitionCause::GateOpened, None)?;
            return Ok(Advance::Blocked(Gate::PostPlan));
        }
        self.transition(live, SessionStatus::Executing, TransitionCause::PlanAdopted, None)?;
        Ok(Advance::Planned { steps })
    }

    fn replan_step(&self, live: &mut Live, step_id: &str, feedback: &str) -> Result<Advance, EngineError> {
        let s = &live.session;
        let step = s.pathway.step(step_id).expect("checked by caller");
        let mut user = format!("GOAL: {}\nSTEP {}: {}\nFEEDBACK: {feedback}", s.goal, step.id, step.description);
        user.push_str(&Self::human_notes(s));
        let system =
            format!("[replan {step_id}] You are the manager. Reply with the revised description of this step on one line.");
        let reply = self.ask(live, AgentRole::Manager, system, user)?;
        let description =
            parse_step_revision(&reply).map_err(|source| EngineError::Parse { role: AgentRole::Manager, source })?;
        let mut reset = vec![step_id.to_string()];
        reset.extend(live.session.pathway.dependents_closure(step_id));
        self.emit(live, SessionEvent::StepReplanned { step_id: step_id.to_string(), description, reset })?;
        self.transition(live, SessionStatus::Executing, TransitionCause::PlanAdopted, None)?;
        Ok(Advance::Planned { steps: live.session.pathway.steps.len() })
    }

    fn ensure_workspace(&self, live: &mut Live) -> Result<Workspace, EngineError> {
        if let Some(ws) = &live.workspace {
            return Ok(ws.clone());
        }
        let ws =
            self.sandbox.create_workspace(Some(&live.session.id), &self.settings.env_spec, self.settings.step_limits.clone())?;
        let failures = ws.provision.failed.clone();
        self.emit(live, SessionEvent::WorkspaceReady { workspace: ws.id.clone(), provision_failures: failures })?;
        live.workspace = Some(ws.clone());
        Ok(ws)
    }

    /// Dev role produces a script (run in the session workspace) or a tool
    /// call. Script failures become failed step results, never errors.
    pub fn execute_step(&self, id: &str, step_id: &str) -> Result<StepResult, EngineError> {
        let slot = self.live_slot(id)?;
        let mut live = slot.live.lock().unwrap();
        self.execute_locked(&mut live, step_id)
    }

    fn execute_locked(&self, live: &mut Live, step_id: &str) -> Result<StepResult, EngineError> {
        Self::require(live, "execute_step", SessionStatus::Executing)?;
        let s = &live.session;
        let step = s.pathway.step(step_id).ok_or_else(|| EngineError::Precondition(format!("unknown step {step_id}")))?.clone();
        if step.status != StepStatus::Pending {
            return Err(EngineError::Precondition(format!("step {step_id} is {:?}, not pending", step.status)));
        }
        if let Some(dep) = step.depends_on.iter().find(|d| s.pathway.step(d).is_none_or(|x| x.status != StepStatus::Done)) {
            return Err(EngineError::Precondition(format!("step {step_id} depends on unfinished step {dep}")));
        }
        if step.assigned_role != AgentRole::Dev {
            return Err(EngineError::Precondition(format!("step {step_id} is assigned to {}", step.assigned_role)));
        }

        let mut user = format!("GOAL: {}\nSTEP {}: {}", s.goal, step.id, step.description);
        for dep in &step.depends_on {
            if let Some(r) = s.step_results.get(dep) {
                user.push_str(&format!("\nRESULT {dep}: {}", excerpt(&r.stdout)));
            }
        }
        let mut tools: Vec<_> = self.tools.list().into_iter().filter(|m| m.status == ToolStatus::Validated).collect();
        tools.sort_by(|a, b| a.name.cmp(&b.name));
        if !tools.is_empty() {
            user.push_str("\nTOOLS:");
            for t in &tools {
                let fields: Vec<String> = t.input_schema.iter().map(|(k, v)| format!("{k}:{v}")).collect();
                user.push_str(&format!("\n- {}({}) {}", t.name, fields.join(", "), t.description));
            }
        }
        user.push_str(&Self::human_notes(s));
        let system = format!(
            "[step {step_id}] You are the dev agent. Reply with one fenced python block to run, or with\nTOOL: <name>\nARGS: <json object>"
        );

        self.emit(
            live,
            SessionEvent::StepStatusChanged { step_id: step_id.to_string(), status: StepStatus::Running, result_ref: None },
        )?;
        self.message(
            live,
            AgentRole::Manager,
            AgentRole::Dev,
            MessageKind::StepAssignment,
            json!({"description": step.description}),
            Some(step_id),
        )?;
        let reply = self.ask(live, AgentRole::Dev, system, user)?;

        let result = match parse_dev_reply(&reply) {
            Err(e) => StepResult {
                step_id: step_id.to_string(),
                outcome: StepOutcome::Failed { reason: format!("unusable dev reply: {e}") },
                exit: None,
                stdout: String::new(),
                stderr: String::new(),
                artifacts: Vec::new(),
                tool_id: None,
            },
            Ok(DevAction::Script(script)) => {
                let ws = self.ensure_workspace(live)?;
                let run = self.sandbox.run_script(&ws, &script, &[])?;
                self.emit(
                    live,
                    SessionEvent::SandboxRun {
                        step_id: Some(step_id.to_string()),
                        workspace: ws.id.clone(),
                        exit: run.exit,
                        stdout: run.stdout.clone(),
                        stderr: run.stderr.clone(),
                        artifacts: run.artifacts.clone(),
                    },
                )?;
                let outcome = if run.exit.success() {
                    StepOutcome::Completed
                } else {
                    StepOutcome::Failed { reason: failure_reason(&run.exit) }
                };
                StepResult {
                    step_id: step_id.to_string(),
                    outcome,
                    exit: Some(run.exit),
                    stdout: run.stdout,
                    stderr: run.stderr,
                    artifacts: run.artifacts,
                    tool_id: None,
                }
            }
            Ok(DevAction::Tool { name, args }) => self.call_tool(live, step_id, &name, &args)?,
        };

        let result_seq = self.emit(live, SessionEvent::StepResultRecorded { result: result.clone() })?;
        let status = if result.succeeded() { StepStatus::Done } else { StepStatus::Rejected };
        self.emit(live, SessionEvent::StepStatusChanged { step_id: step_id.to_string(), status, result_ref: Some(result_seq) })?;
        let payload = serde_json::to_value(&result).expect("step results serialize");
        self.message(live, AgentRole::Dev, AgentRole::Critic, MessageKind::StepResult, payload, Some(step_id))?;
        self.transition(live, SessionStatus::Critiquing, TransitionCause::StepCompleted, None)?;
        Ok(result)
    }

    fn call_tool(
        &self,
        live: &mut Live,
        step_id: &str,
        name: &str,
        args: &BTreeMap<String, Value>,
    ) -> Result<StepResult, EngineError> {
        let failed = |reason: String, tool_id: Option<String>| StepResult {
            step_id: step_id.to_string(),
            outcome: StepOutcome::Failed { reason },
            exit: None,
            stdout: String::new(),
            stderr: String::new(),
            artifacts: Vec::new(),
            tool_id,
        };
        let Some(tool) = self.tools.find_by_name(name) else {
            return Ok(failed(format!("unknown tool {name:?}"), None));
        };
        if tool.status != ToolStatus::Validated {
            return Ok(failed(format!("tool {name:?} is {:?} and cannot be invoked", tool.status), Some(tool.id)));
        }
        let outcome = self.tools.invoke(&tool.id, args);
        let (ok, output) = match &outcome {
            Ok(o) => (true, Value::Object(o.clone())),
            Err(e) => (false, json!({"error": e.to_string()})),
        };
        self.emit(live, SessionEvent::ToolInvoked { tool_id: tool.id.clone(), validated: true, ok, output: output.clone() })?;
        Ok(match outcome {
            Ok(_) => StepResult {
                step_id: step_id.to_string(),
                outcome: StepOutcome::Completed,
                exit: None,
                stdout: output.to_string(),
                stderr: String::new(),
                artifacts: Vec::new(),
                tool_id: Some(tool.id),
            },
            Err(e) => failed(e.to_string(), Some(tool.id)),
        })
    }

    fn last_message(session: &Session, kind: MessageKind) -> Option<&AgentMessage> {
        session.history.iter().rev().find(|m| m.kind == kind)
    }

    /// Critic judges the latest step result.
    pub fn critique(&self, id: &str) -> Result<CriticVerdict, EngineError> {
        let slot = self.live_slot(id)?;
        let mut live = slot.live.lock().unwrap();
        self.critique_locked(&mut live)
    }

    fn critique_locked(&self, live: &mut Live) -> Result<CriticVerdict, EngineError> {
        Self::require(live, "critique", SessionStatus::Critiquing)?;
        let s = &live.session;
        let step_id = Self::last_message(s, MessageKind::StepResult)
            .and_then(|m| m.step_ref.clone())
            .ok_or_else(|| EngineError::Precondition("no step result to critique".into()))?;
        let step = s.pathway.step(&step_id).ok_or_else(|| EngineError::Precondition(format!("unknown step {step_id}")))?;
        let result = s.step_results.get(&step_id).ok_or_else(|| EngineError::Precondition(format!("no result for {step_id}")))?;
        let outcome = match &result.outcome {
            StepOutcome::Completed => "completed".to_string(),
            StepOutcome::Failed { reason } => format!("failed ({reason})"),
        };
        let mut user = format!(
            "GOAL: {}\nSTEP {}: {}\nOUTCOME: {outcome}\nSTDOUT: {}\nSTDERR: {}",
            s.goal,
            step.id,
            step.description,
            excerpt(&result.stdout),
            excerpt(&result.stderr)
        );
        user.push_str(&Self::human_notes(s));
        let system = format!(
            "[critique {step_id}] You are the critic. Begin your reply with ACCEPT, REVISE or GAP, then give feedback. \
             GAP means no available tool can advance the task; describe the missing capability."
        );
        let reply = self.ask(live, AgentRole::Critic, system, user)?;
        let verdict = parse_critique(&reply).map_err(|source| EngineError::Parse { role: AgentRole::Critic, source })?;
        let payload = serde_json::to_value(&verdict).expect("verdicts serialize");
        self.message(live, AgentRole::Critic, AgentRole::Manager, MessageKind::Critique, payload, Some(&step_id))?;

        match verdict.verdict {
            Verdict::Accept => {
                if live.session.pathway.step(&step_id).is_some_and(|s| s.status != StepStatus::Done) {
                    self.emit(
                        live,
                        SessionEvent::StepStatusChanged { step_id: step_id.clone(), status: StepStatus::Done, result_ref: None },
                    )?;
                }
                let to = if live.session.pathway.all_done() { SessionStatus::Finalizing } else { SessionStatus::Executing };
                self.transition(live, to, TransitionCause::CriticAccept, None)?;
            }
            Verdict::Revise => {
                if self.spend_iteration(live, &format!("critic asked to revise {step_id}"))? {
                    let scope = ReplanScope::Step { step_id: step_id.clone(), feedback: verdict.feedback.clone() };
                    self.emit(live, SessionEvent::ReplanRequested { scope })?;
                    self.transition(live, SessionStatus::Planning, TransitionCause::CriticRevise, None)?;
                }
            }
            Verdict::CapabilityGap => {
                if self.spend_iteration(live, &format!("capability gap at {step_id}"))? {
                    let gap = verdict.gap_description.clone().unwrap_or_default();
                    self.message(
                        live,
                        AgentRole::Critic,
                        AgentRole::ToolCreator,
                        MessageKind::GapReport,
                        json!({"gap_description": gap}),
                        Some(&step_id),
                    )?;
                    self.transition(live, SessionStatus::ToolGap, TransitionCause::CapabilityGap, None)?;
                }
            }
        }
        Ok(verdict)
    }

    /// Tool creator closes the latest reported gap: reuse a close registry
    /// match or draft, validate and register a new tool.
    pub fn handle_gap(&self, id: &str) -> Result<String, EngineError> {
        let slot = self.live_slot(id)?;
        let mut live = slot.live.lock().unwrap();
        self.handle_gap_locked(&mut live)
    }

    fn handle_gap_locked(&self, live: &mut Live) -> Result<String, EngineError> {
        Self::require(live, "handle_gap", SessionStatus::ToolGap)?;
        let report = Self::last_message(&live.session, MessageKind::GapReport)
            .cloned()
            .ok_or_else(|| EngineError::Precondition("no gap report".into()))?;
        let gap = report.payload.get("gap_description").and_then(Value::as_str).unwrap_or_default().to_string();
        let session_id = live.session.id.clone();
        let goal = live.session.goal.clone();

        // Exchanges are collected per attempt and logged next to the attempt's
        // validation outcome once the pipeline returns.
        let mut exchanges: Vec<Option<SessionEvent>> = Vec::new();
        let mut latency = 0;
        let outcome = self.tools.create_tool(&gap, Some(&session_id), |attempt, diagnostics| {
            let mut user = format!("GOAL: {goal}\nGAP: {gap}");
            if !diagnostics.is_empty() {
                user.push_str(&format!("\nPREVIOUS ATTEMPT FAILED:\n{}", diagnostics.join("\n")));
            }
            let system = format!(
                "[tool attempt {attempt}] You are the tool creator. Reply with one JSON object with fields name, category \
                 (custom_analysis or foundation_model), description, input_schema, output_schema, script and tests. The script \
                 reads its arguments as JSON from argv[1] and prints one JSON object."
            );
            let exchange = match self
                .provider
                .complete(AgentRole::ToolCreator, vec![ChatMessage::system(system), ChatMessage::user(user)])
            {
                Ok(x) => x,
                Err(e) => {
                    exchanges.push(None);
                    return Err(e.to_string());
                }
            };
            latency += exchange.latency_ms;
            let request = exchange.request_messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n");
            exchanges.push(Some(SessionEvent::ProviderExchange {
                role: AgentRole::ToolCreator,
                request,
                response: exchange.response_text.clone(),
                tokens: exchange.token_counts,
            }));
            crate::plan::parse_tool_draft(&exchange.response_text).map_err(|e| e.to_string())
        });
        live.latency_ms += latency;

        let trace = match &outcome {
            Ok(CreationOutcome::Created { trace, .. }) => trace.clone(),
            Err(ToolError::CreationFailed { trace, .. }) => trace.clone(),
            _ => Vec::new(),
        };
        for (i, attempt) in trace.iter().enumerate() {
            if let Some(Some(ex)) = exchanges.get(i) {
                self.emit(live, ex.clone())?;
            }
            if let Some(tool_id) = &attempt.tool_id {
                self.emit(live, SessionEvent::ToolDrafted { tool_id: tool_id.clone(), attempt: attempt.attempt })?;
                self.emit(
                    live,
                    SessionEvent::ToolValidation {
                        tool_id: tool_id.clone(),
                        passed: attempt.passed,
                        diagnostics: attempt.diagnostics.clone(),
                    },
                )?;
            }
        }

        let (tool_id, created) = match outcome {
            Ok(CreationOutcome::Reused { manifest, .. }) => (manifest.id, false),
            Ok(CreationOutcome::Created { manifest, .. }) => (manifest.id, true),
            Err(e) => {
                self.fail(live, format!("tool creation failed: {e}"))?;
                return Err(e.into());
            }
        };
        if created && live.session.config.gates.pre_tool_registration {
            self.emit(live, SessionEvent::GateOpened { gate: Gate::PreToolRegistration { tool_id: tool_id.clone() } })?;
            self.transition(live, SessionStatus::AwaitingHuman, TransitionCause::GateOpened, None)?;
            return Ok(tool_id);
        }
        self.adopt_tool(live, &tool_id, created, TransitionCause::ToolReady)?;
        Ok(tool_id)
    }

    /// Announce the tool, point the gap step at it, resume execution.
    fn adopt_tool(&self, live: &mut Live, tool_id: &str, created: bool, cause: TransitionCause) -> Result<(), EngineError> {
        let name = self.tools.get(tool_id).map(|m| m.name).unwrap_or_else(|| tool_id.to_string());
        self.emit(live, SessionEvent::ToolAdopted { tool_id: tool_id.to_string(), created })?;
        let step_id = Self::last_message(&live.session, MessageKind::GapReport).and_then(|m| m.step_ref.clone());
        self.message(
            live,
            AgentRole::ToolCreator,
            AgentRole::Manager,
            MessageKind::ToolReady,
            json!({"tool_id": tool_id, "name": name}),
            step_id.as_deref(),
        )?;
        if let Some(step_id) = step_id {
            if let Some(step) = live.session.pathway.step(&step_id) {
                let marker = format!("[tool: {name}]");
                let description = if step.description.contains(&marker) {
                    step.description.clone()
                } else {
                    format!("{} {marker}", step.description)
                };
                let mut reset = vec![step_id.clone()];
                reset.extend(live.session.pathway.dependents_closure(&step_id));
                self.emit(live, SessionEvent::StepReplanned { step_id, description, reset })?;
            }
        }
        self.transition(live, SessionStatus::Executing, cause, None)
    }

    /// Human input at any non-terminal point. Approve releases a gate,
    /// reject forces replanning (and outranks any critic verdict), comment is
    /// carried into later prompts.
    pub fn inject_feedback(&self, id: &str, feedback: HumanFeedback) -> Result<Ack, EngineError> {
        let slot = self.live_slot(id)?;
        let mut live = slot.live.lock().unwrap();
        let ack = self.feedback_locked(&mut live, feedback)?;
        slot.wake.notify_all();
        Ok(ack)
    }

    fn feedback_locked(&self, live: &mut Live, fb: HumanFeedback) -> Result<Ack, EngineError> {
        let status = live.session.status;
        if status.is_terminal() {
            return Err(EngineError::State { op: "inject_feedback", status });
        }
        if fb.directive == Directive::Reject && status == SessionStatus::Finalizing {
            return Err(EngineError::State { op: "reject", status });
        }
        if let Some(step) = &fb.target_step {
            if live.session.pathway.step(step).is_none() {
                return Err(EngineError::Validation(format!("unknown target step {step}")));
            }
        }
        let payload = serde_json::to_value(&fb).expect("feedback serializes");
        let seq = self.message(
            live,
            AgentRole::Human,
            AgentRole::Manager,
            MessageKind::HumanFeedback,
            payload,
            fb.target_step.as_deref(),
        )?;
        match fb.directive {
            Directive::Comment => {}
            Directive::Approve => match live.session.pending_gate.clone() {
                Some(Gate::PostPlan) => self.transition(live, SessionStatus::Executing, TransitionCause::GateApproved, None)?,
                Some(Gate::PreToolRegistration { tool_id }) => {
                    self.adopt_tool(live, &tool_id, true, TransitionCause::GateApproved)?
                }
                None => {}
            },
            Directive::Reject => {
                if self.spend_iteration(live, "human rejected the plan")? {
                    let scope = match fb.target_step {
                        Some(step_id) => ReplanScope::Step { step_id, feedback: fb.body },
                        None => ReplanScope::Full { feedback: fb.body },
                    };
                    self.emit(live, SessionEvent::ReplanRequested { scope })?;
                    if status != SessionStatus::Planning {
                        self.transition(live, SessionStatus::Planning, TransitionCause::HumanReject, None)?;
                    }
                }
            }
        }
        Ok(Ack { seq, status: live.session.status })
    }

    fn finalize_locked(&self, live: &mut Live) -> Result<FinalAnswer, EngineError> {
        Self::require(live, "finalize", SessionStatus::Finalizing)?;
        let s = &live.session;
        let mut user = format!("GOAL: {}", s.goal);
        for step in &s.pathway.steps {
            let out = s.step_results.get(&step.id).map(|r| excerpt(&r.stdout)).unwrap_or_default();
            user.push_str(&format!("\nSTEP {}: {}\nRESULT: {out}", step.id, step.description));
        }
        user.push_str(&Self::human_notes(s));
        let system = "[final] You are the manager. Write the final answer to the goal from the step results.".to_string();
        let supporting: Vec<SupportRef> = s
            .pathway
            .steps
            .iter()
            .filter_map(|st| st.result_ref.map(|event_seq| SupportRef { step_id: st.id.clone(), event_seq }))
            .collect();
        let reply = self.ask(live, AgentRole::Manager, system, user)?;
        let answer = FinalAnswer { answer: reply.trim().to_string(), supporting };
        self.message(
            live,
            AgentRole::Manager,
            AgentRole::Human,
            MessageKind::FinalAnswer,
            json!({"answer": answer.answer}),
            None,
        )?;
        let mut usage = live.session.usage.clone();
        usage.latency_ms = live.latency_ms;
        self.emit(live, SessionEvent::FinalAnswerRecorded { answer: answer.clone(), usage })?;
        self.transition(live, SessionStatus::Succeeded, TransitionCause::Finalized, None)?;
        Ok(answer)
    }

    /// Performs the single next transition for the session's current status.
    pub fn advance(&self, id: &str) -> Result<Advance, EngineError> {
        let slot = self.live_slot(id)?;
        let mut live = slot.live.lock().unwrap();
        let r = self.advance_locked(&mut live);
        slot.wake.notify_all();
        r
    }

    fn advance_locked(&self, live: &mut Live) -> Result<Advance, EngineError> {
        if let Some(gate) = &live.session.pending_gate {
            return Ok(Advance::Blocked(gate.clone()));
        }
        match live.session.status {
            SessionStatus::Planning => self.plan_locked(live),
            SessionStatus::Executing => match live.session.pathway.next_ready().map(|s| s.id.clone()) {
                Some(step_id) => {
                    let r = self.execute_locked(live, &step_id)?;
                    Ok(Advance::Executed { step_id, ok: r.succeeded() })
                }
                None => {
                    self.fail(live, "no runnable step: pathway is blocked".into())?;
                    Ok(Advance::Terminal(SessionStatus::Failed))
                }
            },
            SessionStatus::Critiquing => self.critique_locked(live).map(Advance::Critiqued),
            SessionStatus::ToolGap => {
                let tool_id = self.handle_gap_locked(live)?;
                Ok(match &live.session.pending_gate {
                    Some(g) => Advance::Blocked(g.clone()),
                    None => Advance::ToolReady { tool_id },
                })
            }
            SessionStatus::AwaitingHuman => Err(EngineError::State { op: "advance", status: SessionStatus::AwaitingHuman }),
            SessionStatus::Finalizing => {
                self.finalize_locked(live)?;
                Ok(Advance::Terminal(SessionStatus::Succeeded))
            }
            s @ (SessionStatus::Succeeded | SessionStatus::Failed) => Ok(Advance::Terminal(s)),
        }
    }

    /// Drives until terminal or until a human gate opens. Unusable replies
    /// and exhausted provider retries fail the session with a diagnostic.
    pub fn run_until_blocked(&self, id: &str) -> Result<Session, EngineError> {
        let slot = self.live_slot(id)?;
        loop {
            let mut live = slot.live.lock().unwrap();
            let step = self.advance_locked(&mut live);
            slot.wake.notify_all();
            match step {
                Ok(Advance::Terminal(_)) | Ok(Advance::Blocked(_)) => return Ok(live.session.clone()),
                Ok(_) => {}
                Err(e @ (EngineError::Parse { .. } | EngineError::Provider(_))) => {
                    if !live.session.status.is_terminal() {
                        self.fail(&mut live, e.to_string())?;
                    }
                    return Ok(live.session.clone());
                }
                Err(EngineError::Tool(_)) if live.session.status.is_terminal() => return Ok(live.session.clone()),
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs to a terminal status, waiting at human gates for feedback.
    /// `gate_timeout` bounds each wait; `None` waits indefinitely.
    pub fn run_to_completion(&self, id: &str, gate_timeout: Option<Duration>) -> Result<Session, EngineError> {
        let slot = self.live_slot(id)?;
        loop {
            let session = self.run_until_blocked(id)?;
            if session.status.is_terminal() {
                return Ok(session);
            }
            let live = slot.live.lock().unwrap();
            let blocked = |l: &mut Live| l.session.status == SessionStatus::AwaitingHuman;
            match gate_timeout {
                None => drop(slot.wake.wait_while(live, blocked).unwrap()),
                Some(t) => {
                    let (live, res) = slot.wake.wait_timeout_while(live, t, blocked).unwrap();
                    if res.timed_out() {
                        return Err(EngineError::State { op: "run_to_completion", status: live.session.status });
                    }
                }
            }
        }
    }

    /// Blocks until the session reaches a terminal status.
    pub fn wait_terminal(&self, id: &str, timeout: Duration) -> Result<Session, EngineError> {
        let Some(slot) = self.slot(id) else { return self.session(id) };
        let live = slot.live.lock().unwrap();
        let (live, _) = slot.wake.wait_timeout_while(live, timeout, |l| !l.session.status.is_terminal()).unwrap();
        Ok(live.session.clone())
    }
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("settings", &self.settings).finish_non_exhaustive()
    }
}
