use std::collections::BTreeSet;
use std::sync::Arc;

use evoflow_core::events::{log_fingerprint, replay_events};
use evoflow_core::fixtures::{self, scripted_engine};
use evoflow_core::orchestrator::{provider_call_bound, Advance, Engine, EngineError, EngineSettings};
use evoflow_core::provider::{ScriptEntry, ScriptedTranscript};
use evoflow_core::sandbox::ResourceLimits;
use evoflow_core::session::{
    AgentRole, Directive, Gate, GateFlags, HumanFeedback, MessageKind, SessionConfig, SessionEvent, SessionStatus, StepOutcome,
    Verdict,
};
use evoflow_core::templates::Template;
use evoflow_core::tools::ToolStatus;
use tempfile::TempDir;

fn engine(t: ScriptedTranscript) -> (TempDir, Engine) {
    let dir = tempfile::tempdir().unwrap();
    let e = scripted_engine(t, dir.path());
    (dir, e)
}

fn feedback(directive: Directive, body: &str) -> HumanFeedback {
    HumanFeedback { author: "reviewer".into(), target_step: None, directive, body: body.into() }
}

fn gated(post_plan: bool, pre_tool: bool) -> SessionConfig {
    SessionConfig { gates: GateFlags { post_plan, pre_tool_registration: pre_tool }, ..SessionConfig::default() }
}

#[test]
fn create_session_contract() {
    let (_d, e) = engine(fixtures::happy_path());
    let s = e.create_session("find resistance mechanism", SessionConfig::default()).unwrap();
    assert_eq!(s.status, SessionStatus::Planning);
    assert_eq!(s.iteration_count, 0);
    assert!(s.history.is_empty());
    let events = e.store().events(&s.id).unwrap();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].kind, "session_created");

    assert!(matches!(e.create_session("  ", SessionConfig::default()), Err(EngineError::Validation(_))));
    let zero = SessionConfig { max_iterations: 0, ..SessionConfig::default() };
    assert!(matches!(e.create_session("goal", zero), Err(EngineError::Validation(_))));
}

#[test]
fn happy_path_succeeds_and_replays() {
    let (_d, e) = engine(fixtures::happy_path());
    let id = e.create_session(fixtures::HAPPY_GOAL, SessionConfig::default()).unwrap().id;
    let s = e.run_until_blocked(&id).unwrap();
    assert_eq!(s.status, SessionStatus::Succeeded, "{:?}", s.failure);
    let answer = s.final_answer.clone().unwrap();
    assert_eq!(answer.answer, fixtures::HAPPY_ANSWER);
    assert_eq!(answer.supporting.iter().map(|r| r.step_id.as_str()).collect::<Vec<_>>(), ["s1", "s2"]);
    assert_eq!(s.step_results["s1"].stdout, "overlap: MT1A MT2A\n");
    assert_eq!(s.step_results["s1"].artifacts.len(), 1);
    assert!(s.history.windows(2).all(|w| w[1].seq == w[0].seq + 1));
    assert_eq!(s.usage.calls, 6);

    let events = e.store().events(&id).unwrap();
    assert_eq!(replay_events(&id, &events).unwrap().state_hash(), s.state_hash());
    assert_eq!(e.store().is_closed(&id), Some(true));
    assert!(!e.sandbox().root().join(&id).exists(), "workspace destroyed at terminal status");
}

#[test]
fn identical_runs_have_identical_logs() {
    let run = || {
        let (_d, e) = engine(fixtures::happy_path());
        let id = e.create_session(fixtures::HAPPY_GOAL, SessionConfig::default()).unwrap().id;
        let s = e.run_until_blocked(&id).unwrap();
        (log_fingerprint(&e.store().events(&id).unwrap()), s.state_hash())
    };
    assert_eq!(run(), run());
}

#[test]
fn malformed_plan_keeps_planning() {
    let (_d, e) =
        engine(ScriptedTranscript::strict(vec![ScriptEntry::new(AgentRole::Manager, "", "I think we should look at genes")]));
    let id = e.create_session("g", SessionConfig::default()).unwrap().id;
    let err = e.plan(&id).unwrap_err();
    assert!(matches!(err, EngineError::Parse { role: AgentRole::Manager, .. }), "{err}");
    assert_eq!(e.session(&id).unwrap().status, SessionStatus::Planning);
}

#[test]
fn provider_failure_is_retryable_and_keeps_planning() {
    let (_d, e) = engine(ScriptedTranscript::strict(vec![]));
    let id = e.create_session("g", SessionConfig::default()).unwrap().id;
    let err = e.plan(&id).unwrap_err();
    assert!(matches!(err, EngineError::Provider(_)));
    assert_eq!(e.session(&id).unwrap().status, SessionStatus::Planning);
}

#[test]
fn unmet_dependency_is_a_precondition_error() {
    let (_d, e) = engine(fixtures::happy_path());
    let id = e.create_session(fixtures::HAPPY_GOAL, SessionConfig::default()).unwrap().id;
    assert!(matches!(e.advance(&id).unwrap(), Advance::Planned { steps: 2 }));
    assert!(matches!(e.execute_step(&id, "s2"), Err(EngineError::Precondition(_))));
    assert!(matches!(e.critique(&id), Err(EngineError::State { .. })));
}

#[test]
fn timed_out_script_is_a_failed_result_the_critic_sees() {
    let dir = tempfile::tempdir().unwrap();
    let t = ScriptedTranscript::strict(vec![
        ScriptEntry::new(AgentRole::Manager, "[plan]", "1. wait\nDEPENDS: none"),
        ScriptEntry::new(AgentRole::Dev, "[step s1]", "```python\nimport time\ntime.sleep(30)\n```"),
        ScriptEntry::new(AgentRole::Critic, "OUTCOME: failed (timeout)", "REVISE too slow"),
    ]);
    let settings =
        EngineSettings { step_limits: ResourceLimits { wall_clock_secs: 1, ..Default::default() }, ..Default::default() };
    let e = scripted_engine(t, dir.path()).with_settings(settings);
    let id = e.create_session("wait", SessionConfig::default()).unwrap().id;
    e.plan(&id).unwrap();
    let r = e.execute_step(&id, "s1").unwrap();
    assert_eq!(r.outcome, StepOutcome::Failed { reason: "timeout".into() });
    assert_eq!(e.critique(&id).unwrap().verdict, Verdict::Revise);
    let s = e.session(&id).unwrap();
    assert_eq!(s.status, SessionStatus::Planning);
    assert_eq!(s.iteration_count, 1);
}

#[test]
fn capability_gap_creates_tool_and_finishes() {
    let (_d, e) = engine(fixtures::capability_gap());
    let id = e.create_session(fixtures::GAP_GOAL, SessionConfig::default()).unwrap().id;
    assert_eq!(e.tools().len(), 0);
    let s = e.run_until_blocked(&id).unwrap();
    assert_eq!(s.status, SessionStatus::Succeeded, "{:?}", s.failure);
    assert_eq!(e.tools().len(), 1);
    let tool = e.tools().find_by_name(fixtures::GAP_TOOL_NAME).unwrap();
    assert_eq!(tool.status, ToolStatus::Validated);
    assert_eq!(s.adopted_tools, vec![tool.id.clone()]);

    let kinds: Vec<MessageKind> = s.history.iter().map(|m| m.kind).collect();
    let gap = kinds.iter().position(|k| *k == MessageKind::GapReport).unwrap();
    let ready = kinds.iter().position(|k| *k == MessageKind::ToolReady).unwrap();
    assert!(gap < ready);
    assert!(s.step_results["s1"].stdout.contains("0.4"));
    assert!(s.pathway.steps[0].description.contains("[tool: perturbation_score]"));

    let invoked: Vec<_> = e
        .store()
        .events(&id)
        .unwrap()
        .iter()
        .filter_map(|ev| match ev.session_event().unwrap() {
            SessionEvent::ToolInvoked { validated, .. } => Some(validated),
            _ => None,
        })
        .collect();
    assert_eq!(invoked, vec![true]);
}

#[test]
fn always_revise_fails_after_max_iterations() {
    let (_d, e) = engine(fixtures::always_revise());
    let config = SessionConfig { max_iterations: 3, ..SessionConfig::default() };
    let id = e.create_session("compute", config).unwrap().id;
    let s = e.run_until_blocked(&id).unwrap();
    assert_eq!(s.status, SessionStatus::Failed);
    assert_eq!(s.iteration_count, 3);
    assert!(s.failure.unwrap().contains("max_iterations (3) exhausted"));
    assert!(s.usage.calls <= provider_call_bound(3, 1, 2));
    assert!(s.final_answer.is_none());
}

#[test]
fn failing_tool_creation_fails_session_and_quarantines_draft() {
    let (_d, e) = engine(fixtures::failing_tool_creator());
    let id = e.create_session("score", SessionConfig::default()).unwrap().id;
    let s = e.run_until_blocked(&id).unwrap();
    assert_eq!(s.status, SessionStatus::Failed);
    assert!(s.failure.unwrap().contains("tool creation failed"));
    let drafted = e.store().events(&id).unwrap().iter().filter(|ev| ev.kind == "tool_drafted").count();
    assert_eq!(drafted, 3);
    assert!(e.tools().list().iter().all(|m| m.status == ToolStatus::Draft));
}

#[test]
fn post_plan_gate_approve_and_reject() {
    let (_d, e) = engine(ScriptedTranscript::pattern(fixtures::happy_path().entries));
    let id = e.create_session(fixtures::HAPPY_GOAL, gated(true, false)).unwrap().id;
    assert_eq!(e.advance(&id).unwrap(), Advance::Blocked(Gate::PostPlan));
    assert_eq!(e.session(&id).unwrap().status, SessionStatus::AwaitingHuman);
    assert_eq!(e.advance(&id).unwrap(), Advance::Blocked(Gate::PostPlan));

    let ack = e.inject_feedback(&id, feedback(Directive::Reject, "focus on zinc response")).unwrap();
    assert_eq!(ack.status, SessionStatus::Planning);
    let s = e.session(&id).unwrap();
    assert_eq!(s.iteration_count, 1);
    let last = s.history.last().unwrap();
    assert_eq!((last.kind, last.from_role), (MessageKind::HumanFeedback, AgentRole::Human));
    assert_eq!(last.payload["author"], "reviewer");

    assert_eq!(e.advance(&id).unwrap(), Advance::Blocked(Gate::PostPlan));
    let ack = e.inject_feedback(&id, feedback(Directive::Approve, "")).unwrap();
    assert_eq!(ack.status, SessionStatus::Executing);
    let s = e.run_until_blocked(&id).unwrap();
    assert_eq!(s.status, SessionStatus::Succeeded);
    let planning_request = e
        .store()
        .events(&id)
        .unwrap()
        .iter()
        .filter_map(|ev| match ev.session_event().unwrap() {
            SessionEvent::ProviderExchange { role: AgentRole::Manager, request, .. } if request.contains("[plan]") => {
                Some(request)
            }
            _ => None,
        })
        .nth(1)
        .unwrap();
    assert!(planning_request.contains("FEEDBACK: focus on zinc response"));

    let err = e.inject_feedback(&id, feedback(Directive::Comment, "late")).unwrap_err();
    assert!(matches!(err, EngineError::State { status: SessionStatus::Succeeded, .. }));
}

#[test]
fn run_to_completion_waits_for_gate_approval() {
    let (_d, e) = engine(ScriptedTranscript::pattern(fixtures::happy_path().entries));
    let e = Arc::new(e);
    let id = e.create_session(fixtures::HAPPY_GOAL, gated(true, false)).unwrap().id;
    let runner = {
        let (e, id) = (e.clone(), id.clone());
        std::thread::spawn(move || e.run_to_completion(&id, Some(std::time::Duration::from_secs(20))))
    };
    while e.session(&id).unwrap().status != SessionStatus::AwaitingHuman {
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
    e.inject_feedback(&id, feedback(Directive::Approve, "")).unwrap();
    let s = runner.join().unwrap().unwrap();
    assert_eq!(s.status, SessionStatus::Succeeded);
}

#[test]
fn pre_tool_registration_gate() {
    let (_d, e) = engine(fixtures::capability_gap());
    let id = e.create_session(fixtures::GAP_GOAL, gated(false, true)).unwrap().id;
    let s = e.run_until_blocked(&id).unwrap();
    assert_eq!(s.status, SessionStatus::AwaitingHuman);
    let Some(Gate::PreToolRegistration { tool_id }) = s.pending_gate.clone() else { panic!("{:?}", s.pending_gate) };
    assert!(s.adopted_tools.is_empty());
    e.inject_feedback(&id, feedback(Directive::Approve, "looks right")).unwrap();
    let s = e.run_until_blocked(&id).unwrap();
    assert_eq!(s.status, SessionStatus::Succeeded);
    assert_eq!(s.adopted_tools, vec![tool_id]);
}

#[test]
fn matching_template_seeds_the_plan() {
    let (_d, e) = engine(fixtures::happy_path());
    let tags: BTreeSet<String> = evoflow_core::rank::token_set(fixtures::HAPPY_GOAL);
    let t = Template::new("metallothionein regulation", tags, vec!["Compute overlap".into(), "Summarize".into()], "sess-x");
    let tid = t.id.clone();
    e.templates().insert(t).unwrap();
    let id = e.create_session(fixtures::HAPPY_GOAL, SessionConfig::default()).unwrap().id;
    e.plan(&id).unwrap();
    let s = e.session(&id).unwrap();
    assert_eq!(s.pathway.template_origin.as_deref(), Some(tid.as_str()));
    assert_eq!(e.templates().get(&tid).unwrap().usage_count, 1);
}

#[test]
fn unrelated_template_is_ignored() {
    let (_d, e) = engine(fixtures::happy_path());
    let t = Template::new("crystal growth", ["crystal".to_string(), "lattice".to_string()].into(), vec!["Grow".into()], "sess-x");
    let tid = t.id.clone();
    e.templates().insert(t).unwrap();
    let id = e.create_session(fixtures::HAPPY_GOAL, SessionConfig::default()).unwrap().id;
    e.plan(&id).unwrap();
    assert_eq!(e.session(&id).unwrap().pathway.template_origin, None);
    assert_eq!(e.templates().get(&tid).unwrap().usage_count, 0);
}
