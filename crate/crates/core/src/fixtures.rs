//! Canned scripted scenarios. They drive the engine end to end without a
//! model and back the determinism, self-evolution and parity checks as well
//! as `evoflow run --fixture`.

use std::path::Path;
use std::sync::Arc;

use serde_json::json;

use crate::events::EventStore;
use crate::orchestrator::Engine;
use crate::provider::{Provider, ScriptEntry, ScriptedTranscript};
use crate::sandbox::Sandbox;
use crate::session::AgentRole::{Critic, Dev, Manager, ToolCreator};
use crate::templates::TemplateLibrary;
use crate::tools::ToolOcean;

pub const HAPPY_GOAL: &str = "Identify the transcription factor regulating metallothionein genes in HepG2 cells";

pub const HAPPY_ANSWER: &str = "MTF1 regulates the metallothionein genes MT1A and MT2A in HepG2 cells.";

const TWO_STEP_PLAN: &str =
    "1. Compute the overlap of candidate target genes\nDEPENDS: none\n2. Summarize the regulating factor\nDEPENDS: 1";

const OVERLAP_SCRIPT: &str = "```python\n\
with open(\"overlap.txt\", \"w\") as f:\n    f.write(\"MT1A\\nMT2A\\n\")\n\
print(\"overlap: MT1A MT2A\")\n```";

const SUMMARY_SCRIPT: &str = "```python\nprint(\"regulator: MTF1\")\n```";

/// Plan, two script steps both accepted, final answer. Strict order; all
/// six entries are consumed.
pub fn happy_path() -> ScriptedTranscript {
    ScriptedTranscript::strict(vec![
        ScriptEntry::new(Manager, "[plan]", TWO_STEP_PLAN),
        ScriptEntry::new(Dev, "[step s1]", OVERLAP_SCRIPT),
        ScriptEntry::new(Critic, "[critique s1]", "ACCEPT overlap computed from both lists"),
        ScriptEntry::new(Dev, "[step s2]", SUMMARY_SCRIPT),
        ScriptEntry::new(Critic, "[critique s2]", "ACCEPT"),
        ScriptEntry::new(Manager, "[final]", HAPPY_ANSWER),
    ])
}

pub const GAP_GOAL: &str = "Score the perturbation screen response of MTF1 in HepG2 cells";

pub const GAP_DESCRIPTION: &str = "This hypothesis is correct but not actionable; need a perturbation screen scoring tool";

pub const GAP_TOOL_NAME: &str = "perturbation_score";

pub const GAP_TOOL_SCRIPT: &str = "import json, sys\n\
args = json.loads(sys.argv[1])\n\
print(json.dumps({\"score\": len(args[\"gene\"]) / 10}))\n";

/// The tool creator's reply for the gap scenario.
pub fn gap_tool_draft() -> String {
    json!({
        "name": GAP_TOOL_NAME,
        "category": "custom_analysis",
        "description": "score a gene in a perturbation screen",
        "input_schema": {"gene": "text"},
        "output_schema": {"score": "number"},
        "script": GAP_TOOL_SCRIPT,
        "tests": [{"input": {"gene": "MTF1"}, "expect": {"field": "score", "equals": 0.4}}],
        "timeout_secs": 20
    })
    .to_string()
}

/// Pattern-matched scenario in which the first step asks for a tool that
/// does not exist yet. The critic reports a capability gap on the failed
/// step, the tool creator supplies it, and the step is rerun with it. Later
/// sessions with the same transcript find the tool already registered.
pub fn capability_gap() -> ScriptedTranscript {
    ScriptedTranscript::pattern(vec![
        ScriptEntry::new(
            Manager,
            "[plan]",
            TWO_STEP_PLAN.replace("Compute the overlap of candidate target genes", "Score MTF1 in the perturbation screen"),
        ),
        ScriptEntry::new(Dev, "[step s1]", format!("TOOL: {GAP_TOOL_NAME}\nARGS: {{\"gene\": \"MTF1\"}}")),
        ScriptEntry::new(Dev, "[step s2]", SUMMARY_SCRIPT),
        ScriptEntry::new(Critic, "OUTCOME: failed", format!("GAP {GAP_DESCRIPTION}")),
        ScriptEntry::new(Critic, "OUTCOME: completed", "ACCEPT"),
        ScriptEntry::new(ToolCreator, "[tool attempt", gap_tool_draft()),
        ScriptEntry::new(Manager, "[final]", "MTF1 scores 0.4 in the perturbation screen."),
    ])
}

/// Critic that never accepts: the session must fail once iterations run out.
pub fn always_revise() -> ScriptedTranscript {
    ScriptedTranscript::pattern(vec![
        ScriptEntry::new(Manager, "[plan]", "1. Compute the answer\nDEPENDS: none"),
        ScriptEntry::new(Manager, "[replan s1]", "Compute the answer more carefully"),
        ScriptEntry::new(Dev, "[step s1]", "```python\nprint(1)\n```"),
        ScriptEntry::new(Critic, "[critique s1]", "REVISE not convincing"),
    ])
}

/// Tool creator whose drafts always fail their embedded tests.
pub fn failing_tool_creator() -> ScriptedTranscript {
    let bad = json!({
        "name": "broken_tool",
        "category": "custom_analysis",
        "description": "always wrong",
        "input_schema": {"gene": "text"},
        "output_schema": {"score": "number"},
        "script": "import json\nprint(json.dumps({\"score\": -1}))\n",
        "tests": [{"input": {"gene": "MTF1"}, "expect": {"field": "score", "equals": 0.4}}]
    });
    ScriptedTranscript::pattern(vec![
        ScriptEntry::new(Manager, "[plan]", "1. Score MTF1\nDEPENDS: none"),
        ScriptEntry::new(Dev, "[step s1]", "```python\nimport sys\nsys.exit(1)\n```"),
        ScriptEntry::new(Critic, "[critique s1]", format!("GAP {GAP_DESCRIPTION}")),
        ScriptEntry::new(ToolCreator, "[tool attempt", bad.to_string()),
    ])
}

/// Engine over an in-memory store with empty library and registry; sandbox
/// workspaces live under `root`.
pub fn scripted_engine(transcript: ScriptedTranscript, root: &Path) -> Engine {
    let sandbox = Arc::new(Sandbox::new(root.join("workspaces")));
    let tools = Arc::new(ToolOcean::new(sandbox.clone()));
    Engine::new(
        Provider::scripted(transcript),
        Arc::new(TemplateLibrary::new()),
        tools,
        sandbox,
        Arc::new(EventStore::in_memory()),
    )
}
