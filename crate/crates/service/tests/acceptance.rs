//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any FAIL.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use evoflow_core::bench::{
    evaluate, sample_subset, sweep_budgets, synthetic_items, AgentRunner, ItemOutcome, RunReport, ScriptedAnswers, SweepConfig,
    SyntheticAgent,
};
use evoflow_core::events::{log_fingerprint, replay_file, EventStore};
use evoflow_core::fixtures;
use evoflow_core::orchestrator::Engine;
use evoflow_core::provider::Provider;
use evoflow_core::sandbox::{Confinement, ExitStatus, KillReason, ResourceLimits, Sandbox};
use evoflow_core::session::{SessionConfig, SessionStatus};
use evoflow_core::templates::TemplateLibrary;
use evoflow_core::tools::{Provenance, ToolDraft, ToolError, ToolOcean, ToolStatus};
use evoflow_core::trials::{expected_majority_accuracy, run_trials, TrialBudget, TrialTask};
use evoflow_service::app::{router, AppState};
use evoflow_service::config::RunConfig;
use evoflow_service::runtime::Runtime;
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Every engine or registry built here is audited at the end.
#[derive(Default)]
struct Audit {
    stores: Vec<Arc<EventStore>>,
    oceans: Vec<Arc<ToolOcean>>,
}

static AUDIT: Mutex<Option<Audit>> = Mutex::new(None);

fn track_engine(engine: &Engine) {
    track(engine.store().clone(), engine.tools().clone());
}

fn track(store: Arc<EventStore>, ocean: Arc<ToolOcean>) {
    let mut a = AUDIT.lock().unwrap();
    let a = a.get_or_insert_with(Audit::default);
    a.stores.push(store);
    a.oceans.push(ocean);
}

fn file_engine(transcript: evoflow_core::provider::ScriptedTranscript, root: &Path) -> Result<Engine, String> {
    let sandbox = Arc::new(Sandbox::new(root.join("sandbox")));
    let engine = Engine::new(
        Provider::scripted(transcript),
        Arc::new(TemplateLibrary::new()),
        Arc::new(ToolOcean::new(sandbox.clone())),
        sandbox,
        Arc::new(EventStore::open(root.join("events")).map_err(err)?),
    );
    track_engine(&engine);
    Ok(engine)
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let mut prints = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        let engine = file_engine(fixtures::happy_path(), &root)?;
        let id = engine.create_session(fixtures::HAPPY_GOAL, SessionConfig::default()).map_err(err)?.id;
        let live = engine.run_to_completion(&id, None).map_err(err)?;
        ensure(live.status == SessionStatus::Succeeded, || format!("run {run} ended {}: {:?}", live.status, live.failure))?;
        let replayed = replay_file(&root.join("events/sessions").join(format!("{id}.jsonl"))).map_err(err)?;
        ensure(replayed.truncated.is_none(), || "log truncated".into())?;
        ensure(replayed.session.state_hash() == live.state_hash(), || format!("run {run}: replay hash differs from live"))?;
        let events = engine.store().events(&id).map_err(err)?;
        prints.push((log_fingerprint(&events), live.state_hash(), events.len()));
    }
    ensure(prints[0] == prints[1], || format!("logs differ: {:?} vs {:?}", prints[0], prints[1]))?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("{} events, identical fingerprints, replay = live, {:.2}s", prints[0].2, elapsed.as_secs_f64()))
}

fn scaling_law() -> Outcome {
    let started = Instant::now();
    let items = synthetic_items(100, 2024);
    let budgets = [1u32, 3, 5, 9];
    // One 100-item run has a standard deviation of about 0.05, the size of
    // the tolerance, so the mean is taken over 30 seeded repetitions.
    let sweep = SweepConfig::new(&budgets, 30).map_err(err)?;
    let (table, _) =
        sweep_budgets(|_, _, _| Box::new(SyntheticAgent { p: 0.6 }) as Box<dyn AgentRunner>, &items, &sweep).map_err(err)?;

    // Brute-force check of the oracle over all 2^9 outcome vectors.
    let brute: f64 = (0u32..1 << 9)
        .map(|m| {
            let k = m.count_ones() as i32;
            if k >= 5 {
                0.6f64.powi(k) * 0.4f64.powi(9 - k)
            } else {
                0.0
            }
        })
        .sum();
    let oracle9 = expected_majority_accuracy(0.6, 9).map_err(err)?;
    ensure((brute - oracle9).abs() < 1e-12, || format!("oracle {oracle9} != enumeration {brute}"))?;

    let mut measured = Vec::new();
    for n in budgets {
        let want = expected_majority_accuracy(0.6, n).map_err(err)?;
        let got = table.mean_accuracy(n).ok_or("missing mean row")?;
        ensure((got - want).abs() <= 0.05, || format!("budget {n}: measured {got:.4}, oracle {want:.4}"))?;
        measured.push((n, got, want));
    }
    ensure(measured.windows(2).all(|w| w[1].1 >= w[0].1), || format!("curve not non-decreasing: {measured:?}"))?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    let curve: Vec<String> = measured.iter().map(|(n, g, w)| format!("n={n}: {g:.4} vs {w:.4}")).collect();
    Ok(curve.join(", "))
}

fn self_evolution() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let engine = fixtures::scripted_engine(fixtures::capability_gap(), dir.path());
    track_engine(&engine);
    let task = TrialTask { goal: fixtures::GAP_GOAL.into(), config: SessionConfig::default(), expected: None };
    let results = run_trials(&engine, &task, TrialBudget::new(3).map_err(err)?).map_err(err)?;
    ensure(results.len() == 3, || format!("{} trials", results.len()))?;
    ensure(results.iter().all(|r| r.succeeded), || format!("not all trials succeeded: {results:?}"))?;

    let sessions: Vec<_> = results.iter().map(|r| engine.session(&r.session_ref)).collect::<Result<_, _>>().map_err(err)?;
    ensure(sessions[0].pathway.template_origin.is_none(), || "trial 1 had nothing to adopt".into())?;
    for s in &sessions[1..] {
        let origin = s.pathway.template_origin.as_ref().ok_or_else(|| format!("{} planned without a template", s.id))?;
        ensure(engine.templates().get(origin).is_some(), || format!("{} adopted unknown template {origin}", s.id))?;
    }

    let tool = engine.tools().find_by_name(fixtures::GAP_TOOL_NAME).ok_or("created tool missing from the registry")?;
    ensure(tool.status == ToolStatus::Validated, || format!("tool is {:?}", tool.status))?;
    ensure(tool.provenance == Provenance::Created, || "tool not marked created".into())?;
    ensure(tool.created_in_session.as_deref() == Some(results[0].session_ref.as_str()), || {
        format!("tool created in {:?}, not trial 1", tool.created_in_session)
    })?;
    for r in &results[1..] {
        let drafted = engine.store().events(&r.session_ref).map_err(err)?.iter().filter(|e| e.kind == "tool_drafted").count();
        ensure(drafted == 0, || format!("{} drafted {drafted} tools instead of reusing", r.session_ref))?;
        let adopted = &engine.session(&r.session_ref).map_err(err)?.pathway.steps[0];
        ensure(adopted.status == evoflow_core::session::StepStatus::Done, || {
            format!("{}: step s1 {:?}", r.session_ref, adopted.status)
        })?;
    }

    let t: Vec<usize> = results.iter().map(|r| r.templates_after).collect();
    let k: Vec<usize> = results.iter().map(|r| r.tools_after).collect();
    ensure(t[0] == 1 && t.windows(2).all(|w| w[1] >= w[0]), || format!("library sizes {t:?}"))?;
    ensure(k == vec![1, 1, 1], || format!("registry sizes {k:?}"))?;
    Ok(format!(
        "templates {t:?}, tools {k:?}, trials 2-3 adopted {:?}",
        sessions[1].pathway.template_origin.as_deref().map(|s| &s[..12])
    ))
}

fn tool_gating() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let ocean = Arc::new(ToolOcean::new(Arc::new(Sandbox::new(dir.path()))));
    track(Arc::new(EventStore::in_memory()), ocean.clone());
    let draft: ToolDraft = serde_json::from_str(&fixtures::gap_tool_draft()).map_err(err)?;
    let (manifest, script) = draft.into_manifest(None);
    let id = ocean.register(manifest, Some(script)).map_err(err)?;
    let args: BTreeMap<String, Value> = [("gene".to_string(), json!("MTF1"))].into();

    match ocean.invoke(&id, &args) {
        Err(ToolError::Gated { status: ToolStatus::Draft, .. }) => {}
        other => return Err(format!("draft invocation was not refused: {other:?}")),
    }
    let report = ocean.validate(&id).map_err(err)?;
    ensure(report.passed, || format!("validation failed: {:?}", report.diagnostics()))?;
    let out = ocean.invoke(&id, &args).map_err(err)?;
    ensure(out.get("score") == Some(&json!(0.4)), || format!("unexpected output {out:?}"))?;
    Ok("draft refused, validated, then invoked".into())
}

/// Every `tool_invoked` event in every log written during this run must name
/// a tool that was validated before the call: predefined, or passed a
/// `tool_validation` earlier in session order. Registries must agree.
fn invocation_audit() -> Outcome {
    let audit = AUDIT.lock().unwrap().take().unwrap_or_default();
    let mut invocations = 0usize;
    let mut logs = 0usize;
    for (store, ocean) in audit.stores.iter().zip(&audit.oceans) {
        for rec in ocean.invocations() {
            ensure(rec.status_at_invocation == ToolStatus::Validated, || {
                format!("registry ran {} while {:?}", rec.tool_id, rec.status_at_invocation)
            })?;
        }
        let mut validated: BTreeSet<String> = ocean
            .list()
            .into_iter()
            .filter(|m| m.provenance == Provenance::Predefined && m.status == ToolStatus::Validated)
            .map(|m| m.id)
            .collect();
        for sid in store.session_ids() {
            logs += 1;
            for e in store.events(&sid).map_err(err)? {
                match e.kind.as_str() {
                    "tool_validation" if e.payload["passed"] == true => {
                        validated.insert(e.payload["tool_id"].as_str().unwrap_or_default().to_string());
                    }
                    "tool_invoked" => {
                        invocations += 1;
                        let tid = e.payload["tool_id"].as_str().unwrap_or_default();
                        ensure(validated.contains(tid), || {
                            format!("{sid} seq {} invoked non-validated tool {tid}", e.global_seq)
                        })?;
                    }
                    _ => {}
                }
            }
        }
    }
    ensure(invocations > 0, || "audit saw no invocations at all".into())?;
    Ok(format!("{invocations} invocations across {logs} session logs, all of validated tools"))
}

fn sandbox() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let sb = Sandbox::new(dir.path().join("root"));
    let limits = |wall| ResourceLimits { wall_clock_secs: wall, cpu_time_secs: 30, ..Default::default() };

    let ws = sb.create_workspace(None, &[], limits(2)).map_err(err)?;
    let t0 = Instant::now();
    let r = sb.run_script(&ws, "while True:\n    pass\n", &[]).map_err(err)?;
    let took = t0.elapsed();
    ensure(r.exit == ExitStatus::Killed { reason: KillReason::Timeout }, || format!("timeout fixture exited {:?}", r.exit))?;
    ensure(took < Duration::from_secs(2 + 5), || format!("kill took {took:?}"))?;

    ensure(matches!(sb.confinement(), Confinement::Landlock { .. }), || {
        "file-write confinement is not available on this host".into()
    })?;
    let victim = dir.path().join("victim.txt");
    std::fs::write(&victim, "orig").map_err(err)?;
    let escape = format!(
        "import os\nfor p in ['../../../../escape.txt', {v:?}, '/tmp/evoflow-acceptance-escape']:\n    try:\n        open(p, 'w').write('x')\n    except OSError:\n        pass\ntry:\n    os.remove({v:?})\nexcept OSError:\n    pass\nopen('ok.txt', 'w').write('inside')\n",
        v = victim.to_string_lossy()
    );
    let ws2 = sb.create_workspace(None, &[], limits(10)).map_err(err)?;
    let before2 = snapshot(dir.path(), &ws2.root_dir);
    let r = sb.run_script(&ws2, &escape, &[]).map_err(err)?;
    ensure(r.exit.success(), || format!("escape fixture crashed: {}", r.stderr))?;
    ensure(snapshot(dir.path(), &ws2.root_dir) == before2, || "files outside the workspace changed".into())?;
    ensure(!Path::new("/tmp/evoflow-acceptance-escape").exists(), || "wrote to /tmp".into())?;
    ensure(std::fs::read_to_string(&victim).ok().as_deref() == Some("orig"), || "victim file modified".into())?;

    let det = "with open('out.txt', 'w') as f:\n    f.write('\\n'.join(str(i * i) for i in range(100)))\n";
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let ws = sb.create_workspace(None, &[], limits(10)).map_err(err)?;
        let r = sb.run_script(&ws, det, &[]).map_err(err)?;
        hashes.push(r.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone())).collect::<Vec<_>>());
    }
    ensure(!hashes[0].is_empty() && hashes[0] == hashes[1], || format!("artifact hashes differ: {hashes:?}"))?;
    Ok(format!("timeout killed after {:.1}s, escape contained, artifact hash stable", took.as_secs_f64()))
}

/// Path → contents for every file under `root` outside `exclude`.
fn snapshot(root: &Path, exclude: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = std::fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.starts_with(exclude) {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.to_string_lossy().into_owned(), std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn eight_items() -> Vec<evoflow_core::bench::BenchmarkItem> {
    let text: String = (0..8)
        .map(|i| format!("{{\"id\":\"i{i}\",\"question\":\"q{i}\",\"choices\":[\"a\",\"b\",\"c\"],\"gold\":\"A\"}}\n"))
        .collect();
    evoflow_core::bench::parse_dataset(&text).unwrap()
}

fn scoring() -> Outcome {
    let items = eight_items();
    let mut answers = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let a = match i {
            0..=4 => Some("A".to_string()),
            5 | 6 => Some("B".to_string()),
            _ => None,
        };
        answers.insert(item.id.clone(), a);
    }
    let r = evaluate(&mut ScriptedAnswers(answers), &items, TrialBudget::new(1).map_err(err)?, 0).map_err(err)?;
    ensure(r.accuracy == 0.625, || format!("accuracy {}", r.accuracy))?;
    ensure((r.precision - 0.7142857).abs() <= 1e-6, || format!("precision {}", r.precision))?;
    ensure(r.coverage == 0.875, || format!("coverage {}", r.coverage))?;

    let mut runner = TestRunner::new(PtConfig { cases: 1000, failure_persistence: None, ..PtConfig::default() });
    let outcome = (0usize..60, proptest::collection::vec((any::<bool>(), any::<bool>()), 0..60));
    runner
        .run(&outcome.prop_map(|(_, v)| v), |cases| {
            let per_item: Vec<ItemOutcome> = cases
                .iter()
                .enumerate()
                .map(|(i, &(answered, right))| ItemOutcome {
                    item_id: format!("x{i}"),
                    predicted: answered.then(|| if right { "A".into() } else { "B".into() }),
                    correct: answered && right,
                    note: None,
                })
                .collect();
            let total = per_item.len();
            let answered = cases.iter().filter(|c| c.0).count();
            let correct = cases.iter().filter(|c| c.0 && c.1).count();
            let r = RunReport::from_outcomes(per_item, TrialBudget::new(1).unwrap(), 0);
            for v in [r.accuracy, r.precision, r.coverage] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if total > 0 {
                prop_assert!((r.accuracy - correct as f64 / total as f64).abs() < 1e-12);
                prop_assert!((r.coverage - answered as f64 / total as f64).abs() < 1e-12);
                prop_assert!((r.accuracy - r.precision * r.coverage).abs() < 1e-12);
            }
            prop_assert!(r.accuracy <= r.coverage + 1e-12);
            prop_assert_eq!(r.precision_undefined, answered == 0);
            if answered > 0 {
                prop_assert!((r.precision - correct as f64 / answered as f64).abs() < 1e-12);
            } else {
                prop_assert_eq!(r.precision, 0.0);
            }
            Ok(())
        })
        .map_err(|e| format!("metric identity violated: {e}"))?;
    Ok(format!("acc {} prec {:.7} cov {}; 1000 random reports hold the identities", r.accuracy, r.precision, r.coverage))
}

fn sampling() -> Outcome {
    let items = synthetic_items(400, 5);
    let a = sample_subset(&items, 0.125, 42).map_err(err)?;
    let b = sample_subset(&items, 0.125, 42).map_err(err)?;
    ensure(a.len() == 50, || format!("{} items", a.len()))?;
    let ids = |v: &[evoflow_core::bench::BenchmarkItem]| v.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
    ensure(ids(&a) == ids(&b), || "same seed gave a different subset".into())?;
    let pos: Vec<usize> = a.iter().map(|x| items.iter().position(|y| y.id == x.id).unwrap()).collect();
    ensure(pos.windows(2).all(|w| w[0] < w[1]), || "subset not in dataset order".into())?;
    let other = sample_subset(&items, 0.125, 43).map_err(err)?;
    ensure(ids(&other) != ids(&a), || "different seeds gave the same subset".into())?;
    Ok("50 of 400, identical under repetition".into())
}

fn three_run_average() -> Outcome {
    let items = synthetic_items(60, 9);
    let sweep = SweepConfig::new(&[1, 5], 3).map_err(err)?;
    let (table, _) =
        sweep_budgets(|_, _, _| Box::new(SyntheticAgent { p: 0.55 }) as Box<dyn AgentRunner>, &items, &sweep).map_err(err)?;
    let mut notes = Vec::new();
    for n in [1u32, 5] {
        let reps: Vec<f64> = table.rows.iter().filter(|r| r.budget == n && r.repetition.is_some()).map(|r| r.accuracy).collect();
        ensure(reps.len() == 3, || format!("budget {n}: {} repetitions", reps.len()))?;
        let want = (reps[0] + reps[1] + reps[2]) / 3.0;
        let got = table.mean_accuracy(n).ok_or("missing mean row")?;
        ensure(got == want, || format!("budget {n}: mean {got} != {want}"))?;
        notes.push(format!("n={n}: {reps:?} -> {got}"));
    }
    ensure(table.to_csv().lines().filter(|l| l.contains(",mean,")).count() == 2, || "CSV lacks mean rows".into())?;
    Ok(notes.join("; "))
}

fn parity() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = |sub: &str| RunConfig { data_dir: dir.path().join(sub), ..RunConfig::default() };

    let rt = Runtime::open(config("inproc")).map_err(err)?;
    track_engine(&rt.engine);
    let id = rt.engine.create_session(fixtures::HAPPY_GOAL, rt.config.session_config()).map_err(err)?.id;
    let inproc = rt.engine.run_to_completion(&id, None).map_err(err)?.state_hash();

    let out = Command::new(env!("CARGO_BIN_EXE_evoflow"))
        .arg("--data-dir")
        .arg(dir.path().join("cli"))
        .args(["run", "--json", fixtures::HAPPY_GOAL])
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || format!("cli failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    let v: Value = serde_json::from_slice(&out.stdout).map_err(err)?;
    let cli = v["sessions"][0]["state_hash"].as_str().unwrap_or_default().to_string();
    let cli_rt = Runtime::open(config("cli")).map_err(err)?;
    track_engine(&cli_rt.engine);

    let http_rt = Runtime::open(config("http")).map_err(err)?;
    track_engine(&http_rt.engine);
    let tokio = tokio::runtime::Runtime::new().map_err(err)?;
    let http: Result<String, String> = tokio.block_on(async move {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(err)?;
        let base = format!("http://{}", listener.local_addr().map_err(err)?);
        tokio::spawn(async move { axum::serve(listener, router(AppState::new(http_rt))).await });
        let client = reqwest::Client::new();
        let created: Value = client
            .post(format!("{base}/sessions"))
            .json(&json!({"goal": fixtures::HAPPY_GOAL}))
            .send()
            .await
            .map_err(err)?
            .json()
            .await
            .map_err(err)?;
        let sid = created["id"].as_str().ok_or("no session id")?.to_string();
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let s: Value = client.get(format!("{base}/sessions/{sid}")).send().await.map_err(err)?.json().await.map_err(err)?;
            if s["status"] == "succeeded" {
                return Ok(s["state_hash"].as_str().unwrap_or_default().to_string());
            }
            ensure(s["status"] != "failed", || format!("http session failed: {}", s["failure"]))?;
            ensure(Instant::now() < deadline, || "http session did not finish".into())?;
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
    });
    let http = http?;
    ensure(!cli.is_empty() && cli == inproc && http == inproc, || format!("in-process {inproc}, cli {cli}, http {http}"))?;
    Ok(format!("in-process = CLI = HTTP = {}", &inproc[..16]))
}

fn main() {
    let criteria: [Check; 10] = [
        ("determinism", determinism),
        ("scaling-law oracle", scaling_law),
        ("self-evolution channel", self_evolution),
        ("tool gating", tool_gating),
        ("sandbox", sandbox),
        ("scoring", scoring),
        ("sampling protocol", sampling),
        ("three-run averaging", three_run_average),
        ("http/cli parity", parity),
        // Runs last so it sees every log the checks above wrote.
        ("tool gating: invocation audit", invocation_audit),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
