//! Browser bindings over the pure parts of evoflow-core. Every export takes
//! plain values and returns a JSON string, so the page needs no glue types.

use evoflow_core::bench::{sweep_budgets, synthetic_items, AgentRunner, ItemOutcome, RunReport, SweepConfig, SyntheticAgent};
use evoflow_core::templates::{Template, TemplateLibrary};
use evoflow_core::trials::{expected_majority_accuracy, TrialBudget};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn error(message: impl std::fmt::Display) -> String {
    json!({ "error": message.to_string() }).to_string()
}

/// Oracle accuracy of a majority vote over n independent trials, for odd n
/// up to `max_n`.
#[wasm_bindgen]
pub fn majority_curve(p: f64, max_n: u32) -> String {
    let points: Result<Vec<Value>, _> = (1..=max_n.min(99))
        .step_by(2)
        .map(|n| expected_majority_accuracy(p, n).map(|acc| json!({ "n": n, "accuracy": acc })))
        .collect();
    match points {
        Ok(points) => json!({ "p": p, "points": points }).to_string(),
        Err(e) => error(e),
    }
}

/// Simulated budget sweep with the synthetic agent, next to the oracle.
/// `budgets` is a comma-separated list of odd trial counts.
#[wasm_bindgen]
pub fn simulate_sweep(p: f64, n_items: u32, budgets: &str, repetitions: u32, seed: u32) -> String {
    if !(0.0..=1.0).contains(&p) {
        return error(format!("p must be in [0, 1], got {p}"));
    }
    let budgets: Result<Vec<u32>, _> = budgets.split(',').map(|b| b.trim().parse::<u32>()).collect();
    let Ok(budgets) = budgets else { return error("budgets must be comma-separated integers") };
    if n_items == 0 || n_items > 5000 {
        return error("items must be between 1 and 5000");
    }
    let mut sweep = match SweepConfig::new(&budgets, repetitions.clamp(1, 50)) {
        Ok(s) => s,
        Err(e) => return error(e),
    };
    sweep.seeds = (0..sweep.repetitions).map(|r| seed as u64 + r as u64).collect();
    let items = synthetic_items(n_items as usize, seed as u64);
    let table = match sweep_budgets(|_, _, _| Box::new(SyntheticAgent { p }) as Box<dyn AgentRunner>, &items, &sweep) {
        Ok((table, _)) => table,
        Err(e) => return error(e),
    };
    let means: Vec<Value> = table
        .mean_rows()
        .map(|r| {
            json!({
                "n": r.budget,
                "accuracy": r.accuracy,
                "stddev": r.accuracy_stddev,
                "oracle": expected_majority_accuracy(p, r.budget).ok(),
            })
        })
        .collect();
    json!({ "means": means, "csv": table.to_csv() }).to_string()
}

/// Ranks templates (one per line: `title | step; step; ...`) against a goal.
#[wasm_bindgen]
pub fn rank_templates(goal: &str, templates: &str) -> String {
    let library = TemplateLibrary::new();
    for (i, line) in templates.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let (title, steps) = line.split_once('|').unwrap_or((line, "analyse"));
        let title = title.trim();
        let skeleton: Vec<String> = steps.split(';').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        let tags: Vec<String> =
            title.split(|c: char| !c.is_alphanumeric() && c != '-').filter(|w| w.len() > 2).map(str::to_lowercase).collect();
        if tags.is_empty() || skeleton.is_empty() {
            return error(format!("line {}: needs a title and at least one step", i + 1));
        }
        // Built from JSON because the wasm target has no clock for Template::new.
        let template: Template = match serde_json::from_value(json!({
            "id": Template::content_id(title, &skeleton),
            "title": title,
            "tags": tags,
            "pathway_skeleton": skeleton,
            "provenance_session": format!("demo-{}", i + 1),
            "success_metric": 1.0,
            "usage_count": 0,
            "created_at": "2025-01-01T00:00:00Z",
        })) {
            Ok(t) => t,
            Err(e) => return error(e),
        };
        if let Err(e) = library.insert(template) {
            return error(e);
        }
    }
    if library.is_empty() {
        return error("no templates given");
    }
    let ranked: Vec<Value> = library
        .retrieve(goal, library.len())
        .into_iter()
        .map(|(t, score)| json!({ "title": t.title, "score": score, "steps": t.pathway_skeleton }))
        .collect();
    json!({ "ranked": ranked }).to_string()
}

/// Scores `gold,predicted` lines; an empty prediction is an abstention.
#[wasm_bindgen]
pub fn score_predictions(lines: &str) -> String {
    let mut outcomes = Vec::new();
    for (i, line) in lines.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let (gold, predicted) = line.split_once(',').unwrap_or((line, ""));
        let (gold, predicted) = (gold.trim(), predicted.trim());
        if gold.is_empty() {
            return error(format!("line {}: missing gold label", i + 1));
        }
        let predicted = (!predicted.is_empty()).then(|| predicted.to_string());
        outcomes.push(ItemOutcome {
            item_id: format!("item-{}", i + 1),
            correct: predicted.as_deref() == Some(gold),
            predicted,
            note: None,
        });
    }
    if outcomes.is_empty() {
        return error("no items");
    }
    let report = RunReport::from_outcomes(outcomes, TrialBudget::new(1).expect("1 is a valid budget"), 0);
    json!({
        "total": report.total(),
        "answered": report.answered(),
        "correct": report.correct(),
        "accuracy": report.accuracy,
        "precision": report.precision,
        "precision_undefined": report.precision_undefined,
        "coverage": report.coverage,
    })
    .to_string()
}
