//! Multiple-choice benchmark harness: dataset loading, seeded subset
//! sampling, budgeted evaluation with abstention-aware scoring, and budget
//! sweeps written as a CSV curve table.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::hash::sha256_hex;
use crate::orchestrator::Engine;
use crate::session::SessionConfig;
use crate::trials::{
    aggregate, run_trials, AggregateAnswer, CriticAdjudicator, FirstGiven, TrialBudget, TrialResult, TrialTask, ABSTAIN,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Load { line: usize, message: String },
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("sample of {fraction} from {n} items is empty")]
    EmptySample { fraction: f64, n: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub gold_label: String,
    pub allows_abstention: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdiscipline: Option<String>,
}

impl BenchmarkItem {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.choices.iter().map(|c| c.label.as_str())
    }

    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.choices.len() < 2 {
            return Err(format!("item {} has {} choices, need at least 2", self.id, self.choices.len()));
        }
        let labels: BTreeSet<&str> = self.labels().collect();
        if labels.len() != self.choices.len() {
            return Err(format!("item {} has duplicate choice labels", self.id));
        }
        if !labels.contains(self.gold_label.as_str()) {
            return Err(format!("item {}: gold label {:?} is not a choice label", self.id, self.gold_label));
        }
        Ok(())
    }

    /// Question as shown to the agent. Abstainable items get an extra
    /// `INSUFFICIENT` option.
    pub fn prompt(&self) -> String {
        let mut s = format!("QUESTION {}: {}", self.id, self.question);
        for c in &self.choices {
            let _ = write!(s, "\n{}. {}", c.label, c.text);
        }
        if self.allows_abstention {
            let _ = write!(s, "\n{ABSTAIN}. Not enough information to answer");
        }
        s.push_str("\nEnd the final answer with a line \"ANSWER: <label>\".");
        s
    }
}

fn label(i: usize) -> String {
    let mut n = i;
    let mut s = String::new();
    loop {
        s.insert(0, (b'A' + (n % 26) as u8) as char);
        if n < 26 {
            return s;
        }
        n = n / 26 - 1;
    }
}

fn text_field(rec: &Map<String, Value>, names: &[&str]) -> Result<String, String> {
    for n in names {
        match rec.get(*n) {
            Some(Value::String(s)) => return Ok(s.clone()),
            Some(Value::Number(x)) => return Ok(x.to_string()),
            Some(other) => return Err(format!("field `{n}` must be text, got {other}")),
            None => {}
        }
    }
    Err(format!("missing field `{}`", names[0]))
}

/// Converts one record in any supported shape into an item:
/// `choices` as a list of `{label, text}`, a list of strings (labelled A, B,
/// ...), or a label → text object, with the gold label under `gold`,
/// `gold_label` or `answer`; or the `ideal` + `distractors` shape, whose
/// options are put in a fixed order derived from the item id.
pub fn convert_record(rec: &Map<String, Value>) -> Result<BenchmarkItem, String> {
    let id = text_field(rec, &["id"])?;
    let question = text_field(rec, &["question"])?;
    let allows_abstention = match rec.get("allows_abstention") {
        None => true,
        Some(Value::Bool(b)) => *b,
        Some(other) => return Err(format!("field `allows_abstention` must be boolean, got {other}")),
    };
    let subdiscipline = rec.get("subdiscipline").and_then(Value::as_str).map(String::from);

    let (choices, gold_label) = if let Some(ideal) = rec.get("ideal") {
        let ideal = ideal.as_str().ok_or("field `ideal` must be text")?.to_string();
        let distractors = rec.get("distractors").and_then(Value::as_array).ok_or("missing field `distractors`")?;
        let mut texts = vec![ideal.clone()];
        for d in distractors {
            texts.push(d.as_str().ok_or("distractors must be text")?.to_string());
        }
        texts.sort_by_key(|t| sha256_hex(format!("{id}\u{0}{t}").as_bytes()));
        let choices: Vec<Choice> = texts.into_iter().enumerate().map(|(i, text)| Choice { label: label(i), text }).collect();
        let gold = choices.iter().find(|c| c.text == ideal).map(|c| c.label.clone()).expect("ideal is among the choices");
        (choices, gold)
    } else {
        let choices = match rec.get("choices") {
            Some(Value::Array(list)) => list
                .iter()
                .enumerate()
                .map(|(i, c)| match c {
                    Value::String(text) => Ok(Choice { label: label(i), text: text.clone() }),
                    Value::Object(o) => Ok(Choice { label: text_field(o, &["label"])?, text: text_field(o, &["text"])? }),
                    other => Err(format!("choice {i} has unsupported shape {other}")),
                })
                .collect::<Result<Vec<_>, _>>()?,
            Some(Value::Object(map)) => map
                .iter()
                .map(|(l, t)| {
                    t.as_str().map(|t| Choice { label: l.clone(), text: t.to_string() }).ok_or(format!("choice {l} must be text"))
                })
                .collect::<Result<Vec<_>, _>>()?,
            Some(other) => return Err(format!("field `choices` has unsupported shape {other}")),
            None => return Err("missing field `choices`".into()),
        };
        (choices, text_field(rec, &["gold", "gold_label", "answer"])?)
    };
    let item = BenchmarkItem { id, question, choices, gold_label, allows_abstention, subdiscipline };
    item.check()?;
    Ok(item)
}

/// Line-delimited records in file order; blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<BenchmarkItem>, BenchError> {
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.display().to_string(), source })?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<BenchmarkItem>, BenchError> {
    let mut items: Vec<BenchmarkItem> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| BenchError::Load { line: line_no, message };
        let rec: Map<String, Value> = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let item = convert_record(&rec).map_err(err)?;
        if !seen.insert(item.id.clone()) {
            return Err(err(format!("duplicate id {:?}", item.id)));
        }
        items.push(item);
    }
    Ok(items)
}

/// floor(fraction × N) items chosen uniformly without replacement by a
/// seeded generator, returned in their original order.
pub fn sample_subset(items: &[BenchmarkItem], fraction: f64, seed: u64) -> Result<Vec<BenchmarkItem>, BenchError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(BenchError::Precondition(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let n = items.len();
    // The epsilon keeps products like 0.29 × 100 from flooring to 28.
    let k = ((fraction * n as f64) + 1e-9).floor() as usize;
    if k == 0 {
        return Err(BenchError::EmptySample { fraction, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| items[i].clone()).collect())
}

/// Answers items under a trial budget. `Err` is a hard failure for the item.
pub trait AgentRunner {
    fn answer(&mut self, item: &BenchmarkItem, index: usize, budget: TrialBudget, seed: u64) -> Result<AggregateAnswer, String>;
}

/// Independent-trial stand-in for the full agent: each trial is correct
/// with probability `p` and otherwise picks one fixed distractor, so the
/// majority over n trials follows the binomial oracle exactly. Draws come
/// from a generator seeded per (run seed, item), so trial t sees the same
/// draw under every budget.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticAgent {
    pub p: f64,
}

impl SyntheticAgent {
    pub fn trials(&self, item: &BenchmarkItem, index: usize, budget: TrialBudget, seed: u64) -> Vec<TrialResult> {
        let distractor = item.labels().find(|l| *l != item.gold_label).expect("items have at least two choices").to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
        (0..budget.n_trials)
            .map(|t| {
                let correct = rng.gen::<f64>() < self.p;
                TrialResult {
                    trial_index: t,
                    answer: Some(if correct { item.gold_label.clone() } else { distractor.clone() }),
                    session_ref: format!("synthetic-{index}-{t}"),
                    succeeded: true,
                    templates_after: 0,
                    tools_after: 0,
                }
            })
            .collect()
    }
}

impl AgentRunner for SyntheticAgent {
    fn answer(&mut self, item: &BenchmarkItem, index: usize, budget: TrialBudget, seed: u64) -> Result<AggregateAnswer, String> {
        aggregate(&self.trials(item, index, budget, seed), &FirstGiven).map_err(|e| e.to_string())
    }
}

/// Runs every item through full engine sessions; ties go to the critic.
pub struct EngineRunner {
    pub engine: Engine,
    pub config: SessionConfig,
}

impl AgentRunner for EngineRunner {
    fn answer(
        &mut self,
        item: &BenchmarkItem,
        _index: usize,
        budget: TrialBudget,
        _seed: u64,
    ) -> Result<AggregateAnswer, String> {
        let task = TrialTask { goal: item.prompt(), config: self.config.clone(), expected: Some(item.gold_label.clone()) };
        let results = run_trials(&self.engine, &task, budget).map_err(|e| e.to_string())?;
        aggregate(&results, &CriticAdjudicator { engine: &self.engine }).map_err(|e| e.to_string())
    }
}

/// Hand-written answers by item id; unknown ids abstain.
#[derive(Debug, Clone, Default)]
pub struct ScriptedAnswers(pub std::collections::BTreeMap<String, Option<String>>);

impl AgentRunner for ScriptedAnswers {
    fn answer(&mut self, item: &BenchmarkItem, _: usize, _: TrialBudget, _: u64) -> Result<AggregateAnswer, String> {
        let answer = self.0.get(&item.id).cloned().flatten();
        let vote_counts = answer.iter().map(|a| (a.clone(), 1)).collect();
        Ok(AggregateAnswer { answer, method: crate::trials::AggregationMethod::Single, vote_counts })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    /// `None` is an abstention.
    pub predicted: Option<String>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub per_item: Vec<ItemOutcome>,
    pub accuracy: f64,
    pub precision: f64,
    /// Set when nothing was answered, so precision is 0 by convention.
    pub precision_undefined: bool,
    pub coverage: f64,
    pub budget: TrialBudget,
    pub run_seed: u64,
}

impl RunReport {
    pub fn from_outcomes(per_item: Vec<ItemOutcome>, budget: TrialBudget, run_seed: u64) -> Self {
        let total = per_item.len();
        let answered = per_item.iter().filter(|o| o.predicted.is_some()).count();
        let correct = per_item.iter().filter(|o| o.correct).count();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            accuracy: ratio(correct, total),
            precision: ratio(correct, answered),
            precision_undefined: answered == 0,
            coverage: ratio(answered, total),
            per_item,
            budget,
            run_seed,
        }
    }

    pub fn total(&self) -> usize {
        self.per_item.len()
    }

    pub fn answered(&self) -> usize {
        self.per_item.iter().filter(|o| o.predicted.is_some()).count()
    }

    pub fn correct(&self) -> usize {
        self.per_item.iter().filter(|o| o.correct).count()
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        fs::write(path, serde_json::to_string_pretty(self).expect("reports serialize"))
            .map_err(|source| BenchError::Io { path: path.display().to_string(), source })?;
        Ok(())
    }
}

/// Scores one run. Abstentions count as unanswered; a runner failure on an
/// item is recorded as an abstention with a note and the run continues.
pub fn evaluate(
    runner: &mut dyn AgentRunner,
    items: &[BenchmarkItem],
    budget: TrialBudget,
    seed: u64,
) -> Result<RunReport, BenchError> {
    if items.is_empty() {
        return Err(BenchError::Precondition("no items to evaluate".into()));
    }
    let per_item = items
        .iter()
        .enumerate()
        .map(|(i, item)| match runner.answer(item, i, budget, seed) {
            Ok(agg) => {
                let correct = agg.answer.as_deref() == Some(item.gold_label.as_str());
                ItemOutcome { item_id: item.id.clone(), predicted: agg.answer, correct, note: None }
            }
            Err(e) => ItemOutcome {
                item_id: item.id.clone(),
                predicted: None,
                correct: false,
                note: Some(format!("runner failed: {e}")),
            },
        })
        .collect();
    Ok(RunReport::from_outcomes(per_item, budget, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub budgets: Vec<TrialBudget>,
    pub repetitions: u32,
    /// One seed per repetition; empty means 1..=repetitions.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn new(budgets: &[u32], repetitions: u32) -> Result<Self, BenchError> {
        let budgets = budgets
            .iter()
            .map(|&n| TrialBudget::new(n))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| BenchError::Precondition(e.to_string()))?;
        Ok(Self { budgets, repetitions, seeds: Vec::new() })
    }

    pub fn seeds(&self) -> Result<Vec<u64>, BenchError> {
        if self.repetitions == 0 {
            return Err(BenchError::Precondition("repetitions must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Ok((1..=u64::from(self.repetitions)).collect());
        }
        if self.seeds.len() != self.repetitions as usize {
            return Err(BenchError::Precondition(format!("{} seeds for {} repetitions", self.seeds.len(), self.repetitions)));
        }
        Ok(self.seeds.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub budget: u32,
    /// `None` marks the per-budget mean row.
    pub repetition: Option<u32>,
    pub accuracy: f64,
    pub precision: f64,
    pub coverage: f64,
    pub seed: Option<u64>,
    /// Sample standard deviation of accuracy; mean rows only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_stddev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
}

pub const CURVE_HEADER: &str = "budget,repetition,accuracy,precision,coverage,seed";

impl CurveTable {
    pub fn mean_rows(&self) -> impl Iterator<Item = &CurveRow> {
        self.rows.iter().filter(|r| r.repetition.is_none())
    }

    pub fn mean_accuracy(&self, budget: u32) -> Option<f64> {
        self.mean_rows().find(|r| r.budget == budget).map(|r| r.accuracy)
    }

    /// Run rows carry their repetition and seed; mean rows read `mean` with
    /// an empty seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CURVE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let rep = r.repetition.map_or("mean".to_string(), |x| x.to_string());
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{rep},{},{},{},{seed}", r.budget, r.accuracy, r.precision, r.coverage);
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Every (budget, repetition) gets a fresh runner from `make_runner`, so
/// learned state is shared within a run but never across repetitions.
pub fn sweep_budgets<F>(
    mut make_runner: F,
    items: &[BenchmarkItem],
    sweep: &SweepConfig,
) -> Result<(CurveTable, Vec<RunReport>), BenchError>
where
    F: FnMut(TrialBudget, u32, u64) -> Box<dyn AgentRunner>,
{
    if sweep.budgets.is_empty() {
        return Err(BenchError::Precondition("no budgets to sweep".into()));
    }
    let seeds = sweep.seeds()?;
    let mut table = CurveTable::default();
    let mut reports = Vec::new();
    for &budget in &sweep.budgets {
        let mut runs = Vec::new();
        for (rep, &seed) in seeds.iter().enumerate() {
            let rep = rep as u32 + 1;
            let mut runner = make_runner(budget, rep, seed);
            let report = evaluate(runner.as_mut(), items, budget, seed)?;
            table.rows.push(CurveRow {
                budget: budget.n_trials,
                repetition: Some(rep),
                accuracy: report.accuracy,
                precision: report.precision,
                coverage: report.coverage,
                seed: Some(seed),
                accuracy_stddev: None,
            });
            runs.push(report.clone());
            reports.push(report);
        }
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        table.rows.push(CurveRow {
            budget: budget.n_trials,
            repetition: None,
            accuracy: mean(&acc),
            precision: mean(&runs.iter().map(|r| r.precision).collect::<Vec<_>>()),
            coverage: mean(&runs.iter().map(|r| r.coverage).collect::<Vec<_>>()),
            seed: None,
            accuracy_stddev: Some(sample_stddev(&acc)),
        });
    }
    Ok((table, reports))
}

/// `n` four-option items with seeded gold labels, no abstention.
pub fn synthetic_items(n: usize, seed: u64) -> Vec<BenchmarkItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let choices: Vec<Choice> = (0..4).map(|c| Choice { label: label(c), text: format!("option {}", label(c)) }).collect();
            let gold_label = label(rng.gen_range(0..4));
            BenchmarkItem {
                id: format!("syn-{:04}", i + 1),
                question: format!("Synthetic question {}", i + 1),
                choices,
                gold_label,
                allows_abstention: false,
                subdiscipline: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_continue_past_z() {
        assert_eq!(label(0), "A");
        assert_eq!(label(25), "Z");
        assert_eq!(label(26), "AA");
    }

    #[test]
    fn converter_shapes() {
        let lines = [
            r#"{"id":"a","question":"q","choices":[{"label":"A","text":"x"},{"label":"B","text":"y"}],"gold":"B"}"#,
            r#"{"id":"b","question":"q","choices":["x","y","z"],"answer":"C","allows_abstention":false}"#,
            r#"{"id":"c","question":"q","choices":{"P":"x","Q":"y"},"gold_label":"Q","subdiscipline":"genetics"}"#,
            r#"{"id":"d","question":"q","ideal":"right","distractors":["w1","w2","w3"]}"#,
        ];
        let items = parse_dataset(&lines.join("\n")).unwrap();
        assert_eq!(items.len(), 4);
        assert_eq!(items[1].gold_label, "C");
        assert!(!items[1].allows_abstention);
        assert_eq!(items[2].subdiscipline.as_deref(), Some("genetics"));
        let d = &items[3];
        assert_eq!(d.choices.len(), 4);
        assert_eq!(d.choices.iter().find(|c| c.label == d.gold_label).unwrap().text, "right");
    }

    #[test]
    fn loader_errors() {
        let dup = r#"{"id":"a","question":"q","choices":["x","y"],"gold":"A"}"#;
        let err = parse_dataset(&format!("{dup}\n{dup}")).unwrap_err();
        assert!(matches!(err, BenchError::Load { line: 2, .. }), "{err}");
        let err = parse_dataset("\n{\"id\":\"a\",\"question\":\"q\",\"choices\":[\"x\",\"y\"]}").unwrap_err();
        assert_eq!(err.to_string(), "line 2: missing field `gold`");
        assert!(parse_dataset(r#"{"id":"a","question":"q","choices":["x"],"gold":"A"}"#).is_err());
        assert!(parse_dataset(r#"{"id":"a","question":"q","choices":["x","y"],"gold":"C"}"#).is_err());
        assert!(parse_dataset("not json").is_err());
    }

    #[test]
    fn prompt_offers_abstention_only_when_allowed() {
        let mut item = synthetic_items(1, 0).remove(0);
        assert!(!item.prompt().contains(ABSTAIN));
        item.allows_abstention = true;
        assert!(item.prompt().contains("INSUFFICIENT. Not enough information"));
    }

    #[test]
    fn subset_sizes() {
        let items = synthetic_items(400, 1);
        let a = sample_subset(&items, 0.125, 7).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, sample_subset(&items, 0.125, 7).unwrap());
        let pos: Vec<usize> = a.iter().map(|x| items.iter().position(|y| y.id == x.id).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_subset(&items, 1.0, 3).unwrap(), items);
        assert!(matches!(sample_subset(&items[..4], 0.125, 7), Err(BenchError::EmptySample { .. })));
        assert!(sample_subset(&items, 0.0, 7).is_err());
        assert_eq!(sample_subset(&synthetic_items(100, 0), 0.29, 1).unwrap().len(), 29);
    }

    #[test]
    fn all_abstain_flags_precision() {
        let items = synthetic_items(3, 0);
        let r = evaluate(&mut ScriptedAnswers::default(), &items, TrialBudget::new(1).unwrap(), 0).unwrap();
        assert_eq!((r.accuracy, r.precision, r.coverage), (0.0, 0.0, 0.0));
        assert!(r.precision_undefined);
        assert!(evaluate(&mut ScriptedAnswers::default(), &[], TrialBudget::new(1).unwrap(), 0).is_err());
    }

    #[test]
    fn runner_failure_becomes_noted_abstention() {
        struct Broken;
        impl AgentRunner for Broken {
            fn answer(&mut self, _: &BenchmarkItem, i: usize, _: TrialBudget, _: u64) -> Result<AggregateAnswer, String> {
                if i == 0 {
                    Err("boom".into())
                } else {
                    Ok(AggregateAnswer {
                        answer: Some("A".into()),
                        method: crate::trials::AggregationMethod::Single,
                        vote_counts: Default::default(),
                    })
                }
            }
        }
        let items = synthetic_items(2, 0);
        let r = evaluate(&mut Broken, &items, TrialBudget::new(1).unwrap(), 0).unwrap();
        assert_eq!(r.per_item[0].predicted, None);
        assert!(r.per_item[0].note.as_deref().unwrap().contains("boom"));
        assert_eq!(r.answered(), 1);
    }

    #[test]
    fn sweep_shape_and_csv() {
        let items = synthetic_items(20, 0);
        let sweep = SweepConfig::new(&[1, 3, 5, 9], 3).unwrap();
        let (table, reports) = sweep_budgets(|_, _, _| Box::new(SyntheticAgent { p: 0.6 }), &items, &sweep).unwrap();
        assert_eq!(reports.len(), 12);
        assert_eq!(table.rows.len(), 16);
        assert_eq!(table.mean_rows().count(), 4);
        let csv = table.to_csv();
        assert!(csv.starts_with("budget,repetition,accuracy,precision,coverage,seed\n"));
        assert_eq!(csv.lines().count(), 17);
        assert!(csv.lines().any(|l| l.starts_with("9,mean,")));
        let bad = SweepConfig { seeds: vec![1], ..sweep };
        assert!(bad.seeds().is_err());
    }
}
