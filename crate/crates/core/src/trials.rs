//! Test-time scaling: several full sessions per task, run in order so each
//! trial sees the templates and tools left by the previous ones, then one
//! answer by vote.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{Engine, EngineError};
use crate::provider::ChatMessage;
use crate::session::{AgentRole, HumanFeedback, Session, SessionConfig, SessionStatus};
use crate::templates::DistillOutcome;

/// Answer text that means "not enough information to choose".
pub const ABSTAIN: &str = "INSUFFICIENT";

#[derive(Debug, Error, PartialEq)]
pub enum TrialError {
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("adjudication: {0}")]
    Adjudication(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrialBudget {
    pub n_trials: u32,
}

impl TrialBudget {
    pub fn new(n_trials: u32) -> Result<Self, TrialError> {
        if n_trials == 0 {
            return Err(TrialError::Precondition("trial budget must be at least 1".into()));
        }
        Ok(Self { n_trials })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_index: u32,
    /// `None` is an abstention (or no usable answer).
    pub answer: Option<String>,
    pub session_ref: String,
    pub succeeded: bool,
    /// Library and registry sizes after this trial.
    pub templates_after: usize,
    pub tools_after: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Single,
    Majority,
    CriticAdjudicated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateAnswer {
    pub answer: Option<String>,
    pub method: AggregationMethod,
    pub vote_counts: BTreeMap<String, u32>,
}

/// Tied candidates with the sessions that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub answer: String,
    pub sessions: Vec<String>,
}

pub trait Adjudicator {
    fn choose(&self, tied: &[Candidate]) -> Result<String, TrialError>;
}

/// Picks the tied answer that was given first.
pub struct FirstGiven;

impl Adjudicator for FirstGiven {
    fn choose(&self, tied: &[Candidate]) -> Result<String, TrialError> {
        tied.first().map(|c| c.answer.clone()).ok_or_else(|| TrialError::Adjudication("no candidates".into()))
    }
}

/// Asks the critic role to pick among tied answers, showing each
/// candidate's final answer text. The reply's first token must be one of
/// the candidates.
pub struct CriticAdjudicator<'a> {
    pub engine: &'a Engine,
}

impl Adjudicator for CriticAdjudicator<'_> {
    fn choose(&self, tied: &[Candidate]) -> Result<String, TrialError> {
        let mut user = String::from("CANDIDATES:");
        for c in tied {
            user.push_str(&format!("\nCANDIDATE {}:", c.answer));
            for id in &c.sessions {
                let text = self.engine.session(id).ok().and_then(|s| s.final_answer).map(|a| a.answer).unwrap_or_default();
                user.push_str(&format!("\n- {id}: {text}"));
            }
        }
        let system = "[adjudicate] You are the critic. Reply with the single best candidate answer as the first token.";
        let exchange = self
            .engine
            .provider()
            .complete(AgentRole::Critic, vec![ChatMessage::system(system), ChatMessage::user(user)])
            .map_err(|e| TrialError::Adjudication(e.to_string()))?;
        let pick = exchange.response_text.split_whitespace().next().unwrap_or_default().trim_end_matches(['.', ',', ':']);
        tied.iter()
            .find(|c| c.answer == pick)
            .map(|c| c.answer.clone())
            .ok_or_else(|| TrialError::Adjudication(format!("critic picked {pick:?}, not one of the candidates")))
    }
}

/// Abstentions and failed trials do not vote. The answer with the most votes
/// wins; a tie at the top goes to the adjudicator. No votes at all means abstain.
pub fn aggregate(results: &[TrialResult], adjudicator: &dyn Adjudicator) -> Result<AggregateAnswer, TrialError> {
    if results.is_empty() {
        return Err(TrialError::Precondition("no trial results to aggregate".into()));
    }
    let mut vote_counts: BTreeMap<String, u32> = BTreeMap::new();
    let mut order: Vec<Candidate> = Vec::new();
    for r in results.iter().filter(|r| r.succeeded) {
        let Some(answer) = &r.answer else { continue };
        *vote_counts.entry(answer.clone()).or_default() += 1;
        match order.iter_mut().find(|c| &c.answer == answer) {
            Some(c) => c.sessions.push(r.session_ref.clone()),
            None => order.push(Candidate { answer: answer.clone(), sessions: vec![r.session_ref.clone()] }),
        }
    }
    let method_for_one = if results.len() == 1 { AggregationMethod::Single } else { AggregationMethod::Majority };
    let Some(&top) = vote_counts.values().max() else {
        return Ok(AggregateAnswer { answer: None, method: method_for_one, vote_counts });
    };
    let tied: Vec<Candidate> = order.into_iter().filter(|c| vote_counts[&c.answer] == top).collect();
    if tied.len() == 1 {
        return Ok(AggregateAnswer { answer: Some(tied[0].answer.clone()), method: method_for_one, vote_counts });
    }
    let pick = adjudicator.choose(&tied)?;
    Ok(AggregateAnswer { answer: Some(pick), method: AggregationMethod::CriticAdjudicated, vote_counts })
}

/// P(strict majority of n independent trials is correct) when each trial is
/// correct with probability p.
pub fn expected_majority_accuracy(p: f64, n: u32) -> Result<f64, TrialError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TrialError::Precondition(format!("p must be in [0, 1], got {p}")));
    }
    if n == 0 || n.is_multiple_of(2) {
        return Err(TrialError::Precondition(format!("n must be odd and positive, got {n}")));
    }
    let mut total = 0.0;
    let mut binom = 1.0f64; // C(n, k), updated incrementally
    for k in 0..=n {
        if k > 0 {
            binom = binom * f64::from(n - k + 1) / f64::from(k);
        }
        if 2 * k > n {
            total += binom * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
        }
    }
    Ok(total)
}

/// Pulls the answer out of a final answer text: the token after a leading
/// `ANSWER:` if present, otherwise the whole trimmed text. The abstain
/// marker (any case) yields `None`.
pub fn extract_answer(text: &str) -> Option<String> {
    let t = text.trim();
    let answer = match t.lines().map(str::trim).find_map(|l| l.strip_prefix("ANSWER:")) {
        Some(rest) => rest.split_whitespace().next().unwrap_or_default().trim_end_matches(['.', ',']).to_string(),
        None => t.to_string(),
    };
    if answer.is_empty() || answer.eq_ignore_ascii_case(ABSTAIN) {
        None
    } else {
        Some(answer)
    }
}

#[derive(Debug, Clone)]
pub struct TrialTask {
    pub goal: String,
    pub config: SessionConfig,
    /// Gold answer for graded tasks; decides whether a trial may be distilled.
    pub expected: Option<String>,
}

/// Runs `budget` full sessions in index order against the engine's shared
/// library and registry. Successful sessions are distilled into templates
/// before the next trial starts. Session failures are recorded, not raised.
pub fn run_trials(engine: &Engine, task: &TrialTask, budget: TrialBudget) -> Result<Vec<TrialResult>, EngineError> {
    run_trials_with(engine, task, budget, &mut |_| None)
}

/// [`run_trials`] with a human at the gates: `on_gate` is asked for feedback
/// whenever a session blocks. Returning `None` leaves that trial unfinished,
/// which counts as a failed trial.
pub fn run_trials_with(
    engine: &Engine,
    task: &TrialTask,
    budget: TrialBudget,
    on_gate: &mut dyn FnMut(&Session) -> Option<HumanFeedback>,
) -> Result<Vec<TrialResult>, EngineError> {
    let mut results = Vec::with_capacity(budget.n_trials as usize);
    for trial_index in 0..budget.n_trials {
        let session_ref = engine.create_session(&task.goal, task.config.clone())?.id;
        let session = loop {
            let session = match engine.run_until_blocked(&session_ref) {
                Ok(s) => s,
                Err(_) => break engine.session(&session_ref)?,
            };
            if session.status != SessionStatus::AwaitingHuman {
                break session;
            }
            match on_gate(&session) {
                Some(feedback) => {
                    engine.inject_feedback(&session_ref, feedback)?;
                }
                None => break session,
            }
        };
        let succeeded = session.status == SessionStatus::Succeeded;
        let answer = if succeeded { session.final_answer.as_ref().and_then(|a| extract_answer(&a.answer)) } else { None };
        if succeeded {
            let outcome = match &task.expected {
                Some(gold) => DistillOutcome::Graded { correct: answer.as_deref() == Some(gold.as_str()) },
                None => DistillOutcome::OpenEnded,
            };
            engine.templates().distill(&session, outcome);
        }
        results.push(TrialResult {
            trial_index,
            answer,
            session_ref,
            succeeded,
            templates_after: engine.templates().len(),
            tools_after: engine.tools().len(),
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(i: u32, answer: Option<&str>, ok: bool) -> TrialResult {
        TrialResult {
            trial_index: i,
            answer: answer.map(String::from),
            session_ref: format!("sess-{i}"),
            succeeded: ok,
            templates_after: 0,
            tools_after: 0,
        }
    }

    struct Pick(&'static str);
    impl Adjudicator for Pick {
        fn choose(&self, _: &[Candidate]) -> Result<String, TrialError> {
            Ok(self.0.into())
        }
    }

    /// Brute force over all 2^n outcome vectors.
    fn enumerate(p: f64, n: u32) -> f64 {
        (0u32..1 << n)
            .map(|mask| {
                let k = mask.count_ones();
                let prob = p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
                if 2 * k > n {
                    prob
                } else {
                    0.0
                }
            })
            .sum()
    }

    #[test]
    fn majority_oracle_matches_enumeration() {
        let v = expected_majority_accuracy(0.6, 9).unwrap();
        assert!((v - enumerate(0.6, 9)).abs() < 1e-12);
        assert!((v - 0.7334).abs() < 1e-4, "{v}");
        for n in [1, 3, 5, 7, 9, 11] {
            assert!((expected_majority_accuracy(0.5, n).unwrap() - 0.5).abs() < 1e-12);
            assert!((expected_majority_accuracy(1.0, n).unwrap() - 1.0).abs() < 1e-12);
            for p in [0.0, 0.3, 0.55, 0.9] {
                assert!((expected_majority_accuracy(p, n).unwrap() - enumerate(p, n)).abs() < 1e-12);
            }
        }
        assert!(expected_majority_accuracy(0.6, 4).is_err());
        assert!(expected_majority_accuracy(1.2, 3).is_err());
    }

    #[test]
    fn monotone_in_n_above_half() {
        for step in 1..50 {
            let p = 0.5 + f64::from(step) / 100.0;
            let mut prev = 0.0;
            for n in (1..=21).step_by(2) {
                let v = expected_majority_accuracy(p, n).unwrap();
                assert!(v >= prev - 1e-12, "p={p} n={n}");
                prev = v;
            }
        }
    }

    #[test]
    fn votes() {
        let a = aggregate(&[r(0, Some("A"), true), r(1, Some("A"), true), r(2, Some("B"), true)], &FirstGiven).unwrap();
        assert_eq!(a.answer.as_deref(), Some("A"));
        assert_eq!(a.method, AggregationMethod::Majority);
        assert_eq!(a.vote_counts, [("A".to_string(), 2), ("B".to_string(), 1)].into());

        let a = aggregate(&[r(0, None, true)], &FirstGiven).unwrap();
        assert_eq!((a.answer, a.method), (None, AggregationMethod::Single));

        let a = aggregate(&[r(0, Some("A"), true), r(1, Some("B"), true)], &Pick("B")).unwrap();
        assert_eq!(a.answer.as_deref(), Some("B"));
        assert_eq!(a.method, AggregationMethod::CriticAdjudicated);

        // Abstentions and failures never outvote a real answer.
        let a =
            aggregate(&[r(0, None, true), r(1, None, true), r(2, Some("C"), true), r(3, Some("D"), false)], &FirstGiven).unwrap();
        assert_eq!(a.answer.as_deref(), Some("C"));

        assert!(aggregate(&[], &FirstGiven).is_err());
        assert!(TrialBudget::new(0).is_err());
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer("ANSWER: B. because"), Some("B".into()));
        assert_eq!(extract_answer("Reasoning\nANSWER: C"), Some("C".into()));
        assert_eq!(extract_answer("ANSWER: insufficient"), None);
        assert_eq!(extract_answer("  MTF1  "), Some("MTF1".into()));
        assert_eq!(extract_answer(""), None);
    }
}
