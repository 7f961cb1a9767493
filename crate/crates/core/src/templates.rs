//! Template library: reasoning-pathway skeletons distilled from successful
//! sessions, ranked for reuse by TF-IDF cosine against a new goal.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::canonical_hash;
use crate::rank::{token_set, TfIdfIndex};
use crate::session::{Session, SessionStatus, StepStatus};

pub const SUBJECT_PLACEHOLDER: &str = "⟨SUBJECT⟩";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub title: String,
    pub tags: BTreeSet<String>,
    pub pathway_skeleton: Vec<String>,
    pub provenance_session: String,
    pub success_metric: f64,
    pub usage_count: u64,
    pub created_at: DateTime<Utc>,
}

impl Template {
    pub fn content_id(title: &str, skeleton: &[String]) -> String {
        canonical_hash(&(title, skeleton))
    }

    pub fn new(
        title: impl Into<String>,
        tags: BTreeSet<String>,
        skeleton: Vec<String>,
        provenance_session: impl Into<String>,
    ) -> Self {
        let title = title.into();
        Template {
            id: Self::content_id(&title, &skeleton),
            title,
            tags,
            pathway_skeleton: skeleton,
            provenance_session: provenance_session.into(),
            success_metric: 1.0,
            usage_count: 0,
            created_at: Utc::now(),
        }
    }

    fn retrieval_text(&self) -> String {
        let tags: Vec<&str> = self.tags.iter().map(String::as_str).collect();
        format!("{} {}", self.title, tags.join(" "))
    }

    fn check(&self) -> Result<(), String> {
        if self.tags.is_empty() {
            return Err("empty tags".into());
        }
        if self.pathway_skeleton.is_empty() {
            return Err("empty skeleton".into());
        }
        if !(0.0..=1.0).contains(&self.success_metric) {
            return Err(format!("success_metric {} outside [0,1]", self.success_metric));
        }
        let expected = Self::content_id(&self.title, &self.pathway_skeleton);
        if self.id != expected {
            return Err(format!("id {} does not match content hash {expected}", self.id));
        }
        Ok(())
    }
}

/// How a terminal session qualifies for distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillOutcome {
    /// Benchmark item: distill only when the final answer was correct.
    Graded { correct: bool },
    /// Open-ended task: every step must have been accepted by the critic.
    OpenEnded,
}

#[derive(Debug, Error)]
pub enum TemplateStoreError {
    #[error("template store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("template store line {line}{}: {message}", id.as_ref().map(|i| format!(" (id {i})")).unwrap_or_default())]
    Corrupt { line: usize, id: Option<String>, message: String },
    #[error("invalid template: {0}")]
    Invalid(String),
}

#[derive(Debug, Default)]
pub struct TemplateLibrary {
    templates: RwLock<Vec<Template>>,
}

impl TemplateLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.templates.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list(&self) -> Vec<Template> {
        self.templates.read().unwrap().clone()
    }

    pub fn get(&self, id: &str) -> Option<Template> {
        self.templates.read().unwrap().iter().find(|t| t.id == id).cloned()
    }

    /// Adds a template; returns `false` when its content hash is already present.
    pub fn insert(&self, template: Template) -> Result<bool, TemplateStoreError> {
        template.check().map_err(TemplateStoreError::Invalid)?;
        let mut all = self.templates.write().unwrap();
        if all.iter().any(|t| t.id == template.id) {
            return Ok(false);
        }
        all.push(template);
        Ok(true)
    }

    /// Top-`k` templates by cosine score. Ties go to the newest, then the
    /// lexicographically smaller id. `k` is clamped to at least 1.
    pub fn retrieve(&self, goal: &str, k: usize) -> Vec<(Template, f64)> {
        let all = self.templates.read().unwrap();
        let index = TfIdfIndex::new(all.iter().map(Template::retrieval_text));
        let mut ranked: Vec<(Template, f64)> = all.iter().cloned().zip(index.scores(goal)).collect();
        ranked.sort_by(|(a, sa), (b, sb)| sb.total_cmp(sa).then(b.created_at.cmp(&a.created_at)).then(a.id.cmp(&b.id)));
        ranked.truncate(k.max(1));
        ranked
    }

    /// Increments `usage_count`; called only when a plan adopts the template.
    pub fn record_usage(&self, id: &str) -> bool {
        let mut all = self.templates.write().unwrap();
        match all.iter_mut().find(|t| t.id == id) {
            Some(t) => {
                t.usage_count += 1;
                true
            }
            None => false,
        }
    }

    /// Distills a terminal session into a template and inserts it.
    /// Returns `None` when the session does not qualify; a duplicate returns
    /// the already-stored template unchanged.
    pub fn distill(&self, session: &Session, outcome: DistillOutcome) -> Option<Template> {
        if session.status != SessionStatus::Succeeded {
            return None;
        }
        match outcome {
            DistillOutcome::Graded { correct: false } => return None,
            DistillOutcome::Graded { correct: true } => {}
            DistillOutcome::OpenEnded => {
                if !session.pathway.steps.iter().all(|s| s.status == StepStatus::Done) {
                    return None;
                }
            }
        }
        let entities = goal_entities(&session.goal);
        let skeleton: Vec<String> = session.pathway.steps.iter().map(|s| abstract_entities(&s.description, &entities)).collect();
        let tags = token_set(&session.goal);
        if skeleton.is_empty() || tags.is_empty() {
            return None;
        }
        let template = Template::new(session.goal.clone(), tags, skeleton, session.id.clone());
        let id = template.id.clone();
        self.insert(template).ok()?;
        self.get(&id)
    }

    pub fn to_lines(&self) -> Vec<String> {
        self.templates.read().unwrap().iter().map(|t| serde_json::to_string(t).unwrap()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TemplateStoreError> {
        let tmp = path.with_extension("jsonl.tmp");
        let mut f = fs::File::create(&tmp)?;
        for line in self.to_lines() {
            writeln!(f, "{line}")?;
        }
        f.sync_data()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TemplateStoreError> {
        let lib = TemplateLibrary::new();
        for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Template = serde_json::from_str(&line).map_err(|e| TemplateStoreError::Corrupt {
                line: i + 1,
                id: serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|x| x.as_str()).map(String::from)),
                message: e.to_string(),
            })?;
            t.check().map_err(|message| TemplateStoreError::Corrupt { line: i + 1, id: Some(t.id.clone()), message })?;
            lib.templates.write().unwrap().push(t);
        }
        Ok(lib)
    }

    /// Loads `path` when it exists, otherwise starts empty.
    pub fn load_or_default(path: &Path) -> Result<Self, TemplateStoreError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }
}

/// Words of the goal that look like named entities: gene or drug symbols,
/// identifiers with digits, or capitalized words after the first.
pub fn goal_entities(goal: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (i, raw) in goal.split_whitespace().enumerate() {
        let word = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '-');
        if word.len() < 2 {
            continue;
        }
        let has_upper_inside = word.chars().skip(1).any(char::is_uppercase);
        let has_digit = word.chars().any(|c| c.is_ascii_digit()) && word.chars().any(char::is_alphabetic);
        let capitalized = i > 0 && word.chars().next().is_some_and(char::is_uppercase);
        if (has_upper_inside || has_digit || capitalized) && !out.iter().any(|e| e == word) {
            out.push(word.to_string());
        }
    }
    // Longest first so "TP53-R175H" wins over "TP53".
    out.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    out
}

pub fn abstract_entities(text: &str, entities: &[String]) -> String {
    entities.iter().fold(text.to_string(), |acc, e| acc.replace(e.as_str(), SUBJECT_PLACEHOLDER))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn template(title: &str, tags: &[&str], at: i64) -> Template {
        let mut t = Template::new(title, tags.iter().map(|s| s.to_string()).collect(), vec![format!("do {title}")], "s");
        t.created_at = Utc.timestamp_opt(at, 0).unwrap();
        t
    }

    #[test]
    fn empty_library_retrieves_nothing() {
        assert!(TemplateLibrary::new().retrieve("anything", 3).is_empty());
    }

    #[test]
    fn identical_goal_scores_one() {
        let lib = TemplateLibrary::new();
        lib.insert(template("resistance mechanism", &["chemo"], 1)).unwrap();
        lib.insert(template("protein folding", &["structure"], 2)).unwrap();
        let r = lib.retrieve("resistance mechanism chemo", 5);
        assert_eq!(r[0].0.title, "resistance mechanism");
        assert!((r[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_newest_then_id() {
        let lib = TemplateLibrary::new();
        let old = template("alpha", &["x"], 1);
        let new = template("alpha beta", &["x"], 2);
        lib.insert(old).unwrap();
        lib.insert(new.clone()).unwrap();
        // Query shares nothing with either: both score 0, newest wins.
        let r = lib.retrieve("zzz", 2);
        assert_eq!(r[0].0.id, new.id);
        let a = template("gamma", &["q"], 5);
        let b = template("delta", &["q"], 5);
        let lib = TemplateLibrary::new();
        lib.insert(a.clone()).unwrap();
        lib.insert(b.clone()).unwrap();
        let r = lib.retrieve("zzz", 2);
        assert!(r[0].0.id < r[1].0.id);
    }

    #[test]
    fn insert_dedupes_by_content() {
        let lib = TemplateLibrary::new();
        assert!(lib.insert(template("t", &["a"], 1)).unwrap());
        assert!(!lib.insert(template("t", &["a", "b"], 9)).unwrap());
        assert_eq!(lib.len(), 1);
    }

    #[test]
    fn invalid_templates_rejected() {
        let lib = TemplateLibrary::new();
        let mut t = template("t", &["a"], 1);
        t.tags.clear();
        assert!(lib.insert(t).is_err());
        let mut t = template("t", &["a"], 1);
        t.id = "bogus".into();
        assert!(lib.insert(t).is_err());
    }

    #[test]
    fn usage_count_increments() {
        let lib = TemplateLibrary::new();
        let t = template("t", &["a"], 1);
        lib.insert(t.clone()).unwrap();
        assert!(lib.record_usage(&t.id));
        assert!(!lib.record_usage("missing"));
        assert_eq!(lib.get(&t.id).unwrap().usage_count, 1);
    }

    #[test]
    fn entity_abstraction() {
        let goal = "Uncover why MTF1 drives cisplatin resistance in Ovarian tumors";
        let ents = goal_entities(goal);
        assert!(ents.contains(&"MTF1".to_string()));
        assert!(ents.contains(&"Ovarian".to_string()));
        assert!(!ents.contains(&"Uncover".to_string()));
        assert_eq!(abstract_entities("Knock down MTF1 in Ovarian lines", &ents), "Knock down ⟨SUBJECT⟩ in ⟨SUBJECT⟩ lines");
    }

    #[test]
    fn store_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.jsonl");
        let lib = TemplateLibrary::new();
        for i in 0..10 {
            lib.insert(template(&format!("title {i}"), &["tag"], i)).unwrap();
        }
        lib.save(&path).unwrap();
        let back = TemplateLibrary::load(&path).unwrap();
        assert_eq!(back.list(), lib.list());

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 20]).unwrap();
        let err = TemplateLibrary::load(&path).unwrap_err();
        assert!(matches!(err, TemplateStoreError::Corrupt { line: 10, .. }), "{err}");

        fs::write(&path, "").unwrap();
        assert!(TemplateLibrary::load(&path).unwrap().is_empty());
    }
}
