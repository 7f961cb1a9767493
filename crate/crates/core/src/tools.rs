//! Tool registry with content-addressed manifests, validation by embedded
//! test cases, gated invocation, and the search-before-create pipeline used
//! when the critic reports a capability gap.
//!
//! Local-script tools receive their arguments as a JSON object in `argv[1]`
//! and must print a JSON object on stdout. HTTP tools POST the mapped
//! arguments to their target and expect a JSON object back.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::hash::{canonical_hash, sha256_hex};
use crate::provider::http::{HttpTransport, TransportError};
use crate::rank::TfIdfIndex;
use crate::sandbox::{ResourceLimits, Sandbox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolCategory {
    DatabaseQuery,
    FoundationModel,
    CustomAnalysis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationKind {
    HttpQuery,
    LocalScript,
    Builtin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationSpec {
    pub kind: InvocationKind,
    /// URL, script file name, or builtin name.
    pub target: String,
    pub timeout_secs: u64,
    /// Schema field → call parameter name; unmapped fields pass through.
    #[serde(default)]
    pub arg_mapping: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Draft,
    Validated,
    Deprecated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Predefined,
    Created,
}

/// Predicate over a tool's output: `field` selects one output value (whole
/// output when absent); `contains` checks its text, `equals` its value.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Expectation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<Value>,
}

impl Expectation {
    pub fn contains(text: impl Into<String>) -> Self {
        Self { contains: Some(text.into()), ..Default::default() }
    }

    fn check(&self, output: &Map<String, Value>) -> Result<(), String> {
        if self.contains.is_none() && self.equals.is_none() {
            return Err("expectation has neither contains nor equals".into());
        }
        let whole = Value::Object(output.clone());
        let target = match &self.field {
            Some(f) => output.get(f).ok_or_else(|| format!("output has no field {f:?}"))?,
            None => &whole,
        };
        if let Some(needle) = &self.contains {
            let hay = match target {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            if !hay.contains(needle.as_str()) {
                return Err(format!("output {hay:?} does not contain {needle:?}"));
            }
        }
        if let Some(expected) = &self.equals {
            if target != expected {
                return Err(format!("output {target} != expected {expected}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolTestCase {
    pub input: BTreeMap<String, Value>,
    pub expect: Expectation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolManifest {
    pub id: String,
    pub name: String,
    pub category: ToolCategory,
    pub description: String,
    /// Field → semantic type (`text`, `number`, `integer`, `boolean`, `list`, `object`, `any`).
    pub input_schema: BTreeMap<String, String>,
    pub output_schema: BTreeMap<String, String>,
    pub invocation: InvocationSpec,
    pub status: ToolStatus,
    pub test_cases: Vec<ToolTestCase>,
    pub provenance: Provenance,
    pub created_in_session: Option<String>,
    /// SHA-256 of the script body for local-script tools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_sha256: Option<String>,
}

#[derive(Serialize)]
struct ManifestContent<'a> {
    name: &'a str,
    category: ToolCategory,
    description: &'a str,
    input_schema: &'a BTreeMap<String, String>,
    output_schema: &'a BTreeMap<String, String>,
    invocation: &'a InvocationSpec,
    test_cases: &'a [ToolTestCase],
    provenance: Provenance,
    created_in_session: &'a Option<String>,
    script_sha256: &'a Option<String>,
}

impl ToolManifest {
    /// Hash over everything except `id` and `status`.
    pub fn content_id(&self) -> String {
        canonical_hash(&ManifestContent {
            name: &self.name,
            category: self.category,
            description: &self.description,
            input_schema: &self.input_schema,
            output_schema: &self.output_schema,
            invocation: &self.invocation,
            test_cases: &self.test_cases,
            provenance: self.provenance,
            created_in_session: &self.created_in_session,
            script_sha256: &self.script_sha256,
        })
    }

    pub fn check_constraints(&self) -> Result<(), ToolError> {
        let err = |m: String| Err(ToolError::Invalid(m));
        if self.name.trim().is_empty() {
            return err("name is empty".into());
        }
        match (self.category, self.invocation.kind) {
            (ToolCategory::DatabaseQuery, InvocationKind::LocalScript) => {
                return err("database_query tools must use http_query or builtin invocation".into())
            }
            (ToolCategory::CustomAnalysis, InvocationKind::HttpQuery) => {
                return err("custom_analysis tools must use local_script or builtin invocation".into())
            }
            _ => {}
        }
        for (field, ty) in self.input_schema.iter().chain(&self.output_schema) {
            if !SEMANTIC_TYPES.contains(&ty.as_str()) {
                return err(format!("field {field:?} has unknown type {ty:?}"));
            }
        }
        if self.invocation.timeout_secs == 0 {
            return err("invocation timeout must be positive".into());
        }
        if self.status == ToolStatus::Validated && self.test_cases.is_empty() {
            return err("validated tools need at least one test case".into());
        }
        Ok(())
    }

    fn retrieval_text(&self) -> String {
        format!("{} {}", self.name.replace(['_', '-'], " "), self.description)
    }
}

const SEMANTIC_TYPES: [&str; 7] = ["text", "number", "integer", "boolean", "list", "object", "any"];

fn type_matches(ty: &str, v: &Value) -> bool {
    match ty {
        "text" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64(),
        "boolean" => v.is_boolean(),
        "list" => v.is_array(),
        "object" => v.is_object(),
        _ => true,
    }
}

/// Everything the tool creator supplies for a new tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDraft {
    pub name: String,
    pub category: ToolCategory,
    pub description: String,
    pub input_schema: BTreeMap<String, String>,
    pub output_schema: BTreeMap<String, String>,
    pub script: String,
    pub tests: Vec<ToolTestCase>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    30
}

impl ToolDraft {
    pub fn into_manifest(self, session: Option<&str>) -> (ToolManifest, String) {
        let mut m = ToolManifest {
            id: String::new(),
            name: self.name,
            category: self.category,
            description: self.description,
            input_schema: self.input_schema,
            output_schema: self.output_schema,
            invocation: InvocationSpec {
                kind: InvocationKind::LocalScript,
                target: "tool.py".into(),
                timeout_secs: self.timeout_secs,
                arg_mapping: BTreeMap::new(),
            },
            status: ToolStatus::Draft,
            test_cases: self.tests,
            provenance: Provenance::Created,
            created_in_session: session.map(String::from),
            script_sha256: Some(sha256_hex(self.script.as_bytes())),
        };
        m.id = m.content_id();
        (m, self.script)
    }
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("unknown tool {0}")]
    Unknown(String),
    #[error("tool {id} is {status:?}; only validated tools may be invoked")]
    Gated { id: String, status: ToolStatus },
    #[error("tool {0} has no test cases")]
    NoTestCases(String),
    #[error("tool {0} is not a draft")]
    NotDraft(String),
    #[error("argument {field:?}: {message}")]
    Schema { field: String, message: String },
    #[error("invocation of {id} failed: {message}")]
    Invocation { id: String, message: String },
    #[error("tool creation failed after {attempts} attempts: {diagnostics:?}")]
    CreationFailed { attempts: u32, diagnostics: Vec<String>, trace: Vec<CreationAttempt> },
    #[error("tool drafting failed: {0}")]
    Draft(String),
    #[error("registry io: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CaseReport {
    pub index: usize,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub tool_id: String,
    pub passed: bool,
    pub cases: Vec<CaseReport>,
}

impl ValidationReport {
    pub fn diagnostics(&self) -> Vec<String> {
        self.cases.iter().filter(|c| !c.passed).map(|c| format!("case {}: {}", c.index, c.detail)).collect()
    }
}

/// One gated invocation, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub tool_id: String,
    pub status_at_invocation: ToolStatus,
    pub ok: bool,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CreationAttempt {
    pub attempt: u32,
    pub tool_id: Option<String>,
    pub passed: bool,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone)]
pub enum CreationOutcome {
    Reused { manifest: ToolManifest, score: f64 },
    Created { manifest: ToolManifest, trace: Vec<CreationAttempt> },
}

impl CreationOutcome {
    pub fn manifest(&self) -> &ToolManifest {
        match self {
            CreationOutcome::Reused { manifest, .. } | CreationOutcome::Created { manifest, .. } => manifest,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OceanSettings {
    pub reuse_threshold: f64,
    pub creation_retries: u32,
    pub limits: ResourceLimits,
}

impl Default for OceanSettings {
    fn default() -> Self {
        Self { reuse_threshold: 0.6, creation_retries: 2, limits: ResourceLimits { wall_clock_secs: 30, ..Default::default() } }
    }
}

#[derive(Default)]
struct Registry {
    manifests: Vec<ToolManifest>,
    scripts: BTreeMap<String, String>,
}

pub struct ToolOcean {
    registry: RwLock<Registry>,
    sandbox: Arc<Sandbox>,
    transport: Option<Arc<dyn HttpTransport>>,
    validation_transport: Arc<dyn HttpTransport>,
    settings: OceanSettings,
    invocations: Mutex<Vec<InvocationRecord>>,
}

impl std::fmt::Debug for ToolOcean {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolOcean").field("len", &self.len()).finish_non_exhaustive()
    }
}

impl ToolOcean {
    pub fn new(sandbox: Arc<Sandbox>) -> Self {
        Self {
            registry: RwLock::new(Registry::default()),
            sandbox,
            transport: None,
            validation_transport: Arc::new(StubTransport),
            settings: OceanSettings::default(),
            invocations: Mutex::new(Vec::new()),
        }
    }

    /// Transport used for `http_query` invocations. Without one, HTTP tools
    /// are answered by the local stub.
    pub fn with_transport(mut self, transport: Arc<dyn HttpTransport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn with_settings(mut self, settings: OceanSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn settings(&self) -> &OceanSettings {
        &self.settings
    }

    pub fn len(&self) -> usize {
        self.registry.read().unwrap().manifests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list(&self) -> Vec<ToolManifest> {
        self.registry.read().unwrap().manifests.clone()
    }

    pub fn get(&self, id: &str) -> Option<ToolManifest> {
        self.registry.read().unwrap().manifests.iter().find(|m| m.id == id).cloned()
    }

    pub fn find_by_name(&self, name: &str) -> Option<ToolManifest> {
        let reg = self.registry.read().unwrap();
        reg.manifests.iter().find(|m| m.name == name).or_else(|| reg.manifests.iter().find(|m| m.id == name)).cloned()
    }

    pub fn script(&self, id: &str) -> Option<String> {
        self.registry.read().unwrap().scripts.get(id).cloned()
    }

    pub fn invocations(&self) -> Vec<InvocationRecord> {
        self.invocations.lock().unwrap().clone()
    }

    /// Stores a manifest. New entries start as drafts unless predefined and
    /// already validated. Registering identical content returns the same id.
    pub fn register(&self, mut manifest: ToolManifest, script: Option<String>) -> Result<String, ToolError> {
        if let Some(s) = &script {
            manifest.script_sha256 = Some(sha256_hex(s.as_bytes()));
        }
        if manifest.invocation.kind == InvocationKind::LocalScript && script.is_none() {
            return Err(ToolError::Invalid("local_script tools need a script body".into()));
        }
        if !(manifest.provenance == Provenance::Predefined && manifest.status == ToolStatus::Validated) {
            manifest.status = ToolStatus::Draft;
        }
        manifest.check_constraints()?;
        manifest.id = manifest.content_id();
        let mut reg = self.registry.write().unwrap();
        if reg.manifests.iter().any(|m| m.id == manifest.id) {
            return Ok(manifest.id);
        }
        let id = manifest.id.clone();
        if let Some(s) = script {
            reg.scripts.insert(id.clone(), s);
        }
        reg.manifests.push(manifest);
        Ok(id)
    }

    /// Flips status to deprecated; records are never deleted.
    pub fn deprecate(&self, id: &str) -> Result<(), ToolError> {
        let mut reg = self.registry.write().unwrap();
        let m = reg.manifests.iter_mut().find(|m| m.id == id).ok_or_else(|| ToolError::Unknown(id.to_string()))?;
        m.status = ToolStatus::Deprecated;
        Ok(())
    }

    /// Runs every embedded test case; all passing promotes the draft.
    pub fn validate(&self, id: &str) -> Result<ValidationReport, ToolError> {
        let manifest = self.get(id).ok_or_else(|| ToolError::Unknown(id.to_string()))?;
        if manifest.status != ToolStatus::Draft {
            return Err(ToolError::NotDraft(id.to_string()));
        }
        if manifest.test_cases.is_empty() {
            return Err(ToolError::NoTestCases(id.to_string()));
        }
        let cases: Vec<CaseReport> = manifest
            .test_cases
            .iter()
            .enumerate()
            .map(|(index, case)| {
                let outcome = check_args(&manifest, &case.input)
                    .and_then(|()| self.execute(&manifest, &case.input, self.validation_transport.as_ref()))
                    .map_err(|e| e.to_string())
                    .and_then(|out| case.expect.check(&out).map(|()| out));
                match outcome {
                    Ok(out) => CaseReport { index, passed: true, detail: Value::Object(out).to_string() },
                    Err(detail) => CaseReport { index, passed: false, detail },
                }
            })
            .collect();
        let passed = cases.iter().all(|c| c.passed);
        if passed {
            let mut reg = self.registry.write().unwrap();
            if let Some(m) = reg.manifests.iter_mut().find(|m| m.id == id) {
                m.status = ToolStatus::Validated;
            }
        }
        Ok(ValidationReport { tool_id: id.to_string(), passed, cases })
    }

    /// Same ranking as template retrieval, over name and description.
    pub fn search(&self, query: &str, category: Option<ToolCategory>) -> Vec<(ToolManifest, f64)> {
        let reg = self.registry.read().unwrap();
        let pool: Vec<&ToolManifest> = reg.manifests.iter().filter(|m| category.is_none_or(|c| m.category == c)).collect();
        let index = TfIdfIndex::new(pool.iter().map(|m| m.retrieval_text()));
        let mut ranked: Vec<(ToolManifest, f64)> = pool.into_iter().cloned().zip(index.scores(query)).collect();
        ranked.sort_by(|(a, sa), (b, sb)| sb.total_cmp(sa).then(a.name.cmp(&b.name)).then(a.id.cmp(&b.id)));
        ranked
    }

    /// Gated invocation: the tool must be validated and the arguments must
    /// match its input schema.
    pub fn invoke(&self, id: &str, args: &BTreeMap<String, Value>) -> Result<Map<String, Value>, ToolError> {
        let manifest = self.get(id).ok_or_else(|| ToolError::Unknown(id.to_string()))?;
        if manifest.status != ToolStatus::Validated {
            return Err(ToolError::Gated { id: id.to_string(), status: manifest.status });
        }
        check_args(&manifest, args)?;
        let started = Instant::now();
        let transport: &dyn HttpTransport = match &self.transport {
            Some(t) => t.as_ref(),
            None => self.validation_transport.as_ref(),
        };
        let result = self.execute(&manifest, args, transport).and_then(|out| {
            check_output(&manifest, &out)?;
            Ok(out)
        });
        self.invocations.lock().unwrap().push(InvocationRecord {
            tool_id: id.to_string(),
            status_at_invocation: manifest.status,
            ok: result.is_ok(),
            duration_ms: started.elapsed().as_millis() as u64,
        });
        result
    }

    fn execute(
        &self,
        m: &ToolManifest,
        args: &BTreeMap<String, Value>,
        transport: &dyn HttpTransport,
    ) -> Result<Map<String, Value>, ToolError> {
        let fail = |message: String| ToolError::Invocation { id: m.id.clone(), message };
        let mapped: Map<String, Value> = args
            .iter()
            .map(|(k, v)| (m.invocation.arg_mapping.get(k).cloned().unwrap_or_else(|| k.clone()), v.clone()))
            .collect();
        match m.invocation.kind {
            InvocationKind::Builtin => run_builtin(&m.invocation.target, &mapped).map_err(fail),
            InvocationKind::HttpQuery => {
                let resp = transport
                    .post_json(&m.invocation.target, &BTreeMap::new(), &Value::Object(mapped))
                    .map_err(|e| fail(format!("{e:?}")))?;
                match resp {
                    Value::Object(o) => Ok(o),
                    other => Err(fail(format!("non-object response {other}"))),
                }
            }
            InvocationKind::LocalScript => {
                let script = self.script(&m.id).ok_or_else(|| fail("script body missing".into()))?;
                let limits = ResourceLimits { wall_clock_secs: m.invocation.timeout_secs, ..self.settings.limits.clone() };
                let hint = format!("tool-{}", &m.id[..12.min(m.id.len())]);
                let ws = self.sandbox.create_workspace(Some(&hint), &[], limits).map_err(|e| fail(e.to_string()))?;
                let run = self.sandbox.run_script(&ws, &script, &[Value::Object(mapped).to_string()]);
                let _ = self.sandbox.destroy_workspace(&ws);
                let run = run.map_err(|e| fail(e.to_string()))?;
                if !run.exit.success() {
                    return Err(fail(format!("exit {:?}: {}", run.exit, run.stderr.trim())));
                }
                parse_script_output(m, &run.stdout).map_err(fail)
            }
        }
    }

    /// Search the registry first; when nothing validated scores at or above
    /// the reuse threshold, ask `drafter` for new tools until one validates
    /// or the retry budget is spent. Failed drafts stay in the registry as drafts.
    pub fn create_tool<F>(
        &self,
        gap_description: &str,
        session: Option<&str>,
        mut drafter: F,
    ) -> Result<CreationOutcome, ToolError>
    where
        F: FnMut(u32, &[String]) -> Result<ToolDraft, String>,
    {
        if let Some((manifest, score)) = self
            .search(gap_description, None)
            .into_iter()
            .find(|(m, s)| m.status == ToolStatus::Validated && *s >= self.settings.reuse_threshold)
        {
            return Ok(CreationOutcome::Reused { manifest, score });
        }
        let mut trace = Vec::new();
        let mut diagnostics: Vec<String> = Vec::new();
        let attempts = self.settings.creation_retries + 1;
        for attempt in 1..=attempts {
            let draft = match drafter(attempt, &diagnostics) {
                Ok(d) => d,
                Err(e) => {
                    diagnostics = vec![format!("draft rejected: {e}")];
                    trace.push(CreationAttempt { attempt, tool_id: None, passed: false, diagnostics: diagnostics.clone() });
                    continue;
                }
            };
            let (manifest, script) = draft.into_manifest(session);
            let id = match self.register(manifest, Some(script)) {
                Ok(id) => id,
                Err(e) => {
                    diagnostics = vec![e.to_string()];
                    trace.push(CreationAttempt { attempt, tool_id: None, passed: false, diagnostics: diagnostics.clone() });
                    continue;
                }
            };
            let report = match self.get(&id).map(|m| m.status) {
                Some(ToolStatus::Validated) => None,
                _ => Some(self.validate(&id)?),
            };
            let passed = report.as_ref().is_none_or(|r| r.passed);
            diagnostics = report.map(|r| r.diagnostics()).unwrap_or_default();
            trace.push(CreationAttempt { attempt, tool_id: Some(id.clone()), passed, diagnostics: diagnostics.clone() });
            if passed {
                let manifest = self.get(&id).expect("just registered");
                return Ok(CreationOutcome::Created { manifest, trace });
            }
        }
        Err(ToolError::CreationFailed { attempts, diagnostics, trace })
    }

    pub fn to_lines(&self) -> Vec<String> {
        self.registry.read().unwrap().manifests.iter().map(|m| serde_json::to_string(m).unwrap()).collect()
    }

    /// Writes `tools.jsonl` and `scripts/<id>/tool.py` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ToolError> {
        fs::create_dir_all(dir.join("scripts"))?;
        let reg = self.registry.read().unwrap();
        for (id, script) in &reg.scripts {
            let d = dir.join("scripts").join(id);
            fs::create_dir_all(&d)?;
            fs::write(d.join("tool.py"), script)?;
        }
        let tmp = dir.join("tools.jsonl.tmp");
        let mut f = fs::File::create(&tmp)?;
        for m in &reg.manifests {
            writeln!(f, "{}", serde_json::to_string(m).unwrap())?;
        }
        f.sync_data()?;
        fs::rename(tmp, dir.join("tools.jsonl"))?;
        Ok(())
    }

    /// Loads manifests and scripts saved by [`ToolOcean::save`]; a missing
    /// registry file yields an empty ocean.
    pub fn load(self, dir: &Path) -> Result<Self, ToolError> {
        let path = dir.join("tools.jsonl");
        if !path.exists() {
            return Ok(self);
        }
        {
            let mut reg = self.registry.write().unwrap();
            for (i, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let m: ToolManifest =
                    serde_json::from_str(&line).map_err(|e| ToolError::Corrupt { line: i + 1, message: e.to_string() })?;
                if m.content_id() != m.id {
                    return Err(ToolError::Corrupt { line: i + 1, message: format!("id {} does not match content", m.id) });
                }
                if m.invocation.kind == InvocationKind::LocalScript {
                    let script = fs::read_to_string(dir.join("scripts").join(&m.id).join("tool.py"))?;
                    if m.script_sha256.as_deref() != Some(sha256_hex(script.as_bytes()).as_str()) {
                        return Err(ToolError::Corrupt {
                            line: i + 1,
                            message: format!("script for {} does not match its hash", m.id),
                        });
                    }
                    reg.scripts.insert(m.id.clone(), script);
                }
                if !reg.manifests.iter().any(|x| x.id == m.id) {
                    reg.manifests.push(m);
                }
            }
        }
        Ok(self)
    }

    /// Registers the predefined seed tools. HTTP entries point at `endpoint_base`.
    pub fn seed_predefined(&self, endpoint_base: &str) -> Result<Vec<String>, ToolError> {
        predefined_tools(endpoint_base).into_iter().map(|m| self.register(m, None)).collect()
    }
}

fn check_args(m: &ToolManifest, args: &BTreeMap<String, Value>) -> Result<(), ToolError> {
    for (field, ty) in &m.input_schema {
        let v = args
            .get(field)
            .ok_or_else(|| ToolError::Schema { field: field.clone(), message: "missing required field".into() })?;
        if !type_matches(ty, v) {
            return Err(ToolError::Schema { field: field.clone(), message: format!("expected {ty}, got {v}") });
        }
    }
    if let Some(extra) = args.keys().find(|k| !m.input_schema.contains_key(*k)) {
        return Err(ToolError::Schema { field: extra.clone(), message: "not in input schema".into() });
    }
    Ok(())
}

fn check_output(m: &ToolManifest, out: &Map<String, Value>) -> Result<(), ToolError> {
    for (field, ty) in &m.output_schema {
        match out.get(field) {
            Some(v) if type_matches(ty, v) => {}
            Some(v) => {
                return Err(ToolError::Invocation {
                    id: m.id.clone(),
                    message: format!("output field {field:?}: expected {ty}, got {v}"),
                })
            }
            None => return Err(ToolError::Invocation { id: m.id.clone(), message: format!("output missing field {field:?}") }),
        }
    }
    Ok(())
}

fn parse_script_output(m: &ToolManifest, stdout: &str) -> Result<Map<String, Value>, String> {
    let trimmed = stdout.trim();
    if let Ok(Value::Object(o)) = serde_json::from_str::<Value>(trimmed) {
        return Ok(o);
    }
    // Last non-empty line may carry the JSON when the script logs first.
    if let Some(Ok(Value::Object(o))) = trimmed.lines().rev().find(|l| !l.trim().is_empty()).map(serde_json::from_str::<Value>) {
        return Ok(o);
    }
    if m.output_schema.len() == 1 {
        let field = m.output_schema.keys().next().unwrap().clone();
        let mut o = Map::new();
        o.insert(field, Value::String(trimmed.to_string()));
        return Ok(o);
    }
    Err(format!("tool printed non-JSON output: {trimmed:?}"))
}

fn run_builtin(name: &str, args: &Map<String, Value>) -> Result<Map<String, Value>, String> {
    let text =
        |k: &str| args.get(k).and_then(Value::as_str).map(String::from).ok_or_else(|| format!("missing text argument {k:?}"));
    let out = match name {
        "echo" => json!({"text": text("text")?}),
        "word_count" => json!({"count": text("text")?.split_whitespace().count()}),
        "network_hubs" => {
            let edges = args.get("edges").and_then(Value::as_array).ok_or("missing list argument \"edges\"")?;
            let mut degree: BTreeMap<String, u64> = BTreeMap::new();
            for e in edges {
                let pair = e.as_array().filter(|p| p.len() == 2).ok_or_else(|| format!("edge {e} is not a pair"))?;
                for node in pair {
                    let n = node.as_str().map(String::from).unwrap_or_else(|| node.to_string());
                    *degree.entry(n).or_insert(0) += 1;
                }
            }
            let max = degree.values().copied().max().unwrap_or(0);
            let hubs: Vec<&String> = degree.iter().filter(|(_, d)| **d == max && max > 0).map(|(n, _)| n).collect();
            json!({"hubs": hubs, "degree": max})
        }
        other => return Err(format!("unknown builtin {other:?}")),
    };
    match out {
        Value::Object(o) => Ok(o),
        _ => unreachable!(),
    }
}

/// Offline stand-in for the external services behind HTTP tools: echoes the
/// request with a deterministic record list.
pub struct StubTransport;

impl HttpTransport for StubTransport {
    fn post_json(&self, url: &str, _headers: &BTreeMap<String, String>, body: &Value) -> Result<Value, TransportError> {
        let query = body.get("query").or_else(|| body.get("id")).or_else(|| body.get("sequence")).cloned().unwrap_or(Value::Null);
        let service = url.rsplit('/').next().unwrap_or_default();
        Ok(json!({
            "service": service,
            "query": query,
            "results": [format!("{service}:{}", sha256_hex(body.to_string().as_bytes())[..8].to_string())],
        }))
    }
}

fn schema(fields: &[(&str, &str)]) -> BTreeMap<String, String> {
    fields.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn case(input: &[(&str, Value)], expect: Expectation) -> ToolTestCase {
    ToolTestCase { input: input.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(), expect }
}

/// Seed manifests for the three categories. The HTTP ones are stubs for
/// external services and route to `endpoint_base`.
pub fn predefined_tools(endpoint_base: &str) -> Vec<ToolManifest> {
    let base = endpoint_base.trim_end_matches('/');
    let http = |name: &str, category, description: &str, input: &[(&str, &str)], probe: (&str, Value)| ToolManifest {
        id: String::new(),
        name: name.to_string(),
        category,
        description: description.to_string(),
        input_schema: schema(input),
        output_schema: schema(&[("results", "list")]),
        invocation: InvocationSpec {
            kind: InvocationKind::HttpQuery,
            target: format!("{base}/{name}"),
            timeout_secs: 30,
            arg_mapping: BTreeMap::new(),
        },
        status: ToolStatus::Validated,
        test_cases: vec![case(
            &[probe],
            Expectation { field: Some("results".into()), contains: Some(name.to_string()), equals: None },
        )],
        provenance: Provenance::Predefined,
        created_in_session: None,
        script_sha256: None,
    };
    let builtin =
        |name: &str, description: &str, input: &[(&str, &str)], output: &[(&str, &str)], test: ToolTestCase| ToolManifest {
            id: String::new(),
            name: name.to_string(),
            category: ToolCategory::CustomAnalysis,
            description: description.to_string(),
            input_schema: schema(input),
            output_schema: schema(output),
            invocation: InvocationSpec {
                kind: InvocationKind::Builtin,
                target: name.to_string(),
                timeout_secs: 5,
                arg_mapping: BTreeMap::new(),
            },
            status: ToolStatus::Validated,
            test_cases: vec![test],
            provenance: Provenance::Predefined,
            created_in_session: None,
            script_sha256: None,
        };
    use ToolCategory::*;
    let mut tools = vec![
        http(
            "pubmed_search",
            DatabaseQuery,
            "search PubMed biomedical literature abstracts by keyword query",
            &[("query", "text")],
            ("query", json!("MTF1")),
        ),
        http(
            "clinvar_lookup",
            DatabaseQuery,
            "look up ClinVar clinical significance of a genetic variant",
            &[("query", "text")],
            ("query", json!("BRCA1")),
        ),
        http(
            "pdb_structure_fetch",
            DatabaseQuery,
            "fetch a protein structure entry from the Protein Data Bank",
            &[("id", "text")],
            ("id", json!("1TUP")),
        ),
        http(
            "alphafold3_predict",
            FoundationModel,
            "predict protein structure from sequence with AlphaFold 3",
            &[("sequence", "text")],
            ("sequence", json!("MKT")),
        ),
        http(
            "scgpt_annotate",
            FoundationModel,
            "interpret single-cell expression data with scGPT cell embeddings",
            &[("query", "text")],
            ("query", json!("pbmc")),
        ),
        http(
            "esm3_embed",
            FoundationModel,
            "protein language model embedding with ESM3",
            &[("sequence", "text")],
            ("sequence", json!("MKT")),
        ),
        builtin(
            "echo",
            "echo text back unchanged",
            &[("text", "text")],
            &[("text", "text")],
            case(&[("text", json!("x"))], Expectation::contains("x")),
        ),
        builtin(
            "word_count",
            "count words in a text",
            &[("text", "text")],
            &[("count", "integer")],
            case(
                &[("text", json!("a b c"))],
                Expectation { field: Some("count".into()), contains: None, equals: Some(json!(3)) },
            ),
        ),
        builtin(
            "network_hubs",
            "network analysis: find the highest-degree hub nodes of an interaction network edge list",
            &[("edges", "list")],
            &[("hubs", "list"), ("degree", "integer")],
            case(
                &[("edges", json!([["a", "b"], ["a", "c"]]))],
                Expectation { field: Some("hubs".into()), contains: None, equals: Some(json!(["a"])) },
            ),
        ),
    ];
    for t in &mut tools {
        t.id = t.content_id();
    }
    tools
}
