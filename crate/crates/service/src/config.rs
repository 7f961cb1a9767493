//! TOML run configuration. Values may reference environment variables as
//! `${NAME}`; a missing variable is an error naming it.

use std::path::{Path, PathBuf};

use evoflow_core::provider::{RoleBinding, ScriptMode};
use evoflow_core::session::{AgentRole, GateFlags, SessionConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config references ${{{0}}}, which is not set")]
    MissingEnv(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    /// Replies come from a built-in fixture or a transcript file.
    #[default]
    Scripted,
    /// Replies come from the chat-completion endpoints in `[[roles]]`.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub mode: ProviderMode,
    /// Built-in scenario name, used when no transcript is given.
    pub fixture: String,
    pub transcript: Option<PathBuf>,
    /// Overrides the fixture's own mode; transcripts default to strict.
    pub script_mode: Option<ScriptMode>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Scripted,
            fixture: "happy_path".into(),
            transcript: None,
            script_mode: None,
            timeout_secs: 120,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    pub max_iterations: u32,
    pub post_plan_gate: bool,
    pub pre_tool_registration_gate: bool,
}

impl Default for SessionSection {
    fn default() -> Self {
        Self { max_iterations: 5, post_plan_gate: false, pre_tool_registration_gate: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialsSection {
    pub budget: u32,
}

impl Default for TrialsSection {
    fn default() -> Self {
        Self { budget: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSection {
    pub wall_clock_secs: u64,
    pub cpu_time_secs: u64,
    pub memory_bytes: u64,
    pub interpreter: String,
    /// Python modules each session workspace must provide.
    pub env_spec: Vec<String>,
}

impl Default for SandboxSection {
    fn default() -> Self {
        Self {
            wall_clock_secs: 60,
            cpu_time_secs: 60,
            memory_bytes: 1 << 30,
            interpreter: "python3".into(),
            env_spec: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolsSection {
    pub endpoint_base: String,
    /// Send http_query tool calls over the network instead of the local stub.
    pub live_http: bool,
    pub seed_predefined: bool,
    pub reuse_threshold: f64,
    pub creation_retries: u32,
}

impl Default for ToolsSection {
    fn default() -> Self {
        Self {
            endpoint_base: "http://127.0.0.1:8787".into(),
            live_http: false,
            seed_predefined: true,
            reuse_threshold: 0.6,
            creation_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub bench: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        Self { bench: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub template_threshold: f64,
    pub provider: ProviderSection,
    pub roles: Vec<RoleBinding>,
    pub session: SessionSection,
    pub trials: TrialsSection,
    pub sandbox: SandboxSection,
    pub tools: ToolsSection,
    pub seeds: SeedsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("evoflow-data"),
            template_threshold: 0.35,
            provider: ProviderSection::default(),
            roles: Vec::new(),
            session: SessionSection::default(),
            trials: TrialsSection::default(),
            sandbox: SandboxSection::default(),
            tools: ToolsSection::default(),
            seeds: SeedsSection::default(),
        }
    }
}

/// Replaces each `${NAME}` with the variable's value.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            return Err(ConfigError::Invalid(format!("unterminated ${{ in {:?}", &rest[start..])));
        };
        let name = &after[..end];
        out.push_str(&lookup(name).ok_or_else(|| ConfigError::MissingEnv(name.to_string()))?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        let config: RunConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Static checks. Directory writability is checked when the runtime opens.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.session.max_iterations == 0 {
            return Err(ConfigError::Invalid("session.max_iterations must be at least 1".into()));
        }
        if self.trials.budget == 0 {
            return Err(ConfigError::Invalid("trials.budget must be at least 1".into()));
        }
        if self.sandbox.wall_clock_secs == 0 {
            return Err(ConfigError::Invalid("sandbox.wall_clock_secs must be at least 1".into()));
        }
        if !self.roles.is_empty() {
            for role in [AgentRole::Manager, AgentRole::Dev, AgentRole::Critic, AgentRole::ToolCreator] {
                if !self.roles.iter().any(|b| b.role == role) {
                    return Err(ConfigError::Invalid(format!("roles: no binding for {role}")));
                }
            }
        }
        if self.provider.mode == ProviderMode::Http && self.roles.is_empty() {
            return Err(ConfigError::Invalid("provider.mode = \"http\" needs [[roles]] bindings".into()));
        }
        Ok(())
    }

    pub fn bindings(&self) -> Vec<RoleBinding> {
        if self.roles.is_empty() {
            RoleBinding::defaults()
        } else {
            self.roles.clone()
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            max_iterations: self.session.max_iterations,
            gates: GateFlags {
                post_plan: self.session.post_plan_gate,
                pre_tool_registration: self.session.pre_tool_registration_gate,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_interpolation() {
        let look = |k: &str| (k == "KEY").then(|| "abc".to_string());
        assert_eq!(interpolate("a ${KEY} b", look).unwrap(), "a abc b");
        assert!(matches!(interpolate("${NOPE}", look), Err(ConfigError::MissingEnv(n)) if n == "NOPE"));
        assert!(interpolate("${KEY", look).is_err());
    }

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        let c = RunConfig::parse("[session]\nmax_iterations = 2\npost_plan_gate = true\n[trials]\nbudget = 3\n").unwrap();
        assert_eq!(c.session_config().max_iterations, 2);
        assert!(c.session_config().gates.post_plan);
        assert_eq!(c.trials.budget, 3);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::parse("[session]\nmax_iterations = 0\n").is_err());
        assert!(RunConfig::parse("[trials]\nbudget = 0\n").is_err());
        assert!(RunConfig::parse("[provider]\nmode = \"http\"\n").is_err());
        assert!(RunConfig::parse("unknown_key = 1\n").is_err());
        let partial = "[[roles]]\nrole = \"manager\"\nmodel_id = \"m\"\nendpoint = \"http://x\"\n";
        let err = RunConfig::parse(partial).unwrap_err().to_string();
        assert!(err.contains("no binding for dev"), "{err}");
    }
}
