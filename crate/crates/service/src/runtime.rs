//! Builds the engine from a [`RunConfig`]. The CLI and the HTTP service both
//! go through [`Runtime::open`], so the same config yields the same engine.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use evoflow_core::events::EventStore;
use evoflow_core::fixtures;
use evoflow_core::orchestrator::{Engine, EngineSettings};
use evoflow_core::provider::http::{HttpChatBackend, ReqwestTransport};
use evoflow_core::provider::{ChatBackend, Provider, RecordingBackend, ScriptMode, ScriptedBackend, ScriptedTranscript};
use evoflow_core::sandbox::{ResourceLimits, Sandbox};
use evoflow_core::templates::TemplateLibrary;
use evoflow_core::tools::{OceanSettings, ToolOcean};

use crate::config::{ProviderMode, RunConfig};

pub const FIXTURES: [&str; 4] = ["happy_path", "capability_gap", "always_revise", "failing_tool_creator"];

pub fn fixture_transcript(name: &str) -> Option<ScriptedTranscript> {
    Some(match name {
        "happy_path" => fixtures::happy_path(),
        "capability_gap" => fixtures::capability_gap(),
        "always_revise" => fixtures::always_revise(),
        "failing_tool_creator" => fixtures::failing_tool_creator(),
        _ => return None,
    })
}

/// The transcript a scripted config points at.
pub fn scripted_transcript(config: &RunConfig) -> anyhow::Result<ScriptedTranscript> {
    let p = &config.provider;
    let mut transcript = match &p.transcript {
        Some(path) => ScriptedTranscript::load(path, p.script_mode.unwrap_or(ScriptMode::StrictSequence))
            .with_context(|| format!("loading transcript {}", path.display()))?,
        None => fixture_transcript(&p.fixture)
            .ok_or_else(|| anyhow!("unknown fixture {:?}; known: {}", p.fixture, FIXTURES.join(", ")))?,
    };
    if let Some(mode) = p.script_mode {
        transcript.mode = mode;
    }
    Ok(transcript)
}

/// A fresh provider for `config`. With `recorder`, every exchange is also
/// captured there.
pub fn build_provider(config: &RunConfig, recorder: Option<&mut Option<Arc<RecordingBackend>>>) -> anyhow::Result<Provider> {
    let mut backend: Arc<dyn ChatBackend> = match config.provider.mode {
        ProviderMode::Scripted => Arc::new(ScriptedBackend::new(scripted_transcript(config)?)),
        ProviderMode::Http => {
            let transport = ReqwestTransport::new(Duration::from_secs(config.provider.timeout_secs))?;
            Arc::new(HttpChatBackend::new(Arc::new(transport)))
        }
    };
    if let Some(slot) = recorder {
        let rec = Arc::new(RecordingBackend::new(backend));
        *slot = Some(rec.clone());
        backend = rec;
    }
    Ok(Provider::new(config.bindings(), backend)
        .with_retries(config.provider.max_retries, Duration::from_millis(config.provider.backoff_ms)))
}

fn step_limits(config: &RunConfig) -> ResourceLimits {
    ResourceLimits {
        wall_clock_secs: config.sandbox.wall_clock_secs,
        cpu_time_secs: config.sandbox.cpu_time_secs,
        memory_bytes: config.sandbox.memory_bytes,
        ..Default::default()
    }
}

fn engine_settings(config: &RunConfig) -> EngineSettings {
    EngineSettings {
        template_threshold: config.template_threshold,
        step_limits: step_limits(config),
        env_spec: config.sandbox.env_spec.clone(),
    }
}

fn ocean(config: &RunConfig, sandbox: Arc<Sandbox>) -> anyhow::Result<ToolOcean> {
    let mut ocean = ToolOcean::new(sandbox).with_settings(OceanSettings {
        reuse_threshold: config.tools.reuse_threshold,
        creation_retries: config.tools.creation_retries,
        limits: ResourceLimits { wall_clock_secs: config.sandbox.wall_clock_secs.min(30), ..step_limits(config) },
    });
    if config.tools.live_http {
        ocean = ocean.with_transport(Arc::new(ReqwestTransport::new(Duration::from_secs(config.provider.timeout_secs))?));
    }
    Ok(ocean)
}

pub struct Runtime {
    pub config: RunConfig,
    pub engine: Arc<Engine>,
    recorder: Option<Arc<RecordingBackend>>,
    persist_lock: Mutex<()>,
}

impl Runtime {
    /// Opens (or creates) the data directory:
    ///
    /// ```text
    /// <data_dir>/events/      session logs and snapshots
    /// <data_dir>/templates.jsonl
    /// <data_dir>/tools/       registry and tool scripts
    /// <data_dir>/sandbox/     workspaces
    /// ```
    pub fn open(config: RunConfig) -> anyhow::Result<Self> {
        Self::open_inner(config, false)
    }

    /// Like [`Runtime::open`], capturing provider exchanges for `--record`.
    pub fn open_recording(config: RunConfig) -> anyhow::Result<Self> {
        Self::open_inner(config, true)
    }

    fn open_inner(config: RunConfig, record: bool) -> anyhow::Result<Self> {
        config.validate()?;
        let dir = &config.data_dir;
        std::fs::create_dir_all(dir).with_context(|| format!("data dir {} is not writable", dir.display()))?;
        let probe = dir.join(".write-probe");
        std::fs::write(&probe, b"").with_context(|| format!("data dir {} is not writable", dir.display()))?;
        let _ = std::fs::remove_file(probe);

        let store = Arc::new(EventStore::open(dir.join("events"))?);
        let templates = Arc::new(TemplateLibrary::load_or_default(&dir.join("templates.jsonl"))?);
        let sandbox = Arc::new(Sandbox::new(dir.join("sandbox")).with_interpreter(config.sandbox.interpreter.clone()));
        let tools = ocean(&config, sandbox.clone())?.load(&dir.join("tools"))?;
        if config.tools.seed_predefined && tools.is_empty() {
            tools.seed_predefined(&config.tools.endpoint_base)?;
        }
        let mut recorder = None;
        let provider = build_provider(&config, record.then_some(&mut recorder))?;
        let engine = Engine::new(provider, templates, Arc::new(tools), sandbox, store).with_settings(engine_settings(&config));
        Ok(Self { config, engine: Arc::new(engine), recorder, persist_lock: Mutex::new(()) })
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }

    pub fn session_log(&self, session_id: &str) -> PathBuf {
        self.data_dir().join("events").join("sessions").join(format!("{session_id}.jsonl"))
    }

    /// Writes the template library and tool registry back to the data dir.
    pub fn persist(&self) -> anyhow::Result<()> {
        let _guard = self.persist_lock.lock().unwrap();
        self.engine.templates().save(&self.data_dir().join("templates.jsonl"))?;
        self.engine.tools().save(&self.data_dir().join("tools"))?;
        Ok(())
    }

    /// Saves the captured exchanges as a strict transcript.
    pub fn save_recording(&self, path: &Path) -> anyhow::Result<()> {
        let Some(rec) = &self.recorder else { bail!("runtime was not opened for recording") };
        rec.transcript().save(path).with_context(|| format!("writing {}", path.display()))
    }

    /// A throwaway engine for benchmark runs: fresh provider, in-memory log,
    /// empty library, registry seeded like the main one. Sandbox workspaces
    /// go under `<data_dir>/sandbox/bench`.
    pub fn bench_engine(&self) -> anyhow::Result<Engine> {
        let config = &self.config;
        let sandbox = Arc::new(
            Sandbox::new(self.data_dir().join("sandbox").join("bench")).with_interpreter(config.sandbox.interpreter.clone()),
        );
        let tools = ocean(config, sandbox.clone())?;
        if config.tools.seed_predefined {
            tools.seed_predefined(&config.tools.endpoint_base)?;
        }
        Ok(Engine::new(
            build_provider(config, None)?,
            Arc::new(TemplateLibrary::new()),
            Arc::new(tools),
            sandbox,
            Arc::new(EventStore::in_memory()),
        )
        .with_settings(engine_settings(config)))
    }
}
