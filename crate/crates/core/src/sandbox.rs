//! Isolated execution of generated scripts.
//!
//! Each [`Workspace`] is a directory `workspace/<id>/` holding the current
//! `script`, an `artifacts/` working directory, `tmp/`, and `provision.log`.
//! Scripts run as a child process group with a cleared environment, rlimits
//! for CPU time and address space, a wall-clock deadline, and (on Linux with
//! Landlock) file writes confined to the workspace and TCP denied.

#[cfg(target_os = "linux")]
mod landlock;

use std::collections::HashSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPolicy {
    #[default]
    Denied,
    Allowlist,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub wall_clock_secs: u64,
    pub cpu_time_secs: u64,
    pub memory_bytes: u64,
    #[serde(default)]
    pub network: NetworkPolicy,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self { wall_clock_secs: 60, cpu_time_secs: 60, memory_bytes: 1 << 30, network: NetworkPolicy::Denied }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KillReason {
    Timeout,
    Memory,
    CpuTime,
    Signal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExitStatus {
    Exited { code: i32 },
    Killed { reason: KillReason },
}

impl ExitStatus {
    pub fn success(&self) -> bool {
        matches!(self, ExitStatus::Exited { code: 0 })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub size: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit: ExitStatus,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProvisionReport {
    pub satisfied: Vec<String>,
    pub failed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub id: String,
    pub root_dir: PathBuf,
    pub env_spec: Vec<String>,
    pub limits: ResourceLimits,
    pub created_at: DateTime<Utc>,
    pub provision: ProvisionReport,
}

impl Workspace {
    pub fn artifacts_dir(&self) -> PathBuf {
        self.root_dir.join("artifacts")
    }
}

/// How file writes are confined on this host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "mechanism", rename_all = "snake_case")]
pub enum Confinement {
    Landlock { abi: u32 },
    Unenforced,
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("workspace {0} has a running script")]
    Busy(String),
    #[error("workspace io: {0}")]
    Io(#[from] io::Error),
}

const TRUNCATION_MARKER: &str = "\n[output truncated: ";

#[derive(Debug)]
pub struct Sandbox {
    root: PathBuf,
    interpreter: String,
    grace: Duration,
    stream_cap: usize,
    running: Mutex<HashSet<String>>,
    next_id: Mutex<u64>,
}

impl Sandbox {
    /// `root` is made absolute: scripts run with their workspace as cwd.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            root: std::path::absolute(&root).unwrap_or(root),
            interpreter: "python3".to_string(),
            grace: Duration::from_secs(5),
            stream_cap: 64 * 1024,
            running: Mutex::new(HashSet::new()),
            next_id: Mutex::new(0),
        }
    }

    pub fn with_interpreter(mut self, interpreter: impl Into<String>) -> Self {
        self.interpreter = interpreter.into();
        self
    }

    pub fn with_stream_cap(mut self, bytes: usize) -> Self {
        self.stream_cap = bytes;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn grace(&self) -> Duration {
        self.grace
    }

    pub fn confinement(&self) -> Confinement {
        #[cfg(target_os = "linux")]
        if let Some(abi) = landlock::abi_version() {
            return Confinement::Landlock { abi };
        }
        Confinement::Unenforced
    }

    /// Creates `workspace/<id>/`. `id_hint` is used verbatim when free,
    /// otherwise suffixed; `None` allocates `ws-<n>`.
    pub fn create_workspace(
        &self,
        id_hint: Option<&str>,
        env_spec: &[String],
        limits: ResourceLimits,
    ) -> Result<Workspace, SandboxError> {
        let base = self.root.join("workspace");
        fs::create_dir_all(&base)?;
        let id = {
            let mut n = self.next_id.lock().unwrap();
            let mut attempt = 0u64;
            loop {
                attempt += 1;
                let candidate = match id_hint {
                    Some(h) if attempt == 1 => h.to_string(),
                    Some(h) => format!("{h}-{attempt}"),
                    None => {
                        *n += 1;
                        format!("ws-{:04}", *n)
                    }
                };
                match fs::create_dir(base.join(&candidate)) {
                    Ok(()) => break candidate,
                    Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let root_dir = base.join(&id);
        fs::create_dir_all(root_dir.join("artifacts"))?;
        fs::create_dir_all(root_dir.join("tmp"))?;
        let provision = self.provision(&root_dir, env_spec)?;
        Ok(Workspace { id, root_dir, env_spec: env_spec.to_vec(), limits, created_at: Utc::now(), provision })
    }

    /// Best-effort: each declaration is checked by importing its module.
    /// Failures are logged and reported; the workspace stays usable.
    fn provision(&self, root_dir: &Path, env_spec: &[String]) -> io::Result<ProvisionReport> {
        let mut log = fs::File::create(root_dir.join("provision.log"))?;
        let mut report = ProvisionReport::default();
        writeln!(log, "interpreter: {}", self.interpreter)?;
        for dep in env_spec {
            let module: String = dep.split(|c: char| "<>=!~[ ;".contains(c)).next().unwrap_or_default().replace('-', "_");
            let ok = !module.is_empty()
                && module.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.')
                && Command::new(&self.interpreter)
                    .args(["-c", &format!("import {module}")])
                    .stdin(Stdio::null())
                    .stdout(Stdio::null())
                    .stderr(Stdio::null())
                    .status()
                    .map(|s| s.success())
                    .unwrap_or(false);
            writeln!(log, "{} {dep}", if ok { "ok" } else { "unavailable" })?;
            if ok {
                report.satisfied.push(dep.clone());
            } else {
                report.failed.push(dep.clone());
            }
        }
        Ok(report)
    }

    /// Runs `script_text` with the configured interpreter inside `ws`.
    /// Kills and limit breaches come back as data in [`ExecutionResult::exit`].
    pub fn run_script(&self, ws: &Workspace, script_text: &str, args: &[String]) -> Result<ExecutionResult, SandboxError> {
        if !self.running.lock().unwrap().insert(ws.id.clone()) {
            return Err(SandboxError::Busy(ws.id.clone()));
        }
        let result = self.run_inner(ws, script_text, args);
        self.running.lock().unwrap().remove(&ws.id);
        result
    }

    pub fn is_running(&self, ws: &Workspace) -> bool {
        self.running.lock().unwrap().contains(&ws.id)
    }

    fn run_inner(&self, ws: &Workspace, script_text: &str, args: &[String]) -> Result<ExecutionResult, SandboxError> {
        let script_path = ws.root_dir.join("script");
        fs::write(&script_path, script_text)?;
        let mut cmd = Command::new(&self.interpreter);
        cmd.arg("-B").arg(&script_path).args(args);
        cmd.current_dir(ws.artifacts_dir())
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/local/bin:/usr/bin:/bin".into()))
            .env("HOME", &ws.root_dir)
            .env("TMPDIR", ws.root_dir.join("tmp"))
            .env("LANG", "C.UTF-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if ws.limits.network == NetworkPolicy::Denied {
            for var in ["http_proxy", "https_proxy", "HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY"] {
                cmd.env(var, "http://127.0.0.1:9");
            }
        }

        #[cfg(target_os = "linux")]
        let _ruleset = self.apply_os_limits(&mut cmd, ws)?;

        let started = Instant::now();
        let mut child = cmd.spawn()?;
        let pid = child.id();
        let stdout_rx = spawn_reader(child.stdout.take(), self.stream_cap);
        let stderr_rx = spawn_reader(child.stderr.take(), self.stream_cap);

        let deadline = Duration::from_secs(ws.limits.wall_clock_secs);
        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() >= deadline {
                timed_out = true;
                kill_group(pid);
                let _ = child.kill();
                break child.wait()?;
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let duration_ms = started.elapsed().as_millis() as u64;
        // Reap anything the script left behind in its process group.
        kill_group(pid);

        let stdout = stdout_rx.recv_timeout(self.grace).unwrap_or_default();
        let stderr = stderr_rx.recv_timeout(self.grace).unwrap_or_default();
        let exit = classify(status, timed_out, &stderr);
        let artifacts = collect_artifacts(&ws.artifacts_dir())?;
        Ok(ExecutionResult { exit, stdout, stderr, duration_ms, artifacts })
    }

    #[cfg(target_os = "linux")]
    fn apply_os_limits(&self, cmd: &mut Command, ws: &Workspace) -> io::Result<Option<landlock::Ruleset>> {
        use std::os::unix::process::CommandExt;

        let deny_net = ws.limits.network == NetworkPolicy::Denied;
        let root = ws.root_dir.canonicalize()?;
        let ruleset = landlock::Ruleset::confine_writes(&[&root, Path::new("/dev")], deny_net).ok();
        let ruleset_fd = ruleset.as_ref().map(landlock::Ruleset::raw_fd);
        let cpu = ws.limits.cpu_time_secs;
        let mem = ws.limits.memory_bytes;
        // SAFETY: the closure only issues async-signal-safe syscalls.
        unsafe {
            cmd.pre_exec(move || {
                if libc::setpgid(0, 0) != 0 {
                    return Err(io::Error::last_os_error());
                }
                let cpu_lim = libc::rlimit { rlim_cur: cpu, rlim_max: cpu + 1 };
                libc::setrlimit(libc::RLIMIT_CPU, &cpu_lim);
                let mem_lim = libc::rlimit { rlim_cur: mem, rlim_max: mem };
                libc::setrlimit(libc::RLIMIT_AS, &mem_lim);
                let core = libc::rlimit { rlim_cur: 0, rlim_max: 0 };
                libc::setrlimit(libc::RLIMIT_CORE, &core);
                if deny_net {
                    // Needs CAP_SYS_ADMIN; Landlock's TCP rule covers the rest.
                    libc::unshare(libc::CLONE_NEWNET);
                }
                if let Some(fd) = ruleset_fd {
                    landlock::restrict(fd)?;
                }
                Ok(())
            });
        }
        Ok(ruleset)
    }

    /// Removes the workspace directory. Destroying twice is a no-op.
    pub fn destroy_workspace(&self, ws: &Workspace) -> Result<(), SandboxError> {
        if self.is_running(ws) {
            return Err(SandboxError::Busy(ws.id.clone()));
        }
        match fs::remove_dir_all(&ws.root_dir) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(target_os = "linux")]
fn kill_group(pid: u32) {
    // SAFETY: signalling our own child's process group.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

#[cfg(not(target_os = "linux"))]
fn kill_group(_pid: u32) {}

fn classify(status: std::process::ExitStatus, timed_out: bool, stderr: &str) -> ExitStatus {
    if timed_out {
        return ExitStatus::Killed { reason: KillReason::Timeout };
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            #[cfg(target_os = "linux")]
            if sig == libc::SIGXCPU {
                return ExitStatus::Killed { reason: KillReason::CpuTime };
            }
            let _ = sig;
            return ExitStatus::Killed { reason: KillReason::Signal };
        }
    }
    let code = status.code().unwrap_or(-1);
    if code != 0 && (stderr.contains("MemoryError") || stderr.contains("Cannot allocate memory")) {
        return ExitStatus::Killed { reason: KillReason::Memory };
    }
    ExitStatus::Exited { code }
}

/// Reads a stream to the end, keeping at most `cap` bytes.
fn spawn_reader<R: Read + Send + 'static>(stream: Option<R>, cap: usize) -> mpsc::Receiver<String> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let Some(mut stream) = stream else {
            let _ = tx.send(String::new());
            return;
        };
        let mut kept = Vec::new();
        let mut dropped = 0usize;
        let mut buf = [0u8; 8192];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    dropped += n.saturating_sub(room);
                }
            }
        }
        let mut text = String::from_utf8_lossy(&kept).into_owned();
        if dropped > 0 {
            text.push_str(&format!("{TRUNCATION_MARKER}{dropped} bytes]\n"));
        }
        let _ = tx.send(text);
    });
    rx
}

fn collect_artifacts(dir: &Path) -> io::Result<Vec<Artifact>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<Artifact>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let ft = entry.file_type()?;
            let path = entry.path();
            if ft.is_dir() {
                walk(base, &path, out)?;
            } else if ft.is_file() {
                let bytes = fs::read(&path)?;
                let rel = path.strip_prefix(base).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                out.push(Artifact { path: rel, size: bytes.len() as u64, sha256: sha256_hex(&bytes) });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.exists() {
        walk(dir, dir, &mut out)?;
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sandbox() -> (tempfile::TempDir, Sandbox) {
        let dir = tempfile::tempdir().unwrap();
        let sb = Sandbox::new(dir.path());
        (dir, sb)
    }

    fn limits(wall: u64) -> ResourceLimits {
        ResourceLimits { wall_clock_secs: wall, cpu_time_secs: wall + 5, memory_bytes: 512 << 20, network: NetworkPolicy::Denied }
    }

    #[test]
    fn prints_42() {
        let (_d, sb) = sandbox();
        let ws = sb.create_workspace(None, &[], limits(10)).unwrap();
        let r = sb.run_script(&ws, "print(\"42\")", &[]).unwrap();
        assert_eq!(r.exit, ExitStatus::Exited { code: 0 });
        assert_eq!(r.stdout, "42\n");
        assert!(r.artifacts.is_empty());
    }

    #[test]
    fn nonzero_exit_is_data() {
        let (_d, sb) = sandbox();
        let ws = sb.create_workspace(None, &[], limits(10)).unwrap();
        let r = sb.run_script(&ws, "import sys\nsys.stderr.write('boom')\nsys.exit(3)", &[]).unwrap();
        assert_eq!(r.exit, ExitStatus::Exited { code: 3 });
        assert_eq!(r.stderr, "boom");
    }

    #[test]
    fn entry_args_are_passed() {
        let (_d, sb) = sandbox();
        let ws = sb.create_workspace(None, &[], limits(10)).unwrap();
        let r = sb.run_script(&ws, "import sys\nprint(','.join(sys.argv[1:]))", &["a".into(), "b c".into()]).unwrap();
        assert_eq!(r.stdout, "a,b c\n");
    }

    #[test]
    fn distinct_workspaces_and_provisioning_report() {
        let (_d, sb) = sandbox();
        let a = sb.create_workspace(None, &[], limits(5)).unwrap();
        let b = sb.create_workspace(None, &["json".into(), "definitely_not_a_module_xyz>=1.0".into()], limits(5)).unwrap();
        assert_ne!(a.root_dir, b.root_dir);
        assert_eq!(b.provision.satisfied, vec!["json".to_string()]);
        assert_eq!(b.provision.failed, vec!["definitely_not_a_module_xyz>=1.0".to_string()]);
        let log = fs::read_to_string(b.root_dir.join("provision.log")).unwrap();
        assert!(log.contains("unavailable definitely_not_a_module_xyz"));
        let r = sb.run_script(&b, "print(1+1)", &[]).unwrap();
        assert_eq!(r.stdout, "2\n");
    }

    #[test]
    fn id_hint_collision_gets_suffix() {
        let (_d, sb) = sandbox();
        let a = sb.create_workspace(Some("sess"), &[], limits(5)).unwrap();
        let b = sb.create_workspace(Some("sess"), &[], limits(5)).unwrap();
        assert_eq!(a.id, "sess");
        assert_ne!(a.id, b.id);
    }

    #[test]
    fn stream_cap_truncates_with_marker() {
        let dir = tempfile::tempdir().unwrap();
        let sb = Sandbox::new(dir.path()).with_stream_cap(100);
        let ws = sb.create_workspace(None, &[], limits(10)).unwrap();
        let r = sb.run_script(&ws, "print('x' * 1000)", &[]).unwrap();
        assert!(r.stdout.starts_with(&"x".repeat(100)));
        assert!(r.stdout.contains("[output truncated: 901 bytes]"));
    }

    #[test]
    fn memory_limit_is_reported() {
        let (_d, sb) = sandbox();
        let mut l = limits(20);
        l.memory_bytes = 256 << 20;
        let ws = sb.create_workspace(None, &[], l).unwrap();
        let r = sb.run_script(&ws, "x = bytearray(2 * 1024 * 1024 * 1024)\nprint(len(x))", &[]).unwrap();
        assert_eq!(r.exit, ExitStatus::Killed { reason: KillReason::Memory });
    }

    #[test]
    fn cpu_limit_is_reported() {
        let (_d, sb) = sandbox();
        let ws = sb.create_workspace(None, &[], ResourceLimits { wall_clock_secs: 20, cpu_time_secs: 1, ..limits(20) }).unwrap();
        let r = sb.run_script(&ws, "while True:\n    pass", &[]).unwrap();
        assert_eq!(r.exit, ExitStatus::Killed { reason: KillReason::CpuTime });
    }

    #[test]
    fn destroy_is_idempotent_and_busy_while_running() {
        let (_d, sb) = sandbox();
        let ws = sb.create_workspace(None, &[], limits(10)).unwrap();
        std::thread::scope(|s| {
            let h = s.spawn(|| sb.run_script(&ws, "import time\ntime.sleep(1)", &[]).unwrap());
            let t0 = Instant::now();
            while !sb.is_running(&ws) && t0.elapsed() < Duration::from_secs(5) {
                std::thread::sleep(Duration::from_millis(5));
            }
            assert!(matches!(sb.destroy_workspace(&ws), Err(SandboxError::Busy(_))));
            assert!(matches!(sb.run_script(&ws, "print(1)", &[]), Err(SandboxError::Busy(_))));
            h.join().unwrap();
        });
        sb.destroy_workspace(&ws).unwrap();
        assert!(!ws.root_dir.exists());
        sb.destroy_workspace(&ws).unwrap();
    }

    #[test]
    fn timeout_kills_within_grace() {
        let (_d, sb) = sandbox();
        let ws = sb.create_workspace(None, &[], limits(2)).unwrap();
        let t0 = Instant::now();
        let r = sb.run_script(&ws, "while True:\n    pass", &[]).unwrap();
        assert_eq!(r.exit, ExitStatus::Killed { reason: KillReason::Timeout });
        assert!(t0.elapsed() < Duration::from_secs(2) + sb.grace());
        assert!(r.duration_ms >= 2000 && r.duration_ms < 3000, "{}", r.duration_ms);
    }

    #[test]
    fn writes_outside_root_are_blocked() {
        let (d, sb) = sandbox();
        if sb.confinement() == Confinement::Unenforced {
            eprintln!("landlock unavailable; skipping");
            return;
        }
        let ws = sb.create_workspace(None, &[], limits(10)).unwrap();
        let victim = d.path().join("victim.txt");
        fs::write(&victim, "orig").unwrap();
        let script = format!(
            "import os\nok = []\nfor p in ['../../../escape.txt', '../../victim.txt', '/tmp/evoflow-escape-probe', {victim:?}]:\n    try:\n        open(p, 'w').write('pwned')\n        ok.append(p)\n    except OSError:\n        pass\nopen('inside.txt', 'w').write('fine')\nprint(ok)",
            victim = victim.to_string_lossy()
        );
        let r = sb.run_script(&ws, &script, &[]).unwrap();
        assert_eq!(r.stdout.trim(), "[]", "{}", r.stderr);
        assert_eq!(fs::read_to_string(&victim).unwrap(), "orig");
        assert!(!d.path().join("escape.txt").exists());
        assert!(!Path::new("/tmp/evoflow-escape-probe").exists());
        assert_eq!(r.artifacts.len(), 1);
        assert_eq!(r.artifacts[0].path, "inside.txt");
    }

    #[test]
    fn background_children_are_reaped() {
        let (_d, sb) = sandbox();
        let ws = sb.create_workspace(None, &[], limits(10)).unwrap();
        let script =
            "import subprocess, sys\np = subprocess.Popen([sys.executable, '-c', 'import time; time.sleep(30)'])\nprint(p.pid)";
        let r = sb.run_script(&ws, script, &[]).unwrap();
        let pid: i32 = r.stdout.trim().parse().unwrap();
        std::thread::sleep(Duration::from_millis(100));
        let alive = Path::new(&format!("/proc/{pid}")).exists()
            && !fs::read_to_string(format!("/proc/{pid}/stat")).unwrap_or_default().contains(") Z ");
        assert!(!alive, "orphan {pid} survived");
    }
}
