//! Runs every replica of every role as a local OS process.
//!
//! Each replica runs `sh -c <cmd>` in its own process group inside a
//! per-experiment scratch directory, with `EXPERIMENT_ID`, `ROLE`, `RANK` and
//! `NUM_WORKERS` set. The experiment succeeds when all replicas exit 0; the
//! first nonzero exit fails it and the remaining replicas are killed.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;

use super::{BackendKind, BackendView, ExitSummary, Monitor, SubmissionHandle, SubmitError, Submitter};
use crate::domain::{EventKind, ExperimentStatus};
use crate::experiment::{ExperimentError, ExperimentRecord, Telemetry};

pub const DEFAULT_MAX_REPLICAS: u32 = 16;

#[derive(Debug, Clone)]
pub struct LocalConfig {
    pub scratch_root: PathBuf,
    pub max_replicas: u32,
    pub poll_interval: Duration,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            scratch_root: std::env::temp_dir().join("ctower-scratch"),
            max_replicas: DEFAULT_MAX_REPLICAS,
            poll_interval: Duration::from_millis(10),
        }
    }
}

struct Replica {
    task: String,
    role: String,
    rank: u32,
    role_replicas: u32,
    cmd: String,
}

struct Proc {
    task: String,
    child: Child,
    readers: Vec<JoinHandle<()>>,
    exit: Option<ExitStatus>,
}

impl Proc {
    fn signal_group(&self) {
        // Each replica leads its own process group; take down its descendants too.
        unsafe {
            libc::kill(-(self.child.id() as libc::pid_t), libc::SIGKILL);
        }
    }
}

enum Phase {
    Pending,
    Running,
    Exited(ExitSummary),
}

struct RunState {
    killed: bool,
    phase: Phase,
    procs: Vec<Proc>,
}

struct LocalRun {
    experiment_id: String,
    state: Mutex<RunState>,
    supervisor: Mutex<Option<JoinHandle<()>>>,
}

pub struct LocalSubmitter {
    config: LocalConfig,
    monitor: Weak<dyn Monitor>,
    runs: Mutex<HashMap<String, Arc<LocalRun>>>,
    by_experiment: Mutex<HashMap<String, String>>,
    next_token: AtomicU64,
}

impl LocalSubmitter {
    pub fn new(config: LocalConfig, monitor: Weak<dyn Monitor>) -> Self {
        LocalSubmitter {
            config,
            monitor,
            runs: Mutex::new(HashMap::new()),
            by_experiment: Mutex::new(HashMap::new()),
            next_token: AtomicU64::new(1),
        }
    }

    fn run(&self, handle: &SubmissionHandle) -> Result<Arc<LocalRun>, SubmitError> {
        self.runs
            .lock()
            .get(&handle.backend_token)
            .cloned()
            .ok_or_else(|| SubmitError::UnknownHandle(handle.backend_token.clone()))
    }
}

impl Submitter for LocalSubmitter {
    fn kind(&self) -> BackendKind {
        BackendKind::Local
    }

    fn submit(&self, record: &ExperimentRecord) -> Result<SubmissionHandle, SubmitError> {
        let spec = &record.spec;
        if let Some((role, _)) = spec.tasks.iter().find(|(_, t)| t.resources.gpu > 0) {
            return Err(SubmitError::ResourceSpecUnsupported(format!(
                "local backend cannot provide GPUs (role {role})"
            )));
        }
        let total: u64 = spec.tasks.values().map(|t| u64::from(t.replicas)).sum();
        if total > u64::from(self.config.max_replicas) {
            return Err(SubmitError::ResourceSpecUnsupported(format!(
                "{total} replicas exceed the local cap of {}",
                self.config.max_replicas
            )));
        }
        let Some(monitor) = self.monitor.upgrade() else {
            return Err(SubmitError::BackendUnavailable("monitor is gone".into()));
        };

        let mut by_experiment = self.by_experiment.lock();
        if by_experiment.contains_key(&record.id) {
            return Err(SubmitError::BackendUnavailable(format!("{} already has a live submission", record.id)));
        }
        let token = format!("local-{}", self.next_token.fetch_add(1, Ordering::Relaxed));
        let run = Arc::new(LocalRun {
            experiment_id: record.id.clone(),
            state: Mutex::new(RunState { killed: false, phase: Phase::Pending, procs: Vec::new() }),
            supervisor: Mutex::new(None),
        });
        let replicas = spec
            .tasks
            .iter()
            .flat_map(|(role, task)| {
                let cmd = spec.launch_cmd(role).to_string();
                (0..task.replicas).map(move |rank| Replica {
                    task: format!("{role}-{rank}"),
                    role: role.clone(),
                    rank,
                    role_replicas: task.replicas,
                    cmd: cmd.clone(),
                })
            })
            .collect();
        let workdir = self.config.scratch_root.join(&record.id);
        let poll = self.config.poll_interval;
        let supervised = run.clone();
        let supervisor = thread::Builder::new()
            .name(format!("local-{}", record.id))
            .spawn(move || supervise(supervised, replicas, workdir, poll, monitor))
            .map_err(|e| SubmitError::BackendUnavailable(e.to_string()))?;
        *run.supervisor.lock() = Some(supervisor);

        by_experiment.insert(record.id.clone(), token.clone());
        self.runs.lock().insert(token.clone(), run);
        Ok(SubmissionHandle { experiment_id: record.id.clone(), backend: BackendKind::Local, backend_token: token })
    }

    fn poll(&self, handle: &SubmissionHandle) -> Result<BackendView, SubmitError> {
        let run = self.run(handle)?;
        let state = run.state.lock();
        Ok(match &state.phase {
            Phase::Pending => BackendView::Pending,
            Phase::Running => BackendView::Running,
            Phase::Exited(summary) => BackendView::Exited(summary.clone()),
        })
    }

    fn kill(&self, handle: &SubmissionHandle) -> Result<(), SubmitError> {
        let run = self.run(handle)?;
        {
            let mut state = run.state.lock();
            state.killed = true;
            for p in state.procs.iter().filter(|p| p.exit.is_none()) {
                p.signal_group();
            }
        }
        let supervisor = run.supervisor.lock().take();
        if let Some(supervisor) = supervisor {
            let _ = supervisor.join();
        }
        Ok(())
    }
}

fn report<T>(result: Result<T, ExperimentError>, what: &str, id: &str) {
    if let Err(err) = result {
        tracing::debug!(%id, %err, "dropping {what} report");
    }
}

fn spawn_reader(
    stream: impl Read + Send + 'static,
    id: String,
    task: String,
    monitor: Arc<dyn Monitor>,
) -> std::io::Result<JoinHandle<()>> {
    thread::Builder::new().name(format!("log-{task}")).spawn(move || {
        let reader = BufReader::new(stream);
        for line in reader.split(b'\n') {
            let Ok(line) = line else { break };
            let mut line = String::from_utf8_lossy(&line).into_owned();
            if line.ends_with('\r') {
                line.pop();
            }
            report(monitor.telemetry(&id, Telemetry::Log { task: task.clone(), line }), "log", &id);
        }
    })
}

fn spawn_replica(replica: &Replica, id: &str, workdir: &PathBuf, monitor: &Arc<dyn Monitor>) -> Result<Proc, String> {
    if replica.cmd.trim().is_empty() {
        return Err(format!("no launch command for {}", replica.task));
    }
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&replica.cmd)
        .current_dir(workdir)
        .env("EXPERIMENT_ID", id)
        .env("ROLE", &replica.role)
        .env("RANK", replica.rank.to_string())
        .env("NUM_WORKERS", replica.role_replicas.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| format!("failed to spawn {}: {e}", replica.task))?;
    let mut readers = Vec::with_capacity(2);
    let stdout = child.stdout.take().expect("stdout is piped");
    let stderr = child.stderr.take().expect("stderr is piped");
    for stream in [Box::new(stdout) as Box<dyn Read + Send>, Box::new(stderr)] {
        match spawn_reader(stream, id.to_string(), replica.task.clone(), monitor.clone()) {
            Ok(h) => readers.push(h),
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("failed to start log reader for {}: {e}", replica.task));
            }
        }
    }
    Ok(Proc { task: replica.task.clone(), child, readers, exit: None })
}

fn exit_code(status: &ExitStatus) -> Option<i32> {
    status.code()
}

fn describe_exit(task: &str, status: &ExitStatus) -> String {
    match (status.code(), status.signal()) {
        (Some(code), _) => format!("{task} exited with code {code}"),
        (None, Some(sig)) => format!("{task} terminated by signal {sig}"),
        _ => format!("{task} exited"),
    }
}

/// Kills every live process group and reaps all children. Returns the
/// reader threads still to be joined.
fn stop_all(state: &mut RunState) -> Vec<JoinHandle<()>> {
    for p in state.procs.iter().filter(|p| p.exit.is_none()) {
        p.signal_group();
    }
    let mut readers = Vec::new();
    for p in state.procs.iter_mut() {
        if p.exit.is_none() {
            p.exit = p.child.wait().ok();
        }
        readers.append(&mut p.readers);
    }
    readers
}

fn summary(state: &RunState) -> ExitSummary {
    let codes: BTreeMap<String, Option<i32>> =
        state.procs.iter().map(|p| (p.task.clone(), p.exit.as_ref().and_then(exit_code))).collect();
    let all_zero = !codes.is_empty() && codes.values().all(|c| *c == Some(0));
    ExitSummary { all_zero, codes }
}

fn finish(run: &LocalRun) {
    let readers = {
        let mut state = run.state.lock();
        let readers = stop_all(&mut state);
        state.phase = Phase::Exited(summary(&state));
        readers
    };
    for r in readers {
        let _ = r.join();
    }
}

fn supervise(run: Arc<LocalRun>, replicas: Vec<Replica>, workdir: PathBuf, poll: Duration, monitor: Arc<dyn Monitor>) {
    let id = run.experiment_id.clone();
    let fail = |reason: String| {
        report(monitor.telemetry(&id, Telemetry::Event { kind: EventKind::Error, detail: reason.clone() }), "error", &id);
        report(monitor.transition(&id, ExperimentStatus::Failed, &reason), "status", &id);
    };

    if let Err(e) = std::fs::create_dir_all(&workdir) {
        finish(&run);
        fail(format!("cannot create scratch dir {}: {e}", workdir.display()));
        return;
    }
    for replica in &replicas {
        let mut state = run.state.lock();
        if state.killed {
            break;
        }
        match spawn_replica(replica, &id, &workdir, &monitor) {
            Ok(proc) => state.procs.push(proc),
            Err(reason) => {
                drop(state);
                finish(&run);
                fail(reason);
                return;
            }
        }
    }
    {
        let mut state = run.state.lock();
        if state.killed {
            drop(state);
            finish(&run);
            return;
        }
        state.phase = Phase::Running;
    }
    if monitor.transition(&id, ExperimentStatus::Running, &format!("{} local processes", replicas.len())).is_err() {
        // Killed (or otherwise terminated) before it could start.
        finish(&run);
        return;
    }
    for replica in &replicas {
        let detail = format!("{} started", replica.task);
        report(monitor.telemetry(&id, Telemetry::Event { kind: EventKind::TaskStarted, detail }), "event", &id);
    }

    loop {
        thread::sleep(poll);
        let mut exited = Vec::new();
        {
            let mut state = run.state.lock();
            if state.killed {
                drop(state);
                finish(&run);
                return;
            }
            for p in state.procs.iter_mut().filter(|p| p.exit.is_none()) {
                if let Ok(Some(status)) = p.child.try_wait() {
                    p.exit = Some(status);
                    exited.push((p.task.clone(), status, std::mem::take(&mut p.readers)));
                }
            }
        }
        let mut failure = None;
        for (task, status, readers) in exited {
            for r in readers {
                let _ = r.join();
            }
            let detail = describe_exit(&task, &status);
            report(monitor.telemetry(&id, Telemetry::Event { kind: EventKind::TaskFinished, detail: detail.clone() }), "event", &id);
            if failure.is_none() && !status.success() {
                failure = Some(detail);
            }
        }
        if let Some(reason) = failure {
            let killed = run.state.lock().killed;
            finish(&run);
            if !killed {
                fail(reason);
            }
            return;
        }
        let done = {
            let mut state = run.state.lock();
            let done = state.procs.iter().all(|p| p.exit.is_some());
            if done {
                state.phase = Phase::Exited(summary(&state));
            }
            done && !state.killed
        };
        if done {
            let uri = format!("file://{}", workdir.display());
            report(monitor.telemetry(&id, Telemetry::Artifact { uri }), "artifact", &id);
            report(monitor.transition(&id, ExperimentStatus::Succeeded, "all tasks exited 0"), "status", &id);
            return;
        }
    }
}
