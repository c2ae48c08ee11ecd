//! Launching parallel jobs from the desktop: `launch(program, ncores, location)`
//! spawns the ranks, wires them to one fabric directory and brings results
//! home to rank 0.
//!
//! Locations:
//! - `Local`: all ranks are child processes; `launch` returns when the job ends.
//! - `Grid`: ranks 1..n are child processes and rank 0 runs inside the calling
//!   process; `launch` returns when the job ends.
//! - `Background`: a detached supervisor runs the job; `launch` returns once
//!   the ranks are running.

mod proc;
pub mod programs;
mod run;
mod store;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::ABORT_MARKER;
use crate::sched::{admit, check_request, Admission, AllocationLedger, HoldReason, PolicyConfig, SchedError};

pub use proc::{external_exit_file, is_alive, rank_log, ENV_JOB_DIR, ENV_NRANKS, ENV_RANK};
pub use run::{rank_main, supervise};
pub use store::{write_atomic, JobStore, ALLOC_FILE, JOBS_DIR, JOB_FILE, OUT_DIR, RESULT_DIR};

/// Overrides the executable used for registered-program ranks.
pub const ENV_WORKER_EXE: &str = "IHPC_WORKER_EXE";

#[derive(Debug, Error)]
pub enum LauncherError {
    #[error("invalid launch: {0}")]
    Argument(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("held by admission control: {reason}")]
    Capacity { reason: HoldReason },
    #[error("launch failed: {0}")]
    Spawn(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt job state in {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error(transparent)]
    Sched(#[from] SchedError),
}

pub type Result<T> = std::result::Result<T, LauncherError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Local,
    Grid,
    Background,
}

impl FromStr for Location {
    type Err = LauncherError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(Location::Local),
            "grid" => Ok(Location::Grid),
            "background" => Ok(Location::Background),
            other => Err(LauncherError::Argument(format!(
                "unknown location {other:?} (expected local, grid or background)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Registered program name or path to an executable.
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub ncores: u32,
    pub location: Location,
    pub user: String,
    /// Grid only: rank 0 is a separate client process that joins the fabric
    /// itself and reports completion by writing its exit code to
    /// `out/rank_0.exit`. The launcher supervises only ranks 1..n.
    #[serde(default)]
    pub rank0_external: bool,
}

impl JobSpec {
    pub fn new(program: impl Into<String>, ncores: u32, location: Location) -> Self {
        JobSpec {
            program: program.into(),
            args: Vec::new(),
            ncores,
            location,
            user: default_user(),
            rank0_external: false,
        }
    }

    pub fn with_args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.args = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_user(mut self, user: impl Into<String>) -> Self {
        self.user = user.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ncores == 0 {
            return Err(LauncherError::Argument("ncores must be at least 1".into()));
        }
        if self.user.is_empty() {
            return Err(LauncherError::Argument("user must be non-empty".into()));
        }
        let registered = programs::is_registered(&self.program);
        if !registered && !Path::new(&self.program).is_file() {
            return Err(LauncherError::Argument(format!(
                "program {:?} is neither a registered program ({}) nor an executable file",
                self.program,
                programs::REGISTERED.join(", ")
            )));
        }
        if self.location == Location::Grid && !registered && !self.rank0_external {
            return Err(LauncherError::Argument(
                "grid mode runs rank 0 in this process, which needs a registered program".into(),
            ));
        }
        if self.rank0_external && self.location != Location::Grid {
            return Err(LauncherError::Argument("an external rank 0 requires grid mode".into()));
        }
        Ok(())
    }
}

/// `IHPC_USER`, then `USER`, then `"unknown"`.
pub fn default_user() -> String {
    ["IHPC_USER", "USER"]
        .iter()
        .filter_map(|k| std::env::var(k).ok())
        .find(|u| !u.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
    Aborted,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Aborted)
    }

    /// Pending -> Running -> {Done, Failed, Aborted}; Pending may also end directly.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Pending, Running) | (Pending | Running, Done | Failed | Aborted)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Pending => "pending",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
            JobState::Aborted => "aborted",
        }
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankExit {
    pub code: Option<i32>,
    pub signal: Option<i32>,
}

impl RankExit {
    pub fn code(code: i32) -> Self {
        RankExit {
            code: Some(code),
            signal: None,
        }
    }

    pub fn success(&self) -> bool {
        self.code == Some(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankStatus {
    pub rank: u32,
    pub pid: Option<u32>,
    /// Rank 0 of a grid job, executing inside the launching process.
    #[serde(default)]
    pub in_process: bool,
    /// Rank 0 run by an outside client.
    #[serde(default)]
    pub external: bool,
    pub exit: Option<RankExit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub spec: JobSpec,
    pub state: JobState,
    pub job_dir: PathBuf,
    pub submitted_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    pub ranks: Vec<RankStatus>,
    /// Process responsible for reaping the ranks and finishing the job.
    pub supervisor_pid: Option<u32>,
    pub message: Option<String>,
}

impl JobRecord {
    fn set_state(&mut self, next: JobState) -> Result<()> {
        if !self.state.can_become(next) {
            return Err(LauncherError::State(format!(
                "job {} cannot go from {} to {}",
                self.job_id, self.state, next
            )));
        }
        self.state = next;
        match next {
            JobState::Running => self.started_at = Some(Utc::now()),
            s if s.is_terminal() => self.ended_at = Some(Utc::now()),
            _ => {}
        }
        Ok(())
    }

    /// Pids of rank processes this launcher may signal.
    pub fn signalable_pids(&self) -> Vec<u32> {
        self.ranks
            .iter()
            .filter(|r| !r.in_process && !r.external && r.exit.is_none())
            .filter_map(|r| r.pid)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultFile {
    pub name: String,
    pub path: PathBuf,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collected {
    pub job_id: String,
    pub state: JobState,
    pub results: Vec<ResultFile>,
    pub logs: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Launcher {
    store: JobStore,
    policy: Option<PolicyConfig>,
    worker_exe: PathBuf,
    poll: Duration,
    kill_grace: Duration,
}

impl Launcher {
    /// Worker executable: `IHPC_WORKER_EXE`, else the running executable.
    pub fn new(root: impl AsRef<Path>) -> Result<Self> {
        let worker_exe = match std::env::var_os(ENV_WORKER_EXE) {
            Some(p) => PathBuf::from(p),
            None => std::env::current_exe().map_err(|e| LauncherError::Io {
                path: PathBuf::from("<current exe>"),
                source: e,
            })?,
        };
        Ok(Launcher {
            store: JobStore::open(root)?,
            policy: None,
            worker_exe,
            poll: Duration::from_millis(20),
            kill_grace: Duration::from_secs(2),
        })
    }

    /// Enables admission control against `policy` for every launch.
    pub fn with_policy(mut self, policy: PolicyConfig) -> Self {
        self.policy = Some(policy);
        self
    }

    pub fn with_worker_exe(mut self, exe: impl Into<PathBuf>) -> Self {
        self.worker_exe = exe.into();
        self
    }

    pub fn store(&self) -> &JobStore {
        &self.store
    }

    pub fn policy(&self) -> Option<&PolicyConfig> {
        self.policy.as_ref()
    }

    pub fn allocations(&self) -> Result<AllocationLedger> {
        self.store.allocations()
    }

    pub fn launch(&self, spec: &JobSpec) -> Result<JobRecord> {
        spec.validate()?;
        let job_id = self.store.new_job_id()?;

        let now = unix_now();
        let policy = self.policy.clone();
        self.store.with_allocations(|ledger| {
            if let Some(policy) = &policy {
                check_request(policy, spec.ncores)?;
                if let Admission::Held(reason) = admit(policy, ledger, &spec.user, spec.ncores, now)? {
                    return Err(LauncherError::Capacity { reason });
                }
            }
            ledger.allocate(&job_id, &spec.user, spec.ncores)?;
            Ok(())
        })?;

        let job_dir = self.store.job_dir(&job_id);
        let created = (|| {
            for sub in [OUT_DIR, RESULT_DIR, crate::fabric::FABRIC_DIR] {
                let d = job_dir.join(sub);
                fs::create_dir_all(&d).map_err(|e| store::io_err(&d, e))?;
            }
            let record = JobRecord {
                job_id: job_id.clone(),
                spec: spec.clone(),
                state: JobState::Pending,
                job_dir: job_dir.clone(),
                submitted_at: Utc::now(),
                started_at: None,
                ended_at: None,
                ranks: (0..spec.ncores)
                    .map(|rank| RankStatus {
                        rank,
                        pid: None,
                        in_process: rank == 0 && spec.location == Location::Grid && !spec.rank0_external,
                        external: rank == 0 && spec.rank0_external,
                        exit: None,
                    })
                    .collect(),
                supervisor_pid: None,
                message: None,
            };
            self.store.write(&record)
        })();
        if let Err(e) = created {
            let _ = self.store.with_allocations(|l| Ok(l.release(&job_id).ok()));
            return Err(e);
        }

        let runner = run::Runner {
            store: &self.store,
            job_id: &job_id,
            worker_exe: &self.worker_exe,
            poll: self.poll,
            kill_grace: self.kill_grace,
        };
        match spec.location {
            Location::Local => runner.run(false),
            Location::Grid if !spec.rank0_external => runner.run(true),
            _ => runner.start_supervisor(),
        }
    }

    /// Current record. A job whose supervisor has vanished is marked Failed.
    pub fn status(&self, job_id: &str) -> Result<JobRecord> {
        let record = self.store.read(job_id)?;
        if record.state.is_terminal() {
            return Ok(record);
        }
        match record.supervisor_pid {
            Some(pid) if !is_alive(pid) => {
                let message = format!("supervisor process {pid} exited before the job finished");
                self.terminate(job_id, JobState::Failed, Some(message))
                    .or_else(|_| self.store.read(job_id))
            }
            _ => Ok(record),
        }
    }

    /// Polls `status` until the job reaches a terminal state.
    pub fn wait(&self, job_id: &str, timeout: Option<Duration>) -> Result<JobRecord> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let record = self.status(job_id)?;
            if record.state.is_terminal() {
                return Ok(record);
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(LauncherError::NotReady(format!(
                    "job {job_id} still {} after waiting",
                    record.state
                )));
            }
            std::thread::sleep(self.poll);
        }
    }

    /// Result files written to `result/` and the per-rank logs. Read-only.
    pub fn collect(&self, job_id: &str) -> Result<Collected> {
        let record = self.status(job_id)?;
        if !record.state.is_terminal() {
            return Err(LauncherError::NotReady(format!("job {job_id} is {}", record.state)));
        }
        let result_dir = record.job_dir.join(RESULT_DIR);
        let mut results = Vec::new();
        if let Ok(entries) = fs::read_dir(&result_dir) {
            for entry in entries.filter_map(|e| e.ok()) {
                let meta = entry.metadata().map_err(|e| store::io_err(&entry.path(), e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if meta.is_file() && !name.starts_with('.') {
                    results.push(ResultFile {
                        name,
                        path: entry.path(),
                        bytes: meta.len(),
                    });
                }
            }
        }
        results.sort_by(|a, b| a.name.cmp(&b.name));
        let logs = (0..record.spec.ncores)
            .map(|r| rank_log(&record.job_dir, r))
            .filter(|p| p.is_file())
            .collect();
        Ok(Collected {
            job_id: record.job_id,
            state: record.state,
            results,
            logs,
        })
    }

    pub fn read_result(&self, job_id: &str, name: &str) -> Result<Vec<u8>> {
        let collected = self.collect(job_id)?;
        let file = collected
            .results
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| LauncherError::NotFound(format!("job {job_id} has no result {name:?}")))?;
        fs::read(&file.path).map_err(|e| store::io_err(&file.path, e))
    }

    /// Stops a pending or running job and waits for its rank processes to exit.
    pub fn abort(&self, job_id: &str) -> Result<JobRecord> {
        self.terminate(job_id, JobState::Aborted, None)
    }

    fn terminate(&self, job_id: &str, state: JobState, message: Option<String>) -> Result<JobRecord> {
        let job_dir = self.store.job_dir(job_id);
        let record = self.store.update(job_id, |r| {
            if r.state.is_terminal() {
                return Err(LauncherError::State(format!("job {job_id} is already {}", r.state)));
            }
            fs::write(job_dir.join(ABORT_MARKER), b"").map_err(|e| store::io_err(&job_dir, e))?;
            r.set_state(state)?;
            if message.is_some() {
                r.message = message;
            }
            run::release_cores(&self.store, job_id)
        })?;
        let left = proc::terminate_all(&record.signalable_pids(), self.kill_grace);
        if !left.is_empty() {
            return Err(LauncherError::Spawn(format!(
                "job {job_id}: processes {left:?} survived SIGKILL"
            )));
        }
        self.store.read(job_id)
    }

    pub fn list(&self) -> Result<Vec<JobRecord>> {
        self.store.list()?.iter().map(|id| self.store.read(id)).collect()
    }
}

pub(crate) fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
