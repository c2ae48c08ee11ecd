use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::proc::{self, append_log, external_exit_file, rank_exit};
use super::programs::{self, run_program};
use super::store::{io_err, OUT_DIR};
use super::{JobRecord, JobSpec, JobState, JobStore, LauncherError, RankExit, Result};
use crate::fabric::{FabricContext, ABORT_MARKER};

const SUPERVISOR_START_TIMEOUT: Duration = Duration::from_secs(30);

pub(crate) fn release_cores(store: &JobStore, job_id: &str) -> Result<()> {
    // Callers hold the job lock and have just made the terminal transition,
    // so this runs once per job. A missing entry means nothing was allocated.
    store.with_allocations(|ledger| {
        let _ = ledger.release(job_id);
        Ok(())
    })
}

pub(crate) struct Runner<'a> {
    pub store: &'a JobStore,
    pub job_id: &'a str,
    pub worker_exe: &'a Path,
    pub poll: Duration,
    pub kill_grace: Duration,
}

impl Runner<'_> {
    /// Spawns the ranks, supervises them until all have exited and records the
    /// final state. With `in_process`, rank 0 runs on the calling thread.
    pub fn run(&self, in_process: bool) -> Result<JobRecord> {
        let record = self.store.read(self.job_id)?;
        let spec = record.spec.clone();
        let job_dir = record.job_dir.clone();
        let first = if in_process || spec.rank0_external { 1 } else { 0 };

        let mut children: Vec<(u32, Child)> = Vec::new();
        for rank in first..spec.ncores {
            match proc::spawn_rank(self.worker_exe, &spec, &job_dir, rank) {
                Ok(child) => children.push((rank, child)),
                Err(e) => {
                    let msg = format!("could not start rank {rank}: {e}");
                    let _ = fs::write(job_dir.join(ABORT_MARKER), b"");
                    let pids: Vec<u32> = children.iter().map(|(_, c)| c.id()).collect();
                    proc::terminate_all(&pids, self.kill_grace);
                    for (_, c) in &mut children {
                        let _ = c.wait();
                    }
                    self.finish(Some(msg.clone()))?;
                    return Err(LauncherError::Spawn(msg));
                }
            }
        }

        let pids: Vec<(u32, u32)> = children.iter().map(|(r, c)| (*r, c.id())).collect();
        let me = std::process::id();
        let started = self.store.update(self.job_id, |r| {
            for &(rank, pid) in &pids {
                r.ranks[rank as usize].pid = Some(pid);
            }
            if in_process {
                r.ranks[0].pid = Some(me);
            }
            r.supervisor_pid = Some(me);
            if r.state == JobState::Pending {
                r.set_state(JobState::Running)?;
            }
            Ok(())
        })?;
        if started.state.is_terminal() {
            // aborted while the ranks were starting
            let _ = fs::write(job_dir.join(ABORT_MARKER), b"");
        }

        let monitor = Monitor {
            store: self.store,
            job_id: self.job_id,
            job_dir: job_dir.clone(),
            children: children.into_iter().map(|(r, c)| (r, c, false)).collect(),
            external0: spec.rank0_external,
            poll: self.poll,
            grace: self.kill_grace,
        };

        if in_process {
            thread::scope(|s| -> Result<()> {
                let handle = s.spawn(move || monitor.run());
                let exit = run_in_process_rank0(&spec, &job_dir);
                if !exit.success() {
                    let _ = fs::write(job_dir.join(ABORT_MARKER), b"");
                }
                self.record_exit(0, exit)?;
                handle.join().expect("monitor thread panicked")
            })?;
        } else {
            monitor.run()?;
        }
        self.finish(None)
    }

    fn record_exit(&self, rank: u32, exit: RankExit) -> Result<()> {
        record_exit(self.store, self.job_id, rank, exit)
    }

    /// Done if every rank exited 0, else Failed. No-op if already terminal.
    fn finish(&self, failure: Option<String>) -> Result<JobRecord> {
        self.store.update(self.job_id, |r| {
            if r.state.is_terminal() {
                return Ok(());
            }
            let ok = failure.is_none() && r.ranks.iter().all(|s| s.exit.is_some_and(|e| e.success()));
            r.set_state(if ok { JobState::Done } else { JobState::Failed })?;
            if let Some(msg) = &failure {
                r.message = Some(msg.clone());
            } else if !ok {
                let failed: Vec<String> = r
                    .ranks
                    .iter()
                    .filter(|s| !s.exit.is_some_and(|e| e.success()))
                    .map(|s| s.rank.to_string())
                    .collect();
                r.message = Some(format!("ranks {} did not exit cleanly", failed.join(",")));
            }
            release_cores(self.store, self.job_id)
        })
    }

    /// Starts a detached `supervise` process and waits until it has the ranks running.
    pub fn start_supervisor(&self) -> Result<JobRecord> {
        let job_dir = self.store.job_dir(self.job_id);
        let log_path = job_dir.join(OUT_DIR).join("supervisor.log");
        let spawned = (|| -> io::Result<Child> {
            let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
            Command::new(self.worker_exe)
                .arg("supervise")
                .arg(&job_dir)
                .stdin(Stdio::null())
                .stdout(log.try_clone()?)
                .stderr(log)
                .process_group(0)
                .spawn()
        })();
        let mut child = match spawned {
            Ok(c) => c,
            Err(e) => {
                let msg = format!("could not start supervisor: {e}");
                self.finish(Some(msg.clone()))?;
                return Err(LauncherError::Spawn(msg));
            }
        };

        let deadline = Instant::now() + SUPERVISOR_START_TIMEOUT;
        loop {
            let record = self.store.read(self.job_id)?;
            if record.state != JobState::Pending {
                // reap it whenever it finishes
                thread::spawn(move || child.wait());
                return Ok(record);
            }
            let exited = child.try_wait().map_err(|e| io_err(&log_path, e))?;
            if exited.is_some() || Instant::now() >= deadline {
                let msg = match exited {
                    Some(status) => format!("supervisor exited ({status}) before starting the ranks"),
                    None => {
                        proc::signal_group(child.id(), libc::SIGKILL);
                        let _ = child.wait();
                        "supervisor did not start the ranks in time".to_string()
                    }
                };
                self.finish(Some(msg.clone()))?;
                return Err(LauncherError::Spawn(msg));
            }
            thread::sleep(self.poll);
        }
    }
}

fn record_exit(store: &JobStore, job_id: &str, rank: u32, exit: RankExit) -> Result<()> {
    store
        .update(job_id, |r| {
            r.ranks[rank as usize].exit = Some(exit);
            Ok(())
        })
        .map(|_| ())
}

fn run_in_process_rank0(spec: &JobSpec, job_dir: &Path) -> RankExit {
    let mut log: Box<dyn Write> = match append_log(job_dir, 0) {
        Ok(f) => Box::new(f),
        Err(_) => Box::new(io::sink()),
    };
    let _ = writeln!(
        log,
        "rank 0 of {} running in the launching process (pid {})",
        spec.ncores,
        std::process::id()
    );
    let code = match rank_context(job_dir, 0, spec.ncores, &spec.program) {
        Ok(mut ctx) => match run_program(&spec.program, &spec.args, &mut ctx, &mut log) {
            Ok(()) => 0,
            Err(e) => {
                let _ = writeln!(log, "error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let _ = writeln!(log, "error: {e}");
            1
        }
    };
    let _ = log.flush();
    RankExit::code(code)
}

fn rank_context(job_dir: &Path, rank: u32, nranks: u32, program: &str) -> crate::fabric::Result<FabricContext> {
    let ctx = FabricContext::init(job_dir, rank, nranks)?;
    Ok(match programs::tuned_polling(program) {
        Some((initial, max)) => ctx.with_polling(initial, max),
        None => ctx,
    })
}

struct Monitor<'a> {
    store: &'a JobStore,
    job_id: &'a str,
    job_dir: PathBuf,
    children: Vec<(u32, Child, bool)>,
    external0: bool,
    poll: Duration,
    grace: Duration,
}

impl Monitor<'_> {
    /// Reaps the children, recording each exit. The first failure, or an abort
    /// marker written by anyone, makes the survivors get SIGTERM and, after the
    /// grace period, SIGKILL.
    fn run(mut self) -> Result<()> {
        let marker = self.job_dir.join(ABORT_MARKER);
        let exit_file = external_exit_file(&self.job_dir);
        let mut tripped: Option<Instant> = None;
        let mut killed = false;
        let mut external_done = !self.external0;

        loop {
            let mut live = false;
            let mut failed = false;
            for (rank, child, done) in &mut self.children {
                if *done {
                    continue;
                }
                match child.try_wait() {
                    Ok(Some(status)) => {
                        *done = true;
                        let exit = rank_exit(status);
                        failed |= !exit.success();
                        record_exit(self.store, self.job_id, *rank, exit)?;
                    }
                    Ok(None) => live = true,
                    Err(e) => return Err(io_err(&self.job_dir, e)),
                }
            }
            if !external_done {
                if let Some(code) = read_exit_file(&exit_file) {
                    external_done = true;
                    failed |= code != 0;
                    record_exit(self.store, self.job_id, 0, RankExit::code(code))?;
                } else if tripped.is_some_and(|t| t.elapsed() >= self.grace * 2) {
                    external_done = true;
                } else {
                    live = true;
                }
            }
            if tripped.is_none() && (failed || marker.exists()) {
                let _ = fs::write(&marker, b"");
                for (_, child, done) in &self.children {
                    if !*done {
                        proc::signal_group(child.id(), libc::SIGTERM);
                    }
                }
                tripped = Some(Instant::now());
            }
            if let Some(t) = tripped {
                if !killed && t.elapsed() >= self.grace {
                    for (_, child, done) in &self.children {
                        if !*done {
                            proc::signal_group(child.id(), libc::SIGKILL);
                        }
                    }
                    killed = true;
                }
            }
            if !live {
                return Ok(());
            }
            thread::sleep(self.poll);
        }
    }
}

fn read_exit_file(path: &Path) -> Option<i32> {
    fs::read_to_string(path).ok()?.trim().parse().ok()
}

/// Entry point of a spawned rank running a registered program. Reads the rank
/// environment and returns the process exit code.
pub fn rank_main(program: &str, args: &[String]) -> i32 {
    let env = |key: &str| std::env::var(key).map_err(|_| format!("{key} is not set"));
    let setup = (|| -> std::result::Result<(PathBuf, u32, u32), String> {
        let job_dir = PathBuf::from(env(proc::ENV_JOB_DIR)?);
        let rank = env(proc::ENV_RANK)?.parse().map_err(|_| "bad IHPC_RANK".to_string())?;
        let nranks = env(proc::ENV_NRANKS)?.parse().map_err(|_| "bad IHPC_NRANKS".to_string())?;
        Ok((job_dir, rank, nranks))
    })();
    let (job_dir, rank, nranks) = match setup {
        Ok(v) => v,
        Err(e) => {
            eprintln!("ihpc rank: {e}");
            return 2;
        }
    };
    println!("rank {rank} of {nranks} running as pid {}", std::process::id());
    let mut ctx = match rank_context(&job_dir, rank, nranks, program) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run_program(program, args, &mut ctx, &mut out) {
        Ok(()) => {
            let _ = out.flush();
            0
        }
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point of the detached supervisor of a background job.
pub fn supervise(job_dir: &Path) -> Result<JobRecord> {
    let (store, job_id) = JobStore::for_job_dir(job_dir)?;
    let exe = std::env::current_exe().map_err(|e| io_err(Path::new("<current exe>"), e))?;
    Runner {
        store: &store,
        job_id: &job_id,
        worker_exe: &exe,
        poll: Duration::from_millis(20),
        kill_grace: Duration::from_secs(2),
    }
    .run(false)
}
