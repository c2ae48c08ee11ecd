use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::store::OUT_DIR;
use super::{programs, JobSpec, RankExit};

pub const ENV_JOB_DIR: &str = "IHPC_JOB_DIR";
pub const ENV_RANK: &str = "IHPC_RANK";
pub const ENV_NRANKS: &str = "IHPC_NRANKS";

pub fn rank_log(job_dir: &Path, rank: u32) -> PathBuf {
    job_dir.join(OUT_DIR).join(format!("rank_{rank}.log"))
}

/// Exit code file an externally run rank 0 writes when it finishes.
pub fn external_exit_file(job_dir: &Path) -> PathBuf {
    job_dir.join(OUT_DIR).join("rank_0.exit")
}

pub(crate) fn append_log(job_dir: &Path, rank: u32) -> io::Result<fs::File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(rank_log(job_dir, rank))
}

/// Spawns one rank in its own process group with output captured to its log.
/// Registered programs run through `<worker_exe> rank <program> <args>`.
pub(crate) fn spawn_rank(worker_exe: &Path, spec: &JobSpec, job_dir: &Path, rank: u32) -> io::Result<Child> {
    let mut log = append_log(job_dir, rank)?;
    let mut cmd = if programs::is_registered(&spec.program) {
        let mut c = Command::new(worker_exe);
        c.arg("rank").arg(&spec.program);
        c
    } else {
        Command::new(&spec.program)
    };
    cmd.args(&spec.args);
    writeln!(
        log,
        "launch: rank {rank} of {} on the local host: {:?}",
        spec.ncores,
        std::iter::once(cmd.get_program())
            .chain(cmd.get_args())
            .map(|s| s.to_string_lossy())
            .collect::<Vec<_>>()
            .join(" ")
    )?;
    cmd.env(ENV_JOB_DIR, job_dir)
        .env(ENV_RANK, rank.to_string())
        .env(ENV_NRANKS, spec.ncores.to_string())
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log)
        .process_group(0);
    cmd.spawn()
}

pub(crate) fn rank_exit(status: ExitStatus) -> RankExit {
    RankExit {
        code: status.code(),
        signal: status.signal(),
    }
}

/// True while `pid` exists and is not a zombie.
pub fn is_alive(pid: u32) -> bool {
    let Ok(pid_t) = libc::pid_t::try_from(pid) else { return false };
    // SAFETY: signal 0 only checks for existence and permission.
    let exists = unsafe { libc::kill(pid_t, 0) } == 0
        || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM);
    if !exists {
        return false;
    }
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        // state follows the parenthesized command name
        Ok(stat) => stat
            .rsplit_once(')')
            .map(|(_, rest)| !rest.trim_start().starts_with(['Z', 'X']))
            .unwrap_or(true),
        Err(_) => true,
    }
}

/// Sends `sig` to the process group led by `pid`, falling back to the process.
pub(crate) fn signal_group(pid: u32, sig: libc::c_int) {
    let Ok(pid_t) = libc::pid_t::try_from(pid) else { return };
    if pid_t <= 1 {
        return;
    }
    // SAFETY: plain syscalls on a pid we spawned.
    unsafe {
        if libc::killpg(pid_t, sig) != 0 {
            libc::kill(pid_t, sig);
        }
    }
}

/// TERM, wait up to `grace`, then KILL and wait up to `grace` again.
/// Returns the pids still alive afterwards.
pub(crate) fn terminate_all(pids: &[u32], grace: Duration) -> Vec<u32> {
    for &pid in pids {
        signal_group(pid, libc::SIGTERM);
    }
    if wait_gone(pids, grace) {
        return Vec::new();
    }
    for &pid in pids {
        if is_alive(pid) {
            signal_group(pid, libc::SIGKILL);
        }
    }
    wait_gone(pids, grace);
    pids.iter().copied().filter(|&p| is_alive(p)).collect()
}

pub(crate) fn wait_gone(pids: &[u32], timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if pids.iter().all(|&p| !is_alive(p)) {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(10));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn liveness_and_termination() {
        assert!(is_alive(std::process::id()));
        let mut child = Command::new("sleep").arg("30").process_group(0).spawn().unwrap();
        let pid = child.id();
        assert!(is_alive(pid));
        let waiter = thread::spawn(move || child.wait().unwrap());
        let left = terminate_all(&[pid], Duration::from_secs(5));
        assert!(left.is_empty());
        let status = waiter.join().unwrap();
        assert_eq!(rank_exit(status).signal, Some(libc::SIGTERM));
    }

    #[test]
    fn zombies_count_as_gone() {
        let mut child = Command::new("true").spawn().unwrap();
        let pid = child.id();
        assert!(wait_gone(&[pid], Duration::from_secs(5)));
        child.wait().unwrap();
    }
}
