//! On-disk job state under a root directory:
//!
//! ```text
//! <root>/ihpc.lock          serializes id allocation and the core ledger
//! <root>/job_counter
//! <root>/alloc.json         AllocationLedger of running jobs
//! <root>/jobs/<job_id>/{fabric/, out/, result/, job.json, job.lock}
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use super::{JobRecord, LauncherError, Result};
use crate::sched::AllocationLedger;

pub const JOBS_DIR: &str = "jobs";
pub const JOB_FILE: &str = "job.json";
pub const OUT_DIR: &str = "out";
pub const RESULT_DIR: &str = "result";
pub const ALLOC_FILE: &str = "alloc.json";
const COUNTER_FILE: &str = "job_counter";
const ROOT_LOCK: &str = "ihpc.lock";
const JOB_LOCK: &str = "job.lock";

/// Exclusive advisory lock held until drop.
pub(crate) struct FileLock {
    _file: File,
}

impl FileLock {
    fn acquire(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        file.lock().map_err(|e| io_err(path, e))?;
        Ok(FileLock { _file: file })
    }
}

pub(crate) fn io_err(path: &Path, source: io::Error) -> LauncherError {
    LauncherError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[derive(Debug, Clone)]
pub struct JobStore {
    root: PathBuf,
}

impl JobStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let jobs = root.join(JOBS_DIR);
        fs::create_dir_all(&jobs).map_err(|e| io_err(&jobs, e))?;
        Ok(JobStore { root })
    }

    /// Store owning an existing job directory (`<root>/jobs/<id>`).
    pub fn for_job_dir(job_dir: &Path) -> Result<(Self, String)> {
        let bad = || LauncherError::Argument(format!("{} is not a job directory", job_dir.display()));
        let id = job_dir.file_name().and_then(|n| n.to_str()).ok_or_else(bad)?;
        let jobs = job_dir.parent().ok_or_else(bad)?;
        if jobs.file_name().and_then(|n| n.to_str()) != Some(JOBS_DIR) {
            return Err(bad());
        }
        let root = jobs.parent().ok_or_else(bad)?;
        Ok((JobStore::open(root)?, id.to_string()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, job_id: &str) -> PathBuf {
        self.root.join(JOBS_DIR).join(job_id)
    }

    fn check_id(job_id: &str) -> Result<()> {
        let ok = !job_id.is_empty()
            && job_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(())
        } else {
            Err(LauncherError::NotFound(format!("no job {job_id:?}")))
        }
    }

    pub(crate) fn lock_root(&self) -> Result<FileLock> {
        FileLock::acquire(&self.root.join(ROOT_LOCK))
    }

    pub(crate) fn lock_job(&self, job_id: &str) -> Result<FileLock> {
        Self::check_id(job_id)?;
        let dir = self.job_dir(job_id);
        if !dir.is_dir() {
            return Err(LauncherError::NotFound(format!("no job {job_id}")));
        }
        FileLock::acquire(&dir.join(JOB_LOCK))
    }

    /// Zero-padded counter plus a random suffix, e.g. `000042-9f3c`.
    pub(crate) fn new_job_id(&self) -> Result<String> {
        let _lock = self.lock_root()?;
        let path = self.root.join(COUNTER_FILE);
        let current: u64 = match fs::read_to_string(&path) {
            Ok(s) => s.trim().parse().map_err(|_| LauncherError::Corrupt {
                path: path.clone(),
                detail: format!("counter {s:?} is not a number"),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(io_err(&path, e)),
        };
        let next = current + 1;
        write_atomic(&path, next.to_string().as_bytes()).map_err(|e| io_err(&path, e))?;
        Ok(format!("{next:06}-{:04x}", rand::thread_rng().gen::<u16>()))
    }

    pub fn read(&self, job_id: &str) -> Result<JobRecord> {
        Self::check_id(job_id)?;
        let path = self.job_dir(job_id).join(JOB_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(LauncherError::NotFound(format!("no job {job_id}")))
            }
            Err(e) => return Err(io_err(&path, e)),
        };
        serde_json::from_str(&text).map_err(|e| LauncherError::Corrupt {
            path,
            detail: e.to_string(),
        })
    }

    /// Caller must hold the job lock, except when creating the record.
    pub(crate) fn write(&self, record: &JobRecord) -> Result<()> {
        let path = self.job_dir(&record.job_id).join(JOB_FILE);
        let mut text = serde_json::to_string_pretty(record).expect("record serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes()).map_err(|e| io_err(&path, e))
    }

    /// Read-modify-write of a job record under its lock.
    pub(crate) fn update(
        &self,
        job_id: &str,
        f: impl FnOnce(&mut JobRecord) -> Result<()>,
    ) -> Result<JobRecord> {
        let _lock = self.lock_job(job_id)?;
        let mut record = self.read(job_id)?;
        f(&mut record)?;
        self.write(&record)?;
        Ok(record)
    }

    pub fn allocations(&self) -> Result<AllocationLedger> {
        let path = self.root.join(ALLOC_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| LauncherError::Corrupt {
                path,
                detail: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(AllocationLedger::new()),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    /// Runs `f` on the core ledger under the root lock and persists the result.
    pub(crate) fn with_allocations<R>(
        &self,
        f: impl FnOnce(&mut AllocationLedger) -> Result<R>,
    ) -> Result<R> {
        let _lock = self.lock_root()?;
        let mut ledger = self.allocations()?;
        let out = f(&mut ledger)?;
        let path = self.root.join(ALLOC_FILE);
        let text = serde_json::to_string_pretty(&ledger).expect("ledger serializes");
        write_atomic(&path, text.as_bytes()).map_err(|e| io_err(&path, e))?;
        Ok(out)
    }

    /// Job ids in creation order.
    pub fn list(&self) -> Result<Vec<String>> {
        let jobs = self.root.join(JOBS_DIR);
        let mut ids: Vec<String> = fs::read_dir(&jobs)
            .map_err(|e| io_err(&jobs, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(JOB_FILE).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }
}
