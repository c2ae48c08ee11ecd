//! Point-to-point messaging over a shared directory.
//!
//! Each rank of a job owns one [`FabricContext`] pointing at the same
//! `<job_dir>/fabric/` directory. A send writes the payload under a temporary
//! name, renames it to its final `.dat` name and only then creates the empty
//! `.ok` marker; a receiver never looks at a `.dat` whose marker is absent.
//! Consumed messages are deleted by the receiver.
//!
//! Sequence numbers count per `(src, dst)` channel, so a directory listing
//! sorted by name is also sorted by send order.

mod collective;
pub mod wire;

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

pub use wire::{Header, MessageName, PayloadType, HEADER_LEN};

/// Subdirectory of a job directory that holds message files.
pub const FABRIC_DIR: &str = "fabric";
/// File in the job directory whose presence makes every blocked fabric call fail.
pub const ABORT_MARKER: &str = "abort";

/// Application tags live below this value; the upper half belongs to collectives.
pub const APP_TAG_LIMIT: u32 = 1 << 31;
/// Barrier messages of epoch `e` carry tag `BARRIER_TAG_BASE + e`.
pub const BARRIER_TAG_BASE: u32 = APP_TAG_LIMIT;
/// Barrier epochs must stay below this so barrier tags never reach the internal range.
pub const MAX_BARRIER_EPOCH: u32 = 1 << 30;
/// First tag of the range used by the distributed-array collectives.
pub const INTERNAL_TAG_BASE: u32 = BARRIER_TAG_BASE + MAX_BARRIER_EPOCH;

pub const DEFAULT_POLL_INITIAL: Duration = Duration::from_millis(10);
pub const DEFAULT_POLL_MAX: Duration = Duration::from_millis(500);

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("fabric setup failed at {path}: {source}")]
    Setup { path: PathBuf, source: io::Error },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("transport failure at {path}: {source}")]
    Transport { path: PathBuf, source: io::Error },
    #[error("timed out after {waited:?} waiting for rank {src} tag {tag}")]
    Timeout { src: u32, tag: u32, waited: Duration },
    #[error("protocol error in {file}: {detail}")]
    Protocol { file: String, detail: String },
    #[error("job aborted while waiting for rank {src} tag {tag}")]
    Aborted { src: u32, tag: u32 },
}

pub type Result<T> = std::result::Result<T, FabricError>;

/// Index of one process within a job. Rank 0 is the initiating (desktop) rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RankId(pub u32);

impl RankId {
    pub const ROOT: RankId = RankId(0);

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_root(self) -> bool {
        self.0 == 0
    }
}

impl From<u32> for RankId {
    fn from(value: u32) -> Self {
        RankId(value)
    }
}

impl std::fmt::Display for RankId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// A message as handed back by [`FabricContext::recv`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Received {
    pub payload_type: PayloadType,
    pub payload: Vec<u8>,
}

/// One rank's handle on the job fabric.
#[derive(Debug)]
pub struct FabricContext {
    job_dir: PathBuf,
    fabric_dir: PathBuf,
    my_rank: RankId,
    nranks: u32,
    poll_initial: Duration,
    poll_max: Duration,
    collective_timeout: Option<Duration>,
    next_seq: Vec<u32>,
    // Ready messages addressed to me that have been seen in a scan but not yet consumed.
    // Only this rank deletes its own messages, so entries stay valid until consumed.
    ready: HashMap<(u32, u32), BTreeSet<u32>>,
    // Per source: every seq below `horizon` has been seen, consumed or cached.
    // A directory listing is not a snapshot, so a scan racing a sender can
    // catch a newer marker and miss an older one; nothing at or above the
    // horizon is delivered until the gap closes.
    horizon: Vec<u32>,
    seen_ahead: Vec<BTreeSet<u32>>,
}

impl FabricContext {
    /// Binds `my_rank` of an `nranks` job to `<job_dir>/fabric/`.
    pub fn init(job_dir: impl AsRef<Path>, my_rank: impl Into<RankId>, nranks: u32) -> Result<Self> {
        let my_rank = my_rank.into();
        if nranks == 0 {
            return Err(FabricError::Argument("nranks must be at least 1".into()));
        }
        if my_rank.0 >= nranks {
            return Err(FabricError::Argument(format!(
                "rank {my_rank} out of range for {nranks} ranks"
            )));
        }
        let job_dir = job_dir.as_ref().to_path_buf();
        let meta = fs::metadata(&job_dir).map_err(|source| FabricError::Setup {
            path: job_dir.clone(),
            source,
        })?;
        if !meta.is_dir() {
            return Err(FabricError::Setup {
                path: job_dir,
                source: io::Error::new(io::ErrorKind::NotADirectory, "job_dir is not a directory"),
            });
        }
        let fabric_dir = job_dir.join(FABRIC_DIR);
        fs::create_dir_all(&fabric_dir).map_err(|source| FabricError::Setup {
            path: fabric_dir.clone(),
            source,
        })?;
        if fs::metadata(&fabric_dir)
            .map(|m| m.permissions().readonly())
            .unwrap_or(true)
        {
            return Err(FabricError::Setup {
                path: fabric_dir,
                source: io::Error::new(io::ErrorKind::PermissionDenied, "fabric dir not writable"),
            });
        }
        Ok(FabricContext {
            job_dir,
            fabric_dir,
            my_rank,
            nranks,
            poll_initial: DEFAULT_POLL_INITIAL,
            poll_max: DEFAULT_POLL_MAX,
            collective_timeout: None,
            next_seq: vec![0; nranks as usize],
            ready: HashMap::new(),
            horizon: vec![0; nranks as usize],
            seen_ahead: vec![BTreeSet::new(); nranks as usize],
        })
    }

    pub fn with_polling(mut self, initial: Duration, max: Duration) -> Self {
        self.poll_initial = initial.max(Duration::from_micros(1));
        self.poll_max = max.max(self.poll_initial);
        self
    }

    /// Timeout applied to barrier and the collectives. `None` waits forever.
    pub fn with_collective_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.collective_timeout = timeout;
        self
    }

    pub fn set_collective_timeout(&mut self, timeout: Option<Duration>) {
        self.collective_timeout = timeout;
    }

    pub fn my_rank(&self) -> RankId {
        self.my_rank
    }

    pub fn nranks(&self) -> u32 {
        self.nranks
    }

    pub fn job_dir(&self) -> &Path {
        &self.job_dir
    }

    pub fn fabric_dir(&self) -> &Path {
        &self.fabric_dir
    }

    pub fn poll_initial(&self) -> Duration {
        self.poll_initial
    }

    pub fn poll_max(&self) -> Duration {
        self.poll_max
    }

    pub fn collective_timeout(&self) -> Option<Duration> {
        self.collective_timeout
    }

    /// Sends an application message. Returns the channel sequence number used.
    pub fn send(
        &mut self,
        dst: impl Into<RankId>,
        tag: u32,
        payload_type: PayloadType,
        payload: &[u8],
    ) -> Result<u32> {
        check_app_tag(tag)?;
        self.send_tagged(dst.into(), tag, payload_type, payload)
    }

    pub(crate) fn send_tagged(
        &mut self,
        dst: RankId,
        tag: u32,
        payload_type: PayloadType,
        payload: &[u8],
    ) -> Result<u32> {
        self.check_peer(dst, "send to")?;
        let seq = self.next_seq[dst.index()];
        let name = MessageName {
            seq,
            src: self.my_rank.0,
            dst: dst.0,
            tag,
        };
        let header = Header {
            payload_type,
            src: name.src,
            dst: name.dst,
            tag,
            seq,
            payload_len: payload.len() as u64,
        };

        let tmp = self.fabric_dir.join(name.temp_file());
        let dat = self.fabric_dir.join(name.data_file());
        let ok = self.fabric_dir.join(name.ready_file());

        let written = (|| -> io::Result<()> {
            let mut bytes = Vec::with_capacity(HEADER_LEN + payload.len());
            bytes.extend_from_slice(&header.encode());
            bytes.extend_from_slice(payload);
            let mut file = File::create(&tmp)?;
            file.write_all(&bytes)?;
            file.flush()?;
            drop(file);
            fs::rename(&tmp, &dat)
        })();
        if let Err(source) = written {
            let _ = fs::remove_file(&tmp);
            return Err(FabricError::Transport { path: dat, source });
        }
        // The marker is the commit point.
        File::create(&ok).map_err(|source| FabricError::Transport { path: ok, source })?;

        self.next_seq[dst.index()] = seq.wrapping_add(1);
        Ok(seq)
    }

    /// Blocks until the oldest matching message from `src` is ready and consumes it.
    /// `timeout = None` waits indefinitely.
    pub fn recv(
        &mut self,
        src: impl Into<RankId>,
        tag: u32,
        timeout: Option<Duration>,
    ) -> Result<Received> {
        let src = src.into();
        self.check_peer(src, "receive from")?;
        let deadline = timeout.map(|t| Instant::now() + t);
        self.recv_until(src, tag, deadline, &|_| Ok(()))
    }

    /// Non-blocking check for a ready message from `src` with `tag`. Does not consume.
    pub fn probe(&mut self, src: impl Into<RankId>, tag: u32) -> bool {
        let key = (src.into().0, tag);
        if self.has_cached(key) {
            return true;
        }
        if self.scan().is_err() {
            return false;
        }
        self.has_cached(key)
    }

    fn has_cached(&self, key: (u32, u32)) -> bool {
        self.deliverable(key).is_some()
    }

    /// Lowest cached seq for `key`, if no older message from that source can still be unseen.
    fn deliverable(&self, key: (u32, u32)) -> Option<u32> {
        let seq = self.ready.get(&key)?.first().copied()?;
        let horizon = self.horizon.get(key.0 as usize).copied().unwrap_or(0);
        (seq < horizon).then_some(seq)
    }

    pub(crate) fn deadline_for_collective(&self) -> Option<Instant> {
        self.collective_timeout.map(|t| Instant::now() + t)
    }

    /// Core receive loop. `guard` runs after each directory scan that did not produce
    /// the wanted message and may abort the wait with an error.
    pub(crate) fn recv_until(
        &mut self,
        src: RankId,
        tag: u32,
        deadline: Option<Instant>,
        guard: &dyn Fn(&Self) -> Result<()>,
    ) -> Result<Received> {
        let started = Instant::now();
        let mut backoff = self.poll_initial;
        let key = (src.0, tag);
        loop {
            if !self.has_cached(key) {
                self.scan()?;
            }
            if let Some(seq) = self.deliverable(key) {
                let name = MessageName {
                    seq,
                    src: src.0,
                    dst: self.my_rank.0,
                    tag,
                };
                return self.consume(name);
            }
            guard(self)?;
            if self.job_dir.join(ABORT_MARKER).exists() {
                return Err(FabricError::Aborted { src: src.0, tag });
            }
            let mut nap = backoff;
            if let Some(deadline) = deadline {
                let now = Instant::now();
                if now >= deadline {
                    return Err(FabricError::Timeout {
                        src: src.0,
                        tag,
                        waited: now - started,
                    });
                }
                nap = nap.min(deadline - now);
            }
            std::thread::sleep(nap);
            backoff = (backoff * 2).min(self.poll_max);
        }
    }

    /// Refreshes the ready-message cache from the directory.
    fn scan(&mut self) -> Result<()> {
        let entries = fs::read_dir(&self.fabric_dir).map_err(|source| FabricError::Transport {
            path: self.fabric_dir.clone(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| FabricError::Transport {
                path: self.fabric_dir.clone(),
                source,
            })?;
            let file_name = entry.file_name();
            let Some(file_name) = file_name.to_str() else {
                continue;
            };
            if let Some((name, wire::READY_EXT)) = MessageName::parse_file(file_name) {
                if name.dst == self.my_rank.0 && name.src < self.nranks {
                    let src = name.src as usize;
                    if name.seq >= self.horizon[src] {
                        self.seen_ahead[src].insert(name.seq);
                    }
                    self.ready.entry((name.src, name.tag)).or_default().insert(name.seq);
                }
            }
        }
        for (horizon, ahead) in self.horizon.iter_mut().zip(&mut self.seen_ahead) {
            while ahead.remove(horizon) {
                *horizon += 1;
            }
        }
        Ok(())
    }

    fn consume(&mut self, name: MessageName) -> Result<Received> {
        let dat = self.fabric_dir.join(name.data_file());
        let ok = self.fabric_dir.join(name.ready_file());
        let bytes = fs::read(&dat).map_err(|source| FabricError::Transport {
            path: dat.clone(),
            source,
        })?;
        let protocol = |detail: String| FabricError::Protocol {
            file: name.data_file(),
            detail,
        };
        let header = Header::decode(&bytes).map_err(|e| protocol(e.to_string()))?;
        if (header.src, header.dst, header.tag, header.seq) != (name.src, name.dst, name.tag, name.seq)
        {
            return Err(protocol(format!(
                "header (src {}, dst {}, tag {}, seq {}) disagrees with file name",
                header.src, header.dst, header.tag, header.seq
            )));
        }
        let body_len = (bytes.len() - HEADER_LEN) as u64;
        if body_len != header.payload_len {
            return Err(protocol(format!(
                "payload length {} but header says {}",
                body_len, header.payload_len
            )));
        }

        // Un-commit first so a crash never leaves a marker without its payload.
        fs::remove_file(&ok).map_err(|source| FabricError::Transport { path: ok, source })?;
        fs::remove_file(&dat).map_err(|source| FabricError::Transport { path: dat, source })?;
        if let Some(set) = self.ready.get_mut(&(name.src, name.tag)) {
            set.remove(&name.seq);
        }

        let mut payload = bytes;
        payload.drain(..HEADER_LEN);
        Ok(Received {
            payload_type: header.payload_type,
            payload,
        })
    }

    pub(crate) fn cached_tags_from(&self, src: RankId) -> impl Iterator<Item = u32> + '_ {
        self.ready
            .iter()
            .filter(move |((s, _), seqs)| *s == src.0 && !seqs.is_empty())
            .map(|((_, tag), _)| *tag)
    }

    fn check_peer(&self, peer: RankId, what: &str) -> Result<()> {
        if peer.0 >= self.nranks {
            return Err(FabricError::Argument(format!(
                "cannot {what} rank {peer}: job has {} ranks",
                self.nranks
            )));
        }
        if peer == self.my_rank {
            return Err(FabricError::Argument(format!("cannot {what} self (rank {peer})")));
        }
        Ok(())
    }
}

fn check_app_tag(tag: u32) -> Result<()> {
    if tag >= APP_TAG_LIMIT {
        return Err(FabricError::Argument(format!(
            "tag {tag} is reserved for collectives (application tags must be < 2^31)"
        )));
    }
    Ok(())
}
