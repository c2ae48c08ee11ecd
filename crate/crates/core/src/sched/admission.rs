use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{PolicyConfig, Result, SchedError};

/// Cores currently held by one job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub user: String,
    pub cores: u32,
}

/// Who holds which cores right now.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationLedger {
    allocations: BTreeMap<String, Allocation>,
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total_allocated(&self) -> u32 {
        self.allocations.values().map(|a| a.cores).sum()
    }

    pub fn user_allocated(&self, user: &str) -> u32 {
        self.allocations
            .values()
            .filter(|a| a.user == user)
            .map(|a| a.cores)
            .sum()
    }

    pub fn get(&self, job_id: &str) -> Option<&Allocation> {
        self.allocations.get(job_id)
    }

    pub fn len(&self) -> usize {
        self.allocations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allocations.is_empty()
    }

    /// Records an allocation after a [`Admission::Granted`] decision.
    pub fn allocate(&mut self, job_id: &str, user: &str, cores: u32) -> Result<()> {
        if self.allocations.contains_key(job_id) {
            return Err(SchedError::State(format!("job {job_id} already holds cores")));
        }
        self.allocations.insert(
            job_id.to_string(),
            Allocation {
                user: user.to_string(),
                cores,
            },
        );
        Ok(())
    }

    /// Returns a job's cores. Fails for unknown or already released jobs.
    pub fn release(&mut self, job_id: &str) -> Result<Allocation> {
        self.allocations
            .remove(job_id)
            .ok_or_else(|| SchedError::State(format!("job {job_id} holds no cores (unknown or already released)")))
    }
}

/// Which constraint kept a request from running.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "constraint", rename_all = "kebab-case")]
pub enum HoldReason {
    UserCap { cap: u32, in_use: u32 },
    Capacity { total: u32, allocated: u32 },
}

impl fmt::Display for HoldReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HoldReason::UserCap { cap, in_use } => write!(f, "user-cap(cap={cap};in_use={in_use})"),
            HoldReason::Capacity { total, allocated } => {
                write!(f, "capacity(total={total};allocated={allocated})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "kebab-case")]
pub enum Admission {
    Granted,
    Held(HoldReason),
}

impl Admission {
    pub fn is_granted(&self) -> bool {
        matches!(self, Admission::Granted)
    }
}

/// Decides whether `user` may start `cores` more cores at time `now`.
///
/// Granted iff the user's cores in use plus `cores` fit under the effective
/// cap and the system total still fits. The user cap is checked first.
pub fn admit(
    policy: &PolicyConfig,
    ledger: &AllocationLedger,
    user: &str,
    cores: u32,
    now: f64,
) -> Result<Admission> {
    check_request(policy, cores)?;
    let cap = policy.effective_cap(user, now);
    let in_use = ledger.user_allocated(user);
    if in_use + cores > cap {
        return Ok(Admission::Held(HoldReason::UserCap { cap, in_use }));
    }
    let allocated = ledger.total_allocated();
    if allocated + cores > policy.total_cores {
        return Ok(Admission::Held(HoldReason::Capacity {
            total: policy.total_cores,
            allocated,
        }));
    }
    Ok(Admission::Granted)
}

pub(crate) fn check_request(policy: &PolicyConfig, cores: u32) -> Result<()> {
    if cores == 0 {
        return Err(SchedError::Argument("a job needs at least one core".into()));
    }
    if cores > policy.total_cores {
        return Err(SchedError::Argument(format!(
            "{cores} cores requested but the system has only {}",
            policy.total_cores
        )));
    }
    Ok(())
}
