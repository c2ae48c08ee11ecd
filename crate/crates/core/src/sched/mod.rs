//! Admission control, the per-user cap policy and a discrete-event simulator
//! comparing on-demand dispatch with a batch FIFO queue.

mod admission;
mod policy;
mod regime;
mod sim;
mod workload;

use thiserror::Error;

pub use admission::{admit, Admission, Allocation, AllocationLedger, HoldReason};
pub(crate) use admission::check_request;
pub use policy::{CapOverride, Fraction, LatencyModel, PolicyConfig};
pub use regime::{classify_regime, Regime, RegimeHistogram, DESKTOP_LIMIT_S, INTERACTIVE_LIMIT_S};
pub use sim::{
    compare_policies, simulate, validate_workload, ComparisonDeltas, Discipline, JobOutcome,
    PolicyComparison, SimJob, SimOutcome, SimSummary, TraceEvent, TraceKind, UtilizationPoint,
};
pub use workload::{job_id_for, 
    flood_workload, generate_workload, parse_workload, read_workload, write_workload, WorkloadSpec,
};

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("workload line {line}: {msg}")]
    Workload { line: usize, msg: String },
    #[error("workload i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SchedError>;
