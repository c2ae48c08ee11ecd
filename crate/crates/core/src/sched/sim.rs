//! Discrete-event simulation of on-demand versus batch-FIFO dispatch.
//!
//! Events at the same instant are applied in the order completions, override
//! expiries, arrivals; dispatch runs once after each instant's events.
//! Cores are held from a job's start through its launch latency and service
//! time, so `end = start + launch_latency + service_time`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet, VecDeque};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{classify_regime, HoldReason, PolicyConfig, RegimeHistogram, Result, SchedError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimJob {
    pub job_id: String,
    pub user: String,
    pub cores: u32,
    /// Pure compute duration in seconds.
    pub service_time: f64,
    pub arrival_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discipline {
    /// Start every waiting job that passes admission, honoring per-user caps.
    OnDemand,
    /// Strict arrival order; the head job starts as soon as it fits. No user caps.
    BatchFifo,
}

impl FromStr for Discipline {
    type Err = SchedError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ondemand" | "on-demand" => Ok(Discipline::OnDemand),
            "batch" | "batch-fifo" | "fifo" => Ok(Discipline::BatchFifo),
            other => Err(SchedError::Argument(format!(
                "unknown discipline {other:?} (expected ondemand or batch)"
            ))),
        }
    }
}

impl fmt::Display for Discipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Discipline::OnDemand => "ondemand",
            Discipline::BatchFifo => "batch",
        })
    }
}

/// Per-job result. `start`, `end` and `wait_time` are `None` for jobs that
/// never became admissible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub job_id: String,
    pub user: String,
    pub cores: u32,
    pub arrival_time: f64,
    pub service_time: f64,
    pub launch_latency: f64,
    pub start: Option<f64>,
    pub end: Option<f64>,
    pub wait_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationPoint {
    pub time: f64,
    pub allocated: u32,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub jobs: usize,
    pub started: usize,
    pub mean_wait: f64,
    pub median_wait: f64,
    /// Nearest-rank 95th percentile.
    pub p95_wait: f64,
    pub max_wait: f64,
    /// Time-weighted over `[first event, last event]`.
    pub mean_utilization: f64,
    pub peak_utilization: f64,
    pub min_free_cores: u32,
    pub first_event: f64,
    pub last_event: f64,
    /// Service-time regimes of all submitted jobs.
    pub regimes: RegimeHistogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    Arrive,
    Hold,
    Start,
    End,
    Expire,
}

impl TraceKind {
    fn as_str(self) -> &'static str {
        match self {
            TraceKind::Arrive => "arrive",
            TraceKind::Hold => "hold",
            TraceKind::Start => "start",
            TraceKind::End => "end",
            TraceKind::Expire => "expire",
        }
    }
}

/// One line of the trace: `time,event,job_id,user,cores,detail`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub event: TraceKind,
    pub job_id: String,
    pub user: String,
    pub cores: u32,
    pub detail: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6},{},{},{},{},{}",
            self.time,
            self.event.as_str(),
            self.job_id,
            self.user,
            self.cores,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub discipline: Discipline,
    pub total_cores: u32,
    /// In input order.
    pub jobs: Vec<JobOutcome>,
    pub summary: SimSummary,
    pub utilization: Vec<UtilizationPoint>,
    pub trace: Vec<TraceEvent>,
}

impl SimOutcome {
    pub fn write_trace<W: Write>(&self, mut out: W) -> io::Result<()> {
        for ev in &self.trace {
            writeln!(out, "{ev}")?;
        }
        Ok(())
    }

    pub fn trace_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_trace(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("trace is UTF-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDeltas {
    /// On-demand minus batch, for each metric.
    pub mean_wait: f64,
    pub median_wait: f64,
    pub p95_wait: f64,
    pub mean_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub on_demand: SimOutcome,
    pub batch: SimOutcome,
    pub deltas: ComparisonDeltas,
}

pub fn compare_policies(policy: &PolicyConfig, jobs: &[SimJob]) -> Result<PolicyComparison> {
    let on_demand = simulate(policy, jobs, Discipline::OnDemand)?;
    let batch = simulate(policy, jobs, Discipline::BatchFifo)?;
    let (a, b) = (&on_demand.summary, &batch.summary);
    let deltas = ComparisonDeltas {
        mean_wait: a.mean_wait - b.mean_wait,
        median_wait: a.median_wait - b.median_wait,
        p95_wait: a.p95_wait - b.p95_wait,
        mean_utilization: a.mean_utilization - b.mean_utilization,
    };
    Ok(PolicyComparison {
        on_demand,
        batch,
        deltas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    End,
    Expire,
    Arrive,
}

#[derive(Debug)]
struct Event {
    time: f64,
    kind: EventKind,
    // job index for End/Arrive, override index for Expire
    subject: usize,
    order: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.cmp(&self.kind))
            .then(other.order.cmp(&self.order))
    }
}

struct Engine<'a> {
    policy: &'a PolicyConfig,
    jobs: &'a [SimJob],
    discipline: Discipline,
    heap: BinaryHeap<Event>,
    next_order: u64,
    waiting: VecDeque<usize>,
    running: Vec<usize>,
    allocated: u32,
    user_in_use: BTreeMap<&'a str, u32>,
    outcomes: Vec<JobOutcome>,
    last_hold: Vec<Option<HoldReason>>,
    trace: Vec<TraceEvent>,
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: f64, kind: EventKind, subject: usize) {
        self.heap.push(Event {
            time,
            kind,
            subject,
            order: self.next_order,
        });
        self.next_order += 1;
    }

    fn log(&mut self, time: f64, event: TraceKind, job: Option<usize>, user: &str, detail: String) {
        let (job_id, cores) = match job {
            Some(j) => (self.jobs[j].job_id.clone(), self.jobs[j].cores),
            None => ("-".to_string(), 0),
        };
        self.trace.push(TraceEvent {
            time,
            event,
            job_id,
            user: user.to_string(),
            cores,
            detail,
        });
    }

    fn apply(&mut self, ev: Event) {
        match ev.kind {
            EventKind::End => {
                let j = ev.subject;
                let job = &self.jobs[j];
                self.running.retain(|&r| r != j);
                self.allocated -= job.cores;
                *self.user_in_use.get_mut(job.user.as_str()).expect("running user") -= job.cores;
                self.log(ev.time, TraceKind::End, Some(j), &job.user, String::new());
            }
            EventKind::Expire => {
                let o = &self.policy.overrides[ev.subject];
                let detail = format!("cap={}->{}", o.cap_cores, self.policy.default_user_cap());
                self.log(ev.time, TraceKind::Expire, None, &o.user, detail);
            }
            EventKind::Arrive => {
                let j = ev.subject;
                self.waiting.push_back(j);
                let detail = format!("service={:.6}", self.jobs[j].service_time);
                self.log(ev.time, TraceKind::Arrive, Some(j), &self.jobs[j].user, detail);
            }
        }
    }

    /// Admission including the future: a job admitted under an override must not
    /// push the user over the default cap once the override expires mid-run.
    fn check(&self, j: usize, now: f64) -> Option<HoldReason> {
        let job = &self.jobs[j];
        if self.discipline == Discipline::OnDemand {
            let in_use = self.user_in_use.get(job.user.as_str()).copied().unwrap_or(0);
            let cap = self.policy.effective_cap(&job.user, now);
            if in_use + job.cores > cap {
                return Some(HoldReason::UserCap { cap, in_use });
            }
            if let Some(o) = self.policy.override_for(&job.user) {
                let end = now + self.policy.launch_latency(job.cores) + job.service_time;
                if now < o.expiry && end > o.expiry {
                    let after: u32 = self
                        .running
                        .iter()
                        .filter(|&&r| self.jobs[r].user == job.user)
                        .filter(|&&r| self.outcomes[r].end.is_some_and(|e| e > o.expiry))
                        .map(|&r| self.jobs[r].cores)
                        .sum();
                    let cap = self.policy.default_user_cap();
                    if after + job.cores > cap {
                        return Some(HoldReason::UserCap { cap, in_use: after });
                    }
                }
            }
        }
        if self.allocated + job.cores > self.policy.total_cores {
            return Some(HoldReason::Capacity {
                total: self.policy.total_cores,
                allocated: self.allocated,
            });
        }
        None
    }

    fn start(&mut self, j: usize, now: f64) {
        let job = &self.jobs[j];
        let latency = self.policy.launch_latency(job.cores);
        let end = now + latency + job.service_time;
        self.allocated += job.cores;
        *self.user_in_use.entry(job.user.as_str()).or_insert(0) += job.cores;
        self.running.push(j);
        let out = &mut self.outcomes[j];
        out.start = Some(now);
        out.end = Some(end);
        out.wait_time = Some(now - job.arrival_time);
        let detail = format!("wait={:.6};latency={:.6}", now - job.arrival_time, latency);
        self.log(now, TraceKind::Start, Some(j), &job.user, detail);
        self.push(end, EventKind::End, j);
    }

    fn hold(&mut self, j: usize, now: f64, reason: HoldReason) {
        if self.last_hold[j].as_ref() != Some(&reason) {
            let detail = reason.to_string();
            self.last_hold[j] = Some(reason);
            self.log(now, TraceKind::Hold, Some(j), &self.jobs[j].user, detail);
        }
    }

    fn dispatch(&mut self, now: f64) {
        match self.discipline {
            Discipline::OnDemand => {
                let queue: Vec<usize> = self.waiting.drain(..).collect();
                for j in queue {
                    match self.check(j, now) {
                        None => self.start(j, now),
                        Some(reason) => {
                            self.hold(j, now, reason);
                            self.waiting.push_back(j);
                        }
                    }
                }
            }
            Discipline::BatchFifo => {
                while let Some(&head) = self.waiting.front() {
                    match self.check(head, now) {
                        None => {
                            self.waiting.pop_front();
                            self.start(head, now);
                        }
                        Some(reason) => {
                            self.hold(head, now, reason);
                            break;
                        }
                    }
                }
            }
        }
    }
}

pub fn validate_workload(policy: &PolicyConfig, jobs: &[SimJob]) -> Result<()> {
    policy.validate()?;
    let mut seen = HashSet::new();
    for job in jobs {
        let bad = |why: String| SchedError::Argument(format!("job {}: {why}", job.job_id));
        if !seen.insert(job.job_id.as_str()) {
            return Err(bad("duplicate job id".into()));
        }
        if job.cores == 0 || job.cores > policy.total_cores {
            return Err(bad(format!(
                "{} cores requested; must be in 1..={}",
                job.cores, policy.total_cores
            )));
        }
        if !(job.service_time.is_finite() && job.service_time > 0.0) {
            return Err(bad(format!("service time {} must be positive", job.service_time)));
        }
        if !(job.arrival_time.is_finite() && job.arrival_time >= 0.0) {
            return Err(bad(format!("arrival time {} must be non-negative", job.arrival_time)));
        }
        if job.user.is_empty() || job.user.contains([',', '\n']) {
            return Err(bad(format!("user {:?} is empty or contains a separator", job.user)));
        }
    }
    Ok(())
}

/// Runs the workload under one discipline. Deterministic in its inputs.
pub fn simulate(policy: &PolicyConfig, jobs: &[SimJob], discipline: Discipline) -> Result<SimOutcome> {
    validate_workload(policy, jobs)?;

    let mut engine = Engine {
        policy,
        jobs,
        discipline,
        heap: BinaryHeap::new(),
        next_order: 0,
        waiting: VecDeque::new(),
        running: Vec::new(),
        allocated: 0,
        user_in_use: BTreeMap::new(),
        outcomes: jobs
            .iter()
            .map(|j| JobOutcome {
                job_id: j.job_id.clone(),
                user: j.user.clone(),
                cores: j.cores,
                arrival_time: j.arrival_time,
                service_time: j.service_time,
                launch_latency: policy.launch_latency(j.cores),
                start: None,
                end: None,
                wait_time: None,
            })
            .collect(),
        last_hold: vec![None; jobs.len()],
        trace: Vec::new(),
    };

    // Arrival order with ties broken by job id.
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by(|&a, &b| {
        jobs[a]
            .arrival_time
            .total_cmp(&jobs[b].arrival_time)
            .then_with(|| jobs[a].job_id.cmp(&jobs[b].job_id))
    });
    for j in order {
        engine.push(jobs[j].arrival_time, EventKind::Arrive, j);
    }
    if discipline == Discipline::OnDemand {
        for (i, o) in policy.overrides.iter().enumerate() {
            if o.expiry >= 0.0 {
                engine.push(o.expiry, EventKind::Expire, i);
            }
        }
    }

    let mut utilization = Vec::new();
    while let Some(first) = engine.heap.pop() {
        let now = first.time;
        engine.apply(first);
        while engine.heap.peek().is_some_and(|e| e.time == now) {
            let ev = engine.heap.pop().unwrap();
            engine.apply(ev);
        }
        engine.dispatch(now);
        utilization.push(UtilizationPoint {
            time: now,
            allocated: engine.allocated,
            utilization: engine.allocated as f64 / policy.total_cores as f64,
        });
    }

    let summary = summarize(policy, &engine.outcomes, &utilization);
    Ok(SimOutcome {
        discipline,
        total_cores: policy.total_cores,
        jobs: engine.outcomes,
        summary,
        utilization,
        trace: engine.trace,
    })
}

fn summarize(policy: &PolicyConfig, jobs: &[JobOutcome], util: &[UtilizationPoint]) -> SimSummary {
    let mut waits: Vec<f64> = jobs.iter().filter_map(|j| j.wait_time).collect();
    waits.sort_by(f64::total_cmp);
    let n = waits.len();
    let mean_wait = if n == 0 { 0.0 } else { waits.iter().sum::<f64>() / n as f64 };
    let median_wait = match n {
        0 => 0.0,
        _ if n % 2 == 1 => waits[n / 2],
        _ => (waits[n / 2 - 1] + waits[n / 2]) / 2.0,
    };
    let p95_wait = if n == 0 {
        0.0
    } else {
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        waits[rank - 1]
    };

    let (first_event, last_event) = match (util.first(), util.last()) {
        (Some(a), Some(b)) => (a.time, b.time),
        _ => (0.0, 0.0),
    };
    let span = last_event - first_event;
    let mean_utilization = if span > 0.0 {
        let busy: f64 = util
            .windows(2)
            .map(|w| w[0].allocated as f64 * (w[1].time - w[0].time))
            .sum();
        busy / (policy.total_cores as f64 * span)
    } else {
        0.0
    };

    let mut regimes = RegimeHistogram::default();
    for j in jobs {
        regimes.add(classify_regime(j.service_time).expect("validated service time"));
    }

    SimSummary {
        jobs: jobs.len(),
        started: n,
        mean_wait,
        median_wait,
        p95_wait,
        max_wait: waits.last().copied().unwrap_or(0.0),
        mean_utilization,
        peak_utilization: util.iter().map(|p| p.utilization).fold(0.0, f64::max),
        min_free_cores: util
            .iter()
            .map(|p| policy.total_cores - p.allocated)
            .min()
            .unwrap_or(policy.total_cores),
        first_event,
        last_event,
        regimes,
    }
}
