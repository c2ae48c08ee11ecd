//! Workload files (`arrival_s,user,cores,service_s`, one job per line) and
//! seeded synthetic workloads.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SchedError, SimJob};

/// Job ids are assigned from the line position: `j000000`, `j000001`, ...
pub fn job_id_for(index: usize) -> String {
    format!("j{index:06}")
}

pub fn parse_workload<R: Read>(input: R) -> Result<Vec<SimJob>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(input);
    let mut jobs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| SchedError::Workload {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| SchedError::Workload { line, msg };
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", record.len())));
        }
        let arrival_time: f64 = record[0]
            .parse()
            .map_err(|_| bad(format!("arrival {:?} is not a number", &record[0])))?;
        let user = record[1].to_string();
        let cores: u32 = record[2]
            .parse()
            .map_err(|_| bad(format!("cores {:?} is not a positive integer", &record[2])))?;
        let service_time: f64 = record[3]
            .parse()
            .map_err(|_| bad(format!("service {:?} is not a number", &record[3])))?;
        if user.is_empty() {
            return Err(bad("empty user".into()));
        }
        if cores == 0 {
            return Err(bad("cores must be at least 1".into()));
        }
        if !(service_time.is_finite() && service_time > 0.0) {
            return Err(bad(format!("service time {service_time} must be positive")));
        }
        if !(arrival_time.is_finite() && arrival_time >= 0.0) {
            return Err(bad(format!("arrival time {arrival_time} must be non-negative")));
        }
        jobs.push(SimJob {
            job_id: job_id_for(jobs.len()),
            user,
            cores,
            service_time,
            arrival_time,
        });
    }
    Ok(jobs)
}

pub fn read_workload(path: &Path) -> Result<Vec<SimJob>> {
    parse_workload(BufReader::new(File::open(path)?))
}

/// Writes jobs in file order. Numbers use Rust's shortest round-trip form,
/// so `parse_workload(write_workload(jobs))` reproduces the jobs exactly.
pub fn write_workload<W: Write>(mut out: W, jobs: &[SimJob]) -> io::Result<()> {
    for j in jobs {
        writeln!(out, "{},{},{},{}", j.arrival_time, j.user, j.cores, j.service_time)?;
    }
    Ok(())
}

/// Parameters for [`generate_workload`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub jobs: usize,
    pub users: usize,
    pub max_cores: u32,
    /// Mean gap between arrivals, seconds.
    pub mean_interarrival: f64,
    /// Service times are drawn log-uniformly from this range, seconds.
    pub service_range: (f64, f64),
}

impl WorkloadSpec {
    /// Mixed workload spanning all three regimes.
    pub fn mixed(jobs: usize) -> Self {
        WorkloadSpec {
            jobs,
            users: 40,
            max_cores: 64,
            mean_interarrival: 30.0,
            service_range: (10.0, 40_000.0),
        }
    }

    /// Many short jobs from many users.
    pub fn interactive_heavy(jobs: usize) -> Self {
        WorkloadSpec {
            jobs,
            users: 100,
            max_cores: 16,
            mean_interarrival: 2.0,
            service_range: (5.0, 600.0),
        }
    }
}

/// Deterministic in `(spec, seed)`. Arrivals are a Poisson process and
/// rounded to milliseconds so the workload file round-trips compactly.
pub fn generate_workload(spec: &WorkloadSpec, seed: u64) -> Vec<SimJob> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.service_range;
    let mut t = 0.0f64;
    (0..spec.jobs)
        .map(|i| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            t += -spec.mean_interarrival * u.ln();
            let arrival_time = (t * 1000.0).round() / 1000.0;
            let user = format!("u{:03}", rng.gen_range(0..spec.users.max(1)));
            let cores = rng.gen_range(1..=spec.max_cores.max(1));
            let service = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
            let service_time = ((service * 1000.0).round() / 1000.0).max(0.001);
            SimJob {
                job_id: job_id_for(i),
                user,
                cores,
                service_time,
                arrival_time,
            }
        })
        .collect()
}

/// One user submitting ten 16-core, ten-minute jobs at once.
pub fn flood_workload() -> Vec<SimJob> {
    (0..10)
        .map(|i| SimJob {
            job_id: job_id_for(i),
            user: "flood".into(),
            cores: 16,
            service_time: 600.0,
            arrival_time: 0.0,
        })
        .collect()
}
