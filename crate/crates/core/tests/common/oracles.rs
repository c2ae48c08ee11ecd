//! Independent re-derivations used to check library results.

use std::collections::{BTreeMap, HashMap};

use ihpc::roi::RoiLedger;
use ihpc::sched::{PolicyConfig, SimJob, SimOutcome, TraceKind};

/// Extremes seen while replaying a trace.
#[derive(Debug, Clone, Copy)]
pub struct Replay {
    pub min_free: u32,
    pub peak_allocated: u32,
}

pub fn oracle_cap(policy: &PolicyConfig, user: &str, t: f64) -> u32 {
    let default = ((policy.total_cores as u64 * policy.cap_fraction.numerator()) / policy.cap_fraction.denominator())
        .max(1) as u32;
    match policy.overrides.iter().find(|o| o.user == user) {
        Some(o) if t < o.expiry => o.cap_cores,
        _ => default,
    }
}

/// Replays the trace, checking every instant where usage can rise or a cap can fall.
pub fn audit(policy: &PolicyConfig, jobs: &[SimJob], out: &SimOutcome, cap_checked: bool) -> Replay {
    let by_id: HashMap<&str, &SimJob> = jobs.iter().map(|j| (j.job_id.as_str(), j)).collect();
    let mut in_use: BTreeMap<String, u32> = BTreeMap::new();
    let mut total = 0u32;
    let mut last_t = f64::NEG_INFINITY;
    let mut start_order = Vec::new();
    let mut replay = Replay {
        min_free: policy.total_cores,
        peak_allocated: 0,
    };
    for ev in &out.trace {
        assert!(ev.time >= last_t, "trace not time ordered");
        last_t = ev.time;
        match ev.event {
            TraceKind::Start => {
                let job = by_id[ev.job_id.as_str()];
                assert!(ev.time >= job.arrival_time);
                assert_eq!(ev.cores, job.cores);
                total += ev.cores;
                let u = in_use.entry(ev.user.clone()).or_default();
                *u += ev.cores;
                assert!(total <= policy.total_cores, "capacity exceeded at {}", ev.time);
                replay.min_free = replay.min_free.min(policy.total_cores - total);
                replay.peak_allocated = replay.peak_allocated.max(total);
                if cap_checked {
                    let cap = oracle_cap(policy, &ev.user, ev.time);
                    assert!(*u <= cap, "{} uses {} > cap {} at {}", ev.user, u, cap, ev.time);
                }
                start_order.push(ev.job_id.clone());
            }
            TraceKind::End => {
                total -= ev.cores;
                *in_use.get_mut(&ev.user).unwrap() -= ev.cores;
            }
            TraceKind::Expire => {
                if cap_checked {
                    let used = in_use.get(&ev.user).copied().unwrap_or(0);
                    let cap = oracle_cap(policy, &ev.user, ev.time);
                    assert!(used <= cap, "{} holds {} > cap {} after expiry", ev.user, used, cap);
                }
            }
            TraceKind::Arrive | TraceKind::Hold => {}
        }
    }
    assert_eq!(total, 0, "cores leaked");

    for o in &out.jobs {
        let job = by_id[o.job_id.as_str()];
        let m = policy.launch_latency_model;
        let latency = m.a + m.b * job.cores as f64;
        assert!((o.launch_latency - latency).abs() < 1e-9);
        match (o.start, o.end, o.wait_time) {
            (Some(s), Some(e), Some(w)) => {
                assert!((e - s - latency - job.service_time).abs() < 1e-6);
                assert!((w - (s - job.arrival_time)).abs() < 1e-9);
            }
            (None, None, None) => {
                // only a job above every cap it could ever see may be stranded
                assert!(cap_checked);
                let default = oracle_cap(policy, &job.user, f64::INFINITY);
                assert!(job.cores > default, "{} stranded", job.job_id);
            }
            other => panic!("inconsistent outcome {other:?}"),
        }
    }

    if !cap_checked {
        // strict first come, first served
        let mut fifo: Vec<&SimJob> = jobs.iter().collect();
        fifo.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
        let expected: Vec<String> = fifo.iter().map(|j| j.job_id.clone()).collect();
        assert_eq!(start_order, expected);
    }
    replay
}

pub fn oracle_roi(l: &RoiLedger) -> f64 {
    let mut saved = 0.0;
    for b in &l.benefits {
        let serial = b
            .serial_time_hours
            .unwrap_or_else(|| l.efficiency * b.cores.unwrap() as f64 * b.parallel_wall_hours);
        if serial > b.parallel_wall_hours {
            saved += serial - b.parallel_wall_hours;
        }
    }
    let staff_hours = l.parallelize_hours.iter().map(|c| c.hours).sum::<f64>()
        + l.training_hours.iter().map(|t| t.hours).sum::<f64>()
        + l.launch_overhead_hours
        + l.admin_hours;
    saved * l.staff_rate / (staff_hours * l.staff_rate + l.system_cost_currency)
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}
