//! Invariants checked against independent oracles.

mod common;

use ihpc::fabric::RankId;
use ihpc::pgas::{block_extent, DistMap};
use common::oracles::{audit, close, oracle_roi};
use ihpc::roi::{compute_roi, BenefitEntry, CodeSetCost, RoiLedger, TrainingCost};
use ihpc::sched::{parse_workload, simulate, write_workload, CapOverride, Discipline, PolicyConfig, SimJob};
use proptest::prelude::*;

const USERS: [&str; 4] = ["ana", "bo", "cy", "di"];

fn arb_jobs(total: u32) -> impl Strategy<Value = Vec<SimJob>> {
    prop::collection::vec((0u32..200, 0usize..4, 1u32..=total, 1u32..400), 1..60).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (arrive, u, cores, service))| SimJob {
                job_id: format!("j{i:04}"),
                user: USERS[u].to_string(),
                cores,
                service_time: service as f64 * 0.5,
                arrival_time: arrive as f64 * 2.0,
            })
            .collect()
    })
}

fn arb_case() -> impl Strategy<Value = (PolicyConfig, Vec<SimJob>)> {
    (8u32..=64, prop::option::of((0usize..4, 1u32..=64, 1u32..300))).prop_flat_map(|(total, ovr)| {
        let mut policy = PolicyConfig::new(total).unwrap();
        if let Some((u, cap, expiry)) = ovr {
            policy.overrides.push(CapOverride {
                user: USERS[u].to_string(),
                cap_cores: cap.min(total),
                expiry: expiry as f64,
            });
        }
        arb_jobs(total).prop_map(move |jobs| (policy.clone(), jobs))
    })
}

fn arb_ledger() -> impl Strategy<Value = RoiLedger> {
    (
        1.0f64..500.0,
        0.1f64..=1.0,
        prop::collection::vec(
            (prop::option::of(0.0f64..500.0), 0.01f64..100.0, 1u32..256),
            0..30,
        ),
        prop::collection::vec(0.0f64..200.0, 0..6),
        prop::collection::vec(0.0f64..40.0, 0..6),
        (0.0f64..10.0, 1.0f64..1000.0, 0.0f64..1e6),
    )
        .prop_map(|(rate, eff, benefits, code, train, (launch, admin, system))| RoiLedger {
            staff_rate: rate,
            efficiency: eff,
            benefits: benefits
                .into_iter()
                .enumerate()
                .map(|(i, (serial, wall, cores))| BenefitEntry {
                    user: format!("u{i}"),
                    serial_time_hours: serial,
                    parallel_wall_hours: wall,
                    cores: Some(cores),
                })
                .collect(),
            parallelize_hours: code
                .into_iter()
                .enumerate()
                .map(|(i, hours)| CodeSetCost {
                    code_set: format!("c{i}"),
                    hours,
                })
                .collect(),
            training_hours: train
                .into_iter()
                .enumerate()
                .map(|(i, hours)| TrainingCost {
                    user: format!("u{i}"),
                    hours,
                })
                .collect(),
            launch_overhead_hours: launch,
            admin_hours: admin,
            system_cost_currency: system,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn on_demand_respects_caps_and_capacity((policy, jobs) in arb_case()) {
        let out = simulate(&policy, &jobs, Discipline::OnDemand).unwrap();
        audit(&policy, &jobs, &out, true);
    }

    #[test]
    fn batch_is_fifo_within_capacity((policy, jobs) in arb_case()) {
        let out = simulate(&policy, &jobs, Discipline::BatchFifo).unwrap();
        audit(&policy, &jobs, &out, false);
        prop_assert!(out.jobs.iter().all(|j| j.start.is_some()));
    }

    #[test]
    fn simulation_is_deterministic((policy, jobs) in arb_case()) {
        let a = simulate(&policy, &jobs, Discipline::OnDemand).unwrap();
        let b = simulate(&policy, &jobs, Discipline::OnDemand).unwrap();
        prop_assert_eq!(a.trace_text(), b.trace_text());
    }

    #[test]
    fn workload_round_trips(jobs in arb_jobs(64)) {
        let mut text = Vec::new();
        write_workload(&mut text, &jobs).unwrap();
        let back = parse_workload(text.as_slice()).unwrap();
        prop_assert_eq!(back.len(), jobs.len());
        for (a, b) in back.iter().zip(&jobs) {
            prop_assert_eq!(&a.user, &b.user);
            prop_assert_eq!(a.cores, b.cores);
            prop_assert_eq!(a.service_time, b.service_time);
            prop_assert_eq!(a.arrival_time, b.arrival_time);
        }
    }

    #[test]
    fn roi_matches_summation(l in arb_ledger()) {
        let r = compute_roi(&l).unwrap();
        prop_assert!(close(r.roi, oracle_roi(&l)), "{} vs {}", r.roi, oracle_roi(&l));
        prop_assert!(r.roi >= 0.0);
    }

    #[test]
    fn roi_is_scale_invariant(l in arb_ledger(), k in 0.01f64..100.0) {
        let mut scaled = l.clone();
        scaled.staff_rate *= k;
        scaled.system_cost_currency *= k;
        let (a, b) = (compute_roi(&l).unwrap().roi, compute_roi(&scaled).unwrap().roi);
        prop_assert!(close(a, b), "{a} vs {b}");
    }

    #[test]
    fn roi_monotone(l in arb_ledger(), extra in 0.0f64..100.0) {
        let base = compute_roi(&l).unwrap().roi;
        let mut costlier = l.clone();
        costlier.admin_hours += extra;
        prop_assert!(compute_roi(&costlier).unwrap().roi <= base * (1.0 + 1e-12));
        let mut better = l.clone();
        better.benefits.push(BenefitEntry {
            user: "x".into(),
            serial_time_hours: Some(extra + 1.0),
            parallel_wall_hours: 1.0,
            cores: None,
        });
        prop_assert!(compute_roi(&better).unwrap().roi >= base * (1.0 - 1e-12));
    }

    #[test]
    fn block_ownership_matches_brute_force(
        shape in prop::collection::vec(1usize..40, 1..=2),
        grid_seed in prop::collection::vec(1usize..5, 2),
    ) {
        let grid: Vec<usize> = shape.iter().zip(&grid_seed).map(|(&n, &g)| g.min(n)).collect();
        let nranks = grid.iter().product::<usize>() as u32;
        let map = DistMap::new(&shape, &grid, nranks).unwrap();
        // 1-D owner by scanning: the first r blocks are one element larger
        let owner_1d = |n: usize, p: usize, i: usize| {
            let mut start = 0;
            for r in 0..p {
                let len = n / p + usize::from(r < n % p);
                if i < start + len {
                    return (r, i - start);
                }
                start += len;
            }
            unreachable!()
        };
        let mut counts = vec![0usize; nranks as usize];
        let total: usize = shape.iter().product();
        for flat in 0..total {
            let mut idx = vec![0; shape.len()];
            let mut rest = flat;
            for d in (0..shape.len()).rev() {
                idx[d] = rest % shape[d];
                rest /= shape[d];
            }
            let mut rank = 0;
            let mut local = Vec::new();
            for d in 0..shape.len() {
                let (c, off) = owner_1d(shape[d], grid[d], idx[d]);
                rank = rank * grid[d] + c;
                local.push(off);
            }
            let (r, l) = map.global_to_local(&idx).unwrap();
            prop_assert_eq!(r, RankId(rank as u32));
            prop_assert_eq!(l, local);
            counts[rank] += 1;
        }
        for r in 0..nranks {
            prop_assert_eq!(map.local_len(RankId(r)).unwrap(), counts[r as usize]);
        }
        for d in 0..shape.len() {
            let sizes: Vec<usize> = (0..grid[d]).map(|c| block_extent(shape[d], grid[d], c).len).collect();
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
        }
    }
}
