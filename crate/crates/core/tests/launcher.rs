mod common;

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::time::{Duration, Instant};

use common::{alive, blur_oracle, launcher, WAIT};
use ihpc::launcher::{rank_log, JobSpec, JobState, LauncherError, Location, RESULT_DIR};
use ihpc::pgas::TypedArrayPayload;
use ihpc::sched::{HoldReason, PolicyConfig};

fn decode_u8(bytes: &[u8]) -> (Vec<u64>, Vec<u8>) {
    let p = TypedArrayPayload::decode(bytes).unwrap();
    let v = p.values::<u8>().unwrap();
    (p.shape, v)
}

#[test]
fn grid_blur_gathers_at_rank0_in_this_process() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let rec = l.launch(&JobSpec::new("blur", 4, Location::Grid)).unwrap();
    assert_eq!(rec.state, JobState::Done, "{rec:?}");
    assert!(rec.ranks[0].in_process);
    assert_eq!(rec.ranks[0].pid, Some(std::process::id()));
    assert!(rec.ranks.iter().all(|r| r.exit.is_some_and(|e| e.success())));

    let log0 = fs::read_to_string(rank_log(&rec.job_dir, 0)).unwrap();
    assert!(log0.contains(&format!("pid {}", std::process::id())), "{log0}");
    for r in 1..4 {
        let log = fs::read_to_string(rank_log(&rec.job_dir, r)).unwrap();
        assert!(log.contains(&format!("rank {r} of 4")), "{log}");
        assert!(!alive(rec.ranks[r as usize].pid.unwrap()));
    }

    let (shape, img) = decode_u8(&l.read_result(&rec.job_id, "blur.tarr").unwrap());
    assert_eq!(shape, vec![48, 64]);
    assert_eq!(img, blur_oracle(64, 48, 7, 2));
    assert!(l.allocations().unwrap().is_empty());
}

#[test]
fn local_serial_run_equals_grid_run() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let args = ["30", "9", "5", "3"];
    let serial = l
        .launch(&JobSpec::new("blur", 1, Location::Local).with_args(args))
        .unwrap();
    assert_eq!(serial.state, JobState::Done);
    assert_eq!(serial.ranks.len(), 1);
    assert!(!serial.ranks[0].in_process);
    let grid = l
        .launch(&JobSpec::new("blur", 3, Location::Grid).with_args(args))
        .unwrap();
    assert_eq!(grid.state, JobState::Done);
    let a = l.read_result(&serial.job_id, "blur.tarr").unwrap();
    let b = l.read_result(&grid.job_id, "blur.tarr").unwrap();
    assert_eq!(a, b);
    assert_eq!(decode_u8(&a).1, blur_oracle(30, 9, 5, 3));
}

#[test]
fn background_job_runs_detached_and_collects_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let rec = l
        .launch(&JobSpec::new("sleep", 4, Location::Background).with_args(["0.5"]))
        .unwrap();
    assert_eq!(rec.state, JobState::Running);
    assert!(matches!(l.collect(&rec.job_id), Err(LauncherError::NotReady(_))));
    assert_eq!(l.allocations().unwrap().total_allocated(), 4);

    let done = l.wait(&rec.job_id, WAIT).unwrap();
    assert_eq!(done.state, JobState::Done, "{done:?}");
    assert!(done.ranks.iter().all(|r| r.exit.is_some_and(|e| e.success())));
    assert!(l.allocations().unwrap().is_empty());

    let first = l.collect(&rec.job_id).unwrap();
    let second = l.collect(&rec.job_id).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.logs.len(), 4);
}

#[test]
fn background_hello_result() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let rec = l.launch(&JobSpec::new("hello", 3, Location::Background)).unwrap();
    let done = l.wait(&rec.job_id, WAIT).unwrap();
    assert_eq!(done.state, JobState::Done);
    let text = String::from_utf8(l.read_result(&rec.job_id, "hello.txt").unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (r, line) in lines.iter().enumerate() {
        assert!(line.starts_with(&format!("hello from rank {r} of 3")), "{line}");
    }
}

#[test]
fn failing_rank_fails_job_and_stops_survivors() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let started = Instant::now();
    let rec = l
        .launch(&JobSpec::new("fail", 4, Location::Local).with_args(["2", "7"]))
        .unwrap();
    assert_eq!(rec.state, JobState::Failed);
    assert!(started.elapsed() < Duration::from_secs(20));
    assert_eq!(rec.ranks[2].exit.unwrap().code, Some(7));
    for r in &rec.ranks {
        assert!(r.exit.is_some());
        assert!(!alive(r.pid.unwrap()));
    }
    assert!(l.allocations().unwrap().is_empty());
    // logs are still collectable
    let c = l.collect(&rec.job_id).unwrap();
    assert_eq!(c.logs.len(), 4);
    assert!(c.results.is_empty());
}

#[test]
fn failing_worker_unblocks_in_process_rank0() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let rec = l
        .launch(&JobSpec::new("fail", 3, Location::Grid).with_args(["1"]))
        .unwrap();
    assert_eq!(rec.state, JobState::Failed);
    assert_eq!(rec.ranks[1].exit.unwrap().code, Some(3));
    assert!(!rec.ranks[0].exit.unwrap().success());
}

#[test]
fn abort_running_background_job() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let rec = l
        .launch(&JobSpec::new("sleep", 4, Location::Background).with_args(["60"]))
        .unwrap();
    assert_eq!(rec.state, JobState::Running);
    let pids: Vec<u32> = rec.ranks.iter().map(|r| r.pid.unwrap()).collect();
    assert!(pids.iter().all(|&p| alive(p)));

    let aborted = l.abort(&rec.job_id).unwrap();
    assert_eq!(aborted.state, JobState::Aborted);
    assert!(pids.iter().all(|&p| !alive(p)));
    assert!(l.allocations().unwrap().is_empty());

    assert!(matches!(l.abort(&rec.job_id), Err(LauncherError::State(_))));
    std::thread::sleep(Duration::from_millis(300));
    assert_eq!(l.status(&rec.job_id).unwrap().state, JobState::Aborted);
    assert!(l.collect(&rec.job_id).is_ok());
}

#[test]
fn abort_of_finished_job_is_state_error() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let rec = l.launch(&JobSpec::new("hello", 2, Location::Local)).unwrap();
    assert_eq!(rec.state, JobState::Done);
    assert!(matches!(l.abort(&rec.job_id), Err(LauncherError::State(_))));
    assert_eq!(l.status(&rec.job_id).unwrap().state, JobState::Done);
}

#[test]
fn unknown_job_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    for r in [
        l.status("000999-ffff").map(|_| ()),
        l.collect("000999-ffff").map(|_| ()),
        l.abort("000999-ffff").map(|_| ()),
    ] {
        assert!(matches!(r, Err(LauncherError::NotFound(_))));
    }
}

#[test]
fn admission_caps_concurrent_jobs() {
    let dir = tempfile::tempdir().unwrap();
    // 32 cores, cap 4 per user
    let l = launcher(dir.path()).with_policy(PolicyConfig::new(32).unwrap());
    let spec = JobSpec::new("sleep", 4, Location::Background)
        .with_args(["30"])
        .with_user("ana");
    let first = l.launch(&spec).unwrap();
    match l.launch(&spec) {
        Err(LauncherError::Capacity {
            reason: HoldReason::UserCap { cap: 4, in_use: 4 },
        }) => {}
        other => panic!("expected a user-cap hold, got {other:?}"),
    }
    // another user is unaffected
    let other = l.launch(&spec.clone().with_user("bo")).unwrap();
    assert_eq!(l.allocations().unwrap().total_allocated(), 8);
    l.abort(&first.job_id).unwrap();
    l.abort(&other.job_id).unwrap();
    assert!(l.allocations().unwrap().is_empty());
    let again = l.launch(&spec.clone().with_args(["0"])).unwrap();
    assert_eq!(l.wait(&again.job_id, WAIT).unwrap().state, JobState::Done);
}

#[test]
fn external_executable_gets_rank_environment() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("rank.sh");
    fs::write(
        &script,
        "#!/bin/sh\necho \"$IHPC_RANK/$IHPC_NRANKS\" > \"$IHPC_JOB_DIR/result/r$IHPC_RANK.txt\"\n",
    )
    .unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
    let l = launcher(&dir.path().join("root"));
    let rec = l
        .launch(&JobSpec::new(script.to_str().unwrap(), 3, Location::Local))
        .unwrap();
    assert_eq!(rec.state, JobState::Done);
    for r in 0..3 {
        let text = fs::read_to_string(rec.job_dir.join(RESULT_DIR).join(format!("r{r}.txt"))).unwrap();
        assert_eq!(text.trim(), format!("{r}/3"));
    }
}

#[test]
fn failing_external_executable() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(&dir.path().join("root"));
    let rec = l.launch(&JobSpec::new("/bin/false", 2, Location::Local)).unwrap();
    assert_eq!(rec.state, JobState::Failed);
    assert!(rec.message.is_some());
}

#[test]
fn spawn_failure_marks_job_failed() {
    let dir = tempfile::tempdir().unwrap();
    let l = ihpc::launcher::Launcher::new(dir.path())
        .unwrap()
        .with_worker_exe(dir.path().join("no-such-binary"));
    let err = l.launch(&JobSpec::new("hello", 2, Location::Local)).unwrap_err();
    assert!(matches!(err, LauncherError::Spawn(_)));
    let records = l.list().unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].state, JobState::Failed);
    assert!(l.allocations().unwrap().is_empty());
}

#[test]
fn concurrent_launches_get_distinct_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let ids: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let root = &root;
                s.spawn(move || {
                    let l = launcher(root);
                    let rec = l.launch(&JobSpec::new("hello", 2, Location::Local)).unwrap();
                    assert_eq!(rec.state, JobState::Done);
                    rec.job_id
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut unique = ids.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), 4);
    assert!(launcher(&root).allocations().unwrap().is_empty());
}
