//! Byte-level formats shared with out-of-process clients, checked against
//! hand-built bytes rather than the library's own encoders.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{blur_oracle, launcher, WAIT};
use ihpc::fabric::{FabricContext, PayloadType, BARRIER_TAG_BASE};
use ihpc::launcher::{external_exit_file, JobSpec, JobState, Location};
use ihpc::pgas::{Dtype, TypedArrayPayload, AGG_TAG};
use ihpc::sched::{parse_workload, simulate, write_workload, Discipline, PolicyConfig};

fn header_bytes(ptype: u8, src: u32, dst: u32, tag: u32, seq: u32, len: u64) -> Vec<u8> {
    let mut h = b"IHPC".to_vec();
    h.push(1);
    h.push(ptype);
    h.extend_from_slice(&[0, 0]);
    for v in [src, dst, tag, seq] {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h.extend_from_slice(&len.to_le_bytes());
    h
}

#[test]
fn tag_constants() {
    assert_eq!(BARRIER_TAG_BASE, 0x8000_0000);
    assert_eq!(AGG_TAG, 0xC000_0002);
}

#[test]
fn sent_message_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctx = FabricContext::init(dir.path(), 2, 4).unwrap();
    ctx.send(1, 77, PayloadType::Utf8Text, b"hi").unwrap();
    ctx.send(1, 77, PayloadType::RawBytes, b"").unwrap();

    let fabric = dir.path().join("fabric");
    let mut names: Vec<String> = fs::read_dir(&fabric)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "m_00000000_00002_00001_0000000077.dat",
            "m_00000000_00002_00001_0000000077.ok",
            "m_00000001_00002_00001_0000000077.dat",
            "m_00000001_00002_00001_0000000077.ok",
        ]
    );
    let mut expected = header_bytes(2, 2, 1, 77, 0, 2);
    expected.extend_from_slice(b"hi");
    assert_eq!(fs::read(fabric.join(&names[0])).unwrap(), expected);
    assert_eq!(fs::read(fabric.join(&names[1])).unwrap(), Vec::<u8>::new());
    assert_eq!(fs::read(fabric.join(&names[2])).unwrap(), header_bytes(0, 2, 1, 77, 1, 0));
}

/// Writes a message the way an independent client would: data, then marker.
fn raw_send(fabric: &Path, ptype: u8, src: u32, dst: u32, tag: u32, seq: u32, payload: &[u8]) {
    let stem = format!("m_{seq:08}_{src:05}_{dst:05}_{tag:010}");
    let mut bytes = header_bytes(ptype, src, dst, tag, seq, payload.len() as u64);
    bytes.extend_from_slice(payload);
    let tmp = fabric.join(format!(".{stem}.tmp"));
    fs::write(&tmp, bytes).unwrap();
    fs::rename(&tmp, fabric.join(format!("{stem}.dat"))).unwrap();
    fs::write(fabric.join(format!("{stem}.ok")), b"").unwrap();
}

#[test]
fn hand_written_messages_are_received_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut ctx = FabricContext::init(dir.path(), 0, 2).unwrap();
    let fabric = ctx.fabric_dir().to_path_buf();
    // out of order on disk: seq 1 appears first
    raw_send(&fabric, 0, 1, 0, 5, 1, b"second");
    raw_send(&fabric, 0, 1, 0, 5, 0, b"first");
    let a = ctx.recv(1, 5, Some(Duration::from_secs(5))).unwrap();
    let b = ctx.recv(1, 5, Some(Duration::from_secs(5))).unwrap();
    assert_eq!(a.payload, b"first");
    assert_eq!(b.payload, b"second");
    assert_eq!(fs::read_dir(&fabric).unwrap().count(), 0);
}

#[test]
fn typed_array_layout() {
    let p = TypedArrayPayload::from_values(&[2, 3], &[1u8, 2, 3, 4, 5, 6]).unwrap();
    let mut expected = vec![3u8, 2, 0, 0, 0, 0, 0, 0];
    expected.extend_from_slice(&2u64.to_le_bytes());
    expected.extend_from_slice(&3u64.to_le_bytes());
    expected.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
    assert_eq!(p.encode(), expected);

    let f = TypedArrayPayload::from_values(&[2], &[1.5f64, -2.0]).unwrap();
    let mut expected = vec![1u8, 1, 0, 0, 0, 0, 0, 0];
    expected.extend_from_slice(&2u64.to_le_bytes());
    expected.extend_from_slice(&1.5f64.to_le_bytes());
    expected.extend_from_slice(&(-2.0f64).to_le_bytes());
    assert_eq!(f.encode(), expected);
    assert_eq!(Dtype::I64.code(), 2);
}

fn block_rows(height: usize, nranks: usize, rank: usize) -> (usize, usize) {
    let (q, r) = (height / nranks, height % nranks);
    let start = rank * q + rank.min(r);
    (start, q + usize::from(rank < r))
}

/// Acts as rank 0 of a grid blur job using only file operations.
fn raw_rank0_gather(job_dir: &Path, nranks: u32, width: usize, height: usize) -> Vec<u8> {
    let fabric = job_dir.join("fabric");
    let mut image = vec![0u8; width * height];
    let deadline = Instant::now() + Duration::from_secs(60);
    for src in 1..nranks {
        let stem = format!("m_00000000_{src:05}_00000_{AGG_TAG:010}");
        let ok = fabric.join(format!("{stem}.ok"));
        while !ok.exists() {
            assert!(Instant::now() < deadline, "no block from rank {src}");
            std::thread::sleep(Duration::from_millis(10));
        }
        let dat = fabric.join(format!("{stem}.dat"));
        let bytes = fs::read(&dat).unwrap();
        fs::remove_file(&ok).unwrap();
        fs::remove_file(&dat).unwrap();

        assert_eq!(&bytes[0..4], b"IHPC");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1, "typed array payload");
        let field = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        assert_eq!((field(8), field(12), field(16), field(20)), (src, 0, AGG_TAG, 0));
        let len = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        let body = &bytes[32..];
        assert_eq!(body.len(), len);

        assert_eq!(body[0], 3, "u8 elements");
        assert_eq!(body[1], 2, "2-D block");
        let rows = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(body[16..24].try_into().unwrap()) as usize;
        let (start, n) = block_rows(height, nranks as usize, src as usize);
        assert_eq!((rows, cols), (n, width));
        image[start * width..(start + n) * width].copy_from_slice(&body[24..]);
    }
    // rank 0's own rows
    let (start, n) = block_rows(height, nranks as usize, 0);
    let full = blur_oracle(width, height, 7, 2);
    image[start * width..(start + n) * width].copy_from_slice(&full[start * width..(start + n) * width]);
    image
}

#[test]
fn external_rank0_joins_grid_job() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let mut spec = JobSpec::new("blur", 4, Location::Grid);
    spec.rank0_external = true;
    let rec = l.launch(&spec).unwrap();
    assert_eq!(rec.state, JobState::Running);
    assert!(rec.ranks[0].external);
    assert_eq!(rec.ranks[0].pid, None);

    let image = raw_rank0_gather(&rec.job_dir, 4, 64, 48);
    fs::write(external_exit_file(&rec.job_dir), "0\n").unwrap();
    let done = l.wait(&rec.job_id, WAIT).unwrap();
    assert_eq!(done.state, JobState::Done, "{done:?}");
    assert_eq!(done.ranks[0].exit.unwrap().code, Some(0));

    // identical to an all-primary run
    let primary = l.launch(&JobSpec::new("blur", 4, Location::Grid)).unwrap();
    let bytes = l.read_result(&primary.job_id, "blur.tarr").unwrap();
    let values = TypedArrayPayload::decode(&bytes).unwrap().values::<u8>().unwrap();
    assert_eq!(image, values);
}

#[test]
fn external_rank0_failure_fails_job() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let mut spec = JobSpec::new("sleep", 3, Location::Grid).with_args(["30"]);
    spec.rank0_external = true;
    let rec = l.launch(&spec).unwrap();
    fs::write(external_exit_file(&rec.job_dir), "5").unwrap();
    let done = l.wait(&rec.job_id, WAIT).unwrap();
    assert_eq!(done.state, JobState::Failed);
    assert_eq!(done.ranks[0].exit.unwrap().code, Some(5));
    assert!(done.ranks[1..].iter().all(|r| !common::alive(r.pid.unwrap())));
}

#[test]
fn job_json_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let l = launcher(dir.path());
    let rec = l.launch(&JobSpec::new("hello", 2, Location::Local).with_user("ana")).unwrap();
    let text = fs::read_to_string(rec.job_dir.join("job.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    for k in [
        "job_id", "spec", "state", "job_dir", "submitted_at", "started_at", "ended_at", "ranks",
        "supervisor_pid", "message",
    ] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(v["state"], "done");
    assert_eq!(v["spec"]["location"], "local");
    assert_eq!(v["spec"]["user"], "ana");
    assert_eq!(v["spec"]["ncores"], 2);
    assert_eq!(v["ranks"][1]["rank"], 1);
    assert_eq!(v["ranks"][1]["exit"]["code"], 0);
    assert!(chrono::DateTime::parse_from_rfc3339(v["submitted_at"].as_str().unwrap()).is_ok());
}

#[test]
fn workload_and_trace_text() {
    let text = "0,ana,4,60\n0,bo,16,600\n10.5,ana,16,30\n";
    let jobs = parse_workload(text.as_bytes()).unwrap();
    let mut back = Vec::new();
    write_workload(&mut back, &jobs).unwrap();
    assert_eq!(String::from_utf8(back).unwrap(), text);

    let out = simulate(&PolicyConfig::new(128).unwrap(), &jobs, Discipline::OnDemand).unwrap();
    let trace = out.trace_text();
    let mut starts = BTreeMap::new();
    for line in trace.lines() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 6, "{line}");
        assert!(f[0].parse::<f64>().is_ok());
        assert_eq!(f[0].split('.').nth(1).map(str::len), Some(6));
        if f[1] == "start" {
            starts.insert(f[2].to_string(), f[0].to_string());
        }
    }
    assert_eq!(starts["j000000"], "0.000000");
    assert_eq!(starts["j000001"], "0.000000");
    // ana holds 4 of 16 cores until 65.2
    assert_eq!(starts["j000002"], "65.200000");
    assert!(trace.contains("10.500000,hold,j000002,ana,16,user-cap(cap=16;in_use=4)"));
}
