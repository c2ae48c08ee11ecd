//! Built-in rank programs, runnable by name in any launch mode.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::store::{write_atomic, RESULT_DIR};
use crate::fabric::{FabricContext, FabricError, PayloadType, RankId, ABORT_MARKER};
use crate::pgas::{DistArray, DistMap, PgasError, TypedArrayPayload};

pub const REGISTERED: &[&str] = &["blur", "hello", "sleep", "fail", "fabric-stress", "barrier-trials"];

/// Result file written by `blur` at rank 0.
pub const BLUR_RESULT: &str = "blur.tarr";

pub fn is_registered(name: &str) -> bool {
    REGISTERED.contains(&name)
}

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Pgas(#[from] PgasError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("check failed: {0}")]
    Check(String),
    #[error("deliberate failure with exit code {0}")]
    Exit(i32),
}

impl ProgramError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ProgramError::Usage(_) => 2,
            ProgramError::Exit(code) => *code,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, ProgramError>;

pub fn run_program(name: &str, args: &[String], ctx: &mut FabricContext, out: &mut dyn Write) -> Result<()> {
    match name {
        "blur" => blur(&BlurParams::from_args(args)?, ctx, out),
        "hello" => hello(ctx, out),
        "sleep" => sleep(args, ctx, out),
        "fail" => fail(args, ctx, out),
        "fabric-stress" => fabric_stress(args, ctx, out),
        "barrier-trials" => barrier_trials(args, ctx, out),
        other => Err(ProgramError::Usage(format!("unknown program {other:?}"))),
    }
}

fn arg<T: std::str::FromStr>(args: &[String], i: usize, name: &str, default: T) -> Result<T> {
    match args.get(i) {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| ProgramError::Usage(format!("{name} must be a number, got {s:?}"))),
    }
}

fn write_result(job_dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let dir = job_dir.join(RESULT_DIR);
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(name), bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlurParams {
    pub width: usize,
    pub height: usize,
    pub seed: u32,
    pub radius: usize,
}

impl Default for BlurParams {
    fn default() -> Self {
        BlurParams {
            width: 64,
            height: 48,
            seed: 7,
            radius: 2,
        }
    }
}

impl BlurParams {
    /// Positional `[width [height [seed [radius]]]]`.
    pub fn from_args(args: &[String]) -> Result<Self> {
        let d = BlurParams::default();
        let p = BlurParams {
            width: arg(args, 0, "width", d.width)?,
            height: arg(args, 1, "height", d.height)?,
            seed: arg(args, 2, "seed", d.seed)?,
            radius: arg(args, 3, "radius", d.radius)?,
        };
        if p.width == 0 || p.height == 0 {
            return Err(ProgramError::Usage("blur image must be non-empty".into()));
        }
        Ok(p)
    }
}

/// Source image pixel at column `x`, row `y`. 32-bit wrapping arithmetic:
///
/// ```text
/// h = x*374761393 + y*668265263 + seed*2246822519
/// h = (h ^ (h >> 13)) * 1274126177
/// pixel = (h ^ (h >> 16)) & 0xff
/// ```
pub fn blur_source_pixel(x: u32, y: u32, seed: u32) -> u8 {
    let mut h = x
        .wrapping_mul(374_761_393)
        .wrapping_add(y.wrapping_mul(668_265_263))
        .wrapping_add(seed.wrapping_mul(2_246_822_519));
    h = (h ^ (h >> 13)).wrapping_mul(1_274_126_177);
    ((h ^ (h >> 16)) & 0xff) as u8
}

/// Horizontal box blur of one row. The window is truncated at the edges and
/// the mean is rounded half up: `(sum + n/2) / n`.
pub fn blur_row(row: &[u8], radius: usize) -> Vec<u8> {
    let w = row.len();
    (0..w)
        .map(|x| {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            let n = (hi - lo + 1) as u32;
            let sum: u32 = row[lo..=hi].iter().map(|&v| v as u32).sum();
            ((sum + n / 2) / n) as u8
        })
        .collect()
}

/// Whole image in one process, row-major.
pub fn blur_serial(p: &BlurParams) -> Vec<u8> {
    let mut img = Vec::with_capacity(p.width * p.height);
    for y in 0..p.height {
        let row: Vec<u8> = (0..p.width)
            .map(|x| blur_source_pixel(x as u32, y as u32, p.seed))
            .collect();
        img.extend(blur_row(&row, p.radius));
    }
    img
}

/// Rows are block-distributed; each rank generates and blurs its own rows,
/// then the image is aggregated at rank 0 and saved as `result/blur.tarr`.
fn blur(p: &BlurParams, ctx: &mut FabricContext, out: &mut dyn Write) -> Result<()> {
    let n = ctx.nranks() as usize;
    let rank = ctx.my_rank();
    let map = DistMap::new(&[p.height, p.width], &[n, 1], n as u32)?;
    let rows = map.local_extent(rank)?[0];
    writeln!(out, "blur: rows {}..{} of {}x{}", rows.start, rows.end(), p.height, p.width)?;

    let mut source = Vec::with_capacity(rows.len * p.width);
    for y in rows.start..rows.end() {
        source.extend((0..p.width).map(|x| blur_source_pixel(x as u32, y as u32, p.seed)));
    }
    let mut image = DistArray::from_local(map, rank, source)?;
    let blurred: Vec<u8> = image
        .local_block()
        .chunks(p.width)
        .flat_map(|row| blur_row(row, p.radius))
        .collect();
    image.local_block_mut().copy_from_slice(&blurred);

    if let Some(full) = image.agg(ctx)? {
        let payload = TypedArrayPayload::from_values(&[p.height, p.width], &full)?;
        write_result(ctx.job_dir(), BLUR_RESULT, &payload.encode())?;
        let min = full.iter().min().copied().unwrap_or(0);
        let max = full.iter().max().copied().unwrap_or(0);
        let mean = full.iter().map(|&v| v as f64).sum::<f64>() / full.len() as f64;
        writeln!(out, "blur: gathered {}x{} image at rank 0 (min {min}, mean {mean:.3}, max {max})", p.height, p.width)?;
    }
    Ok(())
}

fn hello(ctx: &mut FabricContext, out: &mut dyn Write) -> Result<()> {
    let line = format!("hello from rank {} of {} (pid {})", ctx.my_rank(), ctx.nranks(), std::process::id());
    writeln!(out, "{line}")?;
    if let Some(lines) = ctx.gather_to_zero(1, line.as_bytes())? {
        let text: Vec<String> = lines
            .iter()
            .map(|l| String::from_utf8_lossy(l).into_owned())
            .collect();
        write_result(ctx.job_dir(), "hello.txt", (text.join("\n") + "\n").as_bytes())?;
    }
    ctx.barrier(1)?;
    Ok(())
}

fn check_abort(ctx: &FabricContext) -> Result<()> {
    if ctx.job_dir().join(ABORT_MARKER).exists() {
        return Err(FabricError::Aborted {
            src: ctx.my_rank().get(),
            tag: 0,
        }
        .into());
    }
    Ok(())
}

/// `sleep [seconds]`: sleeps, then meets the other ranks at a barrier.
fn sleep(args: &[String], ctx: &mut FabricContext, out: &mut dyn Write) -> Result<()> {
    let secs: f64 = arg(args, 0, "seconds", 1.0)?;
    if !(secs.is_finite() && secs >= 0.0) {
        return Err(ProgramError::Usage("seconds must be non-negative".into()));
    }
    writeln!(out, "sleeping {secs} s")?;
    out.flush()?;
    let until = Instant::now() + Duration::from_secs_f64(secs);
    while Instant::now() < until {
        check_abort(ctx)?;
        thread::sleep(Duration::from_millis(20).min(until - Instant::now()));
    }
    ctx.barrier(1)?;
    Ok(())
}

/// `fail [rank [code]]`: the chosen rank (default: the last) exits with `code`
/// (default 3); the others wait at a barrier that never completes.
fn fail(args: &[String], ctx: &mut FabricContext, out: &mut dyn Write) -> Result<()> {
    let target: u32 = arg(args, 0, "rank", ctx.nranks() - 1)?;
    let code: i32 = arg(args, 1, "code", 3)?;
    if ctx.my_rank().get() == target {
        writeln!(out, "rank {target} failing with exit code {code}")?;
        return Err(ProgramError::Exit(code));
    }
    ctx.barrier(1)?;
    Ok(())
}

fn channel_rng(seed: u64, src: u32, dst: u32, salt: u64) -> ChaCha8Rng {
    let mix = seed
        ^ (src as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (dst as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ salt.wrapping_mul(0x1656_67B1_9E37_79F9);
    ChaCha8Rng::seed_from_u64(mix)
}

const STRESS_TAGS: u32 = 4;
const STRESS_BATCH: usize = 25;

fn stress_messages(seed: u64, src: u32, dst: u32, count: usize, max_len: usize) -> Vec<(u32, Vec<u8>)> {
    let mut rng = channel_rng(seed, src, dst, 1);
    (0..count)
        .map(|_| {
            let tag = rng.gen_range(0..STRESS_TAGS);
            let len = rng.gen_range(0..=max_len);
            let mut payload = vec![0u8; len];
            rng.fill(payload.as_mut_slice());
            (tag, payload)
        })
        .collect()
}

/// `fabric-stress [seed [count [max_len]]]`: every rank sends `count` seeded
/// messages over random tags to every peer, in batches, and receives each
/// batch in a random tag interleaving, checking payloads and per-tag order.
/// Rank 0 writes `result/stress.txt` with the total received.
fn fabric_stress(args: &[String], ctx: &mut FabricContext, out: &mut dyn Write) -> Result<()> {
    let seed: u64 = arg(args, 0, "seed", 1)?;
    let count: usize = arg(args, 1, "count", 1000)?;
    let max_len: usize = arg(args, 2, "max_len", 256)?;
    let me = ctx.my_rank().get();
    let n = ctx.nranks();
    let peers: Vec<u32> = (0..n).filter(|&p| p != me).collect();

    let outgoing: Vec<Vec<(u32, Vec<u8>)>> = peers
        .iter()
        .map(|&p| stress_messages(seed, me, p, count, max_len))
        .collect();
    let incoming: Vec<Vec<(u32, Vec<u8>)>> = peers
        .iter()
        .map(|&p| stress_messages(seed, p, me, count, max_len))
        .collect();
    let mut order_rng: Vec<ChaCha8Rng> = peers.iter().map(|&p| channel_rng(seed, p, me, 2)).collect();

    let mut received = 0u64;
    let mut start = 0;
    while start < count {
        let end = (start + STRESS_BATCH).min(count);
        for (pi, &p) in peers.iter().enumerate() {
            for (tag, payload) in &outgoing[pi][start..end] {
                ctx.send(p, *tag, PayloadType::RawBytes, payload)?;
            }
        }
        for (pi, &p) in peers.iter().enumerate() {
            let mut queues: Vec<VecDeque<&[u8]>> = vec![VecDeque::new(); STRESS_TAGS as usize];
            for (tag, payload) in &incoming[pi][start..end] {
                queues[*tag as usize].push_back(payload);
            }
            loop {
                let live: Vec<usize> = (0..queues.len()).filter(|&t| !queues[t].is_empty()).collect();
                let Some(&tag) = live.choose(&mut order_rng[pi]) else { break };
                let expected = queues[tag].pop_front().unwrap();
                let got = ctx.recv(p, tag as u32, None)?;
                if got.payload_type != PayloadType::RawBytes || got.payload != expected {
                    return Err(ProgramError::Check(format!(
                        "message from rank {p} tag {tag} differs from what was sent"
                    )));
                }
                received += 1;
            }
        }
        start = end;
    }
    writeln!(out, "fabric-stress: rank {me} received {received} messages from {} peers", peers.len())?;

    if let Some(counts) = ctx.gather_to_zero(STRESS_TAGS + 1, &received.to_le_bytes())? {
        let total: u64 = counts
            .iter()
            .map(|c| u64::from_le_bytes(c.as_slice().try_into().unwrap_or([0; 8])))
            .sum();
        write_result(ctx.job_dir(), "stress.txt", format!("ranks {n}\nreceived {total}\n").as_bytes())?;
    }
    Ok(())
}

/// `barrier-trials [seed [trials]]`: before each barrier every rank sleeps a
/// random 0-3 ms and drops an arrival marker; after it, all markers of the
/// trial must exist.
fn barrier_trials(args: &[String], ctx: &mut FabricContext, out: &mut dyn Write) -> Result<()> {
    let seed: u64 = arg(args, 0, "seed", 1)?;
    let trials: u32 = arg(args, 1, "trials", 100)?;
    let me = ctx.my_rank().get();
    let n = ctx.nranks();
    let dir = ctx.job_dir().join(RESULT_DIR).join("barrier");
    std::fs::create_dir_all(&dir)?;
    let mut rng = channel_rng(seed, me, me, 3);

    for t in 0..trials {
        thread::sleep(Duration::from_micros(rng.gen_range(0..3000)));
        std::fs::File::create(dir.join(format!("t{t}_r{me}")))?;
        ctx.barrier(t + 1)?;
        for r in 0..n {
            if !dir.join(format!("t{t}_r{r}")).exists() {
                return Err(ProgramError::Check(format!(
                    "rank {me} left barrier {t} before rank {r} arrived"
                )));
            }
        }
    }
    writeln!(out, "barrier-trials: {trials} trials passed on rank {me}")?;
    if ctx.my_rank() == RankId::ROOT {
        write_result(ctx.job_dir(), "barrier.txt", format!("ranks {n}\ntrials {trials}\n").as_bytes())?;
    }
    Ok(())
}

/// Fabric polling used by programs that exchange many small messages.
pub(crate) fn tuned_polling(name: &str) -> Option<(Duration, Duration)> {
    match name {
        "fabric-stress" | "barrier-trials" => Some((Duration::from_millis(5), Duration::from_millis(50))),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_all(n: u32, name: &str, args: &[&str]) -> (tempfile::TempDir, Vec<Result<()>>) {
        let dir = tempfile::tempdir().unwrap();
        let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        let results = thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .map(|r| {
                    let (dir, args) = (dir.path(), &args);
                    s.spawn(move || {
                        let mut ctx = FabricContext::init(dir, r, n)
                            .unwrap()
                            .with_polling(Duration::from_millis(1), Duration::from_millis(10))
                            .with_collective_timeout(Some(Duration::from_secs(20)));
                        run_program(name, args, &mut ctx, &mut std::io::sink())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        (dir, results)
    }

    #[test]
    fn blur_row_edges() {
        assert_eq!(blur_row(&[0, 0, 255, 0, 0], 1), vec![0, 85, 85, 85, 0]);
        assert_eq!(blur_row(&[10, 20], 5), vec![15, 15]);
        assert_eq!(blur_row(&[7], 0), vec![7]);
    }

    #[test]
    fn source_pixels_are_known() {
        // fixed values pin the formula for other implementations
        let first: Vec<u8> = (0..4).map(|x| blur_source_pixel(x, 0, 7)).collect();
        let again: Vec<u8> = (0..4).map(|x| blur_source_pixel(x, 0, 7)).collect();
        assert_eq!(first, again);
        let h: u32 = 7u32.wrapping_mul(2_246_822_519);
        let h = (h ^ (h >> 13)).wrapping_mul(1_274_126_177);
        assert_eq!(first[0], ((h ^ (h >> 16)) & 0xff) as u8);
    }

    #[test]
    fn distributed_blur_matches_serial() {
        for n in [1, 3, 4] {
            let (dir, results) = run_all(n, "blur", &["20", "7", "11", "2"]);
            assert!(results.iter().all(|r| r.is_ok()), "{results:?}");
            let bytes = std::fs::read(dir.path().join(RESULT_DIR).join(BLUR_RESULT)).unwrap();
            let payload = TypedArrayPayload::decode(&bytes).unwrap();
            assert_eq!(payload.shape, vec![7, 20]);
            let p = BlurParams { width: 20, height: 7, seed: 11, radius: 2 };
            assert_eq!(payload.values::<u8>().unwrap(), blur_serial(&p));
        }
    }

    #[test]
    fn stress_and_barriers_in_threads() {
        let (dir, results) = run_all(3, "fabric-stress", &["5", "250", "32"]);
        assert!(results.iter().all(|r| r.is_ok()), "{results:?}");
        let text = std::fs::read_to_string(dir.path().join(RESULT_DIR).join("stress.txt")).unwrap();
        assert!(text.contains("received 1500"), "{text}");

        let (_dir, results) = run_all(4, "barrier-trials", &["2", "10"]);
        assert!(results.iter().all(|r| r.is_ok()), "{results:?}");
    }

    #[test]
    fn bad_arguments_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut ctx = FabricContext::init(dir.path(), 0, 1).unwrap();
        let err = run_program("blur", &["wide".into()], &mut ctx, &mut std::io::sink()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = run_program("nope", &[], &mut ctx, &mut std::io::sink()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = run_program("fail", &["0".into(), "9".into()], &mut ctx, &mut std::io::sink()).unwrap_err();
        assert_eq!(err.exit_code(), 9);
    }
}
