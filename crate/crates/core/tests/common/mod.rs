#![allow(dead_code)]

pub mod oracles;

use std::path::Path;
use std::time::Duration;

use ihpc::launcher::Launcher;

pub const BIN: &str = env!("CARGO_BIN_EXE_ihpc");

pub fn launcher(root: &Path) -> Launcher {
    Launcher::new(root).unwrap().with_worker_exe(BIN)
}

pub const WAIT: Option<Duration> = Some(Duration::from_secs(60));

/// Independent re-statement of the blur program's image: hashed source pixels,
/// then a clamped horizontal box mean per row computed with prefix sums.
pub fn blur_oracle(width: usize, height: usize, seed: u32, radius: usize) -> Vec<u8> {
    let px = |x: u64, y: u64| -> u8 {
        let m = 1u64 << 32;
        let mut h = (x * 374_761_393 + y * 668_265_263 + seed as u64 * 2_246_822_519) % m;
        h = ((h ^ (h >> 13)) * 1_274_126_177) % m;
        ((h ^ (h >> 16)) % 256) as u8
    };
    let mut out = Vec::new();
    for y in 0..height {
        let mut prefix = vec![0u64; width + 1];
        for x in 0..width {
            prefix[x + 1] = prefix[x] + px(x as u64, y as u64) as u64;
        }
        for x in 0..width {
            let lo = x.saturating_sub(radius);
            let hi = usize::min(width - 1, x + radius);
            let n = (hi - lo + 1) as u64;
            let s = prefix[hi + 1] - prefix[lo];
            out.push(((2 * s + n) / (2 * n)) as u8);
        }
    }
    out
}

pub fn alive(pid: u32) -> bool {
    ihpc::launcher::is_alive(pid)
}
