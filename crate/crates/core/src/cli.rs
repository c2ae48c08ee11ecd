//! The `ihpc` command line.
//!
//! Exit codes: 0 ok, 1 runtime error, 2 usage, 3 held by admission control,
//! 4 job not ready.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::{Config, ConfigError};
use crate::launcher::{
    programs, rank_main, supervise, Collected, JobRecord, JobSpec, Launcher, LauncherError, Location,
};
use crate::pgas::TypedArrayPayload;
use crate::roi::{compute_roi, RoiError, RoiLedger};
use crate::sched::{classify_regime, compare_policies, read_workload, simulate, Discipline, SchedError, SimSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_HELD: i32 = 3;
pub const EXIT_NOT_READY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ihpc", version, about = "Interactive on-demand parallel jobs from the desktop")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Config file (default: $IHPC_CONFIG, then ./ihpc.toml).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Where {
    Local,
    Grid,
    Background,
}

impl From<Where> for Location {
    fn from(w: Where) -> Self {
        match w {
            Where::Local => Location::Local,
            Where::Grid => Location::Grid,
            Where::Background => Location::Background,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Ondemand,
    Batch,
}

impl From<PolicyArg> for Discipline {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Ondemand => Discipline::OnDemand,
            PolicyArg::Batch => Discipline::BatchFifo,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Launch a program on N cores.
    Launch {
        /// Registered program or path to an executable.
        program: String,
        #[arg(short = 'n', long = "ncores", default_value_t = 1)]
        ncores: u32,
        #[arg(long = "where", value_enum, default_value_t = Where::Local)]
        location: Where,
        /// Submitting user (default: $IHPC_USER, then $USER).
        #[arg(long)]
        user: Option<String>,
        /// Grid only: rank 0 is run by the calling client, which writes
        /// out/rank_0.exit when done. Returns as soon as ranks 1.. are running.
        #[arg(long)]
        rank0_external: bool,
        /// Arguments passed to every rank.
        #[arg(last = true)]
        args: Vec<String>,
    },
    /// Show a job's state and per-rank exits.
    Status { job: String },
    /// Wait for a job to finish.
    Wait {
        job: String,
        /// Give up after this many seconds (exit 4).
        #[arg(long)]
        timeout: Option<f64>,
    },
    /// List result files and logs of a finished job.
    Collect { job: String },
    /// Stop a running job.
    Abort { job: String },
    /// List all jobs.
    Jobs,
    /// Simulate a workload file under one scheduling discipline.
    Simulate {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyArg::Ondemand)]
        policy: PolicyArg,
        /// Write the event trace here ("-" for stdout).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Simulate a workload under both disciplines and report the differences.
    Compare {
        #[arg(long)]
        workload: PathBuf,
    },
    /// Compute return on investment from a JSON ledger.
    Roi {
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Classify a run time in seconds as Desktop, Interactive or Classic.
    Classify {
        #[arg(allow_negative_numbers = true)]
        seconds: f64,
    },
    #[command(hide = true)]
    Rank {
        program: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    #[command(hide = true)]
    Supervise { job_dir: PathBuf },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<LauncherError> for CliError {
    fn from(e: LauncherError) -> Self {
        let code = match &e {
            LauncherError::Capacity { .. } => EXIT_HELD,
            LauncherError::NotReady(_) => EXIT_NOT_READY,
            LauncherError::Argument(_) | LauncherError::Sched(SchedError::Argument(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        let mut message = e.to_string();
        if let LauncherError::Capacity { .. } = e {
            message.push_str("; ask an administrator for a temporary cap override");
        }
        CliError { code, message }
    }
}

impl From<SchedError> for CliError {
    fn from(e: SchedError) -> Self {
        CliError::runtime(e.to_string())
    }
}

impl From<RoiError> for CliError {
    fn from(e: RoiError) -> Self {
        CliError::runtime(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::runtime(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// Parses `argv`, runs the command and returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let json = cli.json;
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if json {
                let _ = writeln!(out, "{}", json!({ "error": e.message, "exit_code": e.code }));
            }
            let _ = writeln!(err, "ihpc: {}", e.message);
            e.code
        }
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> CliResult {
    serde_json::to_writer_pretty(&mut *out, value).map_err(|e| CliError::runtime(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult {
    // Worker-side entry points never read the config.
    match cli.command {
        Command::Rank { program, args } => {
            let code = rank_main(&program, &args);
            if code == 0 {
                return Ok(());
            }
            return Err(CliError {
                code,
                message: format!("rank program {program} exited with code {code}"),
            });
        }
        Command::Supervise { job_dir } => {
            let record = supervise(&job_dir)?;
            return if record.state == crate::launcher::JobState::Done {
                Ok(())
            } else {
                Err(CliError::runtime(format!("job {} {}", record.job_id, record.state)))
            };
        }
        _ => {}
    }

    let json = cli.json;
    let (config, _) = Config::discover(cli.config.as_deref())?;
    match cli.command {
        Command::Launch {
            program,
            ncores,
            location,
            user,
            rank0_external,
            args,
        } => {
            let launcher = Launcher::new(&config.root)?.with_policy(config.policy.clone());
            let mut spec = JobSpec::new(program, ncores, location.into()).with_args(args);
            if let Some(u) = user {
                spec = spec.with_user(u);
            }
            spec.rank0_external = rank0_external;
            let record = launcher.launch(&spec)?;
            if json {
                return emit(out, &record);
            }
            print_record(out, &record)?;
            if record.state.is_terminal() {
                let collected = launcher.collect(&record.job_id)?;
                print_collected(out, &collected)?;
            }
            if record.state == crate::launcher::JobState::Failed {
                return Err(CliError::runtime(format!(
                    "job {} failed: {}",
                    record.job_id,
                    record.message.unwrap_or_default()
                )));
            }
            Ok(())
        }
        Command::Status { job } => {
            let record = Launcher::new(&config.root)?.status(&job)?;
            if json {
                emit(out, &record)
            } else {
                print_record(out, &record)
            }
        }
        Command::Wait { job, timeout } => {
            let timeout = match timeout {
                Some(t) if t.is_finite() && t >= 0.0 => Some(Duration::from_secs_f64(t)),
                Some(t) => return Err(CliError { code: EXIT_USAGE, message: format!("bad timeout {t}") }),
                None => None,
            };
            let record = Launcher::new(&config.root)?.wait(&job, timeout)?;
            if json {
                emit(out, &record)
            } else {
                print_record(out, &record)
            }
        }
        Command::Collect { job } => {
            let collected = Launcher::new(&config.root)?.collect(&job)?;
            if json {
                emit(out, &collected)
            } else {
                print_collected(out, &collected)
            }
        }
        Command::Abort { job } => {
            let record = Launcher::new(&config.root)?.abort(&job)?;
            if json {
                emit(out, &record)
            } else {
                print_record(out, &record)
            }
        }
        Command::Jobs => {
            let records = Launcher::new(&config.root)?.list()?;
            if json {
                return emit(out, &records);
            }
            for r in &records {
                writeln!(out, "{}  {:<8} {:>4} {:<10} {}", r.job_id, r.state, r.spec.ncores, location_name(r), r.spec.program)?;
            }
            Ok(())
        }
        Command::Simulate { workload, policy, trace } => {
            let jobs = read_workload(&workload)?;
            let outcome = simulate(&config.policy, &jobs, policy.into())?;
            if let Some(path) = trace {
                if path == Path::new("-") {
                    outcome.write_trace(&mut *out)?;
                } else {
                    outcome.write_trace(BufWriter::new(File::create(&path)?))?;
                }
            }
            if json {
                emit(out, &outcome)
            } else {
                writeln!(out, "discipline: {}", outcome.discipline)?;
                print_summary(out, &outcome.summary)
            }
        }
        Command::Compare { workload } => {
            let jobs = read_workload(&workload)?;
            let cmp = compare_policies(&config.policy, &jobs)?;
            if json {
                return emit(out, &cmp);
            }
            let (a, b) = (&cmp.on_demand.summary, &cmp.batch.summary);
            writeln!(out, "{:<18} {:>14} {:>14} {:>14}", "metric", "ondemand", "batch", "delta")?;
            for (name, x, y, d) in [
                ("mean wait (s)", a.mean_wait, b.mean_wait, cmp.deltas.mean_wait),
                ("median wait (s)", a.median_wait, b.median_wait, cmp.deltas.median_wait),
                ("p95 wait (s)", a.p95_wait, b.p95_wait, cmp.deltas.p95_wait),
                ("mean utilization", a.mean_utilization, b.mean_utilization, cmp.deltas.mean_utilization),
            ] {
                writeln!(out, "{name:<18} {x:>14.4} {y:>14.4} {d:>+14.4}")?;
            }
            Ok(())
        }
        Command::Roi { ledger } => {
            let text = std::fs::read_to_string(&ledger).map_err(|e| match e.kind() {
                io::ErrorKind::NotFound => CliError::runtime(format!("ledger {} not found", ledger.display())),
                _ => CliError::runtime(format!("cannot read ledger {}: {e}", ledger.display())),
            })?;
            let mut value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::runtime(format!("malformed ledger JSON: {e}")))?;
            if let Some(obj) = value.as_object_mut() {
                obj.entry("efficiency").or_insert(json!(config.roi.efficiency));
                if let Some(rate) = config.roi.staff_rate {
                    obj.entry("staff_rate").or_insert(json!(rate));
                }
            }
            let ledger: RoiLedger =
                serde_json::from_value(value).map_err(|e| CliError::runtime(format!("malformed ledger: {e}")))?;
            let report = compute_roi(&ledger)?;
            if json {
                emit(out, &report)
            } else {
                write!(out, "{}", report.table())?;
                Ok(())
            }
        }
        Command::Classify { seconds } => {
            let regime = classify_regime(seconds).map_err(|e| CliError {
                code: EXIT_USAGE,
                message: e.to_string(),
            })?;
            if json {
                emit(out, &json!({ "seconds": seconds, "regime": regime }))
            } else {
                writeln!(out, "{regime}")?;
                Ok(())
            }
        }
        Command::Rank { .. } | Command::Supervise { .. } => unreachable!("handled above"),
    }
}

fn location_name(r: &JobRecord) -> &'static str {
    match r.spec.location {
        Location::Local => "local",
        Location::Grid => "grid",
        Location::Background => "background",
    }
}

fn print_record(out: &mut dyn Write, r: &JobRecord) -> CliResult {
    writeln!(out, "job {}", r.job_id)?;
    writeln!(
        out,
        "  {} on {} cores ({}), user {}: {}",
        r.spec.program,
        r.spec.ncores,
        location_name(r),
        r.spec.user,
        r.state
    )?;
    writeln!(out, "  dir {}", r.job_dir.display())?;
    for s in &r.ranks {
        let exit = match s.exit {
            Some(e) => match (e.code, e.signal) {
                (Some(c), _) => format!("exit {c}"),
                (None, Some(sig)) => format!("signal {sig}"),
                _ => "exited".into(),
            },
            None => "-".into(),
        };
        let place = if s.in_process {
            " (in-process)"
        } else if s.external {
            " (external)"
        } else {
            ""
        };
        let pid = s.pid.map_or("-".to_string(), |p| p.to_string());
        writeln!(out, "  rank {:>3} pid {pid:>7} {exit}{place}", s.rank)?;
    }
    if let Some(m) = &r.message {
        writeln!(out, "  note: {m}")?;
    }
    Ok(())
}

fn print_collected(out: &mut dyn Write, c: &Collected) -> CliResult {
    for f in &c.results {
        writeln!(out, "result {} ({} bytes)", f.path.display(), f.bytes)?;
        if f.name == programs::BLUR_RESULT {
            if let Some(summary) = std::fs::read(&f.path).ok().and_then(|b| array_summary(&b)) {
                writeln!(out, "  {summary}")?;
            }
        }
    }
    for l in &c.logs {
        writeln!(out, "log {}", l.display())?;
    }
    Ok(())
}

/// One-line shape and min/mean/max of an encoded typed array.
pub fn array_summary(bytes: &[u8]) -> Option<String> {
    let p = TypedArrayPayload::decode(bytes).ok()?;
    let values: Vec<f64> = match p.dtype {
        crate::pgas::Dtype::U8 => p.values::<u8>().ok()?.into_iter().map(f64::from).collect(),
        crate::pgas::Dtype::I64 => p.values::<i64>().ok()?.into_iter().map(|v| v as f64).collect(),
        crate::pgas::Dtype::F64 => p.values::<f64>().ok()?,
    };
    let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
    if values.is_empty() {
        return Some(format!("{} array, empty", shape.join("x")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Some(format!("{} array: min {min}, mean {mean:.3}, max {max}", shape.join("x")))
}

fn print_summary(out: &mut dyn Write, s: &SimSummary) -> CliResult {
    writeln!(out, "jobs: {} ({} started)", s.jobs, s.started)?;
    writeln!(
        out,
        "wait (s): mean {:.4}, median {:.4}, p95 {:.4}, max {:.4}",
        s.mean_wait, s.median_wait, s.p95_wait, s.max_wait
    )?;
    writeln!(
        out,
        "utilization: mean {:.4}, peak {:.4}; fewest free cores {}",
        s.mean_utilization, s.peak_utilization, s.min_free_cores
    )?;
    writeln!(
        out,
        "regimes: desktop {}, interactive {}, classic {}",
        s.regimes.desktop, s.regimes.interactive, s.regimes.classic
    )?;
    Ok(())
}
