//! Return on investment of an HPC service: hours saved by running in parallel,
//! over the cost of parallelizing codes, training, launching, administration
//! and the system itself. Staff time is priced with a single `staff_rate`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sched::{LatencyModel, SimOutcome};

pub const DEFAULT_EFFICIENCY: f64 = 0.7;

#[derive(Debug, Error)]
pub enum RoiError {
    #[error("invalid ledger: {0}")]
    Argument(String),
    #[error("cannot read ledger {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed ledger JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RoiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenefitEntry {
    pub user: String,
    /// Measured single-process time. Estimated from `cores` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serial_time_hours: Option<f64>,
    /// Wall time of the parallel run including queue wait and launch.
    pub parallel_wall_hours: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cores: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSetCost {
    pub code_set: String,
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCost {
    pub user: String,
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiLedger {
    /// Currency per staff hour.
    pub staff_rate: f64,
    /// Parallel efficiency used when a serial baseline must be estimated.
    #[serde(default = "default_efficiency")]
    pub efficiency: f64,
    #[serde(default)]
    pub benefits: Vec<BenefitEntry>,
    #[serde(default)]
    pub parallelize_hours: Vec<CodeSetCost>,
    #[serde(default)]
    pub training_hours: Vec<TrainingCost>,
    #[serde(default)]
    pub launch_overhead_hours: f64,
    #[serde(default)]
    pub admin_hours: f64,
    #[serde(default)]
    pub system_cost_currency: f64,
}

fn default_efficiency() -> f64 {
    DEFAULT_EFFICIENCY
}

impl RoiLedger {
    pub fn new(staff_rate: f64) -> Self {
        RoiLedger {
            staff_rate,
            efficiency: DEFAULT_EFFICIENCY,
            benefits: Vec::new(),
            parallelize_hours: Vec::new(),
            training_hours: Vec::new(),
            launch_overhead_hours: 0.0,
            admin_hours: 0.0,
            system_cost_currency: 0.0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| RoiError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RoiError::Argument(msg));
        if !(self.staff_rate.is_finite() && self.staff_rate > 0.0) {
            return bad(format!("staff_rate {} must be positive", self.staff_rate));
        }
        check_efficiency(self.efficiency)?;
        let hours = |what: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(RoiError::Argument(format!("{what} = {v} must be a non-negative number")))
            }
        };
        for b in &self.benefits {
            hours(&format!("parallel_wall_hours of {}", b.user), b.parallel_wall_hours)?;
            match (b.serial_time_hours, b.cores) {
                (Some(s), _) => hours(&format!("serial_time_hours of {}", b.user), s)?,
                (None, Some(c)) if c >= 1 => {}
                _ => return bad(format!("benefit for {} needs serial_time_hours or cores >= 1", b.user)),
            }
        }
        for c in &self.parallelize_hours {
            hours(&format!("parallelize hours of {}", c.code_set), c.hours)?;
        }
        for t in &self.training_hours {
            hours(&format!("training hours of {}", t.user), t.hours)?;
        }
        hours("launch_overhead_hours", self.launch_overhead_hours)?;
        hours("admin_hours", self.admin_hours)?;
        hours("system_cost_currency", self.system_cost_currency)?;
        Ok(())
    }
}

fn check_efficiency(e: f64) -> Result<()> {
    if e > 0.0 && e <= 1.0 {
        Ok(())
    } else {
        Err(RoiError::Argument(format!("efficiency {e} must lie in (0, 1]")))
    }
}

/// `e * cores * parallel_wall_hours`.
pub fn estimate_serial_time(parallel_wall_hours: f64, cores: u32, efficiency: f64) -> Result<f64> {
    check_efficiency(efficiency)?;
    if cores == 0 {
        return Err(RoiError::Argument("cores must be at least 1".into()));
    }
    Ok(efficiency * cores as f64 * parallel_wall_hours)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostItem {
    pub hours: f64,
    pub currency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub parallelize: CostItem,
    pub training: CostItem,
    pub launch: CostItem,
    pub admin: CostItem,
    pub system: CostItem,
}

impl CostBreakdown {
    fn items(&self) -> [(&'static str, CostItem); 5] {
        [
            ("parallelize", self.parallelize),
            ("training", self.training),
            ("launch", self.launch),
            ("admin", self.admin),
            ("system", self.system),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiReport {
    pub roi: f64,
    pub benefit_hours: f64,
    pub benefit_currency: f64,
    pub cost_currency: f64,
    pub breakdown: CostBreakdown,
    pub jobs: usize,
    pub jobs_with_savings: usize,
}

impl RoiReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<12} {:>14} {:>16}", "item", "hours", "currency").unwrap();
        writeln!(
            s,
            "{:<12} {:>14.2} {:>16.2}",
            "benefit", self.benefit_hours, self.benefit_currency
        )
        .unwrap();
        for (name, item) in self.breakdown.items() {
            writeln!(s, "{:<12} {:>14.2} {:>16.2}", name, item.hours, item.currency).unwrap();
        }
        writeln!(s, "{:<12} {:>14} {:>16.2}", "total cost", "", self.cost_currency).unwrap();
        writeln!(s, "roi = {:.4}", self.roi).unwrap();
        s
    }
}

pub fn compute_roi(ledger: &RoiLedger) -> Result<RoiReport> {
    ledger.validate()?;
    let rate = ledger.staff_rate;

    let mut benefit_hours = 0.0;
    let mut jobs_with_savings = 0;
    for b in &ledger.benefits {
        let serial = match b.serial_time_hours {
            Some(s) => s,
            None => estimate_serial_time(b.parallel_wall_hours, b.cores.unwrap_or(0), ledger.efficiency)?,
        };
        let saved = serial - b.parallel_wall_hours;
        if saved > 0.0 {
            benefit_hours += saved;
            jobs_with_savings += 1;
        }
    }

    let staff = |hours: f64| CostItem {
        hours,
        currency: hours * rate,
    };
    let breakdown = CostBreakdown {
        parallelize: staff(ledger.parallelize_hours.iter().fold(0.0, |s, c| s + c.hours)),
        training: staff(ledger.training_hours.iter().fold(0.0, |s, t| s + t.hours)),
        launch: staff(ledger.launch_overhead_hours),
        admin: staff(ledger.admin_hours),
        system: CostItem {
            hours: 0.0,
            currency: ledger.system_cost_currency,
        },
    };
    let cost_currency: f64 = breakdown.items().iter().map(|(_, i)| i.currency).sum();
    if !(cost_currency > 0.0) {
        return Err(RoiError::Argument(
            "total cost is zero; ROI needs at least one positive cost".into(),
        ));
    }
    let benefit_currency = benefit_hours * rate;
    Ok(RoiReport {
        roi: benefit_currency / cost_currency,
        benefit_hours,
        benefit_currency,
        cost_currency,
        breakdown,
        jobs: ledger.benefits.len(),
        jobs_with_savings,
    })
}

/// Adds one benefit entry per started job of a simulation and charges its
/// launch latency to the launch overhead. Unstarted jobs are skipped.
pub fn ingest_sim(outcome: &SimOutcome, ledger: &mut RoiLedger) -> Result<()> {
    check_efficiency(ledger.efficiency)?;
    for job in &outcome.jobs {
        let Some(wait) = job.wait_time else { continue };
        let wall_s = wait + job.launch_latency + job.service_time;
        ledger.benefits.push(BenefitEntry {
            user: job.user.clone(),
            serial_time_hours: Some(estimate_serial_time(
                job.service_time / 3600.0,
                job.cores,
                ledger.efficiency,
            )?),
            parallel_wall_hours: wall_s / 3600.0,
            cores: Some(job.cores),
        });
        ledger.launch_overhead_hours += job.launch_latency / 3600.0;
    }
    Ok(())
}

/// Parameters of the synthetic laboratory-scale ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabFixture {
    pub users: usize,
    pub jobs_per_user: usize,
    pub staff_rate: f64,
    pub efficiency: f64,
    pub wall_hours: (f64, f64),
    pub cores: (u32, u32),
    pub training_hours_per_user: f64,
    pub code_sets: usize,
    pub hours_per_code_set: f64,
    pub admin_hours: f64,
    pub system_cost: f64,
}

impl Default for LabFixture {
    fn default() -> Self {
        LabFixture {
            users: 500,
            jobs_per_user: 10,
            staff_rate: 100.0,
            efficiency: DEFAULT_EFFICIENCY,
            wall_hours: (0.25, 2.0),
            cores: (16, 64),
            training_hours_per_user: 8.0,
            code_sets: 150,
            hours_per_code_set: 80.0,
            admin_hours: 4000.0,
            system_cost: 2_000_000.0,
        }
    }
}

impl LabFixture {
    /// Benefits carry `cores` but no measured serial time, so the estimator
    /// supplies the baseline. Launch overhead uses `latency` per job.
    pub fn build(&self, seed: u64, latency: LatencyModel) -> RoiLedger {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ledger = RoiLedger::new(self.staff_rate);
        ledger.efficiency = self.efficiency;
        for u in 0..self.users {
            let user = format!("user{u:04}");
            for _ in 0..self.jobs_per_user {
                let cores = rng.gen_range(self.cores.0..=self.cores.1);
                let wall = rng.gen_range(self.wall_hours.0..=self.wall_hours.1);
                ledger.benefits.push(BenefitEntry {
                    user: user.clone(),
                    serial_time_hours: None,
                    parallel_wall_hours: wall,
                    cores: Some(cores),
                });
                ledger.launch_overhead_hours += (latency.a + latency.b * cores as f64) / 3600.0;
            }
            ledger.training_hours.push(TrainingCost {
                user,
                hours: self.training_hours_per_user,
            });
        }
        ledger.parallelize_hours = (0..self.code_sets)
            .map(|i| CodeSetCost {
                code_set: format!("code{i:03}"),
                hours: self.hours_per_code_set,
            })
            .collect();
        ledger.admin_hours = self.admin_hours;
        ledger.system_cost_currency = self.system_cost;
        ledger
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger_with(benefit: f64, cost_hours: f64) -> RoiLedger {
        let mut l = RoiLedger::new(1.0);
        l.benefits.push(BenefitEntry {
            user: "a".into(),
            serial_time_hours: Some(benefit + 10.0),
            parallel_wall_hours: 10.0,
            cores: None,
        });
        l.admin_hours = cost_hours;
        l
    }

    #[test]
    fn estimator_examples() {
        assert_eq!(estimate_serial_time(10.0, 16, 1.0).unwrap(), 160.0);
        assert_eq!(estimate_serial_time(10.0, 1, 1.0).unwrap(), 10.0);
        assert_eq!(estimate_serial_time(2.0, 32, 0.5).unwrap(), 32.0);
        assert!(estimate_serial_time(1.0, 4, 0.0).is_err());
        assert!(estimate_serial_time(1.0, 4, 1.5).is_err());
    }

    #[test]
    fn ratio_of_ninety_over_thirty() {
        let r = compute_roi(&ledger_with(90.0, 30.0)).unwrap();
        assert!((r.roi - 3.0).abs() < 1e-12);
        assert_eq!(r.breakdown.admin.currency, 30.0);
    }

    #[test]
    fn negative_savings_floor_at_zero() {
        let mut l = ledger_with(0.0, 5.0);
        l.benefits[0].serial_time_hours = Some(1.0);
        let r = compute_roi(&l).unwrap();
        assert_eq!(r.roi, 0.0);
        assert_eq!(r.jobs_with_savings, 0);
    }

    #[test]
    fn zero_cost_is_an_error() {
        assert!(matches!(compute_roi(&ledger_with(5.0, 0.0)), Err(RoiError::Argument(_))));
    }

    #[test]
    fn bad_ledgers_rejected() {
        let mut l = ledger_with(5.0, 1.0);
        l.staff_rate = 0.0;
        assert!(compute_roi(&l).is_err());
        let mut l = ledger_with(5.0, 1.0);
        l.benefits[0].serial_time_hours = None;
        assert!(compute_roi(&l).is_err());
        let mut l = ledger_with(5.0, 1.0);
        l.admin_hours = -1.0;
        assert!(compute_roi(&l).is_err());
    }

    #[test]
    fn json_field_names() {
        let text = r#"{
            "staff_rate": 50,
            "benefits": [{"user": "a", "parallel_wall_hours": 1, "cores": 8}],
            "parallelize_hours": [{"code_set": "x", "hours": 2}],
            "training_hours": [{"user": "a", "hours": 1}],
            "launch_overhead_hours": 0.5,
            "admin_hours": 1.5,
            "system_cost_currency": 100
        }"#;
        let l: RoiLedger = serde_json::from_str(text).unwrap();
        assert_eq!(l.efficiency, DEFAULT_EFFICIENCY);
        let r = compute_roi(&l).unwrap();
        // 0.7*8*1 - 1 = 4.6 h saved; costs 5 h * 50 + 100
        assert!((r.roi - 4.6 * 50.0 / 350.0).abs() < 1e-12);
        let back: RoiLedger = serde_json::from_str(&l.to_json()).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn table_lists_all_categories() {
        let t = compute_roi(&ledger_with(90.0, 30.0)).unwrap().table();
        for item in ["benefit", "parallelize", "training", "launch", "admin", "system", "roi ="] {
            assert!(t.contains(item), "{item}");
        }
    }
}
