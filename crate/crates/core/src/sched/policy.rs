use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Result, SchedError};

/// Exact rational in `(0, 1]`, written as `"num/den"` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(SchedError::Argument(format!(
                "cap fraction {num}/{den} must lie in (0, 1]"
            )));
        }
        Ok(Fraction { num, den })
    }

    pub fn numerator(self) -> u64 {
        self.num
    }

    pub fn denominator(self) -> u64 {
        self.den
    }

    /// `floor(value * self)`.
    pub fn floor_of(self, value: u64) -> u64 {
        ((value as u128 * self.num as u128) / self.den as u128) as u64
    }
}

impl Default for Fraction {
    fn default() -> Self {
        Fraction { num: 1, den: 8 }
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = SchedError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || SchedError::Argument(format!("cannot parse fraction {s:?}; expected e.g. \"1/8\""));
        let (n, d) = s.trim().split_once('/').ok_or_else(bad)?;
        let num = n.trim().parse().map_err(|_| bad())?;
        let den = d.trim().parse().map_err(|_| bad())?;
        Fraction::new(num, den)
    }
}

impl TryFrom<String> for Fraction {
    type Error = SchedError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        f.to_string()
    }
}

/// Temporary per-user cap. Active for `t < expiry`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapOverride {
    pub user: String,
    pub cap_cores: u32,
    /// Seconds on the same clock as the `now` passed to admission
    /// (Unix time for real launches, simulation time in the simulator).
    pub expiry: f64,
}

/// Affine launch-latency model: `a + b * ranks` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub a: f64,
    pub b: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { a: 5.0, b: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub total_cores: u32,
    pub cap_fraction: Fraction,
    pub overrides: Vec<CapOverride>,
    pub launch_latency_model: LatencyModel,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            total_cores: 128,
            cap_fraction: Fraction::default(),
            overrides: Vec::new(),
            launch_latency_model: LatencyModel::default(),
        }
    }
}

impl PolicyConfig {
    pub fn new(total_cores: u32) -> Result<Self> {
        let policy = PolicyConfig {
            total_cores,
            ..PolicyConfig::default()
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_cores == 0 {
            return Err(SchedError::Argument("total_cores must be positive".into()));
        }
        Fraction::new(self.cap_fraction.num, self.cap_fraction.den)?;
        for o in &self.overrides {
            if o.cap_cores == 0 || o.cap_cores > self.total_cores {
                return Err(SchedError::Argument(format!(
                    "override for {} is {} cores; must be in 1..={}",
                    o.user, o.cap_cores, self.total_cores
                )));
            }
            if !o.expiry.is_finite() {
                return Err(SchedError::Argument(format!("override for {} has no finite expiry", o.user)));
            }
        }
        let m = self.launch_latency_model;
        if !(m.a.is_finite() && m.b.is_finite() && m.a >= 0.0 && m.b >= 0.0) {
            return Err(SchedError::Argument(format!(
                "launch latency coefficients must be finite and non-negative, got a={} b={}",
                m.a, m.b
            )));
        }
        Ok(())
    }

    /// `max(1, floor(total_cores * cap_fraction))`.
    pub fn default_user_cap(&self) -> u32 {
        (self.cap_fraction.floor_of(self.total_cores as u64) as u32).max(1)
    }

    pub fn override_for(&self, user: &str) -> Option<&CapOverride> {
        self.overrides.iter().find(|o| o.user == user)
    }

    pub fn effective_cap(&self, user: &str, now: f64) -> u32 {
        match self.override_for(user) {
            Some(o) if now < o.expiry => o.cap_cores,
            _ => self.default_user_cap(),
        }
    }

    /// Grants `user` a cap of `cap_cores` until `expiry`, replacing any earlier override.
    pub fn set_override(&mut self, user: &str, cap_cores: u32, expiry: f64, now: f64) -> Result<()> {
        if !(expiry > now) {
            return Err(SchedError::Argument(format!(
                "override expiry {expiry} is not after now ({now})"
            )));
        }
        if cap_cores == 0 || cap_cores > self.total_cores {
            return Err(SchedError::Argument(format!(
                "override cap {cap_cores} must be in 1..={}",
                self.total_cores
            )));
        }
        self.overrides.retain(|o| o.user != user);
        self.overrides.push(CapOverride {
            user: user.to_string(),
            cap_cores,
            expiry,
        });
        Ok(())
    }

    /// Seconds from submission until all `ranks` are executing.
    pub fn launch_latency(&self, ranks: u32) -> f64 {
        let m = self.launch_latency_model;
        m.a + m.b * ranks as f64
    }
}
