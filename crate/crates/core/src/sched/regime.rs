use serde::{Deserialize, Serialize};

use super::{Result, SchedError};

/// Upper bound (exclusive) of the desktop regime, in seconds.
pub const DESKTOP_LIMIT_S: f64 = 300.0;
/// Upper bound (inclusive) of the interactive regime, in seconds.
pub const INTERACTIVE_LIMIT_S: f64 = 10_800.0;

/// Computing regime of a job by run time.
///
/// Desktop `[0, 300)`, Interactive `[300, 10800]`, Classic `(10800, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Desktop,
    Interactive,
    Classic,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Desktop => "Desktop",
            Regime::Interactive => "Interactive",
            Regime::Classic => "Classic",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn classify_regime(runtime_s: f64) -> Result<Regime> {
    if runtime_s.is_nan() || runtime_s < 0.0 {
        return Err(SchedError::Argument(format!(
            "runtime must be a non-negative number of seconds, got {runtime_s}"
        )));
    }
    Ok(if runtime_s < DESKTOP_LIMIT_S {
        Regime::Desktop
    } else if runtime_s <= INTERACTIVE_LIMIT_S {
        Regime::Interactive
    } else {
        Regime::Classic
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeHistogram {
    pub desktop: usize,
    pub interactive: usize,
    pub classic: usize,
}

impl RegimeHistogram {
    pub fn add(&mut self, regime: Regime) {
        match regime {
            Regime::Desktop => self.desktop += 1,
            Regime::Interactive => self.interactive += 1,
            Regime::Classic => self.classic += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.desktop + self.interactive + self.classic
    }
}
