use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower bound for generated sensitivities.
pub const DEFAULT_FLOOR: f64 = 1e-4;

/// How a layer's sensitivity values were generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `s_i = max(1 - (i-1)/n, floor)`.
    Linear,
    /// `s_i = max((1 - (i-1)/n)^2, floor)`; mean is about 1/3 for large `n`.
    Quadratic,
    /// 1 up to `ceil(n/4)`, `floor` beyond `ceil(3n/4)`, linear in between.
    ClampedRamp,
    /// Every node at 1: an ordinary (symmetric) layer.
    Flat,
    /// Caller-supplied values.
    Explicit,
}

impl Schedule {
    pub(crate) fn code(self) -> u8 {
        match self {
            Schedule::Linear => 0,
            Schedule::Quadratic => 1,
            Schedule::ClampedRamp => 2,
            Schedule::Flat => 3,
            Schedule::Explicit => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Schedule::Linear,
            1 => Schedule::Quadratic,
            2 => Schedule::ClampedRamp,
            3 => Schedule::Flat,
            4 => Schedule::Explicit,
            _ => return None,
        })
    }
}

/// Per-node sensitivities of one layer, `1 >= s_1 >= s_2 >= ... >= s_n > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile {
    values: Vec<f64>,
    schedule: Schedule,
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Profile("profile is empty".into()));
    }
    for (i, &v) in values.iter().enumerate() {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Profile(format!("s[{i}] = {v} is outside (0, 1]")));
        }
        if i > 0 && v > values[i - 1] {
            return Err(Error::Profile(format!(
                "s[{i}] = {v} exceeds s[{}] = {}",
                i - 1,
                values[i - 1]
            )));
        }
    }
    Ok(())
}

impl SensitivityProfile {
    pub fn make(schedule: Schedule, n: usize, floor: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Profile("node count must be at least 1".into()));
        }
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::Profile(format!("floor {floor} is outside (0, 1)")));
        }
        let nf = n as f64;
        let values: Vec<f64> = match schedule {
            Schedule::Linear => (0..n).map(|i| (1.0 - i as f64 / nf).max(floor)).collect(),
            Schedule::Quadratic => (0..n)
                .map(|i| {
                    let r = 1.0 - i as f64 / nf;
                    (r * r).max(floor)
                })
                .collect(),
            Schedule::ClampedRamp => {
                let head = n.div_ceil(4);
                let tail = (3 * n).div_ceil(4);
                (1..=n)
                    .map(|i| {
                        if i <= head {
                            1.0
                        } else if i > tail {
                            floor
                        } else {
                            let t = (i - head) as f64 / (tail + 1 - head) as f64;
                            1.0 - (1.0 - floor) * t
                        }
                    })
                    .collect()
            }
            Schedule::Flat => vec![1.0; n],
            Schedule::Explicit => {
                return Err(Error::Profile(
                    "explicit profiles are built with SensitivityProfile::explicit".into(),
                ))
            }
        };
        check_values(&values)?;
        Ok(SensitivityProfile { values, schedule })
    }

    pub fn explicit(values: Vec<f64>) -> Result<Self> {
        check_values(&values)?;
        Ok(SensitivityProfile {
            values,
            schedule: Schedule::Explicit,
        })
    }

    pub fn flat(n: usize) -> Self {
        SensitivityProfile {
            values: vec![1.0; n],
            schedule: Schedule::Flat,
        }
    }

    pub(crate) fn from_parts(values: Vec<f64>, schedule: Schedule) -> Result<Self> {
        check_values(&values)?;
        Ok(SensitivityProfile { values, schedule })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// True when every node has sensitivity exactly 1.
    pub fn is_flat(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }

    /// Drops node `i`; the remaining values keep their order.
    pub(crate) fn remove(&mut self, i: usize) {
        self.values.remove(i);
    }
}

/// Convenience wrapper matching the free-function style used elsewhere.
pub fn make_profile(schedule: Schedule, n: usize, floor: f64) -> Result<SensitivityProfile> {
    SensitivityProfile::make(schedule, n, floor)
}
