use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sampling temperature over training steps. Text form: `constant:T` or
/// `linear:START:END:STEPS`. A constant of `0` means hard (argmax) labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TauSchedule {
    Constant(f64),
    /// `start` at step 0, linearly down to `end` at step `steps`, then held.
    Linear { start: f64, end: f64, steps: u64 },
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TauSchedule::Constant(t) if !(t >= 0.0) || !t.is_finite() => {
                Err(Error::invalid("temperature must be finite and >= 0"))
            }
            TauSchedule::Linear { start, end, .. } if !(start >= end && end >= 0.0) || !start.is_finite() => {
                Err(Error::invalid("linear temperature needs start >= end >= 0"))
            }
            _ => Ok(()),
        }
    }
}

/// `max(end, start - (start - end) * k / steps)`, or the constant.
pub fn temperature(step: u64, schedule: &TauSchedule) -> f64 {
    match *schedule {
        TauSchedule::Constant(t) => t,
        TauSchedule::Linear { start, end, steps } => {
            if steps == 0 || step >= steps {
                return end;
            }
            (start - (start - end) * (step as f64 / steps as f64)).max(end)
        }
    }
}

impl fmt::Display for TauSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TauSchedule::Constant(t) => write!(f, "constant:{t}"),
            TauSchedule::Linear { start, end, steps } => write!(f, "linear:{start}:{end}:{steps}"),
        }
    }
}

impl FromStr for TauSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| -> Result<f64> { x.parse().map_err(|_| Error::invalid(format!("bad temperature `{x}`"))) };
        let schedule = match parts.as_slice() {
            ["constant", t] => TauSchedule::Constant(num(t)?),
            ["linear", a, b, k] => TauSchedule::Linear {
                start: num(a)?,
                end: num(b)?,
                steps: k.parse().map_err(|_| Error::invalid(format!("bad step count `{k}`")))?,
            },
            _ => return Err(Error::invalid(format!("cannot parse temperature schedule `{s}`"))),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

impl TryFrom<String> for TauSchedule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TauSchedule> for String {
    fn from(t: TauSchedule) -> String {
        t.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints() {
        let s = TauSchedule::Linear { start: 1.0, end: 0.1, steps: 1000 };
        assert_eq!(temperature(0, &s), 1.0);
        assert_eq!(temperature(1000, &s), 0.1);
        assert_eq!(temperature(5000, &s), 0.1);
        // 1 - 0.9 * 0.5
        assert!((temperature(500, &s) - 0.55).abs() < 1e-15);
        assert_eq!(temperature(7, &TauSchedule::Constant(0.3)), 0.3);
    }

    #[test]
    fn non_increasing() {
        let s = TauSchedule::Linear { start: 1.0, end: 0.1, steps: 333 };
        let mut prev = f64::INFINITY;
        for k in 0..1000 {
            let t = temperature(k, &s);
            assert!(t <= prev && t >= 0.1);
            prev = t;
        }
    }

    #[test]
    fn text_form() {
        assert_eq!("linear:1:0.1:3000".parse::<TauSchedule>().unwrap(), TauSchedule::Linear { start: 1.0, end: 0.1, steps: 3000 });
        assert_eq!(TauSchedule::Constant(0.0).to_string(), "constant:0");
        assert!("linear:0.1:1:5".parse::<TauSchedule>().is_err());
        assert!("constant:-1".parse::<TauSchedule>().is_err());
    }
}
