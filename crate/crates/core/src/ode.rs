//! Fixed-step explicit integrators.
//!
//! The stepping schemes are written once against [`OdeSystem`], which
//! supplies the vector field and an `y + h·k` update. Plain slices and tape
//! variables both implement it, so the recorded computation on the tape is
//! the same arithmetic the value-level solver performs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::InvalidConfig(format!("unknown solver method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Largest step, in the time units of the system.
    pub h_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            h_max: 0.25,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_max > 0.0) || !self.h_max.is_finite() {
            return Err(Error::InvalidConfig(format!("h_max must be > 0, got {}", self.h_max)));
        }
        Ok(())
    }

    /// `max(1, ceil((t1 - t0) / h_max))`.
    pub fn steps(&self, t0: f64, t1: f64) -> usize {
        (((t1 - t0) / self.h_max).ceil() as usize).max(1)
    }
}

pub trait OdeSystem<T> {
    type State: Clone;

    fn field(&mut self, t: T, y: &Self::State) -> Result<Self::State>;

    /// `y + h·k`.
    fn axpy(&mut self, y: &Self::State, h: T, k: &Self::State) -> Result<Self::State>;
}

pub fn euler_step<T: Scalar, S: OdeSystem<T>>(
    sys: &mut S,
    t: T,
    y: &S::State,
    h: T,
) -> Result<S::State> {
    let k = sys.field(t, y)?;
    sys.axpy(y, h, &k)
}

pub fn rk4_step<T: Scalar, S: OdeSystem<T>>(
    sys: &mut S,
    t: T,
    y: &S::State,
    h: T,
) -> Result<S::State> {
    let half = h * T::lit(0.5);
    let k1 = sys.field(t, y)?;
    let y2 = sys.axpy(y, half, &k1)?;
    let k2 = sys.field(t + half, &y2)?;
    let y3 = sys.axpy(y, half, &k2)?;
    let k3 = sys.field(t + half, &y3)?;
    let y4 = sys.axpy(y, h, &k3)?;
    let k4 = sys.field(t + h, &y4)?;
    let sixth = h / T::lit(6.0);
    let third = h / T::lit(3.0);
    let acc = sys.axpy(y, sixth, &k1)?;
    let acc = sys.axpy(&acc, third, &k2)?;
    let acc = sys.axpy(&acc, third, &k3)?;
    sys.axpy(&acc, sixth, &k4)
}

/// Integrates from `t0` to `t1` with `cfg.steps(t0, t1)` equal steps.
/// Returns `y0` untouched when `t1 == t0`.
pub fn integrate<T: Scalar, S: OdeSystem<T>>(
    sys: &mut S,
    cfg: &SolverConfig,
    t0: T,
    t1: T,
    y0: &S::State,
) -> Result<S::State> {
    if t1 < t0 {
        return Err(Error::TimeReversed {
            from: t0.as_f64(),
            to: t1.as_f64(),
        });
    }
    if t1 == t0 {
        return Ok(y0.clone());
    }
    cfg.validate()?;
    let n = cfg.steps(t0.as_f64(), t1.as_f64());
    integrate_steps(sys, cfg.method, t0, t1, n, y0)
}

pub fn integrate_steps<T: Scalar, S: OdeSystem<T>>(
    sys: &mut S,
    method: Method,
    t0: T,
    t1: T,
    n: usize,
    y0: &S::State,
) -> Result<S::State> {
    let h = (t1 - t0) / T::lit(n as f64);
    let mut y = y0.clone();
    for i in 0..n {
        let t = t0 + h * T::lit(i as f64);
        y = match method {
            Method::Euler => euler_step(sys, t, &y, h)?,
            Method::Rk4 => rk4_step(sys, t, &y, h)?,
        };
    }
    Ok(y)
}

/// Adapter turning a closure over slices into an [`OdeSystem`].
pub struct FnSystem<F> {
    pub f: F,
}

impl<T: Scalar, F: FnMut(T, &[T]) -> Vec<T>> OdeSystem<T> for FnSystem<F> {
    type State = Vec<T>;

    fn field(&mut self, t: T, y: &Vec<T>) -> Result<Vec<T>> {
        Ok((self.f)(t, y))
    }

    fn axpy(&mut self, y: &Vec<T>, h: T, k: &Vec<T>) -> Result<Vec<T>> {
        Ok(y.iter().zip(k).map(|(&a, &b)| a + h * b).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_integrates_exactly() {
        let cfg = SolverConfig {
            method: Method::Rk4,
            h_max: 0.1,
        };
        let mut sys = FnSystem { f: |_t: f64, y: &[f64]| vec![2.5; y.len()] };
        let y = integrate(&mut sys, &cfg, 0.0, 1.0, &vec![1.0, -1.0]).unwrap();
        assert!((y[0] - 3.5).abs() < 1e-13 && (y[1] - 1.5).abs() < 1e-13);
    }

    #[test]
    fn zero_interval_returns_input() {
        let cfg = SolverConfig::default();
        let mut sys = FnSystem { f: |_t: f64, y: &[f64]| y.to_vec() };
        let y0 = vec![0.1, 0.2];
        assert_eq!(integrate(&mut sys, &cfg, 3.0, 3.0, &y0).unwrap(), y0);
        assert!(integrate(&mut sys, &cfg, 3.0, 2.0, &y0).is_err());
    }

    #[test]
    fn step_count_rule() {
        let cfg = SolverConfig::default();
        assert_eq!(cfg.steps(0.0, 0.1), 1);
        assert_eq!(cfg.steps(0.0, 0.5), 2);
        assert_eq!(cfg.steps(0.0, 0.51), 3);
    }
}
