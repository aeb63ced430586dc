use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calendar times `t_0 < ... < t_N` together with the clock `Q`.
///
/// `Q` plays the role of the nondecreasing process in the bracket
/// factorization `<M>_t = int m m* dQ`. It is deterministic here, and every
/// increment is strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct TimeGrid {
    times: Vec<f64>,
    clock: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    times: Vec<f64>,
    clock: Vec<f64>,
}

impl TryFrom<RawGrid> for TimeGrid {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        TimeGrid::new(raw.times, raw.clock)
    }
}

impl From<TimeGrid> for RawGrid {
    fn from(g: TimeGrid) -> Self {
        RawGrid {
            times: g.times,
            clock: g.clock,
        }
    }
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, clock: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid("need at least two grid points".into()));
        }
        if times.len() != clock.len() {
            return Err(Error::InvalidGrid(format!(
                "{} times but {} clock values",
                times.len(),
                clock.len()
            )));
        }
        if times.iter().chain(&clock).any(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid("non-finite grid value".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("t_0 = {} (must be 0)", times[0])));
        }
        if clock[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("Q_0 = {} (must be 0)", clock[0])));
        }
        for k in 0..times.len() - 1 {
            if times[k + 1] <= times[k] {
                return Err(Error::InvalidGrid(format!("times not increasing at index {}", k + 1)));
            }
            if clock[k + 1] <= clock[k] {
                return Err(Error::InvalidGrid(format!(
                    "clock increment Q_{} - Q_{} = {} is not positive",
                    k + 1,
                    k,
                    clock[k + 1] - clock[k]
                )));
            }
        }
        Ok(TimeGrid { times, clock })
    }

    /// Grid with `steps` equal intervals on `[0, horizon]` and `Q_t = t`.
    pub fn uniform(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("steps = {steps}, horizon = {horizon}")));
        }
        let times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        TimeGrid::new(times.clone(), times)
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn clock(&self) -> &[f64] {
        &self.clock
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn q(&self, k: usize) -> f64 {
        self.clock[k]
    }

    /// `Q_{k+1} - Q_k`.
    pub fn dq(&self, k: usize) -> f64 {
        self.clock[k + 1] - self.clock[k]
    }

    /// Clock bound `C_Q = Q_N`.
    pub fn c_q(&self) -> f64 {
        self.clock[self.steps()]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.steps()]
    }
}
