use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform grid `0 = t_0 < t_1 < … < t_n = T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    horizon: T,
    steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(horizon: T, steps: usize) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::invalid(format!("horizon T must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        Ok(Self { horizon, steps })
    }

    /// Grid with `round(T / dt)` steps.
    pub fn with_dt(horizon: T, dt: T) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let steps = (horizon / dt).round().to_usize().unwrap_or(0);
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> T {
        self.horizon / T::of(self.steps as f64)
    }

    /// Time of node `k`; the last node is exactly `T`.
    pub fn time(&self, k: usize) -> T {
        if k >= self.steps {
            self.horizon
        } else {
            T::of(k as f64) * self.dt()
        }
    }

    /// Index of the grid cell containing `t` (left endpoint convention).
    pub fn cell_of(&self, t: T) -> usize {
        if t <= T::zero() {
            return 0;
        }
        let k = (t / self.dt()).floor().to_usize().unwrap_or(usize::MAX);
        k.min(self.steps)
    }

    /// `count` equispaced source nodes `⌊q·n/count⌋`, `q = 0..count`.
    pub fn sub_grid(&self, count: usize) -> Vec<usize> {
        let count = count.clamp(1, self.steps);
        let mut nodes: Vec<usize> = (0..count).map(|q| q * self.steps / count).collect();
        nodes.dedup();
        nodes
    }

    pub(crate) fn same_as(&self, other: &Self) -> bool {
        self.steps == other.steps && self.horizon == other.horizon
    }
}
