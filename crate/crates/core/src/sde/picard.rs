//! Fixed-point iteration on the measure flow.
//!
//! Iterate `n` freezes the flow, simulates `M` paths of the resulting
//! ordinary SDE with fresh noise, and takes their empirical flow as the
//! next iterate. The residual is `sup_t W₂(flowⁿ_t, flowⁿ⁺¹_t)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::TimeGrid;
use super::noise::{derive_seed, sample_noise, tags};
use super::paths::{simulate_frozen_flow, InitSampler};
use super::scheme::Scheme;
use crate::error::{Error, Result};
use crate::measure::{second_moment, wasserstein2, EmpiricalMeasure, MeasureFlow};
use crate::model::Model;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    /// Stopping tolerance; `None` selects `1e-2·(1 + √E|ξ|²)` from the samples.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub scheme: Scheme,
}

impl PicardOptions {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            tol: None,
            max_iter: 25,
            scheme,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PicardResult<T> {
    pub flow: MeasureFlow<T>,
    pub iterations: usize,
    /// `residuals[n]` compares iterate `n` with iterate `n + 1`.
    pub residuals: Vec<f64>,
    pub tol: f64,
    pub converged: bool,
}

impl<T> PicardResult<T> {
    /// CSV rows `iteration,residual`.
    pub fn residual_csv(&self) -> String {
        let mut s = String::from("iteration,residual\n");
        for (n, r) in self.residuals.iter().enumerate() {
            s.push_str(&format!("{},{}\n", n + 1, r));
        }
        s
    }
}

/// `sup` over nodes of `W₂` between two flows on the same grid.
pub fn flow_distance<T: Scalar>(a: &MeasureFlow<T>, b: &MeasureFlow<T>) -> Result<f64> {
    if !a.grid().same_as(b.grid()) {
        return Err(Error::GridMismatch("flows live on different grids".into()));
    }
    let per_node = (0..a.grid().nodes())
        .into_par_iter()
        .map(|k| wasserstein2(a.at(k), b.at(k)).map(|w| w.value.as_f64()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_node.into_iter().fold(0.0, f64::max))
}

pub fn picard_solve<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    init: &InitSampler,
    samples: usize,
    grid: &TimeGrid<T>,
    opts: &PicardOptions,
    seed: u64,
) -> Result<PicardResult<T>> {
    if samples < 2 {
        return Err(Error::invalid(format!(
            "Picard needs at least 2 samples, got {samples}"
        )));
    }
    if let Some(tol) = opts.tol {
        if !(tol > 0.0) {
            return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
        }
    }
    init.validate()?;
    let d = model.dim_state();
    let xi: Vec<T> = init.sample(samples, d, derive_seed(seed, tags::INIT, 0));
    let law0 = EmpiricalMeasure::new(d, xi.clone())?;
    let tol = opts
        .tol
        .unwrap_or_else(|| 1e-2 * (1.0 + second_moment(&law0).as_f64().sqrt()));
    let mut flow = MeasureFlow::constant(*grid, law0);
    let mut residuals = Vec::new();
    let mut converged = false;
    for n in 0..opts.max_iter {
        let noise = sample_noise(
            grid,
            samples,
            model.dim_noise(),
            derive_seed(seed, tags::PICARD, n as u64),
        )?;
        let paths = simulate_frozen_flow(model, &flow, &xi, &noise, opts.scheme)?;
        let next = paths.empirical_flow()?;
        let r = flow_distance(&flow, &next)?;
        residuals.push(r);
        flow = next;
        if r <= tol {
            converged = true;
            break;
        }
    }
    Ok(PicardResult {
        flow,
        iterations: residuals.len(),
        residuals,
        tol,
        converged,
    })
}
