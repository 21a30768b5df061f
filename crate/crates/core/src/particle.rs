//! The interacting particle system, its decoupled counterpart driven by the
//! same Brownian motions, and the propagation-of-chaos gap between them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, MeasureFlow};
use crate::model::Model;
use crate::scalar::{norm_sq, Scalar};
use crate::sde::noise::NoiseBundle;
use crate::sde::paths::{check_shapes, simulate_frozen_flow, ParticlePaths};
use crate::sde::scheme::{step_into, Scheme, StepBuffers};
use crate::sde::TimeGrid;

// Below this many particles a step is cheaper than a rayon fork.
const PAR_MIN_PARTICLES: usize = 256;

/// Each particle reads the empirical measure of the current states; all
/// particles advance with their own increments.
pub fn simulate_ips<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    grid: &TimeGrid<T>,
    noise: &NoiseBundle<T>,
    init: &[T],
    scheme: Scheme,
) -> Result<ParticlePaths<T>> {
    let n = check_shapes(model, grid, init, noise)?;
    let (d, m) = (model.dim_state(), model.dim_noise());
    let nodes = grid.nodes();
    let dt = grid.dt();
    let mut paths = ParticlePaths::zeros(*grid, n, d);
    let mut cur = init.to_vec();
    let mut next = vec![T::zero(); n * d];
    {
        let values = paths.values_mut();
        for p in 0..n {
            values[p * nodes * d..p * nodes * d + d].copy_from_slice(&cur[p * d..(p + 1) * d]);
        }
    }
    for k in 0..grid.steps() {
        let mu = EmpiricalMeasure::new(d, cur.clone())?;
        let t = grid.time(k);
        let advance = |(p, out): (usize, &mut [T]), buf: &mut StepBuffers<T>| {
            step_into(
                model,
                scheme,
                t,
                &cur[p * d..(p + 1) * d],
                &mu,
                dt,
                noise.increment(p, k),
                buf,
                out,
            )
            .map_err(|e| match e {
                Error::Divergence { t, state, .. } => Error::Divergence {
                    t,
                    step: k,
                    particle: Some(p),
                    state,
                },
                other => other,
            })
        };
        if n >= PAR_MIN_PARTICLES {
            next.par_chunks_mut(d)
                .enumerate()
                .try_for_each_init(|| StepBuffers::new(d, m), |buf, item| advance(item, buf))?;
        } else {
            let mut buf = StepBuffers::new(d, m);
            next.chunks_mut(d)
                .enumerate()
                .try_for_each(|item| advance(item, &mut buf))?;
        }
        let values = paths.values_mut();
        for p in 0..n {
            let start = (p * nodes + k + 1) * d;
            values[start..start + d].copy_from_slice(&next[p * d..(p + 1) * d]);
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(paths)
}

/// `N` decoupled copies of the McKean-Vlasov SDE, all fed the same
/// deterministic flow; particle `i` reads only noise stream `i`.
pub fn simulate_non_ips<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    flow: &MeasureFlow<T>,
    noise: &NoiseBundle<T>,
    init: &[T],
    scheme: Scheme,
) -> Result<ParticlePaths<T>> {
    simulate_frozen_flow(model, flow, init, noise, scheme)
}

/// An interacting system and its non-interacting partner on one
/// probability space: same initial states, same increments.
#[derive(Clone, Debug)]
pub struct CoupledSystems<'a, T> {
    pub ips: ParticlePaths<T>,
    pub non_ips: ParticlePaths<T>,
    pub noise: &'a NoiseBundle<T>,
    pub flow: &'a MeasureFlow<T>,
}

pub fn simulate_coupled<'a, T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    flow: &'a MeasureFlow<T>,
    noise: &'a NoiseBundle<T>,
    init: &[T],
    scheme: Scheme,
) -> Result<CoupledSystems<'a, T>> {
    let ips = simulate_ips(model, flow.grid(), noise, init, scheme)?;
    let non_ips = simulate_non_ips(model, flow, noise, init, scheme)?;
    Ok(CoupledSystems {
        ips,
        non_ips,
        noise,
        flow,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PocGap {
    /// `sup_t |X^i_t − Z^i_t|²` per particle.
    pub per_particle: Vec<f64>,
    pub max: f64,
}

pub fn poc_gap<T: Scalar>(coupled: &CoupledSystems<'_, T>) -> Result<PocGap> {
    poc_gap_paths(&coupled.ips, &coupled.non_ips)
}

pub fn poc_gap_paths<T: Scalar>(x: &ParticlePaths<T>, z: &ParticlePaths<T>) -> Result<PocGap> {
    if !x.grid().same_as(z.grid()) {
        return Err(Error::GridMismatch("coupled systems use different grids".into()));
    }
    if x.particles() != z.particles() || x.dim() != z.dim() {
        return Err(Error::invalid("coupled systems differ in particle count or dimension"));
    }
    let d = x.dim();
    let per_particle: Vec<f64> = (0..x.particles())
        .map(|p| {
            x.path(p)
                .chunks_exact(d)
                .zip(z.path(p).chunks_exact(d))
                .map(|(a, b)| {
                    let diff: Vec<T> = a.iter().zip(b).map(|(&u, &v)| u - v).collect();
                    norm_sq(&diff).as_f64()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let max = per_particle.iter().copied().fold(0.0, f64::max);
    Ok(PocGap { per_particle, max })
}
