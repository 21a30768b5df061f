//! Particle trajectories and frozen-flow simulation.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::TimeGrid;
use super::noise::{substream, NoiseBundle};
use super::scheme::{step_into, Scheme, StepBuffers};
use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, MeasureFlow};
use crate::model::Model;
use crate::scalar::Scalar;

/// Trajectories laid out `[particle][node][coordinate]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticlePaths<T> {
    grid: TimeGrid<T>,
    particles: usize,
    dim: usize,
    values: Vec<T>,
}

impl<T: Scalar> ParticlePaths<T> {
    pub fn zeros(grid: TimeGrid<T>, particles: usize, dim: usize) -> Self {
        Self {
            grid,
            particles,
            dim,
            values: vec![T::zero(); particles * grid.nodes() * dim],
        }
    }

    pub fn from_values(grid: TimeGrid<T>, particles: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        let expected = particles * grid.nodes() * dim;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "path values",
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            grid,
            particles,
            dim,
            values,
        })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Whole trajectory of one particle, `nodes × d`.
    pub fn path(&self, particle: usize) -> &[T] {
        let per = self.grid.nodes() * self.dim;
        &self.values[particle * per..(particle + 1) * per]
    }

    pub fn state(&self, particle: usize, node: usize) -> &[T] {
        let start = (particle * self.grid.nodes() + node) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Empirical measure of all particles at one node.
    pub fn measure_at(&self, node: usize) -> Result<EmpiricalMeasure<T>> {
        let mut pts = Vec::with_capacity(self.particles * self.dim);
        for p in 0..self.particles {
            pts.extend_from_slice(self.state(p, node));
        }
        EmpiricalMeasure::new(self.dim, pts)
    }

    /// The empirical flow `t ↦ (1/P)·Σ δ_{X^p_t}`.
    pub fn empirical_flow(&self) -> Result<MeasureFlow<T>> {
        let measures = (0..self.grid.nodes())
            .into_par_iter()
            .map(|k| self.measure_at(k))
            .collect::<Result<Vec<_>>>()?;
        MeasureFlow::new(self.grid, measures)
    }

    /// `sup_t |X^p_t|²` for every particle.
    pub fn sup_norm_sq(&self) -> Vec<T> {
        let per = self.grid.nodes() * self.dim;
        self.values
            .chunks_exact(per)
            .map(|path| {
                path.chunks_exact(self.dim)
                    .map(crate::scalar::norm_sq)
                    .fold(T::zero(), T::max)
            })
            .collect()
    }

    /// CSV rows `particle,node,time,x0,…`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "particle,node,time")?;
        for a in 0..self.dim {
            write!(w, ",x{a}")?;
        }
        writeln!(w)?;
        for p in 0..self.particles {
            for k in 0..self.grid.nodes() {
                write!(w, "{p},{k},{}", self.grid.time(k))?;
                for x in self.state(p, k) {
                    write!(w, ",{x}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Law of the initial condition `ξ`; coordinates are drawn independently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitSampler {
    Constant { value: f64 },
    Gaussian { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
}

impl InitSampler {
    /// `particles × dim` draws; particle `i` uses substream `i` of `seed`.
    pub fn sample<T: Scalar>(&self, particles: usize, dim: usize, seed: u64) -> Vec<T> {
        let mut out = vec![T::zero(); particles * dim];
        out.chunks_exact_mut(dim).enumerate().for_each(|(i, x)| {
            let mut rng = substream(seed, i as u64);
            for v in x.iter_mut() {
                *v = T::of(match *self {
                    InitSampler::Constant { value } => value,
                    InitSampler::Gaussian { mean, std } => mean + std * f64::standard_normal(&mut rng),
                    InitSampler::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
                });
            }
        });
        out
    }

    /// `E|ξ|²` in dimension `dim`.
    pub fn second_moment(&self, dim: usize) -> f64 {
        let per = match *self {
            InitSampler::Constant { value } => value * value,
            InitSampler::Gaussian { mean, std } => mean * mean + std * std,
            InitSampler::Uniform { low, high } => (low * low + low * high + high * high) / 3.0,
        };
        per * dim as f64
    }

    /// Mean of each coordinate.
    pub fn mean(&self) -> f64 {
        match *self {
            InitSampler::Constant { value } => value,
            InitSampler::Gaussian { mean, .. } => mean,
            InitSampler::Uniform { low, high } => 0.5 * (low + high),
        }
    }

    /// Same family with the variance multiplied by `factor`.
    pub fn with_variance_scaled(&self, factor: f64) -> Self {
        match *self {
            InitSampler::Constant { value } => InitSampler::Constant { value },
            InitSampler::Gaussian { mean, std } => InitSampler::Gaussian {
                mean,
                std: std * factor.sqrt(),
            },
            InitSampler::Uniform { low, high } => {
                let c = 0.5 * (low + high);
                let half = 0.5 * (high - low) * factor.sqrt();
                InitSampler::Uniform {
                    low: c - half,
                    high: c + half,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            InitSampler::Constant { value } => value.is_finite(),
            InitSampler::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            InitSampler::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid initial law {self:?}")))
        }
    }
}

/// Simulates one path against a frozen flow, writing `nodes × d` values.
pub(crate) fn simulate_path_into<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    flow: &MeasureFlow<T>,
    scheme: Scheme,
    x0: &[T],
    increments: &[T],
    out: &mut [T],
) -> Result<()> {
    let grid = flow.grid();
    let (d, m) = (model.dim_state(), model.dim_noise());
    let dt = grid.dt();
    let mut buf = StepBuffers::new(d, m);
    out[..d].copy_from_slice(x0);
    for k in 0..grid.steps() {
        let (done, rest) = out.split_at_mut((k + 1) * d);
        let x = &done[k * d..];
        let dw = &increments[k * m..(k + 1) * m];
        step_into(
            model,
            scheme,
            grid.time(k),
            x,
            flow.at(k),
            dt,
            dw,
            &mut buf,
            &mut rest[..d],
        )
        .map_err(|e| match e {
            Error::Divergence { t, particle, state, .. } => Error::Divergence {
                t,
                step: k,
                particle,
                state,
            },
            other => other,
        })?;
    }
    Ok(())
}

pub(crate) fn check_shapes<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    grid: &TimeGrid<T>,
    init: &[T],
    noise: &NoiseBundle<T>,
) -> Result<usize> {
    let d = model.dim_state();
    if !grid.same_as(noise.grid()) {
        return Err(Error::GridMismatch(
            "noise bundle was sampled on a different grid".into(),
        ));
    }
    if noise.dim_noise() != model.dim_noise() {
        return Err(Error::DimensionMismatch {
            what: "noise dimension",
            expected: model.dim_noise(),
            got: noise.dim_noise(),
        });
    }
    if init.len() != noise.particles() * d {
        return Err(Error::DimensionMismatch {
            what: "initial states",
            expected: noise.particles() * d,
            got: init.len(),
        });
    }
    Ok(noise.particles())
}

/// `P` independent paths of the SDE whose measure argument is frozen to
/// `flow` (piecewise constant in time, left endpoint).
pub fn simulate_frozen_flow<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    flow: &MeasureFlow<T>,
    init: &[T],
    noise: &NoiseBundle<T>,
    scheme: Scheme,
) -> Result<ParticlePaths<T>> {
    if flow.dim() != model.dim_state() {
        return Err(Error::DimensionMismatch {
            what: "flow dimension",
            expected: model.dim_state(),
            got: flow.dim(),
        });
    }
    let particles = check_shapes(model, flow.grid(), init, noise)?;
    let d = model.dim_state();
    let mut paths = ParticlePaths::zeros(*flow.grid(), particles, d);
    let per = flow.grid().nodes() * d;
    paths
        .values_mut()
        .par_chunks_mut(per)
        .enumerate()
        .try_for_each(|(p, out)| {
            simulate_path_into(model, flow, scheme, &init[p * d..(p + 1) * d], noise.stream(p), out)
                .map_err(|e| e.with_particle(p))
        })?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;
    use crate::sde::noise::sample_noise;

    #[test]
    fn deterministic_linear_recursion() {
        let g = TimeGrid::new(1.0f64, 20).unwrap();
        let m = BuiltinModel::MeanFieldOU {
            a: 1.0,
            kappa: 0.0,
            sigma0: 0.0,
        };
        let flow = MeasureFlow::constant(g, EmpiricalMeasure::from_scalars(&[5.0, -2.0]).unwrap());
        let noise = sample_noise(&g, 2, 1, 3).unwrap();
        let paths = simulate_frozen_flow(&m, &flow, &[2.0, -1.0], &noise, Scheme::EulerMaruyama).unwrap();
        for k in 0..=20 {
            let expect = 2.0 * (1.0 - g.dt()).powi(k as i32);
            assert!((paths.state(0, k)[0] - expect).abs() <= 1e-14);
        }
        assert_eq!(paths.state(1, 0), &[-1.0]);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let g = TimeGrid::new(1.0f64, 20).unwrap();
        let other = TimeGrid::new(1.0f64, 10).unwrap();
        let m = BuiltinModel::MeanFieldOU {
            a: 1.0,
            kappa: 0.0,
            sigma0: 0.1,
        };
        let flow = MeasureFlow::constant(g, EmpiricalMeasure::from_scalars(&[0.0]).unwrap());
        let noise = sample_noise(&other, 2, 1, 3).unwrap();
        assert!(matches!(
            simulate_frozen_flow(&m, &flow, &[0.0, 0.0], &noise, Scheme::EulerMaruyama),
            Err(Error::GridMismatch(_))
        ));
        let noise = sample_noise(&g, 2, 1, 3).unwrap();
        assert!(simulate_frozen_flow(&m, &flow, &[0.0], &noise, Scheme::EulerMaruyama).is_err());
        assert!(simulate_frozen_flow(&m, &flow, &[], &noise, Scheme::EulerMaruyama).is_err());
    }

    #[test]
    fn init_sampler_moments() {
        let s = InitSampler::Gaussian { mean: 1.0, std: 2.0 };
        assert_eq!(s.second_moment(1), 5.0);
        assert_eq!(
            s.with_variance_scaled(4.0),
            InitSampler::Gaussian { mean: 1.0, std: 4.0 }
        );
        let u = InitSampler::Uniform { low: -1.0, high: 1.0 };
        assert!((u.second_moment(2) - 2.0 / 3.0).abs() < 1e-15);
        let draws: Vec<f64> = s.sample(20_000, 1, 5);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
        let small: Vec<f64> = s.sample(3, 1, 5);
        assert_eq!(&draws[..3], &small[..]);
        assert!(InitSampler::Gaussian { mean: 0.0, std: -1.0 }.validate().is_err());
    }

    #[test]
    fn divergence_reports_particle() {
        let g = TimeGrid::new(5.0f64, 10).unwrap();
        let m = BuiltinModel::DoubleWell {
            kappa: 0.0,
            sigma0: 0.0,
        };
        let flow = MeasureFlow::constant(g, EmpiricalMeasure::from_scalars(&[0.0]).unwrap());
        let noise = sample_noise(&g, 2, 1, 3).unwrap();
        let err = simulate_frozen_flow(&m, &flow, &[0.0, 30.0], &noise, Scheme::EulerMaruyama).unwrap_err();
        assert!(matches!(err, Error::Divergence { particle: Some(1), .. }), "{err}");
    }
}
