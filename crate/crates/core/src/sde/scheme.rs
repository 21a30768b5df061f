//! One-step integrators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::model::{Model, Regularity};
use crate::scalar::{all_finite, norm_sq, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// `x + b·dt + σ·ΔW`
    #[serde(rename = "EM")]
    EulerMaruyama,
    /// `x + b·dt / (1 + dt·|b|) + σ·ΔW`
    #[serde(rename = "TamedEM")]
    TamedEuler,
}

impl Scheme {
    /// The scheme a model's declared regularity calls for.
    pub fn for_regularity(r: Regularity) -> Self {
        match r {
            Regularity::GloballyLipschitz => Scheme::EulerMaruyama,
            Regularity::OneSidedLipschitz => Scheme::TamedEuler,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::EulerMaruyama => "EM",
            Scheme::TamedEuler => "TamedEM",
        }
    }

    /// Drift increment `g(b)` of the scheme, written in place over `b`.
    #[inline]
    pub fn drift_increment<T: Scalar>(&self, b: &mut [T], dt: T) {
        match self {
            Scheme::EulerMaruyama => b.iter_mut().for_each(|v| *v *= dt),
            Scheme::TamedEuler => {
                let scale = dt / (T::one() + dt * norm_sq(b).sqrt());
                b.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }

    /// Jacobian `∂g/∂b` of the drift increment map (`d × d`, row-major).
    pub fn drift_increment_jacobian<T: Scalar>(&self, b: &[T], dt: T, out: &mut [T]) {
        let d = b.len();
        out.iter_mut().for_each(|v| *v = T::zero());
        match self {
            Scheme::EulerMaruyama => {
                for a in 0..d {
                    out[a * d + a] = dt;
                }
            }
            Scheme::TamedEuler => {
                let norm = norm_sq(b).sqrt();
                let den = T::one() + dt * norm;
                for a in 0..d {
                    out[a * d + a] = dt / den;
                }
                if norm > T::zero() {
                    let c = dt * dt / (norm * den * den);
                    for a in 0..d {
                        for c2 in 0..d {
                            out[a * d + c2] -= c * b[a] * b[c2];
                        }
                    }
                }
            }
        }
    }
}

/// Scratch space for repeated steps.
#[derive(Clone, Debug)]
pub struct StepBuffers<T> {
    pub(crate) drift: Vec<T>,
    pub(crate) diffusion: Vec<T>,
}

impl<T: Scalar> StepBuffers<T> {
    pub fn new(d: usize, m: usize) -> Self {
        Self {
            drift: vec![T::zero(); d],
            diffusion: vec![T::zero(); d * m],
        }
    }
}

/// Advances `x` by one step into `out`; errors if the result is not finite.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn step_into<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    scheme: Scheme,
    t: T,
    x: &[T],
    mu: &EmpiricalMeasure<T>,
    dt: T,
    dw: &[T],
    buf: &mut StepBuffers<T>,
    out: &mut [T],
) -> Result<()> {
    let d = x.len();
    let m = dw.len();
    model.drift(t, x, mu, &mut buf.drift);
    model.diffusion(t, x, mu, &mut buf.diffusion);
    scheme.drift_increment(&mut buf.drift, dt);
    for a in 0..d {
        let mut noise = T::zero();
        for l in 0..m {
            noise += buf.diffusion[a * m + l] * dw[l];
        }
        out[a] = x[a] + buf.drift[a] + noise;
    }
    if !all_finite(out) {
        return Err(Error::Divergence {
            t: t.as_f64(),
            step: 0,
            particle: None,
            state: x.iter().map(|v| v.as_f64()).collect(),
        });
    }
    Ok(())
}

/// One integrator step.
#[allow(clippy::too_many_arguments)]
pub fn step<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    scheme: Scheme,
    t: T,
    x: &[T],
    mu: &EmpiricalMeasure<T>,
    dt: T,
    dw: &[T],
) -> Result<Vec<T>> {
    let (d, m) = (model.dim_state(), model.dim_noise());
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: d,
            got: x.len(),
        });
    }
    if dw.len() != m {
        return Err(Error::DimensionMismatch {
            what: "noise increment",
            expected: m,
            got: dw.len(),
        });
    }
    if mu.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "measure",
            expected: d,
            got: mu.dim(),
        });
    }
    if !(dt > T::zero()) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let mut buf = StepBuffers::new(d, m);
    let mut out = vec![T::zero(); d];
    step_into(model, scheme, t, x, mu, dt, dw, &mut buf, &mut out)?;
    Ok(out)
}
