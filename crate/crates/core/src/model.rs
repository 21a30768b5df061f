//! Coefficient interface for McKean-Vlasov dynamics and the built-in models.
//!
//! All matrix-valued evaluators write row-major into caller-provided
//! buffers so the simulation loops never allocate:
//!
//! * diffusion `σ`: `d × m`, entry `(a, l)` at `a * m + l`
//! * `∇ₓb`, `∂_μ b(v)`: `d × d`, entry `(a, b)` at `a * d + b` (derivative of
//!   component `a` with respect to coordinate `b`)
//! * `∇ₓσ`, `∂_μ σ(v)`: `m` stacked `d × d` blocks, entry `(l, a, b)` at
//!   `(l * d + a) * d + b`, the Jacobian of column `l` of `σ`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::scalar::Scalar;
use crate::sde::noise::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularity {
    GloballyLipschitz,
    /// Superlinear drift satisfying `⟨x−y, b(x)−b(y)⟩ ≤ L|x−y|²`.
    OneSidedLipschitz,
}

/// Drift, diffusion and their spatial and Lions derivatives.
///
/// Implementations must be pure: the simulation layers call them
/// concurrently from many workers.
pub trait Model<T: Scalar>: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;
    fn regularity(&self) -> Regularity;

    fn drift(&self, t: T, x: &[T], mu: &EmpiricalMeasure<T>, out: &mut [T]);
    fn diffusion(&self, t: T, x: &[T], mu: &EmpiricalMeasure<T>, out: &mut [T]);
    fn grad_x_drift(&self, t: T, x: &[T], mu: &EmpiricalMeasure<T>, out: &mut [T]);
    fn grad_x_diffusion(&self, t: T, x: &[T], mu: &EmpiricalMeasure<T>, out: &mut [T]);
    fn lions_drift(&self, t: T, x: &[T], mu: &EmpiricalMeasure<T>, v: &[T], out: &mut [T]);
    fn lions_diffusion(&self, t: T, x: &[T], mu: &EmpiricalMeasure<T>, v: &[T], out: &mut [T]);

    /// True when both Lions derivatives are constant in the evaluation
    /// point `v`, which lets the particle sums collapse to a running mean.
    fn lions_independent_of_v(&self) -> bool {
        false
    }
}

fn check_inputs<T: Scalar, M: Model<T> + ?Sized>(model: &M, x: &[T], mu: &EmpiricalMeasure<T>) -> Result<()> {
    let d = model.dim_state();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: d,
            got: x.len(),
        });
    }
    if mu.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "measure",
            expected: d,
            got: mu.dim(),
        });
    }
    Ok(())
}

fn check_point<T: Scalar, M: Model<T> + ?Sized>(model: &M, v: &[T]) -> Result<()> {
    if v.len() != model.dim_state() {
        return Err(Error::DimensionMismatch {
            what: "Lions evaluation point",
            expected: model.dim_state(),
            got: v.len(),
        });
    }
    Ok(())
}

pub fn eval_drift<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    t: T,
    x: &[T],
    mu: &EmpiricalMeasure<T>,
) -> Result<Vec<T>> {
    check_inputs(model, x, mu)?;
    let mut out = vec![T::zero(); model.dim_state()];
    model.drift(t, x, mu, &mut out);
    Ok(out)
}

/// Returns `σ(t, x, μ)` as a row-major `d × m` block.
pub fn eval_diffusion<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    t: T,
    x: &[T],
    mu: &EmpiricalMeasure<T>,
) -> Result<Vec<T>> {
    check_inputs(model, x, mu)?;
    let mut out = vec![T::zero(); model.dim_state() * model.dim_noise()];
    model.diffusion(t, x, mu, &mut out);
    Ok(out)
}

/// `(∇ₓb, ∂_μ b(·)(v))`, both `d × d`.
pub fn eval_drift_gradients<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    t: T,
    x: &[T],
    mu: &EmpiricalMeasure<T>,
    v: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    check_inputs(model, x, mu)?;
    check_point(model, v)?;
    let d = model.dim_state();
    let mut grad = vec![T::zero(); d * d];
    let mut lions = vec![T::zero(); d * d];
    model.grad_x_drift(t, x, mu, &mut grad);
    model.lions_drift(t, x, mu, v, &mut lions);
    Ok((grad, lions))
}

/// `(∇ₓσ, ∂_μ σ(·)(v))`, both `m × d × d`.
pub fn eval_diffusion_gradients<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    t: T,
    x: &[T],
    mu: &EmpiricalMeasure<T>,
    v: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    check_inputs(model, x, mu)?;
    check_point(model, v)?;
    let d = model.dim_state();
    let size = d * d * model.dim_noise();
    let mut grad = vec![T::zero(); size];
    let mut lions = vec![T::zero(); size];
    model.grad_x_diffusion(t, x, mu, &mut grad);
    model.lions_diffusion(t, x, mu, v, &mut lions);
    Ok((grad, lions))
}

/// Scalar models with first-moment interaction, `d = m = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", deny_unknown_fields)]
pub enum BuiltinModel<T> {
    /// `b = −a·x + κ·mean(μ)`, `σ = σ₀`.
    MeanFieldOU { a: T, kappa: T, sigma0: T },
    /// `b = x − x³ + κ·(mean(μ) − x)`, `σ = σ₀`.
    DoubleWell { kappa: T, sigma0: T },
    /// Drift as `MeanFieldOU`, `σ = σ₁ + σ₂·tanh(x)`.
    ScalarStateDiffusion { a: T, kappa: T, sigma1: T, sigma2: T },
}

impl<T: Scalar> BuiltinModel<T> {
    pub const NAMES: [&'static str; 3] = ["MeanFieldOU", "DoubleWell", "ScalarStateDiffusion"];

    pub fn name(&self) -> &'static str {
        match self {
            BuiltinModel::MeanFieldOU { .. } => "MeanFieldOU",
            BuiltinModel::DoubleWell { .. } => "DoubleWell",
            BuiltinModel::ScalarStateDiffusion { .. } => "ScalarStateDiffusion",
        }
    }

    /// Interaction strength `κ`.
    pub fn kappa(&self) -> T {
        match *self {
            BuiltinModel::MeanFieldOU { kappa, .. }
            | BuiltinModel::DoubleWell { kappa, .. }
            | BuiltinModel::ScalarStateDiffusion { kappa, .. } => kappa,
        }
    }

    /// Same model with the interaction switched off.
    pub fn without_interaction(&self) -> Self {
        let mut m = *self;
        match &mut m {
            BuiltinModel::MeanFieldOU { kappa, .. }
            | BuiltinModel::DoubleWell { kappa, .. }
            | BuiltinModel::ScalarStateDiffusion { kappa, .. } => *kappa = T::zero(),
        }
        m
    }

    /// Builds a model from its registry name and a parameter lookup.
    /// Every parameter is required; extra keys are rejected by the caller.
    pub fn from_params(name: &str, get: impl Fn(&str) -> Option<f64>) -> Result<Self> {
        let req = |k: &str| {
            get(k)
                .map(T::of)
                .ok_or_else(|| Error::invalid(format!("model {name} requires parameter \"{k}\"")))
        };
        match name {
            "MeanFieldOU" => Ok(BuiltinModel::MeanFieldOU {
                a: req("a")?,
                kappa: req("kappa")?,
                sigma0: req("sigma0")?,
            }),
            "DoubleWell" => Ok(BuiltinModel::DoubleWell {
                kappa: req("kappa")?,
                sigma0: req("sigma0")?,
            }),
            "ScalarStateDiffusion" => Ok(BuiltinModel::ScalarStateDiffusion {
                a: req("a")?,
                kappa: req("kappa")?,
                sigma1: req("sigma1")?,
                sigma2: req("sigma2")?,
            }),
            other => Err(Error::invalid(format!(
                "unknown model \"{other}\"; available models: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn param_names(name: &str) -> Option<&'static [&'static str]> {
        match name {
            "MeanFieldOU" => Some(&["a", "kappa", "sigma0"]),
            "DoubleWell" => Some(&["kappa", "sigma0"]),
            "ScalarStateDiffusion" => Some(&["a", "kappa", "sigma1", "sigma2"]),
            _ => None,
        }
    }
}

impl<T: Scalar> Model<T> for BuiltinModel<T> {
    fn dim_state(&self) -> usize {
        1
    }

    fn dim_noise(&self) -> usize {
        1
    }

    fn regularity(&self) -> Regularity {
        match self {
            BuiltinModel::DoubleWell { .. } => Regularity::OneSidedLipschitz,
            _ => Regularity::GloballyLipschitz,
        }
    }

    fn drift(&self, _t: T, x: &[T], mu: &EmpiricalMeasure<T>, out: &mut [T]) {
        let x = x[0];
        let mean = mu.mean()[0];
        out[0] = match *self {
            BuiltinModel::MeanFieldOU { a, kappa, .. } | BuiltinModel::ScalarStateDiffusion { a, kappa, .. } => {
                -a * x + kappa * mean
            }
            BuiltinModel::DoubleWell { kappa, .. } => x - x * x * x + kappa * (mean - x),
        };
    }

    fn diffusion(&self, _t: T, x: &[T], _mu: &EmpiricalMeasure<T>, out: &mut [T]) {
        out[0] = match *self {
            BuiltinModel::MeanFieldOU { sigma0, .. } | BuiltinModel::DoubleWell { sigma0, .. } => sigma0,
            BuiltinModel::ScalarStateDiffusion { sigma1, sigma2, .. } => sigma1 + sigma2 * x[0].tanh(),
        };
    }

    fn grad_x_drift(&self, _t: T, x: &[T], _mu: &EmpiricalMeasure<T>, out: &mut [T]) {
        out[0] = match *self {
            BuiltinModel::MeanFieldOU { a, .. } | BuiltinModel::ScalarStateDiffusion { a, .. } => -a,
            BuiltinModel::DoubleWell { kappa, .. } => T::one() - T::of(3.0) * x[0] * x[0] - kappa,
        };
    }

    fn grad_x_diffusion(&self, _t: T, x: &[T], _mu: &EmpiricalMeasure<T>, out: &mut [T]) {
        out[0] = match *self {
            BuiltinModel::ScalarStateDiffusion { sigma2, .. } => {
                let th = x[0].tanh();
                sigma2 * (T::one() - th * th)
            }
            _ => T::zero(),
        };
    }

    fn lions_drift(&self, _t: T, _x: &[T], _mu: &EmpiricalMeasure<T>, _v: &[T], out: &mut [T]) {
        out[0] = self.kappa();
    }

    fn lions_diffusion(&self, _t: T, _x: &[T], _mu: &EmpiricalMeasure<T>, _v: &[T], out: &mut [T]) {
        out[0] = T::zero();
    }

    fn lions_independent_of_v(&self) -> bool {
        true
    }
}

/// Largest observed `|b(t,x,μ)−b(t,x′,μ′)| / (|x−x′| + W₂(μ,μ′))` over random
/// probes with states in `[−radius, radius]^d` and `atoms`-point measures.
pub fn lipschitz_probe<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    t: T,
    probes: usize,
    radius: f64,
    atoms: usize,
    seed: u64,
) -> f64 {
    let d = model.dim_state();
    let mut rng = substream(seed, 0);
    let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(rng.random_range(-radius..radius))).collect() };
    let mut worst = 0.0f64;
    let mut b1 = vec![T::zero(); d];
    let mut b2 = vec![T::zero(); d];
    for _ in 0..probes {
        let x = draw(d);
        let y = draw(d);
        let mu = EmpiricalMeasure::new(d, draw(atoms * d)).expect("finite probe atoms");
        let nu = EmpiricalMeasure::new(d, draw(atoms * d)).expect("finite probe atoms");
        model.drift(t, &x, &mu, &mut b1);
        model.drift(t, &y, &nu, &mut b2);
        let num: f64 = b1
            .iter()
            .zip(&b2)
            .map(|(p, q)| (*p - *q).as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        let dx: f64 = x
            .iter()
            .zip(&y)
            .map(|(p, q)| (*p - *q).as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        let w = crate::measure::wasserstein2(&mu, &nu)
            .map(|w| w.value.as_f64())
            .unwrap_or(f64::INFINITY);
        let den = dx + w;
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    worst
}

/// Largest observed `⟨x−x′, b(t,x,μ)−b(t,x′,μ)⟩ / |x−x′|²` with a shared
/// random measure, states in `[−radius, radius]^d`.
pub fn one_sided_lipschitz_probe<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    t: T,
    probes: usize,
    radius: f64,
    seed: u64,
) -> f64 {
    let d = model.dim_state();
    let mut rng = substream(seed, 1);
    let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(rng.random_range(-radius..radius))).collect() };
    let mu = EmpiricalMeasure::new(d, draw(8 * d)).expect("finite probe atoms");
    let mut b1 = vec![T::zero(); d];
    let mut b2 = vec![T::zero(); d];
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..probes {
        let x = draw(d);
        let y = draw(d);
        model.drift(t, &x, &mu, &mut b1);
        model.drift(t, &y, &mu, &mut b2);
        let mut inner = 0.0;
        let mut dist = 0.0;
        for a in 0..d {
            let dx = (x[a] - y[a]).as_f64();
            inner += dx * (b1[a] - b2[a]).as_f64();
            dist += dx * dx;
        }
        if dist > 0.0 {
            worst = worst.max(inner / dist);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou() -> BuiltinModel<f64> {
        BuiltinModel::MeanFieldOU {
            a: 1.0,
            kappa: 0.5,
            sigma0: 0.3,
        }
    }

    fn dw() -> BuiltinModel<f64> {
        BuiltinModel::DoubleWell {
            kappa: 0.5,
            sigma0: 0.3,
        }
    }

    fn ssd() -> BuiltinModel<f64> {
        BuiltinModel::ScalarStateDiffusion {
            a: 1.0,
            kappa: 0.5,
            sigma1: 0.2,
            sigma2: 0.1,
        }
    }

    fn delta(x: f64) -> EmpiricalMeasure<f64> {
        EmpiricalMeasure::from_scalars(&[x]).unwrap()
    }

    #[test]
    fn drift_examples() {
        assert_eq!(eval_drift(&dw(), 0.0, &[0.0], &delta(0.0)).unwrap(), vec![0.0]);
        assert_eq!(eval_drift(&dw(), 0.0, &[2.0], &delta(0.0)).unwrap(), vec![-7.0]);
        let mu = EmpiricalMeasure::from_scalars(&[1.0, 3.0]).unwrap();
        assert_eq!(eval_drift(&ou(), 0.0, &[1.0], &mu).unwrap(), vec![0.0]);
    }

    #[test]
    fn drift_rejects_bad_dimensions() {
        let err = eval_drift(&ou(), 0.0, &[1.0, 2.0], &delta(0.0)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { what: "state", .. }));
        let mu2 = EmpiricalMeasure::new(2, vec![0.0, 0.0]).unwrap();
        assert!(eval_drift(&ou(), 0.0, &[1.0], &mu2).is_err());
        assert!(eval_drift_gradients(&ou(), 0.0, &[1.0], &delta(0.0), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn diffusion_examples() {
        for x in [-3.0, 0.0, 5.0] {
            assert_eq!(eval_diffusion(&ou(), 0.7, &[x], &delta(x)).unwrap(), vec![0.3]);
        }
        assert_eq!(eval_diffusion(&ssd(), 0.0, &[0.0], &delta(0.0)).unwrap(), vec![0.2]);
        let far = eval_diffusion(&ssd(), 0.0, &[20.0], &delta(0.0)).unwrap()[0];
        assert!((far - 0.3).abs() <= 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let (g, l) = eval_drift_gradients(&ou(), 0.0, &[0.4], &delta(2.0), &[9.0]).unwrap();
        assert_eq!((g[0], l[0]), (-1.0, 0.5));
        let (g, _) = eval_drift_gradients(&dw(), 0.0, &[1.0], &delta(0.0), &[0.0]).unwrap();
        assert_eq!(g[0], -2.5);
        let (g, l) = eval_diffusion_gradients(&ou(), 0.0, &[1.0], &delta(0.0), &[0.0]).unwrap();
        assert_eq!((g[0], l[0]), (0.0, 0.0));
        let (g, l) = eval_diffusion_gradients(&ssd(), 0.0, &[0.0], &delta(0.0), &[3.0]).unwrap();
        assert!((g[0] - 0.1).abs() < 1e-15);
        assert_eq!(l[0], 0.0);
        let (_, l) = eval_diffusion_gradients(&dw(), 0.0, &[0.0], &delta(0.0), &[3.0]).unwrap();
        assert_eq!(l[0], 0.0);
    }

    #[test]
    fn regularity_declarations() {
        assert_eq!(Model::<f64>::regularity(&dw()), Regularity::OneSidedLipschitz);
        assert_eq!(Model::<f64>::regularity(&ou()), Regularity::GloballyLipschitz);
        assert_eq!(Model::<f64>::regularity(&ssd()), Regularity::GloballyLipschitz);
    }

    #[test]
    fn registry_lookup() {
        let m = BuiltinModel::<f64>::from_params("DoubleWell", |k| match k {
            "kappa" => Some(0.5),
            "sigma0" => Some(0.3),
            _ => None,
        })
        .unwrap();
        assert_eq!(m, dw());
        let err = BuiltinModel::<f64>::from_params("Lorenz", |_| None).unwrap_err();
        let msg = err.to_string();
        for name in BuiltinModel::<f64>::NAMES {
            assert!(msg.contains(name), "{msg}");
        }
        let err = BuiltinModel::<f64>::from_params("MeanFieldOU", |_| None).unwrap_err();
        assert!(err.to_string().contains("\"a\""));
    }

    #[test]
    fn json_form_rejects_unknown_fields() {
        let m: BuiltinModel<f64> =
            serde_json::from_str(r#"{"name":"MeanFieldOU","a":1,"kappa":0.5,"sigma0":0.3}"#).unwrap();
        assert_eq!(m, ou());
        assert!(serde_json::from_str::<BuiltinModel<f64>>(
            r#"{"name":"MeanFieldOU","a":1,"kappa":0.5,"sigma0":0.3,"b":2}"#
        )
        .is_err());
    }

    #[test]
    fn lipschitz_probes() {
        assert!(one_sided_lipschitz_probe(&dw(), 0.0, 10_000, 10.0, 3) <= 1.01);
        // OU: |b-b'| <= a|x-x'| + kappa|mean-mean'| <= max(a, kappa)(|x-x'| + W2)
        assert!(lipschitz_probe(&ou(), 0.0, 2_000, 10.0, 5, 4) <= 1.0 + 1e-9);
        assert!(lipschitz_probe(&ssd(), 0.0, 2_000, 10.0, 5, 4) <= 1.0 + 1e-9);
    }
}
