//! Pathwise Malliavin derivatives of simulated trajectories.
//!
//! The derivative fields are the tangent of the discrete scheme with respect
//! to its Brownian increments. A perturbation of `W` at source node `s`
//! enters through the increment `ΔW_s` on `[t_s, t_{s+1}]`, so the field
//! equals `σ(t_s, X_s, μ_s)` at both `t_s` and `t_{s+1}` and is propagated by
//! the linearised step from `t_{s+1}` onwards:
//!
//! ```text
//! Y_{k+1} = Y_k + G(b_k)·∇ₓb_k·Y_k + Σ_l ∇ₓσ_{l,k}·Y_k·ΔW_{k,l}
//! ```
//!
//! where `G` is the Jacobian of the drift increment map (`dt·I` for Euler,
//! the tamed map's derivative otherwise). For the interacting system the
//! linearisation picks up the `(1/N)·Σ_k ∂_μ(·)(X^k)·D^k` Lions sums.
//! Fields vanish identically before `s`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, MeasureFlow};
use crate::model::Model;
use crate::scalar::{all_finite, norm_sq, Scalar};
use crate::sde::noise::NoiseBundle;
use crate::sde::paths::ParticlePaths;
use crate::sde::scheme::Scheme;
use crate::sde::TimeGrid;

const PAR_MIN_PARTICLES: usize = 256;

/// `D_s Z_t` for one source node `s`, as `d × m` blocks on every grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct MalliavinLimitField<T> {
    s_index: usize,
    grid: TimeGrid<T>,
    d: usize,
    m: usize,
    values: Vec<T>,
}

impl<T: Scalar> MalliavinLimitField<T> {
    pub fn s_index(&self) -> usize {
        self.s_index
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }

    pub fn value(&self, node: usize) -> &[T] {
        let b = self.d * self.m;
        &self.values[node * b..(node + 1) * b]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// `|D_s Z_t|²` (Frobenius) at every node.
    pub fn norm_sq_path(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.d * self.m)
            .map(|b| norm_sq(b).as_f64())
            .collect()
    }

    pub fn sup_norm_sq(&self) -> f64 {
        self.norm_sq_path().into_iter().fold(0.0, f64::max)
    }

    /// CSV rows `j,s,i,t,component,value`; the component index is `a·m + l`.
    pub fn write_csv<W: Write>(&self, mut w: W, particle: usize, header: bool) -> Result<()> {
        if header {
            writeln!(w, "j,s,i,t,component,value")?;
        }
        let s = self.grid.time(self.s_index);
        for k in 0..self.grid.nodes() {
            let t = self.grid.time(k);
            for (c, v) in self.value(k).iter().enumerate() {
                writeln!(w, "{particle},{s},{particle},{t},{c},{v}")?;
            }
        }
        Ok(())
    }
}

/// `D^j_s X^i_t` for one source particle `j`, one source node `s`, and all
/// target particles `i`; laid out `[node][particle][d × m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MalliavinIpsField<T> {
    j: usize,
    s_index: usize,
    grid: TimeGrid<T>,
    particles: usize,
    d: usize,
    m: usize,
    values: Vec<T>,
}

impl<T: Scalar> MalliavinIpsField<T> {
    pub fn source_particle(&self) -> usize {
        self.j
    }

    pub fn s_index(&self) -> usize {
        self.s_index
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn value(&self, particle: usize, node: usize) -> &[T] {
        let b = self.d * self.m;
        let start = (node * self.particles + particle) * b;
        &self.values[start..start + b]
    }

    /// All particles' blocks at one node.
    pub fn node(&self, node: usize) -> &[T] {
        let per = self.particles * self.d * self.m;
        &self.values[node * per..(node + 1) * per]
    }

    /// The field seen by target particle `i`, in the single-path form.
    pub fn particle_slice(&self, particle: usize) -> MalliavinLimitField<T> {
        let values = (0..self.grid.nodes())
            .flat_map(|k| self.value(particle, k).iter().copied())
            .collect();
        MalliavinLimitField {
            s_index: self.s_index,
            grid: self.grid,
            d: self.d,
            m: self.m,
            values,
        }
    }

    /// CSV rows `j,s,i,t,component,value`.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> Result<()> {
        if header {
            writeln!(w, "j,s,i,t,component,value")?;
        }
        let s = self.grid.time(self.s_index);
        for k in 0..self.grid.nodes() {
            let t = self.grid.time(k);
            for i in 0..self.particles {
                for (c, v) in self.value(i, k).iter().enumerate() {
                    writeln!(w, "{},{s},{i},{t},{c},{v}", self.j)?;
                }
            }
        }
        Ok(())
    }
}

fn check_source(s_index: usize, grid: &TimeGrid<impl Scalar>) -> Result<()> {
    if s_index > grid.steps() {
        return Err(Error::OutOfRange {
            what: "source node",
            index: s_index,
            bound: grid.nodes(),
        });
    }
    Ok(())
}

fn divergence<T: Scalar>(grid: &TimeGrid<T>, k: usize, particle: Option<usize>, state: &[T]) -> Error {
    Error::Divergence {
        t: grid.time(k).as_f64(),
        step: k,
        particle,
        state: state.iter().map(|v| v.as_f64()).collect(),
    }
}

/// Per-point coefficient derivatives needed by one linearised step.
struct Linearisation<T> {
    d: usize,
    drift: Vec<T>,
    grad_b: Vec<T>,
    /// `G·∇ₓb`
    drift_jac: Vec<T>,
    /// Jacobian of the drift increment map.
    incr_jac: Vec<T>,
    grad_sigma: Vec<T>,
    lions_b: Vec<T>,
    lions_sigma: Vec<T>,
    // scratch for the interacting update
    inner: Vec<T>,
    noise_terms: Vec<T>,
}

impl<T: Scalar> Linearisation<T> {
    fn new(d: usize, m: usize) -> Self {
        Self {
            d,
            drift: vec![T::zero(); d],
            grad_b: vec![T::zero(); d * d],
            drift_jac: vec![T::zero(); d * d],
            incr_jac: vec![T::zero(); d * d],
            grad_sigma: vec![T::zero(); m * d * d],
            lions_b: vec![T::zero(); d * d],
            lions_sigma: vec![T::zero(); m * d * d],
            inner: vec![T::zero(); d * m],
            noise_terms: vec![T::zero(); m * d * m],
        }
    }

    fn spatial<M: Model<T> + ?Sized>(
        &mut self,
        model: &M,
        scheme: Scheme,
        t: T,
        x: &[T],
        mu: &EmpiricalMeasure<T>,
        dt: T,
    ) {
        let d = self.d;
        model.drift(t, x, mu, &mut self.drift);
        model.grad_x_drift(t, x, mu, &mut self.grad_b);
        model.grad_x_diffusion(t, x, mu, &mut self.grad_sigma);
        scheme.drift_increment_jacobian(&self.drift, dt, &mut self.incr_jac);
        matmul(&self.incr_jac, &self.grad_b, d, d, d, &mut self.drift_jac);
    }
}

/// `out = a (r × k) · b (k × c)`.
#[inline]
fn matmul<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize, out: &mut [T]) {
    for i in 0..r {
        for j in 0..c {
            let mut acc = T::zero();
            for q in 0..k {
                acc += a[i * k + q] * b[q * c + j];
            }
            out[i * c + j] = acc;
        }
    }
}

/// `out += a (r × k) · b (k × c) · scale`.
#[inline]
fn matmul_acc<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize, scale: T, out: &mut [T]) {
    for i in 0..r {
        for j in 0..c {
            let mut acc = T::zero();
            for q in 0..k {
                acc += a[i * k + q] * b[q * c + j];
            }
            out[i * c + j] += acc * scale;
        }
    }
}

fn check_path<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    flow: &MeasureFlow<T>,
    path: &[T],
    increments: &[T],
) -> Result<()> {
    let grid = flow.grid();
    let (d, m) = (model.dim_state(), model.dim_noise());
    if path.len() != grid.nodes() * d {
        return Err(Error::GridMismatch(format!(
            "path has {} values, grid needs {}",
            path.len(),
            grid.nodes() * d
        )));
    }
    if increments.len() != grid.steps() * m {
        return Err(Error::GridMismatch(format!(
            "noise stream has {} values, grid needs {}",
            increments.len(),
            grid.steps() * m
        )));
    }
    Ok(())
}

/// Propagates `D_s Z_t` along one path of the frozen-flow SDE.
///
/// The limit equation carries no measure-derivative term: the flow is
/// deterministic.
pub fn malliavin_limit<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    scheme: Scheme,
    path: &[T],
    flow: &MeasureFlow<T>,
    s_index: usize,
    increments: &[T],
) -> Result<MalliavinLimitField<T>> {
    check_source(s_index, flow.grid())?;
    check_path(model, flow, path, increments)?;
    let (d, m) = (model.dim_state(), model.dim_noise());
    let mut initial = vec![T::zero(); d * m];
    let x_s = &path[s_index * d..(s_index + 1) * d];
    model.diffusion(flow.grid().time(s_index), x_s, flow.at(s_index), &mut initial);
    propagate_limit(model, scheme, path, flow, s_index, increments, &initial)
}

/// The linearised recursion of [`malliavin_limit`] started from an
/// arbitrary `d × m` block instead of `σ(t_s, Z_s, μ_s)`.
pub fn propagate_limit<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    scheme: Scheme,
    path: &[T],
    flow: &MeasureFlow<T>,
    s_index: usize,
    increments: &[T],
    initial: &[T],
) -> Result<MalliavinLimitField<T>> {
    check_source(s_index, flow.grid())?;
    check_path(model, flow, path, increments)?;
    let grid = *flow.grid();
    let (d, m) = (model.dim_state(), model.dim_noise());
    let b = d * m;
    if initial.len() != b {
        return Err(Error::DimensionMismatch {
            what: "initial derivative block",
            expected: b,
            got: initial.len(),
        });
    }
    let dt = grid.dt();
    let mut values = vec![T::zero(); grid.nodes() * b];
    values[s_index * b..(s_index + 1) * b].copy_from_slice(initial);
    if s_index < grid.steps() {
        values.copy_within(s_index * b..(s_index + 1) * b, (s_index + 1) * b);
    }
    let mut lin = Linearisation::new(d, m);
    for k in (s_index + 1)..grid.steps() {
        let x = &path[k * d..(k + 1) * d];
        lin.spatial(model, scheme, grid.time(k), x, flow.at(k), dt);
        let (head, tail) = values.split_at_mut((k + 1) * b);
        let y = &head[k * b..];
        let next = &mut tail[..b];
        next.copy_from_slice(y);
        matmul_acc(&lin.drift_jac, y, d, d, m, T::one(), next);
        for l in 0..m {
            let dw = increments[k * m + l];
            matmul_acc(&lin.grad_sigma[l * d * d..(l + 1) * d * d], y, d, d, m, dw, next);
        }
        if !all_finite(next) {
            return Err(divergence(&grid, k, None, x));
        }
    }
    Ok(MalliavinLimitField {
        s_index,
        grid,
        d,
        m,
        values,
    })
}

/// Fields for every source node `s = 0..steps`, computed in parallel.
pub fn malliavin_limit_all<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    scheme: Scheme,
    path: &[T],
    flow: &MeasureFlow<T>,
    increments: &[T],
) -> Result<Vec<MalliavinLimitField<T>>> {
    (0..flow.grid().steps())
        .into_par_iter()
        .map(|s| malliavin_limit(model, scheme, path, flow, s, increments))
        .collect()
}

/// Propagates `D^j_s X^i_t` jointly for all `i` along an interacting system.
///
/// When the model's Lions derivatives do not depend on the evaluation point
/// the `1/N` sums reduce to a running mean of the derivative blocks, which
/// makes a step `O(N)`; otherwise every pair `(i, k)` is evaluated.
pub fn malliavin_ips<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    scheme: Scheme,
    paths: &ParticlePaths<T>,
    s_index: usize,
    j: usize,
    noise: &NoiseBundle<T>,
) -> Result<MalliavinIpsField<T>> {
    let grid = *paths.grid();
    check_source(s_index, &grid)?;
    let n = paths.particles();
    if j >= n {
        return Err(Error::OutOfRange {
            what: "source particle",
            index: j,
            bound: n,
        });
    }
    if !grid.same_as(noise.grid()) || noise.particles() != n {
        return Err(Error::GridMismatch(
            "noise bundle does not match the particle paths".into(),
        ));
    }
    let (d, m) = (model.dim_state(), model.dim_noise());
    if paths.dim() != d || noise.dim_noise() != m {
        return Err(Error::DimensionMismatch {
            what: "path or noise dimension",
            expected: d,
            got: paths.dim(),
        });
    }
    let b = d * m;
    let per = n * b;
    let dt = grid.dt();
    let mut values = vec![T::zero(); grid.nodes() * per];
    {
        let mu = paths.measure_at(s_index)?;
        let start = s_index * per + j * b;
        model.diffusion(
            grid.time(s_index),
            paths.state(j, s_index),
            &mu,
            &mut values[start..start + b],
        );
        if s_index < grid.steps() {
            values.copy_within(s_index * per..(s_index + 1) * per, (s_index + 1) * per);
        }
    }
    let fast = model.lions_independent_of_v();
    let inv_n = T::one() / T::of(n as f64);
    for k in (s_index + 1)..grid.steps() {
        let mu = paths.measure_at(k)?;
        let t = grid.time(k);
        let (head, tail) = values.split_at_mut((k + 1) * per);
        let cur = &head[k * per..];
        let next = &mut tail[..per];
        let mean_block: Vec<T> = if fast {
            let mut acc = vec![T::zero(); b];
            for blk in cur.chunks_exact(b) {
                for (a, &v) in acc.iter_mut().zip(blk) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv_n);
            acc
        } else {
            Vec::new()
        };
        let update = |(i, out): (usize, &mut [T]), lin: &mut Linearisation<T>| -> Result<()> {
            let x = paths.state(i, k);
            lin.spatial(model, scheme, t, x, &mu, dt);
            let y = &cur[i * b..(i + 1) * b];
            let Linearisation {
                grad_b,
                incr_jac,
                grad_sigma,
                lions_b,
                lions_sigma,
                inner,
                noise_terms,
                ..
            } = lin;
            // drift: G·(∇ₓb·D^i + (1/N)Σ_k ∂_μb(X^k)·D^k)
            inner.iter_mut().for_each(|v| *v = T::zero());
            matmul_acc(grad_b, y, d, d, m, T::one(), inner);
            // diffusion column l: ∇ₓσ_l·D^i + (1/N)Σ_k ∂_μσ_l(X^k)·D^k
            noise_terms.iter_mut().for_each(|v| *v = T::zero());
            for l in 0..m {
                let blk = &grad_sigma[l * d * d..(l + 1) * d * d];
                matmul_acc(blk, y, d, d, m, T::one(), &mut noise_terms[l * b..(l + 1) * b]);
            }
            if fast {
                model.lions_drift(t, x, &mu, x, lions_b);
                model.lions_diffusion(t, x, &mu, x, lions_sigma);
                matmul_acc(lions_b, &mean_block, d, d, m, T::one(), inner);
                for l in 0..m {
                    let blk = &lions_sigma[l * d * d..(l + 1) * d * d];
                    matmul_acc(
                        blk,
                        &mean_block,
                        d,
                        d,
                        m,
                        T::one(),
                        &mut noise_terms[l * b..(l + 1) * b],
                    );
                }
            } else {
                for q in 0..n {
                    let v = paths.state(q, k);
                    let dq = &cur[q * b..(q + 1) * b];
                    model.lions_drift(t, x, &mu, v, lions_b);
                    model.lions_diffusion(t, x, &mu, v, lions_sigma);
                    matmul_acc(lions_b, dq, d, d, m, inv_n, inner);
                    for l in 0..m {
                        let blk = &lions_sigma[l * d * d..(l + 1) * d * d];
                        matmul_acc(blk, dq, d, d, m, inv_n, &mut noise_terms[l * b..(l + 1) * b]);
                    }
                }
            }
            out.copy_from_slice(y);
            matmul_acc(incr_jac, inner, d, d, m, T::one(), out);
            let dw = noise.increment(i, k);
            for l in 0..m {
                for (o, &v) in out.iter_mut().zip(&noise_terms[l * b..(l + 1) * b]) {
                    *o += v * dw[l];
                }
            }
            if !all_finite(out) {
                return Err(divergence(&grid, k, Some(i), x));
            }
            Ok(())
        };
        if n >= PAR_MIN_PARTICLES {
            next.par_chunks_mut(b)
                .enumerate()
                .try_for_each_init(|| Linearisation::new(d, m), |lin, item| update(item, lin))?;
        } else {
            let mut lin = Linearisation::new(d, m);
            next.chunks_mut(b)
                .enumerate()
                .try_for_each(|item| update(item, &mut lin))?;
        }
    }
    Ok(MalliavinIpsField {
        j,
        s_index,
        grid,
        particles: n,
        d,
        m,
        values,
    })
}

/// `t_n ↦ Σ_{k<n} D_{s_k}X_{t_n}[·, component] · h_k · dt`, the grid
/// quadrature of the pairing `⟨D_·X_t, h⟩` over the cells before `t_n`. Every cell with `h_k ≠ 0` needs its field.
pub fn directional_derivative<T: Scalar>(
    fields: &[MalliavinLimitField<T>],
    h: &[T],
    component: usize,
) -> Result<Vec<T>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::invalid("directional derivative needs at least one field"))?;
    let grid = first.grid;
    let (d, m) = (first.d, first.m);
    if h.len() != grid.steps() {
        return Err(Error::GridMismatch(format!(
            "direction has {} cells, grid has {}",
            h.len(),
            grid.steps()
        )));
    }
    if component >= m {
        return Err(Error::OutOfRange {
            what: "noise component",
            index: component,
            bound: m,
        });
    }
    let mut seen = vec![false; grid.steps()];
    for f in fields {
        if !f.grid.same_as(&grid) || f.d != d || f.m != m {
            return Err(Error::GridMismatch("fields live on different grids".into()));
        }
        if f.s_index < grid.steps() {
            if seen[f.s_index] {
                return Err(Error::invalid(format!("duplicate field for source node {}", f.s_index)));
            }
            seen[f.s_index] = true;
        }
    }
    if let Some(k) = (0..grid.steps()).find(|&k| h[k] != T::zero() && !seen[k]) {
        return Err(Error::invalid(format!(
            "direction is nonzero on cell {k} but no field was supplied"
        )));
    }
    let dt = grid.dt();
    let mut out = vec![T::zero(); grid.nodes() * d];
    for f in fields.iter().filter(|f| f.s_index < grid.steps()) {
        let w = h[f.s_index] * dt;
        if w == T::zero() {
            continue;
        }
        // X_k depends on the increment of cell s only when s < k
        for node in (f.s_index + 1)..grid.nodes() {
            let blk = f.value(node);
            for a in 0..d {
                out[node * d + a] += blk[a * m + component] * w;
            }
        }
    }
    Ok(out)
}

/// The system re-simulated by [`finite_difference_oracle`].
#[derive(Clone, Copy, Debug)]
pub enum OracleSystem<'a, T> {
    /// Paths with the measure argument frozen to a flow (limit equation,
    /// or the non-interacting particle system).
    FrozenFlow(&'a MeasureFlow<T>),
    Interacting,
}

/// Central difference `(X^{+ε} − X^{−ε}) / 2ε` under the Wiener shift
/// `ΔW_{k,c} ↦ ΔW_{k,c} ± ε·h_k·dt` applied to stream `stream` only.
/// Returns derivative paths for every particle.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_oracle<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    scheme: Scheme,
    system: OracleSystem<'_, T>,
    init: &[T],
    noise: &NoiseBundle<T>,
    stream: usize,
    component: usize,
    h: &[T],
    epsilon: T,
) -> Result<ParticlePaths<T>> {
    if !(epsilon > T::zero()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let plus = noise.shifted(stream, component, h, epsilon)?;
    let minus = noise.shifted(stream, component, h, -epsilon)?;
    let run = |nb: &NoiseBundle<T>| match system {
        OracleSystem::FrozenFlow(flow) => crate::sde::simulate_frozen_flow(model, flow, init, nb, scheme),
        OracleSystem::Interacting => crate::particle::simulate_ips(model, noise.grid(), nb, init, scheme),
    };
    let xp = run(&plus)?;
    let xm = run(&minus)?;
    let scale = T::one() / (epsilon + epsilon);
    let values = xp
        .values()
        .iter()
        .zip(xm.values())
        .map(|(&p, &q)| (p - q) * scale)
        .collect();
    ParticlePaths::from_values(*xp.grid(), xp.particles(), xp.dim(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;
    use crate::particle::simulate_ips;
    use crate::sde::noise::sample_noise;
    use crate::sde::{simulate_frozen_flow, InitSampler};

    fn ou(kappa: f64, sigma0: f64) -> BuiltinModel<f64> {
        BuiltinModel::MeanFieldOU { a: 1.0, kappa, sigma0 }
    }

    fn setup(
        model: &BuiltinModel<f64>,
        steps: usize,
        scheme: Scheme,
    ) -> (MeasureFlow<f64>, ParticlePaths<f64>, NoiseBundle<f64>) {
        let g = TimeGrid::new(1.0, steps).unwrap();
        let flow = MeasureFlow::constant(g, EmpiricalMeasure::from_scalars(&[0.2, 0.6]).unwrap());
        let noise = sample_noise(&g, 2, 1, 17).unwrap();
        let paths = simulate_frozen_flow(model, &flow, &[0.5, -0.4], &noise, scheme).unwrap();
        (flow, paths, noise)
    }

    #[test]
    fn limit_field_is_zero_before_source_and_sigma_at_source() {
        let m = BuiltinModel::ScalarStateDiffusion {
            a: 1.0,
            kappa: 0.5,
            sigma1: 0.2,
            sigma2: 0.1,
        };
        let (flow, paths, noise) = setup(&m, 50, Scheme::EulerMaruyama);
        let f = malliavin_limit(&m, Scheme::EulerMaruyama, paths.path(0), &flow, 20, noise.stream(0)).unwrap();
        for k in 0..20 {
            assert_eq!(f.value(k)[0].to_bits(), 0.0f64.to_bits());
        }
        let sigma = 0.2 + 0.1 * paths.state(0, 20)[0].tanh();
        assert_eq!(f.value(20)[0], sigma);
        assert_eq!(f.value(21)[0], sigma);
        assert!(malliavin_limit(&m, Scheme::EulerMaruyama, paths.path(0), &flow, 51, noise.stream(0)).is_err());
    }

    #[test]
    fn zero_diffusion_gives_zero_field() {
        let m = ou(0.5, 0.0);
        let (flow, paths, noise) = setup(&m, 40, Scheme::EulerMaruyama);
        let f = malliavin_limit(&m, Scheme::EulerMaruyama, paths.path(1), &flow, 3, noise.stream(1)).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn limit_field_matches_closed_form_for_ou() {
        let m = ou(0.5, 0.3);
        let (flow, paths, noise) = setup(&m, 1000, Scheme::EulerMaruyama);
        for s in [0, 250, 900] {
            let f = malliavin_limit(&m, Scheme::EulerMaruyama, paths.path(0), &flow, s, noise.stream(0)).unwrap();
            let g = flow.grid();
            for k in s..=1000 {
                let exact = 0.3 * (-(g.time(k) - g.time(s))).exp();
                assert!((f.value(k)[0] - exact).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn scaling_the_initial_block_scales_the_field() {
        let m = BuiltinModel::ScalarStateDiffusion {
            a: 1.0,
            kappa: 0.5,
            sigma1: 0.2,
            sigma2: 0.1,
        };
        let (flow, paths, noise) = setup(&m, 60, Scheme::EulerMaruyama);
        let base = propagate_limit(
            &m,
            Scheme::EulerMaruyama,
            paths.path(0),
            &flow,
            5,
            noise.stream(0),
            &[0.7],
        )
        .unwrap();
        let twice = propagate_limit(
            &m,
            Scheme::EulerMaruyama,
            paths.path(0),
            &flow,
            5,
            noise.stream(0),
            &[1.4],
        )
        .unwrap();
        for (a, b) in base.values().iter().zip(twice.values()) {
            assert_eq!(2.0 * a, *b);
        }
        let third = propagate_limit(
            &m,
            Scheme::EulerMaruyama,
            paths.path(0),
            &flow,
            5,
            noise.stream(0),
            &[0.7 * 0.3],
        )
        .unwrap();
        for (a, b) in base.values().iter().zip(third.values()) {
            assert!((0.3 * a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn ips_field_initial_condition_and_zero_past() {
        let m = ou(0.5, 0.3);
        let g = TimeGrid::new(1.0, 40).unwrap();
        let noise = sample_noise(&g, 5, 1, 3).unwrap();
        let init: Vec<f64> = InitSampler::Gaussian { mean: 1.0, std: 0.5 }.sample(5, 1, 1);
        let x = simulate_ips(&m, &g, &noise, &init, Scheme::EulerMaruyama).unwrap();
        let f = malliavin_ips(&m, Scheme::EulerMaruyama, &x, 10, 2, &noise).unwrap();
        for k in 0..10 {
            assert!(f.node(k).iter().all(|v| v.to_bits() == 0));
        }
        for i in 0..5 {
            let expect = if i == 2 { 0.3 } else { 0.0 };
            assert_eq!(f.value(i, 10)[0], expect);
        }
        assert!(malliavin_ips(&m, Scheme::EulerMaruyama, &x, 10, 5, &noise).is_err());
        assert!(malliavin_ips(&m, Scheme::EulerMaruyama, &x, 41, 0, &noise).is_err());
    }

    #[test]
    fn no_interaction_keeps_cross_derivatives_zero() {
        let m = BuiltinModel::ScalarStateDiffusion {
            a: 1.0,
            kappa: 0.0,
            sigma1: 0.2,
            sigma2: 0.1,
        };
        let g = TimeGrid::new(1.0, 80).unwrap();
        let noise = sample_noise(&g, 6, 1, 3).unwrap();
        let init = vec![0.1; 6];
        let x = simulate_ips(&m, &g, &noise, &init, Scheme::EulerMaruyama).unwrap();
        let f = malliavin_ips(&m, Scheme::EulerMaruyama, &x, 7, 1, &noise).unwrap();
        for k in 0..=80 {
            for i in (0..6).filter(|&i| i != 1) {
                assert_eq!(f.value(i, k)[0], 0.0);
            }
        }
    }

    /// First-moment model with the Lions derivative routed through the
    /// generic pairwise path.
    struct Pairwise(BuiltinModel<f64>);

    impl Model<f64> for Pairwise {
        fn dim_state(&self) -> usize {
            1
        }
        fn dim_noise(&self) -> usize {
            1
        }
        fn regularity(&self) -> crate::model::Regularity {
            self.0.regularity()
        }
        fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<f64>, out: &mut [f64]) {
            self.0.drift(t, x, mu, out)
        }
        fn diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<f64>, out: &mut [f64]) {
            self.0.diffusion(t, x, mu, out)
        }
        fn grad_x_drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<f64>, out: &mut [f64]) {
            self.0.grad_x_drift(t, x, mu, out)
        }
        fn grad_x_diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<f64>, out: &mut [f64]) {
            self.0.grad_x_diffusion(t, x, mu, out)
        }
        fn lions_drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<f64>, v: &[f64], out: &mut [f64]) {
            self.0.lions_drift(t, x, mu, v, out)
        }
        fn lions_diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure<f64>, v: &[f64], out: &mut [f64]) {
            self.0.lions_diffusion(t, x, mu, v, out)
        }
    }

    #[test]
    fn running_mean_fast_path_matches_pairwise_sums() {
        let inner = BuiltinModel::DoubleWell {
            kappa: 0.5,
            sigma0: 0.3,
        };
        let g = TimeGrid::new(1.0, 100).unwrap();
        let noise = sample_noise(&g, 7, 1, 3).unwrap();
        let init: Vec<f64> = InitSampler::Gaussian { mean: 0.0, std: 1.0 }.sample(7, 1, 1);
        let x = simulate_ips(&inner, &g, &noise, &init, Scheme::TamedEuler).unwrap();
        let fast = malliavin_ips(&inner, Scheme::TamedEuler, &x, 20, 3, &noise).unwrap();
        let slow = malliavin_ips(&Pairwise(inner), Scheme::TamedEuler, &x, 20, 3, &noise).unwrap();
        for (a, b) in fast.values.iter().zip(&slow.values) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn directional_derivative_pairing() {
        let m = ou(0.5, 0.3);
        let (flow, paths, noise) = setup(&m, 30, Scheme::EulerMaruyama);
        let fields = malliavin_limit_all(&m, Scheme::EulerMaruyama, paths.path(0), &flow, noise.stream(0)).unwrap();
        assert_eq!(fields.len(), 30);
        let zero = directional_derivative(&fields, &[0.0; 30], 0).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let mut point = vec![0.0; 30];
        point[12] = 1.0;
        let dd = directional_derivative(&fields, &point, 0).unwrap();
        let dt = flow.grid().dt();
        for k in 0..=30 {
            let expect = if k > 12 { fields[12].value(k)[0] * dt } else { 0.0 };
            assert_eq!(dd[k], expect);
        }

        let h1: Vec<f64> = (0..30).map(|k| (k as f64 * 0.37).sin()).collect();
        let h2: Vec<f64> = (0..30).map(|k| 0.5 + (k % 3) as f64).collect();
        let sum: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a + b).collect();
        let a = directional_derivative(&fields, &h1, 0).unwrap();
        let b = directional_derivative(&fields, &h2, 0).unwrap();
        let c = directional_derivative(&fields, &sum, 0).unwrap();
        for k in 0..=30 {
            assert!((a[k] + b[k] - c[k]).abs() <= 1e-12);
        }

        assert!(directional_derivative(&fields, &h1[..29], 0).is_err());
        assert!(directional_derivative(&fields, &h1, 1).is_err());
        assert!(directional_derivative(&fields[..10], &h1, 0).is_err());
        assert!(directional_derivative(&fields[..10], &point, 0).is_err());
    }

    #[test]
    fn oracle_is_exact_on_affine_model() {
        let m = ou(0.5, 0.3);
        let (flow, paths, noise) = setup(&m, 200, Scheme::EulerMaruyama);
        let fields = malliavin_limit_all(&m, Scheme::EulerMaruyama, paths.path(0), &flow, noise.stream(0)).unwrap();
        let h: Vec<f64> = (0..200).map(|k| 1.0 + 0.5 * ((k / 20) % 2) as f64).collect();
        let var = directional_derivative(&fields, &h, 0).unwrap();
        let fd = finite_difference_oracle(
            &m,
            Scheme::EulerMaruyama,
            OracleSystem::FrozenFlow(&flow),
            &[0.5, -0.4],
            &noise,
            0,
            0,
            &h,
            1e-4,
        )
        .unwrap();
        for k in 0..=200 {
            assert!((var[k] - fd.path(0)[k]).abs() <= 1e-9);
        }
        assert!(fd.path(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_agrees_with_ips_propagation() {
        let m = BuiltinModel::ScalarStateDiffusion {
            a: 1.0,
            kappa: 0.8,
            sigma1: 0.2,
            sigma2: 0.1,
        };
        let g = TimeGrid::new(1.0, 60).unwrap();
        let n = 4;
        let noise = sample_noise(&g, n, 1, 12).unwrap();
        let init: Vec<f64> = InitSampler::Gaussian { mean: 0.5, std: 0.5 }.sample(n, 1, 2);
        let x = simulate_ips(&m, &g, &noise, &init, Scheme::EulerMaruyama).unwrap();
        let j = 1;
        let fields: Vec<MalliavinIpsField<f64>> = (0..60)
            .map(|s| malliavin_ips(&m, Scheme::EulerMaruyama, &x, s, j, &noise).unwrap())
            .collect();
        let h: Vec<f64> = (0..60).map(|k| 0.5 + (k as f64 * 0.1).cos().abs()).collect();
        let fd = finite_difference_oracle(
            &m,
            Scheme::EulerMaruyama,
            OracleSystem::Interacting,
            &init,
            &noise,
            j,
            0,
            &h,
            1e-5,
        )
        .unwrap();
        for i in 0..n {
            let slices: Vec<_> = fields.iter().map(|f| f.particle_slice(i)).collect();
            let var = directional_derivative(&slices, &h, 0).unwrap();
            let scale = var.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for k in 0..=60 {
                assert!((var[k] - fd.path(i)[k]).abs() <= 1e-7 * scale.max(1e-3), "i={i} k={k}");
            }
        }
    }

    #[test]
    fn oracle_rejects_nonpositive_epsilon() {
        let m = ou(0.5, 0.3);
        let (flow, _, noise) = setup(&m, 10, Scheme::EulerMaruyama);
        let h = vec![1.0; 10];
        assert!(finite_difference_oracle(
            &m,
            Scheme::EulerMaruyama,
            OracleSystem::FrozenFlow(&flow),
            &[0.0, 0.0],
            &noise,
            0,
            0,
            &h,
            0.0
        )
        .is_err());
    }

    #[test]
    fn csv_export_layout() {
        let m = ou(0.5, 0.3);
        let (flow, paths, noise) = setup(&m, 2, Scheme::EulerMaruyama);
        let f = malliavin_limit(&m, Scheme::EulerMaruyama, paths.path(0), &flow, 1, noise.stream(0)).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf, 0, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "j,s,i,t,component,value\n0,0.5,0,0,0,0\n0,0.5,0,0.5,0,0.3\n0,0.5,0,1,0,0.3\n"
        );
    }
}
