//! Reference implementations used as oracles. None of these call into the
//! library's algorithms; they are written from the definitions.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, independent of the library's sampler
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Minimum over all permutations of the mean squared paired distance.
pub fn brute_force_w2(x: &[f64], y: &[f64], dim: usize) -> f64 {
    let n = x.len() / dim;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = (0..n)
            .map(|i| {
                (0..dim)
                    .map(|a| (x[i * dim + a] - y[p[i] * dim + a]).powi(2))
                    .sum::<f64>()
            })
            .sum();
        best = best.min(c);
    });
    (best / n as f64).sqrt()
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

/// `D_sZ_t` for the mean-field OU model: `σ₀·e^{−a(t−s)}` for `t ≥ s`.
pub fn ou_malliavin(a: f64, sigma0: f64, s: f64, t: f64) -> f64 {
    if t < s {
        0.0
    } else {
        sigma0 * (-a * (t - s)).exp()
    }
}

/// Mean of the mean-field OU law: `m₀·e^{(κ−a)t}`.
pub fn ou_mean(a: f64, kappa: f64, m0: f64, t: f64) -> f64 {
    m0 * ((kappa - a) * t).exp()
}

/// Stationary variance of `dX = −aX dt + σ dW`.
pub fn ou_stationary_variance(a: f64, sigma: f64) -> f64 {
    sigma * sigma / (2.0 * a)
}

/// Exact OU transition over `h` driven by the same Brownian increment `dw`
/// (the stochastic integral is approximated by its value on a fine path).
pub fn ou_exact_path(a: f64, sigma: f64, x0: f64, fine_dw: &[f64], fine_dt: f64) -> f64 {
    // X_T = e^{−aT}x₀ + σ ∫ e^{−a(T−r)} dW_r, the integral on the fine grid
    // with the exponential integrated exactly over each sub-cell
    let t_end = fine_dw.len() as f64 * fine_dt;
    let mut acc = 0.0;
    for (k, dw) in fine_dw.iter().enumerate() {
        let r0 = k as f64 * fine_dt;
        let w = ((-a * (t_end - r0 - fine_dt)).exp() - (-a * (t_end - r0)).exp()) / (a * fine_dt);
        acc += w * dw;
    }
    (-a * t_end).exp() * x0 + sigma * acc
}

/// Plain-loop interacting mean-field OU system, explicit Euler.
pub fn naive_ips_ou(a: f64, kappa: f64, sigma0: f64, x0: &[f64], dw: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let n = x0.len();
    let steps = dw[0].len();
    let mut paths = vec![vec![0.0; steps + 1]; n];
    let mut x = x0.to_vec();
    for i in 0..n {
        paths[i][0] = x[i];
    }
    for k in 0..steps {
        let mean = x.iter().sum::<f64>() / n as f64;
        let next: Vec<f64> = (0..n)
            .map(|i| x[i] + (-a * x[i] + kappa * mean) * dt + sigma0 * dw[i][k])
            .collect();
        x = next;
        for i in 0..n {
            paths[i][k + 1] = x[i];
        }
    }
    paths
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
