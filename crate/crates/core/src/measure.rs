//! Equally weighted empirical measures, measure flows, and W₂ distances.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sde::grid::TimeGrid;
use crate::sde::noise::substream;

/// `N` equally weighted atoms in `ℝᵈ`, stored row-major. The mean is cached
/// because first-moment models read it once per coefficient evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure<T> {
    dim: usize,
    points: Vec<T>,
    mean: Vec<T>,
}

impl<T: Scalar> EmpiricalMeasure<T> {
    pub fn new(dim: usize, points: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("measure dimension must be positive"));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "measure needs a positive multiple of {dim} coordinates, got {}",
                points.len()
            )));
        }
        if !crate::scalar::all_finite(&points) {
            return Err(Error::invalid("measure atoms must be finite"));
        }
        let n = points.len() / dim;
        // summing in sorted order makes the mean independent of atom order,
        // which keeps particle systems exactly exchangeable
        let inv = T::one() / T::of(n as f64);
        let mut column = Vec::with_capacity(n);
        let mean = (0..dim)
            .map(|a| {
                column.clear();
                column.extend(points.iter().skip(a).step_by(dim).copied());
                column.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite atoms"));
                column.iter().fold(T::zero(), |acc, &x| acc + x) * inv
            })
            .collect();
        Ok(Self { dim, points, mean })
    }

    pub fn from_scalars(points: &[T]) -> Result<Self> {
        Self::new(1, points.to_vec())
    }

    pub fn dirac(x: &[T]) -> Result<Self> {
        Self::new(x.len(), x.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn atom(&self, k: usize) -> &[T] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[T]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }
}

/// Arithmetic mean of the atoms.
pub fn first_moment<T: Scalar>(mu: &EmpiricalMeasure<T>) -> Vec<T> {
    mu.mean().to_vec()
}

/// Mean of `|x|²` over the atoms.
pub fn second_moment<T: Scalar>(mu: &EmpiricalMeasure<T>) -> T {
    let total: T = mu.atoms().map(crate::scalar::norm_sq).sum();
    total / T::of(mu.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum W2Method {
    SortedPairing,
    ExactAssignment,
    Sliced { projections: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct W2<T> {
    pub value: T,
    pub method: W2Method,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct W2Options {
    /// Largest `N` solved by exact assignment when `d > 1`.
    pub exact_max_atoms: usize,
    pub projections: usize,
    pub seed: u64,
}

impl Default for W2Options {
    fn default() -> Self {
        Self {
            exact_max_atoms: 512,
            projections: 64,
            seed: 0x5eed_0f51_1ced,
        }
    }
}

fn check_pair<T: Scalar>(mu: &EmpiricalMeasure<T>, nu: &EmpiricalMeasure<T>) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            what: "measure dimension",
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    if mu.len() != nu.len() {
        return Err(Error::DimensionMismatch {
            what: "measure size",
            expected: mu.len(),
            got: nu.len(),
        });
    }
    Ok(())
}

pub fn wasserstein2<T: Scalar>(mu: &EmpiricalMeasure<T>, nu: &EmpiricalMeasure<T>) -> Result<W2<T>> {
    wasserstein2_with(mu, nu, &W2Options::default())
}

/// W₂ between equal-size empirical measures: sorted pairing for `d = 1`,
/// exact assignment for `d > 1` up to `exact_max_atoms`, sliced beyond.
pub fn wasserstein2_with<T: Scalar>(
    mu: &EmpiricalMeasure<T>,
    nu: &EmpiricalMeasure<T>,
    opts: &W2Options,
) -> Result<W2<T>> {
    check_pair(mu, nu)?;
    if mu.dim() == 1 {
        return Ok(W2 {
            value: sorted_pairing_w2(mu.points(), nu.points()),
            method: W2Method::SortedPairing,
        });
    }
    if mu.len() <= opts.exact_max_atoms {
        Ok(W2 {
            value: exact_assignment_w2(mu, nu)?,
            method: W2Method::ExactAssignment,
        })
    } else {
        Ok(W2 {
            value: sliced_w2(mu, nu, opts.projections, opts.seed)?,
            method: W2Method::Sliced {
                projections: opts.projections,
            },
        })
    }
}

/// One-dimensional W₂: the monotone coupling of sorted atoms is optimal.
pub fn sorted_pairing_w2<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite atoms"));
    ys.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite atoms"));
    sorted_w2_presorted(&xs, &ys)
}

pub(crate) fn sorted_w2_presorted<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    let total: T = xs.iter().zip(ys).map(|(&a, &b)| (a - b) * (a - b)).sum();
    (total / T::of(xs.len() as f64)).sqrt()
}

/// Exact W₂ by solving the assignment problem on squared distances
/// (shortest augmenting paths with dual potentials, `O(N³)`).
pub fn exact_assignment_w2<T: Scalar>(mu: &EmpiricalMeasure<T>, nu: &EmpiricalMeasure<T>) -> Result<T> {
    check_pair(mu, nu)?;
    let n = mu.len();
    let cost: Vec<f64> = mu
        .atoms()
        .flat_map(|a| {
            nu.atoms()
                .map(move |b| a.iter().zip(b).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum::<f64>())
        })
        .collect();
    let assignment = solve_assignment(n, &cost);
    // sum in sorted order so that W₂(μ,ν) and W₂(ν,μ) agree bit for bit
    let mut matched: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).collect();
    matched.sort_unstable_by(f64::total_cmp);
    let total: f64 = matched.iter().sum();
    Ok(T::of((total / n as f64).sqrt()))
}

/// Minimum-cost perfect matching for a dense `n × n` cost matrix.
/// Returns `col[i]`, the column assigned to row `i`.
fn solve_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based arrays; index 0 is the virtual root of each augmentation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0usize; n];
    for j in 1..=n {
        col[row_of[j] - 1] = j - 1;
    }
    col
}

/// Sliced W₂ over `projections` random unit directions, rescaled by `√d`
/// so that it estimates W₂ itself rather than its projected average.
pub fn sliced_w2<T: Scalar>(
    mu: &EmpiricalMeasure<T>,
    nu: &EmpiricalMeasure<T>,
    projections: usize,
    seed: u64,
) -> Result<T> {
    check_pair(mu, nu)?;
    if projections == 0 {
        return Err(Error::invalid("sliced W2 needs at least one projection"));
    }
    let d = mu.dim();
    let mut rng = substream(seed, 0);
    let mut acc = 0.0f64;
    let mut px = Vec::with_capacity(mu.len());
    let mut py = Vec::with_capacity(nu.len());
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| f64::standard_normal(&mut rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir[rng.random_range(0..d)] = 1.0;
        } else {
            dir.iter_mut().for_each(|x| *x /= norm);
        }
        let project = |a: &[T]| a.iter().zip(&dir).map(|(&p, &q)| p.as_f64() * q).sum::<f64>();
        px.clear();
        py.clear();
        px.extend(mu.atoms().map(project));
        py.extend(nu.atoms().map(project));
        acc += sorted_pairing_w2(&px, &py).powi(2);
    }
    Ok(T::of((d as f64 * acc / projections as f64).sqrt()))
}

/// `((1/N)·Σ|xᵢ−yᵢ|²)^{1/2}` for paired atoms; dominates W₂ because the
/// index pairing is one admissible coupling.
pub fn empirical_w2_upper_bound<T: Scalar>(x: &[T], y: &[T], dim: usize) -> Result<T> {
    if dim == 0 || x.len() != y.len() || !x.len().is_multiple_of(dim) || x.is_empty() {
        return Err(Error::invalid(format!(
            "paired arrays must have equal, nonzero length divisible by {dim} (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() / dim;
    // same cost and summation order as the assignment solver, so an optimal
    // index pairing reproduces the exact value bit for bit instead of
    // undercutting it by an ulp
    let mut costs: Vec<f64> = x
        .chunks_exact(dim)
        .zip(y.chunks_exact(dim))
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum::<f64>())
        .collect();
    costs.sort_unstable_by(f64::total_cmp);
    let total: f64 = costs.iter().sum();
    Ok(T::of((total / n as f64).sqrt()))
}

/// One empirical measure per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureFlow<T> {
    grid: TimeGrid<T>,
    measures: Vec<EmpiricalMeasure<T>>,
}

impl<T: Scalar> MeasureFlow<T> {
    pub fn new(grid: TimeGrid<T>, measures: Vec<EmpiricalMeasure<T>>) -> Result<Self> {
        if measures.len() != grid.nodes() {
            return Err(Error::GridMismatch(format!(
                "flow has {} measures for {} grid nodes",
                measures.len(),
                grid.nodes()
            )));
        }
        let (n, d) = (measures[0].len(), measures[0].dim());
        if measures.iter().any(|m| m.len() != n || m.dim() != d) {
            return Err(Error::invalid("flow measures must share size and dimension"));
        }
        Ok(Self { grid, measures })
    }

    /// The same measure at every node.
    pub fn constant(grid: TimeGrid<T>, mu: EmpiricalMeasure<T>) -> Self {
        Self {
            grid,
            measures: vec![mu; grid.nodes()],
        }
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn at(&self, k: usize) -> &EmpiricalMeasure<T> {
        &self.measures[k]
    }

    /// Measure in force at time `t` (piecewise constant, left endpoint).
    pub fn at_time(&self, t: T) -> &EmpiricalMeasure<T> {
        &self.measures[self.grid.cell_of(t)]
    }

    pub fn measures(&self) -> &[EmpiricalMeasure<T>] {
        &self.measures
    }

    pub fn atoms_per_node(&self) -> usize {
        self.measures[0].len()
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    /// Mean of the measure at each node.
    pub fn means(&self) -> Vec<Vec<T>> {
        self.measures.iter().map(|m| m.mean().to_vec()).collect()
    }

    /// CSV rows `node,time,atom,x0,…,x{d-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "node,time,atom")?;
        for a in 0..self.dim() {
            write!(w, ",x{a}")?;
        }
        writeln!(w)?;
        for (k, mu) in self.measures.iter().enumerate() {
            let t = self.grid.time(k);
            for (j, atom) in mu.atoms().enumerate() {
                write!(w, "{k},{t},{j}")?;
                for x in atom {
                    write!(w, ",{x}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}
