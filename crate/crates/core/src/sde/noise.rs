//! Seeded Brownian increments with one deterministic substream per particle.
//!
//! Particle `i` draws from ChaCha8 keyed by the bundle seed with stream
//! id `i`, so its increments do not depend on how many particles share the
//! bundle or on the order in which workers generate them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::grid::TimeGrid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The RNG for substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a parent seed with a purpose tag and an index (splitmix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Increments `ΔW ~ N(0, dt·I_m)`, laid out particle-major:
/// `[particle][step][component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBundle<T> {
    seed: u64,
    grid: TimeGrid<T>,
    particles: usize,
    dim_noise: usize,
    increments: Vec<T>,
}

pub fn sample_noise<T: Scalar>(
    grid: &TimeGrid<T>,
    particles: usize,
    dim_noise: usize,
    seed: u64,
) -> Result<NoiseBundle<T>> {
    if particles == 0 || dim_noise == 0 {
        return Err(Error::invalid(
            "noise bundle needs at least one particle and one component",
        ));
    }
    let per = grid.steps() * dim_noise;
    let scale = grid.dt().sqrt();
    let mut increments = vec![T::zero(); particles * per];
    increments.par_chunks_mut(per).enumerate().for_each(|(i, chunk)| {
        let mut rng = substream(seed, i as u64);
        for z in chunk.iter_mut() {
            *z = T::standard_normal(&mut rng) * scale;
        }
    });
    Ok(NoiseBundle {
        seed,
        grid: *grid,
        particles,
        dim_noise,
        increments,
    })
}

impl<T: Scalar> NoiseBundle<T> {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn as_slice(&self) -> &[T] {
        &self.increments
    }

    /// All increments of one particle, `steps × m`.
    pub fn stream(&self, particle: usize) -> &[T] {
        let per = self.grid.steps() * self.dim_noise;
        &self.increments[particle * per..(particle + 1) * per]
    }

    pub fn increment(&self, particle: usize, step: usize) -> &[T] {
        let m = self.dim_noise;
        let start = (particle * self.grid.steps() + step) * m;
        &self.increments[start..start + m]
    }

    /// Copy with `ΔW_{k,c} += shift · h_k · dt` on one particle's stream
    /// (the Wiener shift in direction `h`).
    pub fn shifted(&self, particle: usize, component: usize, h: &[T], shift: T) -> Result<Self> {
        if particle >= self.particles {
            return Err(Error::OutOfRange {
                what: "particle",
                index: particle,
                bound: self.particles,
            });
        }
        if component >= self.dim_noise {
            return Err(Error::OutOfRange {
                what: "noise component",
                index: component,
                bound: self.dim_noise,
            });
        }
        if h.len() != self.grid.steps() {
            return Err(Error::GridMismatch(format!(
                "direction has {} cells, grid has {}",
                h.len(),
                self.grid.steps()
            )));
        }
        let mut out = self.clone();
        let dt = self.grid.dt();
        for (k, &hk) in h.iter().enumerate() {
            let idx = (particle * self.grid.steps() + k) * self.dim_noise + component;
            out.increments[idx] += shift * hk * dt;
        }
        Ok(out)
    }

    /// The first `particles` streams (identical to sampling with fewer particles).
    pub fn truncated(&self, particles: usize) -> Result<Self> {
        if particles == 0 || particles > self.particles {
            return Err(Error::OutOfRange {
                what: "particle count",
                index: particles,
                bound: self.particles,
            });
        }
        let per = self.grid.steps() * self.dim_noise;
        Ok(Self {
            seed: self.seed,
            grid: self.grid,
            particles,
            dim_noise: self.dim_noise,
            increments: self.increments[..particles * per].to_vec(),
        })
    }

    /// Swaps two particles' streams.
    pub fn swap_streams(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let per = self.grid.steps() * self.dim_noise;
        let (lo, hi) = (a.min(b), a.max(b));
        let (head, tail) = self.increments.split_at_mut(hi * per);
        head[lo * per..(lo + 1) * per].swap_with_slice(&mut tail[..per]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_bundles() {
        let g = TimeGrid::new(1.0f64, 50).unwrap();
        let a = sample_noise(&g, 6, 2, 9).unwrap();
        let b = sample_noise(&g, 6, 2, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_noise(&g, 6, 2, 10).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn particle_stream_is_independent_of_particle_count() {
        let g = TimeGrid::new(1.0f64, 64).unwrap();
        let small = sample_noise(&g, 4, 1, 123).unwrap();
        let large = sample_noise(&g, 8, 1, 123).unwrap();
        assert_eq!(small.stream(3), large.stream(3));
        assert_eq!(large.truncated(4).unwrap(), small);
    }

    #[test]
    fn law_of_large_numbers() {
        let g = TimeGrid::new(1.0f64, 1000).unwrap();
        let b = sample_noise(&g, 1000, 1, 42).unwrap();
        let n = b.as_slice().len() as f64;
        let dt = g.dt();
        let mean = b.as_slice().iter().sum::<f64>() / n;
        let var = b.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 4.0 * (dt / n).sqrt(), "mean {mean}");
        assert!((var - dt).abs() / dt <= 0.01, "var {var}");
    }

    #[test]
    fn shift_touches_only_one_stream() {
        let g = TimeGrid::new(1.0f64, 10).unwrap();
        let b = sample_noise(&g, 3, 1, 1).unwrap();
        let h = vec![1.0; 10];
        let s = b.shifted(1, 0, &h, 0.5).unwrap();
        assert_eq!(s.stream(0), b.stream(0));
        assert_eq!(s.stream(2), b.stream(2));
        for (x, y) in s.stream(1).iter().zip(b.stream(1)) {
            assert!((x - y - 0.05).abs() < 1e-15);
        }
        assert!(b.shifted(3, 0, &h, 0.5).is_err());
        assert!(b.shifted(0, 0, &h[..9], 0.5).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|i| derive_seed(42, 1, i)).collect();
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), s.len());
        assert_ne!(derive_seed(42, 1, 0), derive_seed(42, 2, 0));
    }
}

/// Purpose tags for [`derive_seed`].
pub mod tags {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const PICARD: u64 = 3;
    pub const REPETITION: u64 = 4;
    pub const FLOW: u64 = 5;
    pub const DIRECTION: u64 = 6;
}
