//! Time grids and seeded Brownian increment bundles.
//!
//! Every solver in this crate consumes the same randomness object: a
//! [`PathBundle`] holding the increments of one common Brownian motion per
//! scenario and `n` idiosyncratic Brownian motions per scenario, all on a
//! shared uniform grid. Generation is keyed per `(seed, role, scenario,
//! particle)` so that
//!
//! * regenerating with the same seed reproduces bit-identical arrays,
//! * the common-noise stream does not change when the particle count `n`
//!   changes (particle-count sweeps stay coupled to identical common noise),
//! * parallel generation is independent of thread schedule.
//!
//! Increments are stored; path values are derived on demand.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Uniform time grid on `[0, T]` with `K` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    num_steps: usize,
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Build the uniform grid `0 = t_0 < ... < t_K = T` with `dt = T/K`.
    pub fn new(horizon: f64, num_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        if num_steps == 0 {
            return Err(Error::invalid("number of time steps must be >= 1"));
        }
        let nodes = (0..=num_steps)
            .map(|k| horizon * k as f64 / num_steps as f64)
            .collect();
        Ok(TimeGrid {
            horizon,
            num_steps,
            nodes,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `K`; the grid has `K + 1` nodes.
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }
}

/// Which Brownian family an index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    /// The common noise shared by all particles of one scenario.
    Common,
    /// One particle's idiosyncratic noise.
    Idiosyncratic,
}

const ROLE_COMMON: u64 = 0x434f4d4d; // "COMM"
const ROLE_IDIO: u64 = 0x4944494f; // "IDIO"

/// Hard cap on the total number of stored increments (common + idiosyncratic).
const MAX_ELEMENTS: u128 = 1 << 31;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic per-cell generator keyed by `(seed, role, scenario, particle)`.
///
/// The key is expanded to a 32-byte ChaCha seed through splitmix64, so the
/// common and idiosyncratic streams are independent sub-streams and the
/// output does not depend on generation order.
fn keyed_rng(seed: u64, role: u64, scenario: u64, particle: u64) -> ChaCha8Rng {
    let mut state = seed
        ^ role.wrapping_mul(0x9e3779b97f4a7c15)
        ^ scenario.wrapping_mul(0xd1b54a32d192ed03)
        ^ particle.wrapping_mul(0x8cb92ba72f3d8dd7);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// All Brownian increments for one experiment: `num_scenarios` common paths,
/// each with `num_particles` idiosyncratic paths, in dimension `noise_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    grid: TimeGrid,
    noise_dim: usize,
    num_particles: usize,
    num_scenarios: usize,
    seed: u64,
    /// Layout `[scenario][step][coord]`, scaled to variance `dt` per coordinate.
    common: Vec<f64>,
    /// Layout `[scenario][particle][step][coord]`.
    idio: Vec<f64>,
}

impl PathBundle {
    /// Sample a bundle of independent Gaussian increments with variance `dt`
    /// per coordinate. Deterministic in `(grid, n, M, d, seed)`.
    pub fn sample(
        grid: &TimeGrid,
        num_particles: usize,
        num_scenarios: usize,
        noise_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_particles == 0 || num_scenarios == 0 || noise_dim == 0 {
            return Err(Error::invalid(
                "particle count, scenario count and noise dimension must be >= 1",
            ));
        }
        let steps = grid.num_steps();
        let idio_len = (num_scenarios as u128)
            * (num_particles as u128)
            * (steps as u128)
            * (noise_dim as u128);
        let common_len = (num_scenarios as u128) * (steps as u128) * (noise_dim as u128);
        if idio_len + common_len > MAX_ELEMENTS {
            return Err(Error::Resource(format!(
                "requested bundle holds {} increments, cap is {}",
                idio_len + common_len,
                MAX_ELEMENTS
            )));
        }

        let sqrt_dt = grid.dt().sqrt();
        let block = steps * noise_dim;

        let mut common = vec![0.0; common_len as usize];
        common
            .par_chunks_mut(block)
            .enumerate()
            .for_each(|(m, chunk)| {
                let mut rng = keyed_rng(seed, ROLE_COMMON, m as u64, 0);
                for v in chunk.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *v = g * sqrt_dt;
                }
            });

        let mut idio = vec![0.0; idio_len as usize];
        idio.par_chunks_mut(block).enumerate().for_each(|(cell, chunk)| {
            let m = cell / num_particles;
            let i = cell % num_particles;
            let mut rng = keyed_rng(seed, ROLE_IDIO, m as u64, i as u64);
            for v in chunk.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v = g * sqrt_dt;
            }
        });

        Ok(PathBundle {
            grid: grid.clone(),
            noise_dim,
            num_particles,
            num_scenarios,
            seed,
            common,
            idio,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn num_particles(&self) -> usize {
        self.num_particles
    }

    pub fn num_scenarios(&self) -> usize {
        self.num_scenarios
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Increment of the common Brownian motion over step `k` of scenario `m`.
    pub fn common_increment(&self, m: usize, k: usize) -> &[f64] {
        let d = self.noise_dim;
        let base = (m * self.grid.num_steps() + k) * d;
        &self.common[base..base + d]
    }

    /// Increment of particle `i`'s Brownian motion over step `k` of scenario `m`.
    pub fn idio_increment(&self, m: usize, i: usize, k: usize) -> &[f64] {
        let d = self.noise_dim;
        let base = ((m * self.num_particles + i) * self.grid.num_steps() + k) * d;
        &self.idio[base..base + d]
    }

    #[cfg(test)]
    pub(crate) fn common_raw(&self) -> &[f64] {
        &self.common
    }

    #[cfg(test)]
    pub(crate) fn idio_raw(&self) -> &[f64] {
        &self.idio
    }

    #[cfg(test)]
    pub(crate) fn from_raw_parts(
        grid: TimeGrid,
        num_particles: usize,
        num_scenarios: usize,
        noise_dim: usize,
        seed: u64,
        common: Vec<f64>,
        idio: Vec<f64>,
    ) -> PathBundle {
        debug_assert_eq!(common.len(), num_scenarios * grid.num_steps() * noise_dim);
        debug_assert_eq!(
            idio.len(),
            num_scenarios * num_particles * grid.num_steps() * noise_dim
        );
        PathBundle {
            grid,
            noise_dim,
            num_particles,
            num_scenarios,
            seed,
            common,
            idio,
        }
    }

    /// Path values at all `K + 1` grid nodes (prefix sums of increments,
    /// starting at 0). Returns a flat `[node][coord]` vector.
    pub fn cumulative_path(&self, kind: PathKind, m: usize, i: usize) -> Result<Vec<f64>> {
        if m >= self.num_scenarios {
            return Err(Error::invalid(format!(
                "scenario index {m} out of range (have {})",
                self.num_scenarios
            )));
        }
        let d = self.noise_dim;
        let steps = self.grid.num_steps();
        let mut out = vec![0.0; (steps + 1) * d];
        for k in 0..steps {
            let inc = match kind {
                PathKind::Common => self.common_increment(m, k),
                PathKind::Idiosyncratic => {
                    if i >= self.num_particles {
                        return Err(Error::invalid(format!(
                            "particle index {i} out of range (have {})",
                            self.num_particles
                        )));
                    }
                    self.idio_increment(m, i, k)
                }
            };
            for c in 0..d {
                out[(k + 1) * d + c] = out[k * d + c] + inc[c];
            }
        }
        Ok(out)
    }

    /// A bundle holding particles `[first, first + count)` of `self`, sharing
    /// the common stream. Used to carve independent idiosyncratic replicas
    /// out of one oversampled bundle.
    pub fn particle_slice(&self, first: usize, count: usize) -> Result<PathBundle> {
        if count == 0 || first + count > self.num_particles {
            return Err(Error::invalid(format!(
                "particle slice [{first}, {}) out of range (have {})",
                first + count,
                self.num_particles
            )));
        }
        let d = self.noise_dim;
        let steps = self.grid.num_steps();
        let block = steps * d;
        let mut idio = Vec::with_capacity(self.num_scenarios * count * block);
        for m in 0..self.num_scenarios {
            let base = (m * self.num_particles + first) * block;
            idio.extend_from_slice(&self.idio[base..base + count * block]);
        }
        Ok(PathBundle {
            grid: self.grid.clone(),
            noise_dim: d,
            num_particles: count,
            num_scenarios: self.num_scenarios,
            seed: self.seed,
            common: self.common.clone(),
            idio,
        })
    }
}

// ── Binary dump ─────────────────────────────────────────────────────────
//
// Layout (all fields little-endian):
//   magic   8 bytes  b"BSDEPATH"
//   version u32      1
//   T       f64
//   K       u64
//   d       u64
//   n       u64
//   M       u64
//   seed    u64
// followed by the common increments in (m, k, coord) row-major order and the
// idiosyncratic increments in (m, i, k, coord) row-major order, as f64.

const DUMP_MAGIC: &[u8; 8] = b"BSDEPATH";
const DUMP_VERSION: u32 = 1;

/// Serialize a bundle to the crate's binary dump format.
pub fn write_bundle<W: Write>(bundle: &PathBundle, mut w: W) -> std::io::Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&bundle.grid.horizon().to_le_bytes())?;
    w.write_all(&(bundle.grid.num_steps() as u64).to_le_bytes())?;
    w.write_all(&(bundle.noise_dim as u64).to_le_bytes())?;
    w.write_all(&(bundle.num_particles as u64).to_le_bytes())?;
    w.write_all(&(bundle.num_scenarios as u64).to_le_bytes())?;
    w.write_all(&bundle.seed.to_le_bytes())?;
    for v in &bundle.common {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &bundle.idio {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_invalid<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::invalid(format!("bundle dump truncated while reading {what}")))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_invalid(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Decode a bundle from the binary dump format, validating the header and
/// every increment. Untrusted input: never panics, never over-allocates.
pub fn read_bundle<R: Read>(mut r: R) -> Result<PathBundle> {
    let mut magic = [0u8; 8];
    read_exact_or_invalid(&mut r, &mut magic, "magic")?;
    if &magic != DUMP_MAGIC {
        return Err(Error::invalid("bundle dump has wrong magic bytes"));
    }
    let mut ver = [0u8; 4];
    read_exact_or_invalid(&mut r, &mut ver, "version")?;
    let version = u32::from_le_bytes(ver);
    if version != DUMP_VERSION {
        return Err(Error::invalid(format!(
            "unsupported bundle dump version {version}"
        )));
    }
    let mut tb = [0u8; 8];
    read_exact_or_invalid(&mut r, &mut tb, "horizon")?;
    let horizon = f64::from_le_bytes(tb);
    let steps = read_u64(&mut r, "step count")?;
    let d = read_u64(&mut r, "noise dimension")?;
    let n = read_u64(&mut r, "particle count")?;
    let m = read_u64(&mut r, "scenario count")?;
    let seed = read_u64(&mut r, "seed")?;

    if steps == 0 || d == 0 || n == 0 || m == 0 {
        return Err(Error::invalid("bundle dump header has a zero dimension"));
    }
    let common_len = (m as u128) * (steps as u128) * (d as u128);
    let idio_len = common_len * n as u128;
    if common_len + idio_len > MAX_ELEMENTS {
        return Err(Error::Resource(format!(
            "bundle dump declares {} increments, cap is {}",
            common_len + idio_len,
            MAX_ELEMENTS
        )));
    }
    let grid = TimeGrid::new(horizon, steps as usize)?;

    let mut read_block = |len: usize, what: &str| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            read_exact_or_invalid(&mut r, &mut b, what)?;
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "bundle dump contains a non-finite {what} increment"
                )));
            }
            out.push(v);
        }
        Ok(out)
    };
    let common = read_block(common_len as usize, "common")?;
    let idio = read_block(idio_len as usize, "idiosyncratic")?;

    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|e| Error::Io {
        path: "<bundle dump>".into(),
        source: e,
    })? != 0
    {
        return Err(Error::invalid("bundle dump has trailing bytes"));
    }

    Ok(PathBundle {
        grid,
        noise_dim: d as usize,
        num_particles: n as usize,
        num_scenarios: m as usize,
        seed,
        common,
        idio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_single_step() {
        let g = TimeGrid::new(1.0, 1).unwrap();
        assert_eq!(g.nodes(), &[0.0, 1.0]);
        assert_eq!(g.dt(), 1.0);
    }

    #[test]
    fn grid_fifty_steps() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        assert_eq!(g.nodes().len(), 51);
        assert!((g.dt() - 0.02).abs() < 1e-15);
        assert_eq!(g.node(50), 1.0);
        for k in 0..50 {
            assert!((g.node(k + 1) - g.node(k) - g.dt()).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(-1.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
    }

    #[test]
    fn same_seed_reproduces_bit_identical_bundles() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let a = PathBundle::sample(&g, 5, 3, 2, 42).unwrap();
        let b = PathBundle::sample(&g, 5, 3, 2, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let a = PathBundle::sample(&g, 5, 3, 1, 7).unwrap();
        let b = PathBundle::sample(&g, 5, 3, 1, 8).unwrap();
        assert_ne!(a.common_raw(), b.common_raw());
    }

    #[test]
    fn increment_variance_matches_dt() {
        // 1000 samples per stream; a chi-square interval at 99% for the
        // sample variance of 1000 Gaussians is within +-11.5% of the truth,
        // so [0.9 dt, 1.1 dt] holds for all but ~2% of seeds. Seed fixed.
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let b = PathBundle::sample(&g, 1, 1, 1, 2024).unwrap();
        let dt = g.dt();
        for raw in [b.idio_raw(), b.common_raw()] {
            let n = raw.len() as f64;
            let mean = raw.iter().sum::<f64>() / n;
            let var = raw.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            assert!(
                var > 0.9 * dt && var < 1.1 * dt,
                "sample variance {var} outside [0.9 dt, 1.1 dt], dt = {dt}"
            );
            assert!(mean.abs() < 4.0 * (dt / n).sqrt(), "sample mean {mean} too large");
        }
    }

    #[test]
    fn common_stream_invariant_under_particle_count() {
        let g = TimeGrid::new(2.0, 30).unwrap();
        let small = PathBundle::sample(&g, 2, 4, 1, 99).unwrap();
        let large = PathBundle::sample(&g, 17, 4, 1, 99).unwrap();
        assert_eq!(small.common_raw(), large.common_raw());
        // Shared particles keep identical increments as well.
        for m in 0..4 {
            for i in 0..2 {
                for k in 0..30 {
                    assert_eq!(small.idio_increment(m, i, k), large.idio_increment(m, i, k));
                }
            }
        }
    }

    #[test]
    fn common_and_idio_streams_uncorrelated() {
        // Pair each idiosyncratic increment with the common increment of its
        // (scenario, step, coord) cell; the empirical correlation over >= 1e4
        // samples must lie within +-4/sqrt(count).
        let g = TimeGrid::new(1.0, 100).unwrap();
        let b = PathBundle::sample(&g, 10, 10, 1, 5).unwrap();
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        let mut sxy = 0.0;
        let mut count = 0usize;
        for m in 0..10 {
            for i in 0..10 {
                for k in 0..100 {
                    let x = b.idio_increment(m, i, k)[0];
                    let y = b.common_increment(m, k)[0];
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                    count += 1;
                }
            }
        }
        assert!(count >= 10_000);
        let n = count as f64;
        let cov = sxy / n - sx / n * (sy / n);
        let vx = sxx / n - (sx / n) * (sx / n);
        let vy = syy / n - (sy / n) * (sy / n);
        let corr = cov / (vx * vy).sqrt();
        assert!(corr.abs() < 4.0 / n.sqrt(), "correlation {corr} too large");
    }

    #[test]
    fn cumulative_path_is_prefix_sum() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let mut b = PathBundle::sample(&g, 1, 1, 1, 0).unwrap();
        // Overwrite with a deterministic pattern {1, -1}.
        b.idio = vec![1.0, -1.0];
        let path = b.cumulative_path(PathKind::Idiosyncratic, 0, 0).unwrap();
        assert_eq!(path, vec![0.0, 1.0, 0.0]);

        b.idio = vec![0.0, 0.0];
        let path = b.cumulative_path(PathKind::Idiosyncratic, 0, 0).unwrap();
        assert_eq!(path, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn path_endpoint_equals_total_sum() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let b = PathBundle::sample(&g, 3, 2, 2, 11).unwrap();
        for m in 0..2 {
            for i in 0..3 {
                let path = b.cumulative_path(PathKind::Idiosyncratic, m, i).unwrap();
                for c in 0..2 {
                    // Independent summation oracle over the raw increments.
                    let total: f64 = (0..64).map(|k| b.idio_increment(m, i, k)[c]).sum();
                    let end = path[64 * 2 + c];
                    assert!((end - total).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cumulative_path_rejects_bad_indices() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let b = PathBundle::sample(&g, 2, 2, 1, 1).unwrap();
        assert!(b.cumulative_path(PathKind::Common, 2, 0).is_err());
        assert!(b.cumulative_path(PathKind::Idiosyncratic, 0, 2).is_err());
    }

    #[test]
    fn oversized_request_is_resource_error() {
        let g = TimeGrid::new(1.0, 1_000_000).unwrap();
        let err = PathBundle::sample(&g, 1_000_000, 1_000, 8, 0).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
    }

    #[test]
    fn particle_slice_matches_direct_indexing() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let big = PathBundle::sample(&g, 12, 3, 1, 77).unwrap();
        let slice = big.particle_slice(4, 4).unwrap();
        assert_eq!(slice.num_particles(), 4);
        assert_eq!(slice.common_raw(), big.common_raw());
        for m in 0..3 {
            for i in 0..4 {
                for k in 0..10 {
                    assert_eq!(slice.idio_increment(m, i, k), big.idio_increment(m, 4 + i, k));
                }
            }
        }
        assert!(big.particle_slice(10, 4).is_err());
    }

    #[test]
    fn dump_round_trip_is_bit_identical() {
        let g = TimeGrid::new(0.5, 8).unwrap();
        let b = PathBundle::sample(&g, 3, 2, 2, 13).unwrap();
        let mut buf = Vec::new();
        write_bundle(&b, &mut buf).unwrap();
        let back = read_bundle(buf.as_slice()).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn dump_decoder_rejects_malformed_input() {
        let g = TimeGrid::new(0.5, 8).unwrap();
        let b = PathBundle::sample(&g, 2, 2, 1, 13).unwrap();
        let mut buf = Vec::new();
        write_bundle(&b, &mut buf).unwrap();

        // Truncation at every prefix length must error, never panic.
        for cut in [0, 4, 8, 11, 12, 20, 59, buf.len() - 1] {
            assert!(read_bundle(&buf[..cut]).is_err(), "cut at {cut} accepted");
        }
        // Wrong magic.
        let mut bad = buf.clone();
        bad[0] ^= 0xff;
        assert!(read_bundle(bad.as_slice()).is_err());
        // Trailing garbage.
        let mut long = buf.clone();
        long.push(0);
        assert!(read_bundle(long.as_slice()).is_err());
        // Non-finite increment.
        let mut nan = buf.clone();
        let header = 8 + 4 + 8 + 8 * 5;
        nan[header..header + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(read_bundle(nan.as_slice()).is_err());
        // Absurd declared size must not allocate.
        let mut huge = buf[..header].to_vec();
        huge[20..28].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(read_bundle(huge.as_slice()).is_err());
    }
}
