//! Reproducible space-time white noise and the free (Ornstein–Uhlenbeck)
//! field.
//!
//! Every Gaussian variate is a pure function of
//! `(seed, member, component, purpose, counter, mode)`: the tuple selects a
//! ChaCha8 stream and a word position, and Box–Muller turns two 64-bit words
//! into one complex normal. Workers may therefore draw any slice of the noise
//! in any order.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Field, TorusGrid, C64};

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Purpose {
    Dynamics = 0,
    Initial = 1,
    Reference = 2,
    Auxiliary = 3,
}

/// Coordinates of one counter-based noise stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub member: u32,
    pub component: u32,
    pub purpose: Purpose,
    silent: bool,
}

impl NoiseStream {
    pub fn new(seed: u64, member: u32, component: u32, purpose: Purpose) -> Self {
        assert!(component < (1 << 24), "component index exceeds 24 bits");
        Self { seed, member, component, purpose, silent: false }
    }

    /// A stream that yields zeros (test hook for deterministic dynamics).
    pub fn silent() -> Self {
        Self { seed: 0, member: 0, component: 0, purpose: Purpose::Dynamics, silent: true }
    }

    pub fn is_silent(&self) -> bool {
        self.silent
    }

    pub fn with_purpose(self, purpose: Purpose) -> Self {
        Self { purpose, ..self }
    }

    pub fn with_component(self, component: u32) -> Self {
        Self::new(self.seed, self.member, component, self.purpose)
    }

    fn stream_id(&self) -> u64 {
        ((self.member as u64) << 32) | ((self.component as u64) << 8) | self.purpose as u64
    }

    /// `count` independent standard complex pairs `(g₁, g₂)`, each
    /// component `N(0, 1)`, for block `counter`.
    pub fn standard_pairs(&self, counter: u64, count: usize) -> Vec<(f64, f64)> {
        if self.silent {
            return vec![(0.0, 0.0); count];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id());
        // two u64 words (four u32 words) per pair
        rng.set_word_pos(counter as u128 * count as u128 * 4);
        (0..count)
            .map(|_| {
                let x = rng.next_u64();
                let y = rng.next_u64();
                box_muller(x, y)
            })
            .collect()
    }
}

fn box_muller(x: u64, y: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((x >> 11) as f64 + 1.0) * SCALE;
    let u2 = (y >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Hermitian Gaussian field with `E|û(k)|² = variance(k)`, drawn from block
/// `counter` of `stream`.
pub fn gaussian_field(
    grid: &Arc<TorusGrid>,
    stream: &NoiseStream,
    counter: u64,
    variance: impl Fn(usize) -> f64,
) -> Field {
    let count = grid.mode_count();
    let zero = grid.zero_index();
    let draws = stream.standard_pairs(counter, count - zero);
    let mut coeffs = vec![C64::new(0.0, 0.0); count];
    // draws[0] feeds the zero mode, draws[j] the half-mode zero + j
    coeffs[zero] = C64::new(variance(zero).sqrt() * draws[0].0, 0.0);
    for (j, idx) in grid.half_modes().enumerate() {
        let (g1, g2) = draws[j + 1];
        let sd = (0.5 * variance(idx)).sqrt();
        let v = C64::new(sd * g1, sd * g2);
        coeffs[idx] = v;
        coeffs[count - 1 - idx] = v.conj();
    }
    Field::from_hermitian(grid, coeffs)
}

/// Space-time white-noise increment over `dt`: `E|ΔŴ(k)|² = dt` on every
/// retained mode.
pub fn white_increment(grid: &Arc<TorusGrid>, dt: f64, stream: &NoiseStream, step: u64) -> Result<Field> {
    check_dt(dt)?;
    Ok(gaussian_field(grid, stream, step, |_| dt))
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && !dt.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("time step dt = {dt} must be positive")))
    }
}

/// Per-mode coefficients of the exact linear flow over one step `dt`.
#[derive(Clone, Debug)]
pub struct OuPropagator {
    pub dt: f64,
    /// `e^{-ω dt}`
    pub decay: Vec<f64>,
    /// `(1 - e^{-ω dt}) / ω`
    pub phi1: Vec<f64>,
    /// `(1 - e^{-2ω dt}) / (2ω)`
    pub noise_variance: Vec<f64>,
}

impl OuPropagator {
    pub fn new(grid: &TorusGrid, dt: f64) -> Result<Self> {
        Self::with_shift(grid, dt, 0.0)
    }

    /// Propagator for `m - Δ + shift`.
    pub fn with_shift(grid: &TorusGrid, dt: f64, shift: f64) -> Result<Self> {
        check_dt(dt)?;
        let count = grid.mode_count();
        let mut decay = Vec::with_capacity(count);
        let mut phi1 = Vec::with_capacity(count);
        let mut noise_variance = Vec::with_capacity(count);
        for i in 0..count {
            let w = grid.omega(i) + shift;
            decay.push((-w * dt).exp());
            phi1.push(-(-w * dt).exp_m1() / w);
            noise_variance.push(-(-2.0 * w * dt).exp_m1() / (2.0 * w));
        }
        Ok(Self { dt, decay, phi1, noise_variance })
    }

    /// The exact Ornstein–Uhlenbeck increment `η` for `step`.
    pub fn increment(&self, grid: &Arc<TorusGrid>, stream: &NoiseStream, step: u64) -> Field {
        gaussian_field(grid, stream, step, |i| self.noise_variance[i])
    }

    /// `ẑ ← e^{-ω dt} ẑ + η`.
    pub fn advance(&self, z: &Field, eta: &Field) -> Field {
        let coeffs = z
            .coeffs()
            .iter()
            .zip(eta.coeffs())
            .zip(&self.decay)
            .map(|((zc, ec), d)| zc * *d + ec)
            .collect();
        Field::from_hermitian(z.grid(), coeffs)
    }
}

/// One exact-in-law step of `(∂_t - Δ + m) Z = ξ`.
pub fn ou_step(z: &Field, dt: f64, stream: &NoiseStream, step: u64) -> Result<Field> {
    let prop = OuPropagator::new(z.grid(), dt)?;
    let eta = prop.increment(z.grid(), stream, step);
    Ok(prop.advance(z, &eta))
}

/// `Ĉ(k) = 1/(2(|k|²+m))`, the stationary mode variance of the free field.
pub fn free_variance(grid: &TorusGrid, idx: usize) -> f64 {
    0.5 / grid.omega(idx)
}

/// One exact draw of the cutoff Gaussian free field `N(0, ½(m-Δ)^{-1})`.
pub fn sample_stationary_z(grid: &Arc<TorusGrid>, stream: &NoiseStream) -> Field {
    gaussian_field(grid, stream, 0, |i| free_variance(grid, i))
}

/// Stationary draw with mass shifted to `m + shift`.
pub fn sample_shifted_gff(grid: &Arc<TorusGrid>, stream: &NoiseStream, counter: u64, shift: f64) -> Field {
    gaussian_field(grid, stream, counter, |i| 0.5 / (grid.omega(i) + shift))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dim: usize, n: usize, k: usize, m: f64) -> Arc<TorusGrid> {
        TorusGrid::new(dim, n, k, m, 0.0).unwrap()
    }

    #[test]
    fn draws_are_pure_functions_of_the_tuple() {
        let s = NoiseStream::new(42, 3, 1, Purpose::Dynamics);
        let a = s.standard_pairs(17, 10);
        let b = s.standard_pairs(17, 10);
        assert_eq!(a, b);
        assert_ne!(a, s.standard_pairs(18, 10));
        assert_ne!(a, s.with_component(2).standard_pairs(17, 10));
        assert_ne!(a, s.with_purpose(Purpose::Initial).standard_pairs(17, 10));
        assert_ne!(a, NoiseStream::new(42, 4, 1, Purpose::Dynamics).standard_pairs(17, 10));
        assert_ne!(a, NoiseStream::new(43, 3, 1, Purpose::Dynamics).standard_pairs(17, 10));
    }

    #[test]
    fn white_increment_rejects_nonpositive_dt() {
        let g = grid(2, 8, 2, 1.0);
        let s = NoiseStream::new(1, 0, 0, Purpose::Dynamics);
        assert!(white_increment(&g, 0.0, &s, 0).is_err());
        assert!(white_increment(&g, -1.0, &s, 0).is_err());
        assert!(ou_step(&Field::zeros(&g), 0.0, &s, 0).is_err());
    }

    #[test]
    fn white_increment_vanishes_as_dt_goes_to_zero() {
        let g = grid(2, 8, 2, 1.0);
        let s = NoiseStream::new(1, 0, 0, Purpose::Dynamics);
        let w = white_increment(&g, 1e-300, &s, 0).unwrap();
        assert!(w.l2_norm() < 1e-140);
        assert!(w.is_hermitian());
    }

    #[test]
    fn white_increment_real_part_variance() {
        // Var Re ΔŴ(e₁) = dt/2 = 0.05 over 10⁶ draws
        let g = grid(1, 4, 1, 1.0);
        let s = NoiseStream::new(7, 0, 0, Purpose::Dynamics);
        let idx = g.mode_index(&[1]).unwrap();
        let draws = 1_000_000u64;
        let (mut s1, mut s2, mut cross) = (0.0, 0.0, 0.0);
        let other = g.zero_index();
        for step in 0..draws {
            let w = white_increment(&g, 0.1, &s, step).unwrap();
            let x = w.coeffs()[idx].re;
            s1 += x;
            s2 += x * x;
            cross += x * w.coeffs()[other].re;
        }
        let n = draws as f64;
        let var = s2 / n - (s1 / n).powi(2);
        // standard error of a normal sample variance: σ²√(2/n)
        let se = 0.05 * (2.0 / n).sqrt();
        assert!((var - 0.05).abs() < 3.0 * se, "var = {var}");
        // E[ΔŴ(e₁)ΔŴ(0)] = 0: sd of the product mean is sqrt(0.05 · 0.1 / n)
        let se_cross = (0.05f64 * 0.1 / n).sqrt();
        assert!((cross / n).abs() < 3.0 * se_cross, "cross = {}", cross / n);
    }

    #[test]
    fn infinite_step_lands_on_stationary_variance() {
        let g = grid(2, 8, 2, 1.0);
        let p = OuPropagator::new(&g, f64::INFINITY).unwrap();
        for i in 0..g.mode_count() {
            assert_eq!(p.decay[i], 0.0);
            assert!((p.noise_variance[i] - free_variance(&g, i)).abs() < 1e-16);
        }
    }

    #[test]
    fn silent_stream_gives_pure_decay() {
        let g = grid(2, 8, 2, 1.0);
        let z = sample_stationary_z(&g, &NoiseStream::new(5, 0, 0, Purpose::Initial));
        let next = ou_step(&z, 0.3, &NoiseStream::silent(), 0).unwrap();
        for i in 0..g.mode_count() {
            let expect = z.coeffs()[i] * (-g.omega(i) * 0.3).exp();
            assert!((next.coeffs()[i] - expect).norm() < 1e-15);
        }
    }

    #[test]
    fn zero_mode_ou_long_run_variance() {
        // K = 0, m = 1: stationary variance 1/(2m) = 0.5
        let g = TorusGrid::new(1, 2, 0, 1.0, 0.0).unwrap();
        let s = NoiseStream::new(11, 0, 0, Purpose::Dynamics);
        let dt = 0.5;
        let mut z = Field::zeros(&g);
        let mut samples = Vec::new();
        for step in 0..200_000u64 {
            z = ou_step(&z, dt, &s, step).unwrap();
            if step >= 100 {
                samples.push(z.mean() * z.mean());
            }
        }
        let (mean, se) = crate::stats::batch_means(&samples, 100).unwrap();
        assert!((mean - 0.5).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn stationary_draw_single_mode_variance() {
        let g = TorusGrid::new(1, 2, 0, 1.0, 0.0).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|r| sample_stationary_z(&g, &NoiseStream::new(3, r, 0, Purpose::Initial)).mean())
            .collect();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let (m, se) = crate::stats::mean_and_se(&sq);
        assert!((m - 0.5).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn independent_streams_are_uncorrelated() {
        let g = grid(2, 8, 2, 1.0);
        let reps = 4000;
        let mut prods = Vec::with_capacity(reps);
        for r in 0..reps as u32 {
            let a = sample_stationary_z(&g, &NoiseStream::new(9, r, 0, Purpose::Initial));
            let b = sample_stationary_z(&g, &NoiseStream::new(9, r, 1, Purpose::Initial));
            let ua = a.to_physical();
            let ub = b.to_physical();
            prods.push(ua.iter().zip(&ub).map(|(x, y)| x * y).sum::<f64>() / ua.len() as f64);
        }
        let (m, se) = crate::stats::mean_and_se(&prods);
        assert!(m.abs() < 3.0 * se, "{m} ± {se}");
    }
}
