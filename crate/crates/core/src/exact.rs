//! Closed-form large-N references on the cutoff mode lattice.
//!
//! `Ĉ(k) = 1/(2(|k|²+m))` is the free covariance and `Ĉ²` below always means
//! the Fourier data of the squared kernel, `(Ĉ∗Ĉ)(k)`, with both convolution
//! legs restricted to retained modes (the simulated theory's own
//! covariance).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Field, TorusGrid, C64};

/// Real, even function on the retained modes of a grid.
#[derive(Clone, Debug)]
pub struct SpectralFunction {
    pub label: String,
    pub grid: Arc<TorusGrid>,
    pub values: Vec<f64>,
}

impl SpectralFunction {
    pub fn new(grid: &Arc<TorusGrid>, label: impl Into<String>, values: Vec<f64>) -> Self {
        Self { label: label.into(), grid: Arc::clone(grid), values }
    }

    pub fn at(&self, k: &[i32]) -> Option<f64> {
        self.grid.mode_index(k).map(|i| self.values[i])
    }

    pub fn is_even(&self) -> bool {
        (0..self.values.len()).all(|i| self.values[i] == self.values[self.grid.conj_index(i)])
    }
}

/// Number of components in the bubble formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Components {
    Finite(usize),
    Infinite,
}

/// `Ĉ(k) = 1/(2(|k|²+m))`.
pub fn gff_hat(grid: &Arc<TorusGrid>) -> SpectralFunction {
    let values = (0..grid.mode_count()).map(|i| 0.5 / grid.omega(i)).collect();
    SpectralFunction::new(grid, "C_hat", values)
}

fn covariance_at(grid: &TorusGrid, k: [i32; 3]) -> f64 {
    let ksq: i32 = k.iter().map(|c| c * c).sum();
    0.5 / (ksq as f64 + grid.mass())
}

/// `(Ĉ∗Ĉ)(k)` by direct convolution over pairs of retained modes.
pub fn covariance_square_direct(grid: &TorusGrid) -> Vec<f64> {
    let kk = grid.cutoff() as i32;
    grid.modes()
        .iter()
        .map(|k| {
            let mut acc = 0.0;
            for j in grid.modes() {
                let r = [k[0] - j[0], k[1] - j[1], k[2] - j[2]];
                if r.iter().all(|c| c.abs() <= kk) {
                    acc += covariance_at(grid, *j) * covariance_at(grid, r);
                }
            }
            acc
        })
        .collect()
}

/// `(Ĉ∗Ĉ)(k)` by squaring the cutoff kernel on an alias-free grid and
/// transforming back.
pub fn covariance_square_transform(grid: &TorusGrid) -> Vec<f64> {
    let t = if grid.n() > 3 * grid.cutoff() { grid.transform() } else { grid.fine_transform() };
    let kernel: Vec<C64> = (0..grid.mode_count()).map(|i| C64::new(0.5 / grid.omega(i), 0.0)).collect();
    let (phys, _) = t.to_physical_pair(&kernel, None);
    let sq: Vec<f64> = phys.iter().map(|x| x * x).collect();
    let (spec, _) = t.to_spectral_pair(&sq, None);
    spec.iter().map(|c| c.re).collect()
}

/// `Ĉ²` on the retained modes.
pub fn c2_hat(grid: &Arc<TorusGrid>) -> SpectralFunction {
    SpectralFunction::new(grid, "C2_hat", covariance_square_direct(grid))
}

/// `(Ĉ∗Ĉ)(k)` on every mode where it is non-zero, `|k|_∞ ≤ 2K`, as
/// `(k, value)` pairs. This is the spectrum of `Σ_i Φ_i²` before truncation.
pub fn c2_hat_extended(grid: &TorusGrid) -> Vec<([i32; 3], f64)> {
    let dim = grid.dim();
    let reach = 2 * grid.cutoff() as i32;
    let side = (2 * reach + 1) as usize;
    let index = |k: [i32; 3]| -> usize { (0..dim).fold(0, |acc, a| acc * side + (k[a] + reach) as usize) };
    let mut values = vec![0.0; side.pow(dim as u32)];
    for j in grid.modes() {
        let cj = covariance_at(grid, *j);
        for l in grid.modes() {
            let k = [j[0] + l[0], j[1] + l[1], j[2] + l[2]];
            values[index(k)] += cj * covariance_at(grid, *l);
        }
    }
    let mut out = Vec::with_capacity(values.len());
    let mut k = [0i32; 3];
    for (flat, v) in values.into_iter().enumerate() {
        let mut rem = flat;
        for a in (0..dim).rev() {
            k[a] = (rem % side) as i32 - reach;
            rem /= side;
        }
        out.push((k, v));
    }
    out
}

/// `(Ĉ∗Ĉ)(k)` with the convolution over all of `Z^d` truncated at
/// `|j|_∞ ≤ reach` (the continuum reference), together with a bound on the
/// omitted tail.
pub fn c2_hat_continuum(grid: &TorusGrid, k: [i32; 3], reach: usize) -> (f64, f64) {
    let dim = grid.dim();
    let r = reach as i32;
    let mut acc = 0.0;
    let mut j = [0i32; 3];
    let side = (2 * r + 1) as usize;
    for flat in 0..side.pow(dim as u32) {
        let mut rem = flat;
        for a in (0..dim).rev() {
            j[a] = (rem % side) as i32 - r;
            rem /= side;
        }
        let l = [k[0] - j[0], k[1] - j[1], k[2] - j[2]];
        acc += covariance_at(grid, j) * covariance_at(grid, l);
    }
    // tail ≤ Σ_{|j|_∞ > reach} Ĉ(j) · max Ĉ ≈ Ĉ(0) · Σ_{|j|>reach} 1/(2|j|²)
    let shell_tail = match dim {
        1 => 1.0 / reach.max(1) as f64,
        2 => 8.0 / reach.max(1) as f64,
        _ => f64::INFINITY,
    };
    let bound = 2.0 * (0.5 / grid.mass()) * 0.5 * shell_tail;
    (acc, bound)
}

/// `2Ĉ²/(1 + 2((N+2)/N)Ĉ²)`, or `2Ĉ²/(1+2Ĉ²)` for infinite `N`.
pub fn bubble_two_point(grid: &Arc<TorusGrid>, components: Components) -> SpectralFunction {
    let factor = match components {
        Components::Finite(n) => (n as f64 + 2.0) / n as f64,
        Components::Infinite => 1.0,
    };
    let values = covariance_square_direct(grid)
        .into_iter()
        .map(|c2| 2.0 * c2 / (1.0 + 2.0 * factor * c2))
        .collect();
    SpectralFunction::new(grid, format!("bubble_{components:?}"), values)
}

/// Free-field baseline `2Ĉ²`.
pub fn free_two_point(grid: &Arc<TorusGrid>) -> SpectralFunction {
    let values = covariance_square_direct(grid).into_iter().map(|c2| 2.0 * c2).collect();
    SpectralFunction::new(grid, "free_2C2", values)
}

/// Large-N limit of `E[(1/N) :(Σ Φ_i²)²:]`, `-4 Σ_k Ĉ²(k)²/(1+2Ĉ²(k))`, summed
/// over every mode carried by `Σ Φ_i²` (`|k|_∞ ≤ 2K`).
pub fn eo4_limit(grid: &TorusGrid) -> Result<f64> {
    if grid.dim() != 2 {
        return Err(Error::InvalidParameter(format!("E[O4] limit is a d = 2 formula, got d = {}", grid.dim())));
    }
    Ok(c2_hat_extended(grid).iter().map(|(_, b)| -4.0 * b * b / (1.0 + 2.0 * b)).sum())
}

/// The same sum restricted to `|k|_∞ ≤ K`.
pub fn eo4_limit_retained(grid: &TorusGrid) -> Result<f64> {
    if grid.dim() != 2 {
        return Err(Error::InvalidParameter(format!("E[O4] limit is a d = 2 formula, got d = {}", grid.dim())));
    }
    Ok(covariance_square_direct(grid).iter().map(|b| -4.0 * b * b / (1.0 + 2.0 * b)).sum())
}

/// Partial bubble chain `2Ĉ² Σ_{l=0}^{L} (-2Ĉ²)^l` and, per mode, whether the
/// geometric ratio `2Ĉ²` is at least one (the chain diverges there).
pub fn geometric_bubble_check(grid: &Arc<TorusGrid>, order: usize) -> Result<(SpectralFunction, Vec<bool>)> {
    if order < 1 {
        return Err(Error::InvalidParameter("bubble chain order must be at least 1".into()));
    }
    Ok(bubble_chain(grid, order))
}

fn bubble_chain(grid: &Arc<TorusGrid>, order: usize) -> (SpectralFunction, Vec<bool>) {
    let c2 = covariance_square_direct(grid);
    let mut divergent = Vec::with_capacity(c2.len());
    let values = c2
        .iter()
        .map(|&b| {
            let r = 2.0 * b;
            divergent.push(r >= 1.0);
            let mut term = 1.0;
            let mut sum = 0.0;
            for _ in 0..=order {
                sum += term;
                term *= -r;
            }
            r * sum
        })
        .collect();
    (SpectralFunction::new(grid, format!("bubble_chain_L{order}"), values), divergent)
}

/// The reference spectrum as a field-shaped object, handy for CSV output.
pub fn as_field(f: &SpectralFunction) -> Field {
    Field::from_hermitian(&f.grid, f.values.iter().map(|&v| C64::new(v, 0.0)).collect())
}
