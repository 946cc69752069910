//! Renormalization constants of the cutoff theory, Wick squares, and the
//! self-consistent mass-shift equations.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact;
use crate::lattice::{dealiased_product, Field, TorusGrid};

/// Counterterm constants of a cutoff grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterterms {
    /// `a = Σ_k 1/(2(|k|²+m))`
    pub a: f64,
    /// second-order constant, 3D only (zero otherwise)
    pub b: f64,
}

impl Counterterms {
    pub fn for_grid(grid: &TorusGrid) -> Self {
        let a = wick_constant_a(grid);
        let b = if grid.dim() == 3 { second_order_constant_b(grid).unwrap_or(0.0) } else { 0.0 };
        Self { a, b }
    }

    pub fn none() -> Self {
        Self { a: 0.0, b: 0.0 }
    }
}

/// `a = E[Z(x)²] = Σ_{|k|_∞ ≤ K} 1/(2(|k|²+m))`.
pub fn wick_constant_a(grid: &TorusGrid) -> f64 {
    (0..grid.mode_count()).map(|i| 0.5 / grid.omega(i)).sum()
}

/// `b = Σ_k 2 (Ĉ∗Ĉ)(k) / (|k|²+m)` over retained `k`, where the convolution
/// runs over pairs of retained modes. Only defined in three dimensions.
pub fn second_order_constant_b(grid: &TorusGrid) -> Result<f64> {
    if grid.dim() != 3 {
        return Err(Error::InvalidParameter(format!(
            "second-order constant needs d = 3, got d = {}",
            grid.dim()
        )));
    }
    let cc = exact::covariance_square_transform(grid);
    Ok(cc.iter().enumerate().map(|(i, v)| 2.0 * v / grid.omega(i)).sum())
}

/// `:f²: = f² - a`, the square taken with spectral truncation.
pub fn wick_square(f: &Field, a: f64) -> Field {
    dealiased_product(f, f).expect("same field").shift(-a)
}

/// Residual `F(μ) = ½ Σ (1/(ω+μ) - 1/ω) - μ` of the renormalized gap
/// equation for the given symbols `ω`.
pub fn renormalized_gap_residual(omegas: &[f64], mu: f64) -> f64 {
    0.5 * omegas.iter().map(|w| 1.0 / (w + mu) - 1.0 / w).sum::<f64>() - mu
}

const ROOT_TOL: f64 = 1e-12;

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f(lo) > 0 > f(hi), f decreasing
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..400 {
        mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() <= ROOT_TOL && hi - lo < 1e-14 * (1.0 + mid.abs()) || mid == lo || mid == hi {
            break;
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

/// Root of the renormalized gap equation on `(-min ω, ∞)`.
pub fn mu_root_renormalized(omegas: &[f64]) -> f64 {
    let floor = omegas.iter().cloned().fold(f64::INFINITY, f64::min);
    let lo = if floor.is_finite() { -0.5 * floor } else { -1.0 };
    bisect(lo, 1.0, |mu| renormalized_gap_residual(omegas, mu))
}

/// Self-consistent mass shift of the Wick-renormalized mean-field theory on
/// a grid. The residual is strictly decreasing with `F(0) = 0`, so the
/// answer is zero to solver tolerance.
pub fn mu_fixed_point_renormalized(grid: &TorusGrid) -> f64 {
    let omegas: Vec<f64> = (0..grid.mode_count()).map(|i| grid.omega(i)).collect();
    mu_root_renormalized(&omegas)
}

/// How the one-dimensional mode sum is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeSum {
    /// `|k| ≤ K`
    Truncated(usize),
    /// all of `Z`, via `Σ_k 1/(k²+c²) = (π/c) coth(πc)`
    Analytic,
}

/// `½ Σ_k 1/(k² + m + μ)` in one dimension.
pub fn one_dim_bubble(m: f64, mu: f64, sum: ModeSum) -> f64 {
    match sum {
        ModeSum::Truncated(k) => {
            let k = k as i64;
            0.5 * (-k..=k).map(|j| 1.0 / ((j * j) as f64 + m + mu)).sum::<f64>()
        }
        ModeSum::Analytic => {
            let c = (m + mu).sqrt();
            0.5 * PI / (c * (PI * c).tanh())
        }
    }
}

/// Unique positive root of `½ Σ_k 1/(k²+m+μ) = μ` (no renormalization in
/// one dimension).
pub fn mu_fixed_point_1d(m: f64, sum: ModeSum) -> Result<f64> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidParameter(format!("mass m = {m} must be positive")));
    }
    let g = |mu: f64| one_dim_bubble(m, mu, sum) - mu;
    let mut hi = 1.0;
    while g(hi) > 0.0 {
        hi *= 2.0;
    }
    Ok(bisect(0.0, hi, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{sample_stationary_z, NoiseStream, Purpose};
    use crate::stats::mean_and_se;

    #[test]
    fn wick_constant_examples() {
        let g = TorusGrid::new(2, 4, 0, 1.0, 0.0).unwrap();
        assert_eq!(wick_constant_a(&g), 0.5);
        let g = TorusGrid::new(2, 6, 1, 1.0, 0.0).unwrap();
        // 9 modes: 1/2 + 4·(1/4) + 4·(1/6)
        assert!((wick_constant_a(&g) - 13.0 / 6.0).abs() < 1e-14);
        let a2 = wick_constant_a(&TorusGrid::new(2, 18, 2, 1.0, 0.0).unwrap());
        let a4 = wick_constant_a(&TorusGrid::new(2, 18, 4, 1.0, 0.0).unwrap());
        assert!(a4 > a2);
        let heavy = wick_constant_a(&TorusGrid::new(2, 18, 4, 3.0, 0.0).unwrap());
        assert!(heavy < a4);
    }

    #[test]
    fn wick_constant_growth_rates() {
        // log K in 2D, K in 3D
        let a2 = |k: usize| wick_constant_a(&TorusGrid::new(2, 4 * k + 2, k, 1.0, 0.0).unwrap());
        let d1 = a2(16) - a2(8);
        let d2 = a2(32) - a2(16);
        assert!((d1 - d2).abs() / d1 < 0.1, "{d1} {d2}");
        let a3 = |k: usize| wick_constant_a(&TorusGrid::new(3, 2 * k + 2, k, 1.0, 0.0).unwrap());
        let r = a3(16) / a3(8);
        assert!(r > 1.6 && r < 2.2, "{r}");
    }

    #[test]
    fn b_requires_three_dimensions() {
        assert!(second_order_constant_b(&TorusGrid::new(2, 8, 1, 1.0, 0.0).unwrap()).is_err());
        let g = TorusGrid::new(3, 4, 0, 1.0, 0.0).unwrap();
        assert!((second_order_constant_b(&g).unwrap() - 0.5).abs() < 1e-15);
    }

    fn b_direct(grid: &TorusGrid) -> f64 {
        let kk = grid.cutoff() as i32;
        let c = |k: [i32; 3]| 0.5 / ((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64 + grid.mass());
        let mut total = 0.0;
        for k in grid.modes() {
            let mut conv = 0.0;
            for j in grid.modes() {
                let r = [k[0] - j[0], k[1] - j[1], k[2] - j[2]];
                if r.iter().all(|x| x.abs() <= kk) {
                    conv += c(*j) * c(r);
                }
            }
            total += 2.0 * conv / (2.0 * c(*k)).recip();
        }
        total
    }

    #[test]
    fn b_matches_direct_double_loop() {
        for k in [1usize, 2, 4, 8] {
            let g = TorusGrid::new(3, 4 * k + 2, k, 1.0, 0.0).unwrap();
            let fast = second_order_constant_b(&g).unwrap();
            let slow = b_direct(&g);
            assert!((fast - slow).abs() <= 1e-12 * slow, "K={k}: {fast} vs {slow}");
        }
        let b1 = second_order_constant_b(&TorusGrid::new(3, 6, 1, 1.0, 0.0).unwrap()).unwrap();
        let b2 = second_order_constant_b(&TorusGrid::new(3, 10, 2, 1.0, 0.0).unwrap()).unwrap();
        assert!(b2 > b1);
    }

    #[test]
    fn b_grows_logarithmically() {
        let ratios: Vec<f64> = [4usize, 8, 16]
            .iter()
            .map(|&k| {
                let g = TorusGrid::new(3, 2 * k + 2, k, 1.0, 0.0).unwrap();
                second_order_constant_b(&g).unwrap() / (k as f64).ln()
            })
            .collect();
        let hi = ratios.iter().cloned().fold(0.0, f64::max);
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi / lo < 2.0, "{ratios:?}");
    }

    #[test]
    fn wick_square_examples() {
        let g = TorusGrid::new(2, 10, 2, 1.0, 0.0).unwrap();
        let w = wick_square(&Field::zeros(&g), 1.5);
        assert_eq!(w.mean(), -1.5);
        let f = Field::constant(&g, 2.0);
        assert!((wick_square(&f, 0.0).mean() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn wick_square_of_free_field_is_centered() {
        let g = TorusGrid::new(2, 8, 3, 1.0, 0.0).unwrap();
        let a = wick_constant_a(&g);
        let draws: Vec<Vec<f64>> = (0..4000)
            .map(|r| {
                let z = sample_stationary_z(&g, &NoiseStream::new(21, r, 0, Purpose::Initial));
                let z2: Vec<f64> = z.to_physical().iter().map(|x| x * x - a).collect();
                z2
            })
            .collect();
        let means: Vec<f64> = draws.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect();
        let (m, se) = mean_and_se(&means);
        assert!(m.abs() < 3.0 * se, "{m} ± {se}");
        for x in [0usize, 5, 37] {
            let col: Vec<f64> = draws.iter().map(|d| d[x]).collect();
            let (m, se) = mean_and_se(&col);
            assert!(m.abs() < 3.0 * se, "point {x}: {m} ± {se}");
        }
    }

    #[test]
    fn renormalized_mu_is_zero() {
        for dim in 1..=3 {
            for k in [0usize, 1, 3] {
                for m in [0.1, 1.0, 5.0] {
                    let g = TorusGrid::new(dim, 2 * k + 2, k, m, 0.0).unwrap();
                    let mu = mu_fixed_point_renormalized(&g);
                    assert!(mu.abs() <= 1e-10, "d={dim} K={k} m={m}: {mu}");
                    let omegas: Vec<f64> = (0..g.mode_count()).map(|i| g.omega(i)).collect();
                    assert!(renormalized_gap_residual(&omegas, 1.0) < 0.0);
                    let samples: Vec<f64> =
                        (0..50).map(|j| renormalized_gap_residual(&omegas, -0.9 * m + 0.1 * j as f64)).collect();
                    assert!(samples.windows(2).all(|w| w[1] < w[0]));
                }
            }
        }
        assert!(mu_root_renormalized(&[]).abs() <= 1e-10);
    }

    #[test]
    fn one_dim_fixed_points() {
        let analytic = mu_fixed_point_1d(1.0, ModeSum::Analytic).unwrap();
        // independent root of (π/(2√(1+μ))) coth(π√(1+μ)) = μ
        assert!((analytic - 1.087_453_360_530_214_6).abs() < 1e-10, "{analytic}");
        let k0 = mu_fixed_point_1d(1.0, ModeSum::Truncated(0)).unwrap();
        assert!((k0 - (3f64.sqrt() - 1.0) / 2.0).abs() < 1e-12);
        let seq: Vec<f64> =
            [0usize, 1, 4, 16, 64, 256].iter().map(|&k| mu_fixed_point_1d(1.0, ModeSum::Truncated(k)).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[1] > w[0]));
        assert!(*seq.last().unwrap() < analytic);
        assert!(analytic - seq.last().unwrap() < 5e-3);
        assert!(mu_fixed_point_1d(0.0, ModeSum::Analytic).is_err());
    }
}
