//! O(N)-invariant observables, their correlation estimators, and lattice
//! Dyson–Schwinger residuals.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::EnsembleState;
use crate::error::{Error, Result};
use crate::exact::SpectralFunction;
use crate::lattice::{Field, TorusGrid, C64};
use crate::stats::{batch_means, BatchAccumulator};

/// `S(x) = Σ_i Φ_i(x)²` on the physical grid.
///
/// Each component is transformed on its own and the squares at each point
/// are summed in sorted order, so the result does not depend on the order
/// of the components at all.
pub fn squared_sum(phi: &[Field]) -> Result<Vec<f64>> {
    let grid = phi
        .first()
        .ok_or_else(|| Error::InvalidParameter("no components".into()))?
        .grid()
        .clone();
    grid.require_alias_free_cubic()?;
    for f in phi {
        if !f.grid().same_as(&grid) {
            return Err(Error::GridMismatch("components live on different grids".into()));
        }
    }
    let phys: Vec<Vec<f64>> = phi.iter().map(|f| f.to_physical()).collect();
    let mut col = vec![0.0; phi.len()];
    Ok((0..grid.point_count())
        .map(|x| {
            for (c, u) in col.iter_mut().zip(&phys) {
                *c = u[x] * u[x];
            }
            col.sort_by(|a, b| a.total_cmp(b));
            col.iter().sum()
        })
        .collect())
}

/// `(1/√N) Σ_i :Φ_i²: = (S - N a)/√N` pointwise.
pub fn obs2_fields(phi: &[Field], a: f64) -> Result<Vec<f64>> {
    let n = phi.len() as f64;
    Ok(squared_sum(phi)?.into_iter().map(|s| (s - n * a) / n.sqrt()).collect())
}

/// `(1/N) :(Σ_i Φ_i²)²: = (S² - 2(N+2) a S + N(N+2) a²)/N` pointwise.
pub fn obs4_fields(phi: &[Field], a: f64) -> Result<Vec<f64>> {
    let n = phi.len() as f64;
    Ok(squared_sum(phi)?
        .into_iter()
        .map(|s| (s * s - 2.0 * (n + 2.0) * a * s + n * (n + 2.0) * a * a) / n)
        .collect())
}

pub fn obs2(state: &EnsembleState) -> Result<Vec<f64>> {
    obs2_fields(state.phi(), state.counterterms().a)
}

pub fn obs4(state: &EnsembleState) -> Result<Vec<f64>> {
    obs4_fields(state.phi(), state.counterterms().a)
}

/// Both observables of one configuration.
#[derive(Clone, Debug)]
pub struct ObservableSample {
    pub t: f64,
    pub o2: Vec<f64>,
    pub o4: Vec<f64>,
}

impl ObservableSample {
    pub fn from_fields(phi: &[Field], a: f64, t: f64) -> Result<Self> {
        let n = phi.len() as f64;
        let s = squared_sum(phi)?;
        let o2 = s.iter().map(|s| (s - n * a) / n.sqrt()).collect();
        let o4 = s.iter().map(|s| (s * s - 2.0 * (n + 2.0) * a * s + n * (n + 2.0) * a * a) / n).collect();
        Ok(Self { t, o2, o4 })
    }

    pub fn from_state(state: &EnsembleState) -> Result<Self> {
        Self::from_fields(state.phi(), state.counterterms().a, state.t())
    }

    pub fn o2_mean(&self) -> f64 {
        self.o2.iter().sum::<f64>() / self.o2.len() as f64
    }

    pub fn o4_mean(&self) -> f64 {
        self.o4.iter().sum::<f64>() / self.o4.len() as f64
    }
}

/// Measured two-point spectrum of a real observable on the retained modes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub modes: Vec<[i32; 3]>,
    pub values: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub samples: usize,
}

impl CorrelationEstimate {
    /// Per-mode `(Ĝ - reference)/se`.
    pub fn z_scores(&self, reference: &SpectralFunction) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.standard_errors)
            .zip(&reference.values)
            .map(|((g, s), r)| (g - r) / s)
            .collect()
    }

    /// Rows `(k, Ĝ, stderr, reference, z)` as CSV.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W, reference: &SpectralFunction) -> std::io::Result<()> {
        writeln!(out, "k1,k2,k3,G,stderr,reference,z")?;
        for (i, k) in self.modes.iter().enumerate() {
            let r = reference.values[i];
            writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e}",
                k[0],
                k[1],
                k[2],
                self.values[i],
                self.standard_errors[i],
                r,
                (self.values[i] - r) / self.standard_errors[i]
            )?;
        }
        Ok(())
    }
}

/// Streaming estimator of `Ĝ(k) = E|ô(k)|²` from a sequence of observable
/// fields. The spatial-mean mode is reported as a connected variance.
#[derive(Clone, Debug)]
pub struct SpectrumAccumulator {
    grid: Arc<TorusGrid>,
    batch_size: usize,
    acc: BatchAccumulator,
    zero: Vec<f64>,
}

impl SpectrumAccumulator {
    pub fn new(grid: &Arc<TorusGrid>, batch_size: usize) -> Self {
        let width = grid.half_modes().len();
        Self { grid: Arc::clone(grid), batch_size, acc: BatchAccumulator::new(width, batch_size), zero: Vec::new() }
    }

    /// Adds one physical-space sample.
    pub fn push(&mut self, values: &[f64]) {
        let f = self.grid.to_spectral(values);
        self.push_spectral(&f);
    }

    pub fn push_spectral(&mut self, f: &Field) {
        let c = f.coeffs();
        self.zero.push(c[self.grid.zero_index()].re);
        let row: Vec<f64> = self.grid.half_modes().map(|i| c[i].norm_sqr()).collect();
        self.acc.push(&row);
    }

    pub fn count(&self) -> usize {
        self.zero.len()
    }

    pub fn finish(&self) -> Result<CorrelationEstimate> {
        if self.count() < 2 * self.batch_size {
            return Err(Error::InsufficientSamples(format!(
                "{} samples give fewer than two batches of {}",
                self.count(),
                self.batch_size
            )));
        }
        let g = &self.grid;
        let count = g.mode_count();
        let zi = g.zero_index();
        let means = self.acc.means();
        let ses = self.acc.standard_errors()?;
        let mut values = vec![0.0; count];
        let mut standard_errors = vec![0.0; count];
        for (j, idx) in g.half_modes().enumerate() {
            values[idx] = means[j];
            values[count - 1 - idx] = means[j];
            standard_errors[idx] = ses[j];
            standard_errors[count - 1 - idx] = ses[j];
        }
        let mean0 = self.zero.iter().sum::<f64>() / self.zero.len() as f64;
        let centered: Vec<f64> = self.zero.iter().map(|x| (x - mean0).powi(2)).collect();
        let batches = self.acc.batches();
        let (v0, se0) = batch_means(&centered[..batches * self.batch_size], batches)?;
        values[zi] = v0;
        standard_errors[zi] = se0;
        Ok(CorrelationEstimate { modes: g.modes().to_vec(), values, standard_errors, samples: self.count() })
    }
}

/// Two-point spectrum of a finite list of observable samples.
pub fn two_point_spectrum(grid: &Arc<TorusGrid>, samples: &[Vec<f64>], batches: usize) -> Result<CorrelationEstimate> {
    if batches < 2 || samples.len() < batches {
        return Err(Error::InsufficientSamples(format!("{} samples for {batches} batches", samples.len())));
    }
    let mut acc = SpectrumAccumulator::new(grid, samples.len() / batches);
    for s in samples {
        acc.push(s);
    }
    acc.finish()
}

/// Small polynomial functionals `F` of the fields for integration-by-parts
/// checks. Offsets are grid displacements from the derivative point `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Functional {
    /// `F = 1`
    One,
    /// `F = Φ_i(x+d)`
    Linear([i32; 3]),
    /// `F = Φ_i(x+d₁) Φ_i(x+d₂)`
    Quadratic([i32; 3], [i32; 3]),
    /// `F = Φ_i(x+d)³`
    Cubic([i32; 3]),
    /// `F = Φ_j(x+d)² Φ_i(x+d)` with `j ≠ i`
    Cross(usize, [i32; 3]),
    /// `F = Σ_j Φ_j(x+d)²`
    Invariant([i32; 3]),
}

impl Functional {
    /// The default battery: six descriptors touching every supported shape.
    pub fn battery(components: usize) -> Vec<Functional> {
        let mut out = vec![
            Functional::One,
            Functional::Linear([0, 0, 0]),
            Functional::Linear([1, 0, 0]),
            Functional::Quadratic([0, 0, 0], [1, 0, 0]),
            Functional::Cubic([0, 0, 0]),
            Functional::Invariant([1, 0, 0]),
        ];
        if components > 1 {
            out.push(Functional::Cross(1, [0, 0, 0]));
        }
        out
    }

    pub fn label(&self) -> String {
        let off = |d: &[i32; 3]| format!("{};{};{}", d[0], d[1], d[2]);
        match self {
            Functional::One => "one".into(),
            Functional::Linear(d) => format!("linear:{}", off(d)),
            Functional::Quadratic(a, b) => format!("quadratic:{}:{}", off(a), off(b)),
            Functional::Cubic(d) => format!("cubic:{}", off(d)),
            Functional::Cross(j, d) => format!("cross:{j}:{}", off(d)),
            Functional::Invariant(d) => format!("invariant:{}", off(d)),
        }
    }
}

impl FromStr for Functional {
    type Err = Error;

    /// Parses the `label` form, e.g. `quadratic:0;0;0:1;0;0` or `cross:1:0;0;0`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnsupportedFunctional(format!("cannot parse functional descriptor '{s}'"));
        let off = |t: &str| -> Result<[i32; 3]> {
            let parts: Vec<i32> = t.split(';').map(|p| p.trim().parse::<i32>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            if parts.is_empty() || parts.len() > 3 {
                return Err(bad());
            }
            let mut d = [0; 3];
            d[..parts.len()].copy_from_slice(&parts);
            Ok(d)
        };
        let fields: Vec<&str> = s.split(':').collect();
        match (fields[0], fields.len()) {
            ("one", 1) => Ok(Functional::One),
            ("linear", 2) => Ok(Functional::Linear(off(fields[1])?)),
            ("quadratic", 3) => Ok(Functional::Quadratic(off(fields[1])?, off(fields[2])?)),
            ("cubic", 2) => Ok(Functional::Cubic(off(fields[1])?)),
            ("cross", 3) => Ok(Functional::Cross(fields[1].parse().map_err(|_| bad())?, off(fields[2])?)),
            ("invariant", 2) => Ok(Functional::Invariant(off(fields[1])?)),
            _ => Err(bad()),
        }
    }
}

/// `D_K(z) = Σ_{|k|_∞ ≤ K} e^{ik·z}`, the derivative `δΦ(x+z)/δΦ(x)` of a
/// cutoff field.
pub fn dirichlet_kernel(grid: &TorusGrid, d: &[i32; 3]) -> f64 {
    let n = grid.n() as f64;
    (0..grid.dim())
        .map(|a| {
            let theta = 2.0 * PI * d[a] as f64 / n;
            1.0 + 2.0 * (1..=grid.cutoff()).map(|j| (j as f64 * theta).cos()).sum::<f64>()
        })
        .product()
}

/// `δS/δΦ_i = 2(m - Δ)Φ_i - 2 drift_i` for every component, physical.
fn action_gradients(state: &EnsembleState) -> Vec<Vec<f64>> {
    let grid = state.grid();
    let drift = state.drift_interacting();
    state
        .phi()
        .iter()
        .zip(&drift)
        .map(|(p, d)| {
            let coeffs: Vec<C64> = p
                .coeffs()
                .iter()
                .zip(d.coeffs())
                .enumerate()
                .map(|(k, (pc, dc))| (pc * grid.omega(k) - dc) * 2.0)
                .collect();
            Field::from_hermitian(grid, coeffs).to_physical()
        })
        .collect()
}

/// One Monte Carlo sample of `E[∂F/∂Φ_i(x)] - E[F δS/δΦ_i(x)]`, averaged
/// over every base point `x` of the grid, for each functional in `battery`.
pub fn ds_residual_sample(state: &EnsembleState, battery: &[Functional], component: usize) -> Result<Vec<f64>> {
    let n_comp = state.components();
    if component >= n_comp {
        return Err(Error::InvalidParameter(format!("component {component} of {n_comp}")));
    }
    for f in battery {
        if let Functional::Cross(j, _) = f {
            if *j == component || *j >= n_comp {
                return Err(Error::UnsupportedFunctional(format!(
                    "cross term needs a second component distinct from {component} and below {n_comp}, got {j}"
                )));
            }
        }
    }
    let grid = state.grid();
    let phys: Vec<Vec<f64>> = state.phi().iter().map(|f| f.to_physical()).collect();
    let grad = action_gradients(state);
    let g = &grad[component];
    let u = &phys[component];
    let n = grid.n();
    let dim = grid.dim();
    let shift = |x: usize, d: &[i32; 3]| -> usize {
        let p = grid.point(x);
        let mut flat = 0;
        for a in 0..dim {
            let c = (p[a] as i64 + d[a] as i64).rem_euclid(n as i64) as usize;
            flat = flat * n + c;
        }
        flat
    };
    let points = grid.point_count();
    let out = battery
        .iter()
        .map(|f| {
            let total: f64 = (0..points)
                .map(|x| match f {
                    Functional::One => -g[x],
                    Functional::Linear(d) => dirichlet_kernel(grid, d) - u[shift(x, d)] * g[x],
                    Functional::Quadratic(d1, d2) => {
                        let (y1, y2) = (shift(x, d1), shift(x, d2));
                        dirichlet_kernel(grid, d1) * u[y2] + u[y1] * dirichlet_kernel(grid, d2) - u[y1] * u[y2] * g[x]
                    }
                    Functional::Cubic(d) => {
                        let v = u[shift(x, d)];
                        3.0 * v * v * dirichlet_kernel(grid, d) - v * v * v * g[x]
                    }
                    Functional::Cross(j, d) => {
                        let y = shift(x, d);
                        let w = phys[*j][y] * phys[*j][y];
                        w * dirichlet_kernel(grid, d) - w * u[y] * g[x]
                    }
                    Functional::Invariant(d) => {
                        let y = shift(x, d);
                        let s: f64 = phys.iter().map(|p| p[y] * p[y]).sum();
                        2.0 * u[y] * dirichlet_kernel(grid, d) - s * g[x]
                    }
                })
                .sum();
            total / points as f64
        })
        .collect();
    Ok(out)
}

/// Residual estimate with its standard error.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Residual {
    pub label: String,
    pub value: f64,
    pub standard_error: f64,
}

impl Residual {
    pub fn z(&self) -> f64 {
        self.value / self.standard_error
    }

    /// Richardson combination `2 r(dt/2) - r(dt)` of two step sizes.
    pub fn extrapolate(coarse: &Residual, fine: &Residual) -> Residual {
        Residual {
            label: fine.label.clone(),
            value: 2.0 * fine.value - coarse.value,
            standard_error: (4.0 * fine.standard_error.powi(2) + coarse.standard_error.powi(2)).sqrt(),
        }
    }
}

/// Batch-means summary of per-sample residual rows.
pub fn summarize_residuals(battery: &[Functional], rows: &[Vec<f64>], batches: usize) -> Result<Vec<Residual>> {
    battery
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let (value, standard_error) = batch_means(&col, batches)?;
            Ok(Residual { label: f.label(), value, standard_error })
        })
        .collect()
}
