//! Desk-scale convergence studies: coupling decay, distance of the
//! one-component marginal to the free field, and validation of the
//! bubble-resummed correlation formulas.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, EnsembleState, InitScheme, Integrator, Schedule};
use crate::error::{Error, Result};
use crate::exact::SpectralFunction;
use crate::lattice::{Field, TorusGrid};
use crate::noise::{sample_stationary_z, NoiseStream, Purpose};
use crate::observables::{squared_sum, CorrelationEstimate, SpectrumAccumulator};
use crate::renorm::Counterterms;
use crate::stats::{batch_means, loglog_slope, BatchAccumulator, SlopeFit};

/// Metric values along a scaling axis with a fitted log-log slope.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub metric: String,
    pub axis: Vec<f64>,
    pub values: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub fit: SlopeFit,
}

impl ScalingStudy {
    pub fn new(metric: impl Into<String>, axis: Vec<f64>, values: Vec<f64>, standard_errors: Vec<f64>, seed: u64) -> Result<Self> {
        let fit = loglog_slope(&axis, &values, &standard_errors, 2000, seed)?;
        Ok(Self { metric: metric.into(), axis, values, standard_errors, fit })
    }

    pub fn is_decreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] < w[0])
    }
}

/// `(1 + |k|²)⁻¹` weights of the covariance-spectrum distance.
fn weight(grid: &TorusGrid, idx: usize) -> f64 {
    1.0 / (1.0 + grid.k_squared(idx))
}

/// Streaming per-mode second moments `E|Φ̂(k)|²` of a one-component marginal.
/// Several exchangeable components may be pooled into one sample.
#[derive(Clone, Debug)]
pub struct CovarianceAccumulator {
    grid: Arc<TorusGrid>,
    acc: BatchAccumulator,
}

impl CovarianceAccumulator {
    pub fn new(grid: &Arc<TorusGrid>, batch_size: usize) -> Self {
        let width = grid.half_modes().len() + 1;
        Self { grid: Arc::clone(grid), acc: BatchAccumulator::new(width, batch_size) }
    }

    pub fn push(&mut self, fields: &[&Field]) {
        let g = &self.grid;
        let mut row = vec![0.0; g.half_modes().len() + 1];
        for f in fields {
            let c = f.coeffs();
            row[0] += c[g.zero_index()].re.powi(2);
            for (j, idx) in g.half_modes().enumerate() {
                row[j + 1] += c[idx].norm_sqr();
            }
        }
        let w = fields.len() as f64;
        row.iter_mut().for_each(|v| *v /= w);
        self.acc.push(&row);
    }

    pub fn count(&self) -> usize {
        self.acc.count()
    }

    /// `(mode index, E|Φ̂(k)|², standard error)` for the zero mode and one
    /// mode of each `±k` pair.
    pub fn mode_estimates(&self) -> Result<Vec<(usize, f64, f64)>> {
        let g = &self.grid;
        let means = self.acc.means();
        let ses = self.acc.standard_errors()?;
        Ok(std::iter::once(g.zero_index())
            .chain(g.half_modes())
            .enumerate()
            .map(|(j, i)| (i, means[j], ses[j]))
            .collect())
    }

    /// Covariance-spectrum distance to the free field,
    /// `D = (Σ_k w_k (V̂(k) - Ĉ(k))²)^{1/2}` over all retained modes.
    pub fn distance(&self) -> Result<GffDistance> {
        let g = &self.grid;
        let means = self.acc.means();
        let ses = self.acc.standard_errors()?;
        let idx: Vec<usize> = std::iter::once(g.zero_index()).chain(g.half_modes()).collect();
        let mut d2 = 0.0;
        let mut floor = 0.0;
        let mut grad = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let mult = if j == 0 { 1.0 } else { 2.0 };
            let w = mult * weight(g, i);
            let diff = means[j] - 0.5 / g.omega(i);
            d2 += w * diff * diff;
            floor += w * ses[j] * ses[j];
            grad.push(w * diff * ses[j]);
        }
        let d = d2.sqrt();
        let se = if d > 0.0 { grad.iter().map(|x| x * x).sum::<f64>().sqrt() / d } else { floor.sqrt() };
        Ok(GffDistance { covariance: d, covariance_se: se, noise_floor: floor.sqrt(), debiased_sq: d2 - floor })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GffDistance {
    pub covariance: f64,
    pub covariance_se: f64,
    /// `(Σ w se²)^{1/2}`, the value `D` takes on exact free samples
    pub noise_floor: f64,
    /// `D² - floor²`, an unbiased estimate of the squared distance
    pub debiased_sq: f64,
}

/// Covariance-spectrum distance of a set of samples.
pub fn gff_distance(grid: &Arc<TorusGrid>, samples: &[Field], batches: usize) -> Result<GffDistance> {
    if batches < 2 || samples.len() < 2 * batches {
        return Err(Error::InsufficientSamples(format!("{} samples for {batches} batches", samples.len())));
    }
    let mut acc = CovarianceAccumulator::new(grid, samples.len() / batches);
    for s in samples {
        acc.push(&[s]);
    }
    acc.distance()
}

fn h_minus_one_distance(a: &Field, b: &Field) -> f64 {
    let g = a.grid();
    a.coeffs()
        .iter()
        .zip(b.coeffs())
        .enumerate()
        .map(|(i, (x, y))| weight(g, i) * (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Energy distance (in the `H⁻¹` norm) between two sample sets:
/// `(2E‖X-Y‖ - E‖X-X'‖ - E‖Y-Y'‖)^{1/2}`, clipped at 0.
pub fn energy_distance(xs: &[Field], ys: &[Field]) -> Result<f64> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::InsufficientSamples("energy distance needs two samples per side".into()));
    }
    let cross = xs.iter().flat_map(|x| ys.iter().map(move |y| h_minus_one_distance(x, y))).sum::<f64>()
        / (xs.len() * ys.len()) as f64;
    let within = |s: &[Field]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += h_minus_one_distance(&s[i], &s[j]);
            }
        }
        acc / (s.len() * (s.len() - 1) / 2) as f64
    };
    Ok((2.0 * cross - within(xs) - within(ys)).max(0.0).sqrt())
}

/// Exact free-field draws for comparison with simulated marginals.
pub fn reference_gff_samples(grid: &Arc<TorusGrid>, count: usize, seed: u64) -> Vec<Field> {
    (0..count)
        .map(|c| sample_stationary_z(grid, &NoiseStream::new(seed, c as u32, 0, Purpose::Reference)))
        .collect()
}

/// Parameters of one stationary coupled run of the N-system.
#[derive(Clone, Debug)]
pub struct StationaryRun {
    pub grid: Arc<TorusGrid>,
    pub components: usize,
    pub schedule: Schedule,
    pub batches: usize,
    pub seed: u64,
    pub member: u32,
    pub integrator: Integrator,
    pub counterterms: Option<Counterterms>,
    pub wick_multiplier: Option<f64>,
    /// record obs2 spectra and the obs4 mean
    pub observables: bool,
    /// keep this many `Φ₁` samples for the energy distance
    pub keep_samples: usize,
}

impl StationaryRun {
    pub fn new(grid: &Arc<TorusGrid>, components: usize, schedule: Schedule, seed: u64) -> Self {
        Self {
            grid: Arc::clone(grid),
            components,
            schedule,
            batches: 20,
            seed,
            member: 0,
            integrator: Integrator::Direct,
            counterterms: None,
            wick_multiplier: None,
            observables: false,
            keep_samples: 0,
        }
    }

    pub fn initial_state(&self) -> Result<EnsembleState> {
        let mut st = EnsembleState::new(
            &self.grid,
            self.components,
            self.integrator,
            InitScheme::StationaryFree,
            self.seed,
            self.member,
        )?;
        if let Some(ct) = self.counterterms {
            st = st.with_counterterms(ct);
        }
        if let Some(w) = self.wick_multiplier {
            st = st.with_wick_multiplier(w);
        }
        Ok(st)
    }

    /// Runs the schedule and gathers every stationary measurement.
    pub fn measure(&self) -> Result<StationaryMeasurements> {
        let mut state = self.initial_state()?;
        let sched = self.schedule;
        let expected = (sched.steps.saturating_sub(sched.burn_in) / sched.thinning.max(1)) as usize;
        if expected < 2 * self.batches {
            return Err(Error::InsufficientSamples(format!(
                "schedule yields {expected} samples, need at least {}",
                2 * self.batches
            )));
        }
        let batch = expected / self.batches;
        let mut h1 = Vec::with_capacity(expected);
        let mut cov = CovarianceAccumulator::new(&self.grid, batch);
        let mut spec = SpectrumAccumulator::new(&self.grid, batch);
        let mut o4 = Vec::new();
        let mut o2 = Vec::new();
        let mut kept = Vec::new();
        let keep_every = if self.keep_samples > 0 { (expected / self.keep_samples).max(1) } else { usize::MAX };
        let a = state.counterterms().a;
        let n = self.components as f64;
        simulate(&mut state, &sched, |st| {
            if st.step_count() == 0 {
                return Ok(());
            }
            h1.push(st.phi()[0].sub(&st.z()[0])?.sobolev_norm_sq(1.0));
            let refs: Vec<&Field> = st.phi().iter().collect();
            cov.push(&refs);
            if self.observables {
                let s = squared_sum(st.phi())?;
                let field: Vec<f64> = s.iter().map(|s| (s - n * a) / n.sqrt()).collect();
                o2.push(field.iter().sum::<f64>() / field.len() as f64);
                spec.push(&field);
                let m4 = s.iter().map(|s| (s * s - 2.0 * (n + 2.0) * a * s + n * (n + 2.0) * a * a) / n).sum::<f64>()
                    / s.len() as f64;
                o4.push(m4);
            }
            if kept.len() < self.keep_samples && (h1.len() - 1) % keep_every == 0 {
                kept.push(st.phi()[0].clone());
            }
            Ok(())
        })?;
        let used = batch * self.batches;
        let (h1_mean, h1_se) = batch_means(&h1[..used], self.batches)?;
        let stationarity_ok = stationarity_check(&h1[..used])?;
        let (spectrum, o2_stats, o4_stats) = if self.observables {
            (
                Some(spec.finish()?),
                Some(batch_means(&o2[..used], self.batches)?),
                Some(batch_means(&o4[..used], self.batches)?),
            )
        } else {
            (None, None, None)
        };
        Ok(StationaryMeasurements {
            components: self.components,
            samples: h1.len(),
            h1_mean,
            h1_se,
            stationarity_ok,
            covariance: cov.distance()?,
            spectrum,
            o2: o2_stats,
            o4: o4_stats,
            phi_samples: kept,
        })
    }
}

/// First-half vs second-half means of a stationary series agree at 3σ.
pub fn stationarity_check(series: &[f64]) -> Result<bool> {
    let half = series.len() / 2;
    let (m1, s1) = batch_means(&series[..half], 10)?;
    let (m2, s2) = batch_means(&series[half..2 * half], 10)?;
    Ok((m1 - m2).abs() <= 3.0 * (s1 * s1 + s2 * s2).sqrt())
}

#[derive(Clone, Debug)]
pub struct StationaryMeasurements {
    pub components: usize,
    pub samples: usize,
    /// time average of `‖Φ₁ - Z₁‖²_{H¹}`
    pub h1_mean: f64,
    pub h1_se: f64,
    pub stationarity_ok: bool,
    pub covariance: GffDistance,
    pub spectrum: Option<CorrelationEstimate>,
    /// mean and error of the spatially averaged obs2
    pub o2: Option<(f64, f64)>,
    /// mean and error of the spatially averaged obs4
    pub o4: Option<(f64, f64)>,
    pub phi_samples: Vec<Field>,
}

/// Per-mode comparison of a measured spectrum with a reference.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BubbleVerdict {
    pub z_scores: Vec<f64>,
    pub fraction_within: f64,
    /// `(Σ_k [(Ĝ - G_ref)² - se²])^{1/2}` over independent modes, signed
    pub residual_norm: f64,
    pub max_abs_z: f64,
    pub pass_modes: bool,
}

/// Compares `estimate` with `reference` on the independent retained modes
/// (zero mode and one of each `±k` pair).
pub fn validate_bubble(grid: &TorusGrid, estimate: &CorrelationEstimate, reference: &SpectralFunction) -> BubbleVerdict {
    let idx: Vec<usize> = std::iter::once(grid.zero_index()).chain(grid.half_modes()).collect();
    let z_all = estimate.z_scores(reference);
    let z: Vec<f64> = idx.iter().map(|&i| z_all[i]).collect();
    let within = z.iter().filter(|v| v.abs() <= 3.0).count() as f64 / z.len() as f64;
    let r2: f64 = idx
        .iter()
        .map(|&i| (estimate.values[i] - reference.values[i]).powi(2) - estimate.standard_errors[i].powi(2))
        .sum();
    BubbleVerdict {
        max_abs_z: z.iter().fold(0.0, |m, v| m.max(v.abs())),
        z_scores: z,
        fraction_within: within,
        residual_norm: r2.signum() * r2.abs().sqrt(),
        pass_modes: within >= 0.95,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::free_two_point;
    use crate::observables::obs2_fields;
    use crate::renorm::wick_constant_a;

    #[test]
    fn scaling_study_needs_three_points() {
        assert!(ScalingStudy::new("x", vec![1.0, 2.0], vec![1.0, 0.5], vec![0.0; 2], 0).is_err());
        let s = ScalingStudy::new("x", vec![1.0, 2.0, 4.0], vec![1.0, 0.5, 0.25], vec![0.01; 3], 0).unwrap();
        assert!(s.is_decreasing());
        assert!((s.fit.slope + 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_samples_distance_shrinks_like_inverse_root() {
        let g = TorusGrid::new(2, 14, 3, 1.0, 0.0).unwrap();
        let mut ds = Vec::new();
        for count in [200usize, 800, 3200] {
            let samples = reference_gff_samples(&g, count, 42);
            ds.push(gff_distance(&g, &samples, 20).unwrap().covariance);
        }
        let fit = crate::stats::linear_fit(&[200f64.ln(), 800f64.ln(), 3200f64.ln()], &ds.iter().map(|d| d.ln()).collect::<Vec<_>>());
        assert!((fit.0 + 0.5).abs() < 0.2, "slope {}", fit.0);
    }

    #[test]
    fn energy_distance_separates_masses() {
        let g = TorusGrid::new(2, 14, 3, 1.0, 0.0).unwrap();
        let heavy = TorusGrid::new(2, 14, 3, 3.0, 0.0).unwrap();
        let a = reference_gff_samples(&g, 100, 1);
        let b = reference_gff_samples(&g, 100, 2);
        let c: Vec<Field> = reference_gff_samples(&heavy, 100, 3)
            .into_iter()
            .map(|f| Field::from_coeffs(&g, f.into_coeffs()).unwrap())
            .collect();
        let same = energy_distance(&a, &b).unwrap();
        let diff = energy_distance(&a, &c).unwrap();
        assert!(diff > 2.0 * same, "{same} vs {diff}");
    }

    #[test]
    fn free_run_has_zero_coupling_distance() {
        let g = TorusGrid::new(2, 14, 3, 1.0, 0.0).unwrap();
        let run = StationaryRun::new(&g, 2, Schedule { dt: 0.05, steps: 400, burn_in: 0, thinning: 2 }, 3);
        let m = run.measure().unwrap();
        assert_eq!(m.h1_mean, 0.0);
        assert!(m.covariance.covariance < 3.0 * m.covariance.noise_floor + 3.0 * m.covariance.covariance_se);
    }

    #[test]
    fn free_fixture_passes_bubble_baseline() {
        let g = TorusGrid::new(2, 14, 3, 1.0, 0.0).unwrap();
        let a = wick_constant_a(&g);
        let mut acc = SpectrumAccumulator::new(&g, 100);
        for d in 0..3000u64 {
            let phi: Vec<Field> = (0..2)
                .map(|i| sample_stationary_z(&g, &NoiseStream::new(8, d as u32, i, Purpose::Reference)))
                .collect();
            acc.push(&obs2_fields(&phi, a).unwrap());
        }
        let est = acc.finish().unwrap();
        let v = validate_bubble(&g, &est, &free_two_point(&g));
        assert!(v.pass_modes, "{}", v.fraction_within);
    }
}
