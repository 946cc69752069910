//! Finite-ensemble solver for the self-consistent (McKean–Vlasov) equation
//!
//! ```text
//! (∂_t - Δ + m) Ψ = -λ μ(t,x) Ψ + ξ,   μ = E[Ψ² - Z²]   (d ≥ 2)
//!                                      μ = E[Ψ²]        (d = 1)
//! ```
//!
//! The law is replaced by the empirical measure of `M` independent copies;
//! each copy carries its own free field `Z` driven by the same noise.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{EnsembleState, InitScheme, Propagator, Schedule};
use crate::error::{Error, Result};
use crate::lattice::{dealiased_product, to_physical_many, Field, TorusGrid, C64};
use crate::noise::{sample_stationary_z, NoiseStream, Purpose};
use crate::renorm::{mu_fixed_point_1d, ModeSum};
use crate::stats::batch_means;

/// Current estimate of the law coefficient `μ`.
#[derive(Clone, Debug, PartialEq)]
pub enum LawCoefficient {
    Constant(f64),
    Field(Field),
}

impl LawCoefficient {
    pub fn mean(&self) -> f64 {
        match self {
            LawCoefficient::Constant(c) => *c,
            LawCoefficient::Field(f) => f.mean(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct McKeanEnsemble {
    grid: Arc<TorusGrid>,
    psi: Vec<Field>,
    z: Vec<Field>,
    homogeneous: bool,
    renormalized: bool,
    t: f64,
    step: u64,
    seed: u64,
    replica: u32,
}

impl McKeanEnsemble {
    /// `copies` independent copies; copy `m` uses the noise and initial
    /// streams of component `m` of an N-component run with the same
    /// `(seed, replica)`. The law coefficient is Wick-renormalized (the
    /// `Z²` subtraction) in `d ≥ 2` only.
    pub fn new(grid: &Arc<TorusGrid>, copies: usize, init: InitScheme, seed: u64, replica: u32) -> Result<Self> {
        if copies < 2 {
            return Err(Error::InvalidParameter(format!("the law estimate needs M >= 2 copies, got {copies}")));
        }
        let z: Vec<Field> = (0..copies)
            .map(|i| sample_stationary_z(grid, &NoiseStream::new(seed, replica, i as u32, Purpose::Initial)))
            .collect();
        let psi = match init {
            InitScheme::StationaryFree => z.clone(),
            InitScheme::Zero => vec![Field::zeros(grid); copies],
            InitScheme::Warm => {
                return Err(Error::InvalidParameter("mean-field ensembles start from stationary-free or zero".into()))
            }
        };
        Ok(Self {
            grid: Arc::clone(grid),
            psi,
            z,
            homogeneous: true,
            renormalized: grid.dim() >= 2,
            t: 0.0,
            step: 0,
            seed,
            replica,
        })
    }

    /// Builds an ensemble from explicit fields (fixtures, restores).
    pub fn from_fields(grid: &Arc<TorusGrid>, psi: Vec<Field>, z: Vec<Field>, seed: u64, replica: u32) -> Result<Self> {
        if psi.len() < 2 || psi.len() != z.len() {
            return Err(Error::InvalidParameter(format!("{} copies with {} free fields", psi.len(), z.len())));
        }
        Ok(Self {
            grid: Arc::clone(grid),
            psi,
            z,
            homogeneous: true,
            renormalized: grid.dim() >= 2,
            t: 0.0,
            step: 0,
            seed,
            replica,
        })
    }

    /// Spatial averaging of the law coefficient (on by default).
    pub fn with_homogeneity(mut self, on: bool) -> Self {
        self.homogeneous = on;
        self
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn copies(&self) -> usize {
        self.psi.len()
    }

    pub fn psi(&self) -> &[Field] {
        &self.psi
    }

    pub fn z(&self) -> &[Field] {
        &self.z
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replica(&self) -> u32 {
        self.replica
    }

    pub fn is_homogeneous(&self) -> bool {
        self.homogeneous
    }

    pub fn is_renormalized(&self) -> bool {
        self.renormalized
    }

    /// `μ̂ = M⁻¹ Σ_m (Ψ_m² - Z_m²)` (or `M⁻¹ Σ_m Ψ_m²` in 1D).
    ///
    /// With homogeneity on the spatial average is taken exactly through
    /// Parseval, `⟨u²⟩ = Σ_k |û(k)|²`.
    pub fn estimate_law_coefficient(&self) -> Result<LawCoefficient> {
        let m = self.copies();
        if m < 2 {
            return Err(Error::InvalidParameter("the law estimate needs M >= 2 copies".into()));
        }
        if self.homogeneous {
            let mut total = 0.0;
            for (p, z) in self.psi.iter().zip(&self.z) {
                let per_copy: f64 = if self.renormalized {
                    p.coeffs().iter().zip(z.coeffs()).map(|(a, b)| a.norm_sqr() - b.norm_sqr()).sum()
                } else {
                    p.coeffs().iter().map(|a| a.norm_sqr()).sum()
                };
                total += per_copy;
            }
            return Ok(LawCoefficient::Constant(total / m as f64));
        }
        let refs: Vec<&Field> = self.psi.iter().chain(&self.z).collect();
        let phys = to_physical_many(&refs);
        let (pp, pz) = phys.split_at(m);
        let mut acc = vec![0.0; self.grid.point_count()];
        for (p, z) in pp.iter().zip(pz) {
            for x in 0..acc.len() {
                acc[x] += if self.renormalized { p[x] * p[x] - z[x] * z[x] } else { p[x] * p[x] };
            }
        }
        for v in acc.iter_mut() {
            *v /= m as f64;
        }
        Ok(LawCoefficient::Field(self.grid.to_spectral(&acc)))
    }

    /// One step with the coefficient estimated from the current ensemble.
    pub fn step(&mut self, prop: &Propagator) -> Result<LawCoefficient> {
        let mu = self.estimate_law_coefficient()?;
        self.step_with_coefficient(prop, &mu)?;
        Ok(mu)
    }

    /// One exponential Euler step with drift `-λ μ Ψ`, `μ` frozen.
    pub fn step_with_coefficient(&mut self, prop: &Propagator, mu: &LawCoefficient) -> Result<()> {
        let lam = self.grid.coupling();
        let grid = &self.grid;
        let seed = self.seed;
        let replica = self.replica;
        let step = self.step;
        let advanced: Vec<Result<(Field, Field)>> = self
            .psi
            .par_iter()
            .zip(self.z.par_iter())
            .enumerate()
            .map(|(i, (p, z))| {
                let stream = NoiseStream::new(seed, replica, i as u32, Purpose::Dynamics);
                let eta = prop.ou.increment(grid, &stream, step);
                let drift: Vec<C64> = match mu {
                    LawCoefficient::Constant(c) => p.coeffs().iter().map(|v| v * (-lam * c)).collect(),
                    LawCoefficient::Field(f) => {
                        dealiased_product(f, p)?.coeffs().iter().map(|v| v * -lam).collect()
                    }
                };
                let coeffs: Vec<C64> = p
                    .coeffs()
                    .iter()
                    .zip(&drift)
                    .zip(eta.coeffs())
                    .enumerate()
                    .map(|(k, ((pc, dc), ec))| pc * prop.ou.decay[k] + dc * prop.ou.phi1[k] + ec)
                    .collect();
                Ok((Field::from_hermitian(grid, coeffs), prop.ou.advance(z, &eta)))
            })
            .collect();
        let mut psi = Vec::with_capacity(advanced.len());
        let mut z = Vec::with_capacity(advanced.len());
        for (i, r) in advanced.into_iter().enumerate() {
            let (p, q) = r?;
            if !p.is_finite() {
                return Err(Error::BlowUp { step: self.step + 1, t: self.t + prop.dt(), component: i });
            }
            psi.push(p);
            z.push(q);
        }
        self.psi = psi;
        self.z = z;
        self.step += 1;
        self.t += prop.dt();
        Ok(())
    }

    /// Copy-averaged `|Ψ̂(k)|²` on every retained mode.
    pub fn mode_variances(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.mode_count()];
        for p in &self.psi {
            for (o, c) in out.iter_mut().zip(p.coeffs()) {
                *o += c.norm_sqr();
            }
        }
        let m = self.copies() as f64;
        out.iter_mut().for_each(|v| *v /= m);
        out
    }
}

/// Time series of the law coefficient from a 1D mean-field run, with the
/// bisection fixed points it should reproduce.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanField1d {
    pub times: Vec<f64>,
    pub mu_trace: Vec<f64>,
    pub mu_mean: f64,
    pub mu_se: f64,
    pub mu_truncated: f64,
    pub mu_analytic: f64,
}

impl MeanField1d {
    /// `|μ̄ - μ*_∞| ≤ 3σ + |μ*_K - μ*_∞|`.
    pub fn matches(&self) -> bool {
        (self.mu_mean - self.mu_analytic).abs() <= 3.0 * self.mu_se + (self.mu_truncated - self.mu_analytic).abs()
    }
}

/// Runs the 1D mean-field equation and averages `μ̂` after burn-in.
pub fn solve_1d_meanfield(
    grid: &Arc<TorusGrid>,
    copies: usize,
    schedule: &Schedule,
    batches: usize,
    seed: u64,
) -> Result<MeanField1d> {
    if grid.dim() != 1 {
        return Err(Error::InvalidParameter(format!("1D mean-field solver called with d = {}", grid.dim())));
    }
    let mut ens = McKeanEnsemble::new(grid, copies, InitScheme::StationaryFree, seed, 0)?;
    let prop = Propagator::new(grid, schedule.dt)?;
    let mut times = Vec::new();
    let mut trace = Vec::new();
    while ens.step_count() < schedule.steps {
        ens.step(&prop)?;
        if schedule.emits_at(ens.step_count()) {
            times.push(ens.t());
            trace.push(ens.estimate_law_coefficient()?.mean());
        }
    }
    let (mu_mean, mu_se) = batch_means(&trace, batches)?;
    Ok(MeanField1d {
        times,
        mu_trace: trace,
        mu_mean,
        mu_se,
        mu_truncated: mu_fixed_point_1d(grid.mass(), ModeSum::Truncated(grid.cutoff()))?,
        mu_analytic: mu_fixed_point_1d(grid.mass(), ModeSum::Analytic)?,
    })
}

/// One replica of the shared-noise coupling between component 0 of the
/// N-system and copy 0 of the ensemble.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingRecord {
    pub components: usize,
    pub replica: u32,
    pub times: Vec<f64>,
    /// `‖Φ₁(t) - Ψ₁(t)‖²_{L²}` at each recorded time
    pub distances: Vec<f64>,
    pub sup: f64,
    pub time_average: f64,
}

/// Advances `system` and `ensemble` side by side to `t_final`, recording
/// the squared L² distance of their first components every `record_every`
/// steps (and at t = 0).
pub fn coupling_experiment(
    system: &mut EnsembleState,
    ensemble: &mut McKeanEnsemble,
    dt: f64,
    steps: u64,
    record_every: u64,
) -> Result<CouplingRecord> {
    if !system.grid().same_as(ensemble.grid()) {
        return Err(Error::GridMismatch("N-system and mean-field ensemble use different grids".into()));
    }
    if system.seed() != ensemble.seed() || system.member() != ensemble.replica() {
        return Err(Error::InvalidParameter("coupled runs must share seed and replica".into()));
    }
    if system.step_count() != ensemble.step_count() {
        return Err(Error::InvalidParameter("coupled runs must start at the same step".into()));
    }
    let prop = Propagator::new(system.grid(), dt)?;
    let dist = |s: &EnsembleState, e: &McKeanEnsemble| -> Result<f64> { Ok(s.phi()[0].sub(&e.psi()[0])?.sobolev_norm_sq(0.0)) };
    let mut times = vec![system.t()];
    let mut distances = vec![dist(system, ensemble)?];
    for k in 1..=steps {
        system.step(&prop)?;
        ensemble.step(&prop)?;
        if k % record_every.max(1) == 0 || k == steps {
            times.push(system.t());
            distances.push(dist(system, ensemble)?);
        }
    }
    let sup = distances.iter().cloned().fold(0.0, f64::max);
    let time_average = distances.iter().sum::<f64>() / distances.len() as f64;
    Ok(CouplingRecord { components: system.components(), replica: system.member(), times, distances, sup, time_average })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Integrator;
    use crate::stats::mean_and_se;

    #[test]
    fn needs_two_copies() {
        let g = TorusGrid::new(1, 8, 2, 1.0, 1.0).unwrap();
        assert!(McKeanEnsemble::new(&g, 1, InitScheme::StationaryFree, 0, 0).is_err());
    }

    #[test]
    fn free_copies_have_zero_coefficient() {
        let g = TorusGrid::new(2, 14, 3, 2.0, 1.0).unwrap();
        for hom in [true, false] {
            let e = McKeanEnsemble::new(&g, 4, InitScheme::StationaryFree, 3, 0).unwrap().with_homogeneity(hom);
            match e.estimate_law_coefficient().unwrap() {
                LawCoefficient::Constant(c) => assert_eq!(c, 0.0),
                LawCoefficient::Field(f) => assert!(f.coeffs().iter().all(|c| c.norm() == 0.0)),
            }
        }
    }

    #[test]
    fn constant_fixture_coefficient() {
        let g = TorusGrid::new(2, 14, 3, 2.0, 1.0).unwrap();
        let psi = vec![Field::constant(&g, 0.7); 3];
        let z = vec![Field::zeros(&g); 3];
        for hom in [true, false] {
            let e = McKeanEnsemble::from_fields(&g, psi.clone(), z.clone(), 0, 0).unwrap().with_homogeneity(hom);
            assert!((e.estimate_law_coefficient().unwrap().mean() - 0.49).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_start_stays_free() {
        let g = TorusGrid::new(2, 14, 3, 2.0, 1.0).unwrap();
        let mut e = McKeanEnsemble::new(&g, 8, InitScheme::StationaryFree, 4, 0).unwrap();
        let prop = Propagator::new(&g, 0.01).unwrap();
        for _ in 0..100 {
            assert_eq!(e.step(&prop).unwrap(), LawCoefficient::Constant(0.0));
        }
        for (p, z) in e.psi().iter().zip(e.z()) {
            assert_eq!(p, z);
        }
    }

    #[test]
    fn zero_start_relaxes_to_free_coefficient() {
        // from Ψ = 0 the coefficient starts at -E‖Z‖² and is driven back to 0
        let g = TorusGrid::new(2, 14, 3, 5.0, 1.0).unwrap();
        let mut e = McKeanEnsemble::new(&g, 64, InitScheme::Zero, 6, 0).unwrap();
        let prop = Propagator::new(&g, 0.01).unwrap();
        let first = e.estimate_law_coefficient().unwrap().mean();
        assert!(first < -0.1);
        let mut late = Vec::new();
        for k in 0..600 {
            let mu = e.step(&prop).unwrap().mean();
            if k >= 300 {
                late.push(mu);
            }
        }
        let (m, _) = mean_and_se(&late);
        assert!(m.abs() < 0.05 * first.abs(), "{m}");
    }

    #[test]
    fn constant_shift_relaxes_to_shifted_variance() {
        let g = TorusGrid::new(1, 8, 2, 1.0, 1.0).unwrap();
        let mu0 = 0.8;
        let mut e = McKeanEnsemble::new(&g, 400, InitScheme::StationaryFree, 9, 0).unwrap();
        let dt = 0.002;
        let prop = Propagator::new(&g, dt).unwrap();
        let mut acc = vec![0.0; g.mode_count()];
        let mut count = 0.0;
        for k in 0..3000 {
            e.step_with_coefficient(&prop, &LawCoefficient::Constant(mu0)).unwrap();
            if k >= 1500 && k % 10 == 0 {
                for (a, v) in acc.iter_mut().zip(e.mode_variances()) {
                    *a += v;
                }
                count += 1.0;
            }
        }
        for (i, a) in acc.iter().enumerate() {
            let expect = 0.5 / (g.omega(i) + mu0);
            assert!((a / count - expect).abs() < 0.05 * expect, "mode {i}: {} vs {expect}", a / count);
        }
    }

    #[test]
    fn zeroed_coefficient_gives_free_evolution() {
        let g = TorusGrid::new(2, 14, 3, 1.0, 1.0).unwrap();
        let mut e = McKeanEnsemble::new(&g, 3, InitScheme::Zero, 2, 0).unwrap();
        let prop = Propagator::new(&g, 0.05).unwrap();
        let zeros = vec![Field::zeros(&g); 3];
        let mut free = McKeanEnsemble::from_fields(&g, zeros, e.z().to_vec(), 2, 0).unwrap();
        for _ in 0..10 {
            e.step_with_coefficient(&prop, &LawCoefficient::Constant(0.0)).unwrap();
            free.step_with_coefficient(&prop, &LawCoefficient::Constant(0.0)).unwrap();
        }
        assert_eq!(e.psi(), free.psi());
    }

    #[test]
    fn one_dim_zero_mode_fixed_point() {
        let g = TorusGrid::new(1, 4, 0, 1.0, 1.0).unwrap();
        let sched = Schedule { dt: 0.01, steps: 6000, burn_in: 1000, thinning: 10 };
        let r = solve_1d_meanfield(&g, 256, &sched, 10, 5).unwrap();
        let root = (3f64.sqrt() - 1.0) / 2.0;
        assert!((r.mu_truncated - root).abs() < 1e-12);
        assert!((r.mu_mean - root).abs() < 3.0 * r.mu_se + 0.01, "{} ± {}", r.mu_mean, r.mu_se);
        assert!(solve_1d_meanfield(&TorusGrid::new(2, 8, 1, 1.0, 1.0).unwrap(), 4, &sched, 10, 5).is_err());
    }

    #[test]
    fn coupling_is_trivial_without_interaction() {
        let g = TorusGrid::new(2, 14, 3, 2.0, 0.0).unwrap();
        let mut sys = EnsembleState::new(&g, 4, Integrator::Direct, InitScheme::StationaryFree, 7, 1).unwrap();
        let mut ens = McKeanEnsemble::new(&g, 8, InitScheme::StationaryFree, 7, 1).unwrap();
        let rec = coupling_experiment(&mut sys, &mut ens, 0.01, 50, 10).unwrap();
        assert!(rec.distances.iter().all(|&d| d == 0.0));
        let mut other = McKeanEnsemble::new(&g, 8, InitScheme::StationaryFree, 8, 1).unwrap();
        assert!(coupling_experiment(&mut sys, &mut other, 0.01, 1, 1).is_err());
    }

    #[test]
    fn one_step_coupling_gap_is_drift_difference() {
        // starting from Ψ = Φ = Z the gap after one step is φ₁ × (drift gap),
        // i.e. O(dt λ) in norm and O(dt² λ²) squared
        let g = TorusGrid::new(2, 14, 3, 2.0, 0.1).unwrap();
        let dt = 0.01;
        let mut sys = EnsembleState::new(&g, 4, Integrator::Direct, InitScheme::StationaryFree, 3, 0).unwrap();
        let drift = sys.drift_interacting();
        let mut ens = McKeanEnsemble::new(&g, 4, InitScheme::StationaryFree, 3, 0).unwrap();
        let rec = coupling_experiment(&mut sys, &mut ens, dt, 1, 1).unwrap();
        let prop = Propagator::new(&g, dt).unwrap();
        let expect: f64 = drift[0]
            .coeffs()
            .iter()
            .enumerate()
            .map(|(k, c)| (c * prop.ou.phi1[k]).norm_sqr())
            .sum();
        assert!((rec.distances[1] - expect).abs() < 1e-8 * expect);
        assert!(rec.distances[1] > 0.0);
    }
}
