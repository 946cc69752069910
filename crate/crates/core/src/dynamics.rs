//! Time integration of the coupled N-component renormalized Langevin system
//!
//! ```text
//! (∂_t - Δ + m) Φ_i = -(λ/N) Σ_j Φ_j² Φ_i + c Φ_i + ξ_i,
//! c = ((N+2)/N) λ a  [ - (3(N+2)/N²) λ² b  in d = 3 ]
//! ```
//!
//! together with the free fields `(∂_t - Δ + m) Z_i = ξ_i` driven by the same
//! noise. The direct integrator is a stochastic exponential Euler scheme; the
//! split integrator evolves `Y = Φ - Z` with an exponential Runge–Kutta
//! (ETD2) step and serves as an independent cross-check.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{to_physical_many, Field, TorusGrid, C64};
use crate::noise::{sample_stationary_z, NoiseStream, OuPropagator, Purpose};
use crate::renorm::Counterterms;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Direct,
    Dpd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `Φ_i(0) = Z_i(0)`, i.i.d. free-field draws
    StationaryFree,
    /// `Φ_i(0) = 0`, `Z_i(0)` free-field draws
    Zero,
    /// resume from a previous interacting run (checkpoint)
    Warm,
}

/// Step-size dependent coefficients, cached across steps.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub ou: OuPropagator,
    /// `(e^{-ω dt} - 1 + ω dt) / (ω² dt)`
    pub phi2: Vec<f64>,
}

impl Propagator {
    pub fn new(grid: &TorusGrid, dt: f64) -> Result<Self> {
        let ou = OuPropagator::new(grid, dt)?;
        let phi2 = (0..grid.mode_count())
            .map(|i| {
                let w = grid.omega(i);
                let x = w * dt;
                ((-x).exp_m1() + x) / (w * x)
            })
            .collect();
        Ok(Self { ou, phi2 })
    }

    pub fn dt(&self) -> f64 {
        self.ou.dt
    }
}

/// The N-component interacting configuration with its coupled free fields.
#[derive(Clone, Debug)]
pub struct EnsembleState {
    grid: Arc<TorusGrid>,
    phi: Vec<Field>,
    z: Vec<Field>,
    remainder: Option<Vec<Field>>,
    t: f64,
    step: u64,
    counterterms: Counterterms,
    wick_multiplier: f64,
    integrator: Integrator,
    seed: u64,
    member: u32,
}

impl EnsembleState {
    /// Fresh state under one of the self-contained initialization schemes.
    pub fn new(
        grid: &Arc<TorusGrid>,
        components: usize,
        integrator: Integrator,
        init: InitScheme,
        seed: u64,
        member: u32,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::InvalidParameter("component count N must be at least 1".into()));
        }
        if grid.coupling() > 0.0 {
            grid.require_alias_free_cubic()?;
        }
        let z: Vec<Field> = (0..components)
            .map(|i| sample_stationary_z(grid, &NoiseStream::new(seed, member, i as u32, Purpose::Initial)))
            .collect();
        let phi = match init {
            InitScheme::StationaryFree => z.clone(),
            InitScheme::Zero => vec![Field::zeros(grid); components],
            InitScheme::Warm => {
                return Err(Error::InvalidParameter("a warm start needs a checkpoint to resume from".into()))
            }
        };
        Self::from_parts(grid, phi, z, 0.0, 0, Counterterms::for_grid(grid), integrator, seed, member)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        grid: &Arc<TorusGrid>,
        phi: Vec<Field>,
        z: Vec<Field>,
        t: f64,
        step: u64,
        counterterms: Counterterms,
        integrator: Integrator,
        seed: u64,
        member: u32,
    ) -> Result<Self> {
        if phi.len() != z.len() || phi.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "{} interacting fields vs {} free fields",
                phi.len(),
                z.len()
            )));
        }
        for f in phi.iter().chain(&z) {
            if !f.grid().same_as(grid) {
                return Err(Error::GridMismatch("state fields live on a different grid".into()));
            }
        }
        let remainder = match integrator {
            Integrator::Direct => None,
            Integrator::Dpd => Some(phi.iter().zip(&z).map(|(p, q)| p.sub(q)).collect::<Result<Vec<_>>>()?),
        };
        let n = phi.len() as f64;
        Ok(Self {
            grid: Arc::clone(grid),
            phi,
            z,
            remainder,
            t,
            step,
            counterterms,
            wick_multiplier: n + 2.0,
            integrator,
            seed,
            member,
        })
    }

    /// Replaces the counterterm constants (negative controls use `a = 0`).
    pub fn with_counterterms(mut self, counterterms: Counterterms) -> Self {
        self.counterterms = counterterms;
        self
    }

    /// Replaces the `N+2` Wick multiplier of the mass counterterm.
    pub fn with_wick_multiplier(mut self, multiplier: f64) -> Self {
        self.wick_multiplier = multiplier;
        self
    }

    /// Restores the split remainder verbatim (checkpoint restore).
    pub(crate) fn set_remainder(&mut self, y: Vec<Field>) {
        self.remainder = Some(y);
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.phi.len()
    }

    pub fn phi(&self) -> &[Field] {
        &self.phi
    }

    pub fn z(&self) -> &[Field] {
        &self.z
    }

    pub fn remainder(&self) -> Option<&[Field]> {
        self.remainder.as_deref()
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn counterterms(&self) -> Counterterms {
        self.counterterms
    }

    pub fn wick_multiplier(&self) -> f64 {
        self.wick_multiplier
    }

    pub fn integrator(&self) -> Integrator {
        self.integrator
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn member(&self) -> u32 {
        self.member
    }

    pub fn noise_stream(&self, component: usize) -> NoiseStream {
        NoiseStream::new(self.seed, self.member, component as u32, Purpose::Dynamics)
    }

    fn cubic_coefficient(&self) -> f64 {
        self.grid.coupling() / self.components() as f64
    }

    /// Coefficient `c` of the linear counterterm drift `c Φ_i`.
    pub fn linear_coefficient(&self) -> f64 {
        let n = self.components() as f64;
        let lam = self.grid.coupling();
        let mut c = lam * self.wick_multiplier / n * self.counterterms.a;
        if self.grid.dim() == 3 {
            c -= 3.0 * (n + 2.0) / (n * n) * lam * lam * self.counterterms.b;
        }
        c
    }

    /// `drift_i = -(λ/N) S Φ_i + c Φ_i` with `S = Σ_j Φ_j²`, spectrally
    /// truncated.
    pub fn drift_interacting(&self) -> Vec<Field> {
        cubic_drift(&self.grid, &self.phi, self.cubic_coefficient(), self.linear_coefficient())
    }

    /// Drift of the remainder `Y = Φ - Z` written through Wick products of
    /// the free fields:
    ///
    /// `-(λ/N) Σ_j (Y_j²Y_i + Y_j²Z_i + 2Y_jY_iZ_j + 2Y_j:Z_iZ_j: + :Z_j²:Y_i + :Z_iZ_j²:)`
    ///
    /// with `:Z_iZ_j: = Z_iZ_j - δ_ij a`, `:Z_j²: = Z_j² - a` and
    /// `:Z_iZ_j²: = Z_iZ_j² - (1 + 2δ_ij) a Z_i`.
    pub fn drift_remainder(&self) -> Result<Vec<Field>> {
        let y = self
            .remainder
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("remainder drift needs the split integrator".into()))?;
        Ok(self.remainder_drift_at(y, &self.z))
    }

    fn remainder_drift_at(&self, y: &[Field], z: &[Field]) -> Vec<Field> {
        let n = self.components() as f64;
        let lam = self.grid.coupling();
        let a = self.counterterms.a;
        // anything in c beyond the Wick-generated (N+2)λa/N (3D constant b,
        // overridden multipliers) acts on Φ = Y + Z
        let extra = self.linear_coefficient() - lam * (n + 2.0) / n * a;
        let refs: Vec<&Field> = y.iter().chain(z).collect();
        let phys = to_physical_many(&refs);
        let (py, pz) = phys.split_at(y.len());
        let points = self.grid.point_count();
        let mut sy = vec![0.0; points];
        let mut sz = vec![0.0; points];
        let mut syz = vec![0.0; points];
        for (u, v) in py.iter().zip(pz) {
            for x in 0..points {
                sy[x] += u[x] * u[x];
                sz[x] += v[x] * v[x];
                syz[x] += u[x] * v[x];
            }
        }
        let terms: Vec<Vec<f64>> = py
            .par_iter()
            .zip(pz.par_iter())
            .map(|(yi, zi)| {
                (0..points)
                    .map(|x| {
                        let (yv, zv) = (yi[x], zi[x]);
                        let cubic_y = sy[x] * yv;
                        let y2_z = sy[x] * zv;
                        let cross = 2.0 * yv * syz[x];
                        let y_wick_zz = 2.0 * zv * syz[x] - 2.0 * a * yv;
                        let wick_z2_y = (sz[x] - n * a) * yv;
                        let wick_zzz = zv * sz[x] - (n + 2.0) * a * zv;
                        -(lam / n) * (cubic_y + y2_z + cross + y_wick_zz + wick_z2_y + wick_zzz)
                    })
                    .collect()
            })
            .collect();
        let spec = self.grid.to_spectral_many(&terms);
        spec.into_iter()
            .zip(y.iter().zip(z))
            .map(|(mut d, (yi, zi))| {
                if extra != 0.0 {
                    for ((c, a), b) in d.coeffs_mut().iter_mut().zip(yi.coeffs()).zip(zi.coeffs()) {
                        *c += (a + b) * extra;
                    }
                }
                d
            })
            .collect()
    }

    /// The exact Ornstein–Uhlenbeck increments `η_i` for the current step.
    pub fn noise_increments(&self, prop: &Propagator) -> Vec<Field> {
        (0..self.components())
            .into_par_iter()
            .map(|i| prop.ou.increment(&self.grid, &self.noise_stream(i), self.step))
            .collect()
    }

    /// Advances by one step with the state's own noise streams.
    pub fn step(&mut self, prop: &Propagator) -> Result<()> {
        let noise = self.noise_increments(prop);
        self.step_with_noise(prop, &noise)
    }

    /// Advances by one step with externally supplied increments (one per
    /// component). On blow-up the state is left untouched.
    pub fn step_with_noise(&mut self, prop: &Propagator, noise: &[Field]) -> Result<()> {
        if noise.len() != self.components() {
            return Err(Error::InvalidParameter("one noise increment per component".into()));
        }
        let new_z: Vec<Field> = self.z.iter().zip(noise).map(|(z, eta)| prop.ou.advance(z, eta)).collect();
        let (new_phi, new_y) = match self.integrator {
            Integrator::Direct => {
                let drift = self.drift_interacting();
                let phi = self
                    .phi
                    .iter()
                    .zip(&drift)
                    .zip(noise)
                    .map(|((p, d), eta)| exp_euler(p, d, eta, prop))
                    .collect::<Vec<_>>();
                (phi, None)
            }
            Integrator::Dpd => {
                let y = self.remainder.as_ref().expect("split state carries Y");
                let d0 = self.remainder_drift_at(y, &self.z);
                let zero = Field::zeros(&self.grid);
                let y_pred: Vec<Field> =
                    y.iter().zip(&d0).map(|(yi, di)| exp_euler(yi, di, &zero, prop)).collect();
                let d1 = self.remainder_drift_at(&y_pred, &new_z);
                let y_new: Vec<Field> = y_pred
                    .iter()
                    .zip(d0.iter().zip(&d1))
                    .map(|(yp, (a, b))| {
                        let coeffs = yp
                            .coeffs()
                            .iter()
                            .zip(a.coeffs().iter().zip(b.coeffs()))
                            .zip(&prop.phi2)
                            .map(|((c, (x, w)), p2)| c + (w - x) * *p2)
                            .collect();
                        Field::from_hermitian(&self.grid, coeffs)
                    })
                    .collect();
                let phi = y_new.iter().zip(&new_z).map(|(a, b)| a.add(b)).collect::<Result<Vec<_>>>()?;
                (phi, Some(y_new))
            }
        };
        let t_next = self.t + prop.dt();
        for (i, f) in new_phi.iter().enumerate() {
            if !f.is_finite() {
                return Err(Error::BlowUp { step: self.step + 1, t: t_next, component: i });
            }
        }
        self.phi = new_phi;
        self.z = new_z;
        if new_y.is_some() {
            self.remainder = new_y;
        }
        self.step += 1;
        self.t = t_next;
        Ok(())
    }
}

/// `Φ̂ ← e^{-ω dt} Φ̂ + φ₁ drift + η`.
fn exp_euler(p: &Field, drift: &Field, eta: &Field, prop: &Propagator) -> Field {
    let coeffs = p
        .coeffs()
        .iter()
        .zip(drift.coeffs())
        .zip(eta.coeffs())
        .enumerate()
        .map(|(k, ((pc, dc), ec))| pc * prop.ou.decay[k] + dc * prop.ou.phi1[k] + ec)
        .collect();
    Field::from_hermitian(p.grid(), coeffs)
}

/// `-cubic · (Σ_j f_j²) f_i + linear · f_i` for every `i`.
pub fn cubic_drift(grid: &Arc<TorusGrid>, fields: &[Field], cubic: f64, linear: f64) -> Vec<Field> {
    if cubic == 0.0 {
        return fields.iter().map(|f| f.scaled(linear)).collect();
    }
    let refs: Vec<&Field> = fields.iter().collect();
    let phys = to_physical_many(&refs);
    let mut s = vec![0.0; grid.point_count()];
    for u in &phys {
        for (acc, x) in s.iter_mut().zip(u) {
            *acc += x * x;
        }
    }
    let prods: Vec<Vec<f64>> = phys.par_iter().map(|u| u.iter().zip(&s).map(|(x, s)| s * x).collect()).collect();
    grid.to_spectral_many(&prods)
        .into_iter()
        .zip(fields)
        .map(|(sp, f)| {
            let coeffs: Vec<C64> =
                sp.coeffs().iter().zip(f.coeffs()).map(|(a, b)| b * linear - a * cubic).collect();
            Field::from_hermitian(grid, coeffs)
        })
        .collect()
}

/// Time parameters of a run. Step counts are absolute, so a resumed state
/// continues the same schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub dt: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub thinning: u64,
}

impl Schedule {
    pub fn emits_at(&self, step: u64) -> bool {
        step > self.burn_in && (step - self.burn_in) % self.thinning.max(1) == 0
    }
}

/// Runs `state` up to `schedule.steps`, calling `emit` on the initial state
/// (fresh runs only) and at the thinning cadence after burn-in.
pub fn simulate<F>(state: &mut EnsembleState, schedule: &Schedule, mut emit: F) -> Result<()>
where
    F: FnMut(&EnsembleState) -> Result<()>,
{
    if state.step_count() == 0 {
        emit(state)?;
    }
    let prop = Propagator::new(state.grid(), schedule.dt)?;
    while state.step_count() < schedule.steps {
        state.step(&prop)?;
        if schedule.emits_at(state.step_count()) {
            emit(state)?;
        }
    }
    Ok(())
}
