//! The named experiments. Each one turns a validated [`RunConfig`] into an
//! [`Outcome`]: a verdict, long-form records and extra CSV tables. Nothing
//! here touches the filesystem except checkpoints.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::checkpoint;
use super::config::{Experiment, RunConfig};
use crate::convergence::{
    energy_distance, reference_gff_samples, validate_bubble, BubbleVerdict, CovarianceAccumulator, ScalingStudy,
    StationaryMeasurements, StationaryRun,
};
use crate::dynamics::{EnsembleState, Propagator, Schedule};
use crate::error::{Error, Result};
use crate::exact::{bubble_two_point, eo4_limit, eo4_limit_retained, free_two_point, Components, SpectralFunction};
use crate::lattice::{Field, TorusGrid};
use crate::meanfield::{coupling_experiment, solve_1d_meanfield, CouplingRecord, McKeanEnsemble};
use crate::noise::{free_variance, sample_stationary_z, NoiseStream, Purpose};
use crate::observables::{
    ds_residual_sample, obs2_fields, CorrelationEstimate, obs4_fields, summarize_residuals, Functional, ObservableSample, Residual,
    SpectrumAccumulator,
};
use crate::record::RunRecord;
use crate::renorm::{
    mu_fixed_point_1d, mu_fixed_point_renormalized, one_dim_bubble, wick_constant_a, Counterterms, ModeSum,
};
use crate::stats::{batch_means, mean_and_se};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Complete,
}

impl Status {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

/// Everything an experiment produced, ready to be written out.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub experiment: Experiment,
    pub status: Status,
    pub verdict: Value,
    /// extra CSV files as `(file name, contents)`
    pub tables: Vec<(String, String)>,
}

/// Mutable side of a run: records are appended as they are produced so a
/// failing run still flushes what it measured.
#[derive(Debug, Default)]
pub struct RunContext {
    pub checkpoint_dir: Option<PathBuf>,
    pub records: Vec<RunRecord>,
}

impl RunContext {
    pub fn in_memory() -> Self {
        Self::default()
    }
}

pub fn execute(cfg: &RunConfig, ctx: &mut RunContext) -> Result<Outcome> {
    match cfg.experiment {
        Experiment::FreeCheck => free_check(cfg, ctx),
        Experiment::Dynamics => dynamics(cfg, ctx),
        Experiment::Meanfield1d => meanfield_1d(cfg, ctx),
        Experiment::Meanfield2d => meanfield_2d(cfg, ctx),
        Experiment::Coupling => coupling(cfg, ctx),
        Experiment::GffConvergence => gff_convergence(cfg, ctx),
        Experiment::BubbleValidation => {
            let study = observable_study(cfg)?;
            Ok(bubble_outcome(cfg, &study, ctx))
        }
        Experiment::Eo4 => {
            let study = observable_study(cfg)?;
            eo4_outcome(cfg, &study, ctx)
        }
        Experiment::DsCheck => ds_check(cfg, ctx),
        Experiment::MuSolver => mu_solver(cfg),
    }
}

fn outcome(cfg: &RunConfig, status: Status, verdict: Value, tables: Vec<(String, String)>) -> Outcome {
    Outcome { experiment: cfg.experiment, status, verdict, tables }
}

fn record(cfg: &RunConfig, step: u64, t: f64) -> RunRecord {
    RunRecord::new(step, t, cfg.seed, cfg.hash())
}

fn counterterms(cfg: &RunConfig, grid: &TorusGrid) -> Counterterms {
    let mut ct = Counterterms::for_grid(grid);
    if let Some(a) = cfg.flags.counterterm_a {
        ct.a = a;
    }
    ct
}

fn new_state(cfg: &RunConfig, grid: &Arc<TorusGrid>, components: usize, member: u32) -> Result<EnsembleState> {
    let mut st = EnsembleState::new(grid, components, cfg.integrator(), cfg.flags.init, cfg.seed, member)?
        .with_counterterms(counterterms(cfg, grid));
    if let Some(w) = cfg.flags.wick_multiplier {
        st = st.with_wick_multiplier(w);
    }
    Ok(st)
}

fn sample_count(s: &Schedule) -> usize {
    (s.steps.saturating_sub(s.burn_in) / s.thinning.max(1)) as usize
}

fn batch_size(s: &Schedule, batches: usize) -> Result<usize> {
    let n = sample_count(s);
    if batches < 2 || n < 2 * batches {
        return Err(Error::InsufficientSamples(format!("schedule yields {n} samples, need at least {}", 2 * batches)));
    }
    Ok(n / batches)
}

// ---------------------------------------------------------------- free-check

fn free_check(cfg: &RunConfig, ctx: &mut RunContext) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let sched = cfg.schedule();
    let mut acc = CovarianceAccumulator::new(&grid, batch_size(&sched, cfg.time.batches)?);
    let mut state = new_state(cfg, &grid, cfg.ensemble.n, 0)?;
    let prop = Propagator::new(&grid, sched.dt)?;
    let mut identical = state.phi() == state.z();
    while state.step_count() < sched.steps {
        state.step(&prop)?;
        identical &= state.phi() == state.z();
        let step = state.step_count();
        if sched.emits_at(step) {
            acc.push(&[&state.phi()[0]]);
        }
        if step % cfg.time.record_every.max(1) == 0 {
            ctx.records.push(
                record(cfg, step, state.t())
                    .metric("phi1_l2_sq", state.phi()[0].sobolev_norm_sq(0.0))
                    .metric("phi_equals_z", if identical { 1.0 } else { 0.0 }),
            );
        }
    }
    let mut table = String::from("k1,k2,k3,variance,stderr,reference,z\n");
    let mut worst: f64 = 0.0;
    let mut within = 0;
    let modes = acc.mode_estimates()?;
    for &(i, v, se) in &modes {
        let reference = free_variance(&grid, i);
        let z = (v - reference) / se;
        worst = worst.max(z.abs());
        within += usize::from(z.abs() <= 3.0);
        let k = grid.mode(i);
        writeln!(table, "{},{},{},{v:e},{se:e},{reference:e},{z:.4}", k[0], k[1], k[2]).expect("string write");
    }
    let all_within = within == modes.len();
    let verdict = json!({
        "modes": modes.len(),
        "modes_within_3se": within,
        "max_abs_z": worst,
        "phi_equals_z_bitwise": identical,
        "samples": acc.count(),
    });
    Ok(outcome(cfg, Status::from_pass(all_within && identical), verdict, vec![("free_modes.csv".into(), table)]))
}

// ------------------------------------------------------------------ dynamics

fn observables_available(grid: &TorusGrid) -> bool {
    grid.require_alias_free_cubic().is_ok()
}

fn dynamics(cfg: &RunConfig, ctx: &mut RunContext) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let sched = cfg.schedule();
    let mut state = match &cfg.flags.resume {
        Some(path) => {
            let st = checkpoint::load(path)?;
            if !st.grid().same_as(&grid)
                || st.components() != cfg.ensemble.n
                || st.seed() != cfg.seed
                || st.integrator() != cfg.integrator()
            {
                return Err(Error::Config(format!(
                    "checkpoint {} does not match the configured grid, N, seed or integrator",
                    path.display()
                )));
            }
            st
        }
        None => new_state(cfg, &grid, cfg.ensemble.n, 0)?,
    };
    let resumed_from = state.step_count();
    let prop = Propagator::new(&grid, sched.dt)?;
    let with_obs = observables_available(&grid);
    let every = cfg.time.record_every.max(1);
    let snapshot = |st: &EnsembleState| -> Result<RunRecord> {
        let mut r = record(cfg, st.step_count(), st.t())
            .metric("phi1_l2_sq", st.phi()[0].sobolev_norm_sq(0.0))
            .metric("h1_dist_sq", st.phi()[0].sub(&st.z()[0])?.sobolev_norm_sq(1.0));
        if with_obs {
            let o = ObservableSample::from_state(st)?;
            r = r.metric("obs2_mean", o.o2_mean()).metric("obs4_mean", o.o4_mean());
        }
        Ok(r)
    };
    if state.step_count() == 0 {
        ctx.records.push(snapshot(&state)?);
    }
    while state.step_count() < sched.steps {
        state.step(&prop)?;
        let step = state.step_count();
        if step % every == 0 {
            ctx.records.push(snapshot(&state)?);
        }
        if cfg.flags.checkpoint_every > 0 && step % cfg.flags.checkpoint_every == 0 {
            if let Some(dir) = &ctx.checkpoint_dir {
                checkpoint::save(&state, &dir.join(format!("checkpoint-{step:012}.bin")))?;
            }
        }
    }
    if let Some(dir) = &ctx.checkpoint_dir {
        checkpoint::save(&state, &dir.join("final.bin"))?;
    }
    let verdict = json!({
        "resumed_from_step": resumed_from,
        "final_step": state.step_count(),
        "final_t": state.t(),
        "records": ctx.records.len(),
    });
    Ok(outcome(cfg, Status::Complete, verdict, Vec::new()))
}

// ---------------------------------------------------------------- mean field

fn meanfield_1d(cfg: &RunConfig, ctx: &mut RunContext) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let sched = cfg.schedule();
    let res = solve_1d_meanfield(&grid, cfg.ensemble.m, &sched, cfg.time.batches, cfg.seed)?;
    for (&t, &mu) in res.times.iter().zip(&res.mu_trace) {
        ctx.records.push(record(cfg, (t / sched.dt).round() as u64, t).metric("mu_hat", mu));
    }
    let verdict = json!({
        "mu_mean": res.mu_mean,
        "mu_stderr": res.mu_se,
        "mu_truncated": res.mu_truncated,
        "mu_analytic": res.mu_analytic,
        "truncation_bias": res.mu_truncated - res.mu_analytic,
        "deviation": res.mu_mean - res.mu_analytic,
        "matches": res.matches(),
    });
    Ok(outcome(cfg, Status::from_pass(res.matches()), verdict, Vec::new()))
}

fn meanfield_2d(cfg: &RunConfig, ctx: &mut RunContext) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let sched = cfg.schedule();
    let mut ens = McKeanEnsemble::new(&grid, cfg.ensemble.m, cfg.flags.init, cfg.seed, 0)?
        .with_homogeneity(cfg.flags.homogeneity);
    let prop = Propagator::new(&grid, sched.dt)?;
    let mut trace = Vec::new();
    while ens.step_count() < sched.steps {
        let mu = ens.step(&prop)?.mean();
        let step = ens.step_count();
        if sched.emits_at(step) {
            trace.push(mu);
        }
        if step % cfg.time.record_every.max(1) == 0 {
            let var: f64 = ens.mode_variances().iter().sum();
            ctx.records.push(record(cfg, step, ens.t()).metric("mu_hat", mu).metric("total_mode_variance", var));
        }
    }
    let (mean, se) = batch_means(&trace, cfg.time.batches)?;
    let fixed_point = mu_fixed_point_renormalized(&grid);
    let consistent = (mean - fixed_point).abs() <= 3.0 * se;
    let verdict = json!({
        "mu_mean": mean,
        "mu_stderr": se,
        "renormalized_fixed_point": fixed_point,
        "within_3se": consistent,
        "homogeneity": ens.is_homogeneous(),
    });
    Ok(outcome(cfg, Status::from_pass(consistent && fixed_point.abs() <= 1e-10), verdict, Vec::new()))
}

// ------------------------------------------------------------------ coupling

fn coupling(cfg: &RunConfig, ctx: &mut RunContext) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let units: Vec<(usize, u32)> = cfg
        .ensemble
        .n_values
        .iter()
        .flat_map(|&n| (0..cfg.ensemble.replicas as u32).map(move |r| (n, r)))
        .collect();
    let runs: Vec<CouplingRecord> = units
        .par_iter()
        .map(|&(n, r)| {
            let mut sys = new_state(cfg, &grid, n, r)?;
            let mut ens = McKeanEnsemble::new(&grid, cfg.ensemble.m.max(n), cfg.flags.init, cfg.seed, r)?
                .with_homogeneity(cfg.flags.homogeneity);
            coupling_experiment(&mut sys, &mut ens, cfg.time.dt, cfg.time.steps, cfg.time.record_every)
        })
        .collect::<Result<_>>()?;
    for run in &runs {
        for (&t, &d) in run.times.iter().zip(&run.distances) {
            let step = (t / cfg.time.dt).round() as u64;
            ctx.records.push(
                record(cfg, step, t)
                    .metric("N", run.components as f64)
                    .metric("replica", run.replica as f64)
                    .metric("l2_dist_sq", d),
            );
        }
    }
    let mut table = String::from("N,mean_sup,stderr,mean_time_average,replicas\n");
    let (mut axis, mut values, mut ses) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &cfg.ensemble.n_values {
        let of_n: Vec<&CouplingRecord> = runs.iter().filter(|r| r.components == n).collect();
        let sups: Vec<f64> = of_n.iter().map(|r| r.sup).collect();
        let avgs: Vec<f64> = of_n.iter().map(|r| r.time_average).collect();
        let (m, se) = mean_and_se(&sups);
        let (ma, _) = mean_and_se(&avgs);
        writeln!(table, "{n},{m:e},{se:e},{ma:e},{}", sups.len()).expect("string write");
        axis.push(n as f64);
        values.push(m);
        ses.push(se);
    }
    let study = ScalingStudy::new("sup_l2_dist_sq", axis, values, ses, cfg.seed)?;
    let in_window = study.fit.within(-1.3, -0.7);
    let decreasing = study.is_decreasing();
    let verdict = json!({
        "study": study,
        "decreasing": decreasing,
        "slope_in_window": in_window,
        "window": [-1.3, -0.7],
    });
    Ok(outcome(cfg, Status::from_pass(decreasing && in_window), verdict, vec![("coupling.csv".into(), table)]))
}

// ---------------------------------------------------------- gff convergence

fn stationary_run(cfg: &RunConfig, grid: &Arc<TorusGrid>, n: usize, sched: Schedule) -> StationaryRun {
    let mut run = StationaryRun::new(grid, n, sched, cfg.seed);
    run.batches = cfg.time.batches;
    run.integrator = cfg.integrator();
    run.counterterms = Some(counterterms(cfg, grid));
    run.wick_multiplier = cfg.flags.wick_multiplier;
    run
}

fn gff_convergence(cfg: &RunConfig, ctx: &mut RunContext) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let sched = cfg.schedule();
    let keep = 200;
    let mut units: Vec<(usize, bool)> = cfg.ensemble.n_values.iter().map(|&n| (n, false)).collect();
    if cfg.flags.negative_control {
        units.extend(cfg.ensemble.n_values.iter().map(|&n| (n, true)));
    }
    let results: Vec<StationaryMeasurements> = units
        .par_iter()
        .map(|&(n, control)| {
            let mut run = stationary_run(cfg, &grid, n, sched);
            run.keep_samples = keep;
            if control {
                run.counterterms = Some(Counterterms::none());
            }
            run.measure()
        })
        .collect::<Result<_>>()?;
    let reference = reference_gff_samples(&grid, keep, cfg.seed.wrapping_add(1));
    let mut table = String::from(
        "N,variant,h1_dist_sq,h1_stderr,cov_distance,cov_stderr,noise_floor,debiased_sq,energy_distance,stationary\n",
    );
    for (&(n, control), m) in units.iter().zip(&results) {
        let energy = energy_distance(&m.phi_samples, &reference)?;
        let c = &m.covariance;
        writeln!(
            table,
            "{n},{},{:e},{:e},{:e},{:e},{:e},{:e},{energy:e},{}",
            if control { "no_counterterm" } else { "renormalized" },
            m.h1_mean,
            m.h1_se,
            c.covariance,
            c.covariance_se,
            c.noise_floor,
            c.debiased_sq,
            m.stationarity_ok
        )
        .expect("string write");
        ctx.records.push(
            record(cfg, sched.steps, sched.steps as f64 * sched.dt)
                .metric("N", n as f64)
                .metric("control", if control { 1.0 } else { 0.0 })
                .metric("h1_dist_sq", m.h1_mean)
                .metric("cov_distance", c.covariance)
                .metric("energy_distance", energy),
        );
    }
    let axis: Vec<f64> = cfg.ensemble.n_values.iter().map(|&n| n as f64).collect();
    let k = axis.len();
    let main = &results[..k];
    let h1 = ScalingStudy::new(
        "h1_dist_sq",
        axis.clone(),
        main.iter().map(|m| m.h1_mean).collect(),
        main.iter().map(|m| m.h1_se).collect(),
        cfg.seed,
    )?;
    let h1_pass = h1.fit.within(-1.3, -0.7);
    // The covariance distance is only meaningful where it clears its own
    // sampling floor; otherwise the fitted slope is the floor's.
    let resolved = main.iter().all(|m| m.covariance.debiased_sq > 0.0);
    let (cov_values, cov_ses): (Vec<f64>, Vec<f64>) = if resolved {
        main.iter().map(|m| (m.covariance.debiased_sq.sqrt(), m.covariance.covariance_se)).unzip()
    } else {
        main.iter().map(|m| (m.covariance.covariance, m.covariance.covariance_se)).unzip()
    };
    let cov = ScalingStudy::new("cov_distance", axis.clone(), cov_values, cov_ses, cfg.seed)?;
    let cov_pass = resolved && cov.fit.within(-0.75, -0.3);
    let mut verdict = json!({
        "h1": h1,
        "h1_slope_in_window": h1_pass,
        "covariance": cov,
        "covariance_resolved": resolved,
        "covariance_slope_in_window": cov_pass,
        "stationary": main.iter().map(|m| m.stationarity_ok).collect::<Vec<_>>(),
    });
    let mut pass = h1_pass && cov_pass;
    if cfg.flags.negative_control {
        let ctl = &results[k..];
        let values: Vec<f64> = ctl.iter().map(|m| m.h1_mean).collect();
        let ses: Vec<f64> = ctl.iter().map(|m| m.h1_se).collect();
        let control = ScalingStudy::new("h1_dist_sq_no_counterterm", axis, values, ses, cfg.seed)?;
        let control_fails = !control.fit.within(-1.3, -0.7);
        verdict["control"] = json!(control);
        verdict["control_fails"] = json!(control_fails);
        pass &= control_fails;
    }
    Ok(outcome(cfg, Status::from_pass(pass), verdict, vec![("gff_convergence.csv".into(), table)]))
}

// -------------------------------------------- bubble spectrum and E[O4]

/// Stationary runs of the N-system with observables, one per entry of
/// `N_values`, plus an exact free-field baseline.
#[derive(Clone, Debug)]
pub struct ObservableStudy {
    pub grid: Arc<TorusGrid>,
    pub components: Vec<usize>,
    /// runs at `dt`, or at `dt/2` when extrapolating
    pub fine: Vec<StationaryMeasurements>,
    /// runs at `dt` when extrapolating
    pub coarse: Vec<StationaryMeasurements>,
    pub free_spectrum: CorrelationEstimate,
    pub free_o4: (f64, f64),
}

fn halved(s: Schedule) -> Schedule {
    Schedule { dt: s.dt / 2.0, steps: 2 * s.steps, burn_in: 2 * s.burn_in, thinning: 2 * s.thinning }
}

pub fn observable_study(cfg: &RunConfig) -> Result<ObservableStudy> {
    let grid = cfg.grid()?;
    let sched = cfg.schedule();
    let extrapolate = cfg.flags.extrapolate;
    let mut units: Vec<(usize, bool)> = cfg.ensemble.n_values.iter().map(|&n| (n, true)).collect();
    if extrapolate {
        units.extend(cfg.ensemble.n_values.iter().map(|&n| (n, false)));
    }
    let mut results: Vec<StationaryMeasurements> = units
        .par_iter()
        .map(|&(n, fine)| {
            let s = if fine && extrapolate { halved(sched) } else { sched };
            let mut run = stationary_run(cfg, &grid, n, s);
            run.observables = true;
            run.measure()
        })
        .collect::<Result<_>>()?;
    let coarse = results.split_off(cfg.ensemble.n_values.len());

    let n_free = *cfg.ensemble.n_values.last().expect("validated non-empty");
    let draws = sample_count(&sched).max(2 * cfg.time.batches);
    let a = wick_constant_a(&grid);
    let base_seed = cfg.seed.wrapping_add(1);
    let rows: Vec<(Vec<f64>, f64)> = (0..draws)
        .into_par_iter()
        .map(|s| {
            let phi: Vec<Field> = (0..n_free)
                .map(|i| sample_stationary_z(&grid, &NoiseStream::new(base_seed, s as u32, i as u32, Purpose::Auxiliary)))
                .collect();
            let o4 = obs4_fields(&phi, a)?;
            Ok((obs2_fields(&phi, a)?, o4.iter().sum::<f64>() / o4.len() as f64))
        })
        .collect::<Result<_>>()?;
    let mut acc = SpectrumAccumulator::new(&grid, draws / cfg.time.batches);
    for (o2, _) in &rows {
        acc.push(o2);
    }
    let o4: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(ObservableStudy {
        grid,
        components: cfg.ensemble.n_values.clone(),
        fine: results,
        coarse,
        free_spectrum: acc.finish()?,
        free_o4: mean_and_se(&o4),
    })
}

fn spectrum_table(est: &CorrelationEstimate, reference: &SpectralFunction) -> String {
    let mut buf = Vec::new();
    est.write_csv(&mut buf, reference).expect("in-memory write");
    String::from_utf8(buf).expect("utf-8 csv")
}

fn bubble_verdicts(study: &ObservableStudy) -> Result<Vec<BubbleVerdict>> {
    study
        .components
        .iter()
        .zip(&study.fine)
        .map(|(&n, m)| {
            let est = m.spectrum.as_ref().ok_or_else(|| Error::InsufficientSamples("run kept no spectrum".into()))?;
            Ok(validate_bubble(&study.grid, est, &bubble_two_point(&study.grid, Components::Finite(n))))
        })
        .collect()
}

/// Criterion verdict for the bubble-resummed spectrum of `obs2`.
pub fn bubble_outcome(cfg: &RunConfig, study: &ObservableStudy, ctx: &mut RunContext) -> Outcome {
    let grid = &study.grid;
    let verdicts = match bubble_verdicts(study) {
        Ok(v) => v,
        Err(e) => return outcome(cfg, Status::Fail, json!({ "error": e.to_string() }), Vec::new()),
    };
    let mut tables = Vec::new();
    for ((&n, m), v) in study.components.iter().zip(&study.fine).zip(&verdicts) {
        let reference = bubble_two_point(grid, Components::Finite(n));
        if let Some(est) = &m.spectrum {
            tables.push((format!("spectrum_N{n}.csv"), spectrum_table(est, &reference)));
        }
        ctx.records.push(
            record(cfg, 0, 0.0)
                .metric("N", n as f64)
                .metric("fraction_within_3se", v.fraction_within)
                .metric("residual_norm", v.residual_norm),
        );
    }
    let free = validate_bubble(grid, &study.free_spectrum, &free_two_point(grid));
    tables.push(("spectrum_free.csv".into(), spectrum_table(&study.free_spectrum, &free_two_point(grid))));
    let last = verdicts.last().expect("at least one N");
    let first = verdicts.first().expect("at least one N");
    let shrinking = verdicts.len() < 2 || last.residual_norm < first.residual_norm;
    let pass = last.pass_modes && shrinking && free.pass_modes;
    let per_n: Vec<Value> = study
        .components
        .iter()
        .zip(&verdicts)
        .map(|(&n, v)| {
            json!({
                "N": n,
                "fraction_within_3se": v.fraction_within,
                "max_abs_z": v.max_abs_z,
                "residual_norm": v.residual_norm,
                "pass_modes": v.pass_modes,
            })
        })
        .collect();
    let verdict = json!({
        "per_N": per_n,
        "residual_norm_shrinking": shrinking,
        "free_baseline": {
            "fraction_within_3se": free.fraction_within,
            "max_abs_z": free.max_abs_z,
            "pass_modes": free.pass_modes,
        },
    });
    outcome(cfg, Status::from_pass(pass), verdict, tables)
}

/// `E[O4]` per N: the fine run, or `2·fine − coarse` when extrapolating.
pub fn eo4_estimates(study: &ObservableStudy) -> Result<Vec<(f64, f64)>> {
    let get = |m: &StationaryMeasurements| m.o4.ok_or_else(|| Error::InsufficientSamples("run kept no obs4".into()));
    if study.coarse.is_empty() {
        return study.fine.iter().map(get).collect();
    }
    study
        .fine
        .iter()
        .zip(&study.coarse)
        .map(|(f, c)| {
            let (fv, fs) = get(f)?;
            let (cv, cs) = get(c)?;
            Ok((2.0 * fv - cv, (4.0 * fs * fs + cs * cs).sqrt()))
        })
        .collect()
}

/// Criterion verdict for the large-N limit of `E[obs4]`.
pub fn eo4_outcome(cfg: &RunConfig, study: &ObservableStudy, ctx: &mut RunContext) -> Result<Outcome> {
    let limit = eo4_limit(&study.grid)?;
    let retained = eo4_limit_retained(&study.grid)?;
    let est = eo4_estimates(study)?;
    let mut table = String::from("N,eo4,stderr,limit,z,limit_retained,z_retained\n");
    let mut per_n = Vec::new();
    for (&n, &(v, se)) in study.components.iter().zip(&est) {
        let z = (v - limit) / se;
        let zr = (v - retained) / se;
        writeln!(table, "{n},{v:e},{se:e},{limit:e},{z:.4},{retained:e},{zr:.4}").expect("string write");
        ctx.records.push(record(cfg, 0, 0.0).metric("N", n as f64).metric("eo4", v).metric("eo4_stderr", se));
        per_n.push(json!({ "N": n, "eo4": v, "stderr": se, "z": z, "z_retained": zr }));
    }
    let (v_last, se_last) = *est.last().expect("at least one N");
    let within = (v_last - limit).abs() <= 3.0 * se_last;
    let gaps: Vec<f64> = est.iter().map(|(v, _)| (v - limit).abs()).collect();
    let shrinking = gaps.len() < 2 || gaps[gaps.len() - 1] < gaps[0];
    let (f0, fse) = study.free_o4;
    let free_ok = f0.abs() <= 3.0 * fse;
    let verdict = json!({
        "limit": limit,
        "limit_retained_modes": retained,
        "per_N": per_n,
        "within_3se_at_largest_N": within,
        "gap_shrinking": shrinking,
        "extrapolated": !study.coarse.is_empty(),
        "free_baseline": { "mean": f0, "stderr": fse, "within_3se_of_zero": free_ok },
    });
    Ok(outcome(cfg, Status::from_pass(within && shrinking && free_ok), verdict, vec![("eo4.csv".into(), table)]))
}

// ------------------------------------------------------------------ ds-check

/// The battery seen from component `i`: cross terms always pair with
/// another component.
fn battery_for(battery: &[Functional], i: usize, components: usize) -> Vec<Functional> {
    battery
        .iter()
        .map(|f| match f {
            Functional::Cross(j, d) if *j == i => Functional::Cross((i + 1) % components, *d),
            other => other.clone(),
        })
        .collect()
}

fn residual_rows(state: &EnsembleState, battery: &[Functional], rows: &mut Vec<Vec<f64>>) -> Result<()> {
    let n = state.components();
    for i in 0..n {
        rows.push(ds_residual_sample(state, &battery_for(battery, i, n), i)?);
    }
    Ok(())
}

fn interacting_residuals(cfg: &RunConfig, grid: &Arc<TorusGrid>, sched: Schedule, battery: &[Functional]) -> Result<Vec<Residual>> {
    let mut state = new_state(cfg, grid, cfg.ensemble.n, 0)?;
    let prop = Propagator::new(grid, sched.dt)?;
    let mut rows = Vec::new();
    while state.step_count() < sched.steps {
        state.step(&prop)?;
        if sched.emits_at(state.step_count()) {
            residual_rows(&state, battery, &mut rows)?;
        }
    }
    summarize_residuals(battery, &rows, cfg.time.batches)
}

fn gaussian_residuals(cfg: &RunConfig, grid: &Arc<TorusGrid>, draws: usize, battery: &[Functional]) -> Result<Vec<Residual>> {
    let free = grid.with_parameters(grid.mass(), 0.0)?;
    let n = cfg.ensemble.n;
    let seed = cfg.seed.wrapping_add(1);
    let rows: Vec<Vec<Vec<f64>>> = (0..draws)
        .into_par_iter()
        .map(|s| {
            let z: Vec<Field> = (0..n)
                .map(|i| sample_stationary_z(&free, &NoiseStream::new(seed, s as u32, i as u32, Purpose::Reference)))
                .collect();
            let st = EnsembleState::from_parts(
                &free,
                z.clone(),
                z,
                0.0,
                0,
                Counterterms::for_grid(&free),
                cfg.integrator(),
                seed,
                s as u32,
            )?;
            let mut rows = Vec::with_capacity(n);
            residual_rows(&st, battery, &mut rows)?;
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let flat: Vec<Vec<f64>> = rows.into_iter().flatten().collect();
    summarize_residuals(battery, &flat, cfg.time.batches)
}

fn ds_check(cfg: &RunConfig, ctx: &mut RunContext) -> Result<Outcome> {
    let grid = cfg.grid()?;
    let sched = cfg.schedule();
    let battery = Functional::battery(cfg.ensemble.n);
    let gaussian = gaussian_residuals(cfg, &grid, sample_count(&sched).max(2 * cfg.time.batches), &battery)?;
    let (coarse, fine) = if cfg.flags.extrapolate {
        let pair: Vec<Vec<Residual>> = [sched, halved(sched)]
            .par_iter()
            .map(|&s| interacting_residuals(cfg, &grid, s, &battery))
            .collect::<Result<_>>()?;
        let mut it = pair.into_iter();
        (it.next(), it.next().expect("two runs"))
    } else {
        (None, interacting_residuals(cfg, &grid, sched, &battery)?)
    };
    let interacting: Vec<Residual> = match &coarse {
        Some(c) => c.iter().zip(&fine).map(|(c, f)| Residual::extrapolate(c, f)).collect(),
        None => fine.clone(),
    };
    let mut table = String::from("variant,functional,residual,stderr,z\n");
    let mut emit = |variant: &str, rs: &[Residual]| {
        for r in rs {
            writeln!(table, "{variant},{},{:e},{:e},{:.4}", r.label, r.value, r.standard_error, r.z()).expect("string write");
        }
    };
    emit("gaussian", &gaussian);
    if let Some(c) = &coarse {
        emit("interacting_dt", c);
        emit("interacting_dt_half", &fine);
    }
    emit("interacting", &interacting);
    for (j, r) in interacting.iter().enumerate() {
        ctx.records.push(record(cfg, j as u64, 0.0).metric(format!("z:{}", r.label), r.z()));
    }
    let ok = |rs: &[Residual]| rs.iter().all(|r| r.z().abs() <= 3.0);
    let to_json = |rs: &[Residual]| -> Vec<Value> {
        rs.iter().map(|r| json!({ "functional": r.label, "residual": r.value, "stderr": r.standard_error, "z": r.z() })).collect()
    };
    let pass = battery.len() >= 5 && ok(&gaussian) && ok(&interacting);
    let verdict = json!({
        "battery_size": battery.len(),
        "gaussian": to_json(&gaussian),
        "gaussian_all_within_3se": ok(&gaussian),
        "interacting": to_json(&interacting),
        "interacting_all_within_3se": ok(&interacting),
        "extrapolated": coarse.is_some(),
    });
    Ok(outcome(cfg, Status::from_pass(pass), verdict, vec![("ds_residuals.csv".into(), table)]))
}

// ----------------------------------------------------------------- mu-solver

const MATRIX_D: [usize; 3] = [1, 2, 3];
const MATRIX_K: [usize; 3] = [3, 5, 8];
const MATRIX_M: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
const TRUNCATIONS: [usize; 9] = [2, 4, 8, 16, 32, 64, 128, 256, 1024];

fn mu_solver(cfg: &RunConfig) -> Result<Outcome> {
    let mut matrix = String::from("d,K,m,mu\n");
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    for d in MATRIX_D {
        for k in MATRIX_K {
            for m in MATRIX_M {
                let grid = TorusGrid::new(d, 2 * k + 2, k, m, 1.0)?;
                let mu = mu_fixed_point_renormalized(&grid);
                worst = worst.max(mu.abs());
                writeln!(matrix, "{d},{k},{m},{mu:e}").expect("string write");
                cases.push((d, k, m));
            }
        }
    }
    let own = TorusGrid::new(cfg.grid.d, cfg.grid.n, cfg.grid.k, cfg.grid.m, cfg.grid.lambda)?;
    let own_mu = mu_fixed_point_renormalized(&own);
    worst = worst.max(own_mu.abs());
    let mut verdict = json!({
        "renormalized_cases": cases.len() + 1,
        "renormalized_max_abs_mu": worst,
        "renormalized_config_grid": own_mu,
    });
    let mut tables = vec![("mu_renormalized.csv".to_string(), matrix)];
    let mut pass = worst <= 1e-10;
    if cfg.grid.d == 1 {
        let m = cfg.grid.m;
        let analytic = mu_fixed_point_1d(m, ModeSum::Analytic)?;
        let residual = one_dim_bubble(m, analytic, ModeSum::Analytic) - analytic;
        let mut trunc = String::from("K,mu,gap_to_analytic\n");
        let mut rows = Vec::new();
        let mut ks: Vec<usize> = TRUNCATIONS.to_vec();
        if !ks.contains(&cfg.grid.k) {
            ks.push(cfg.grid.k);
            ks.sort_unstable();
        }
        for k in ks {
            let mu = mu_fixed_point_1d(m, ModeSum::Truncated(k))?;
            writeln!(trunc, "{k},{mu:.15e},{:e}", mu - analytic).expect("string write");
            rows.push(json!({ "K": k, "mu": mu, "gap": mu - analytic }));
        }
        tables.push(("mu_truncation.csv".into(), trunc));
        verdict["mu_star"] = json!(analytic);
        verdict["mu_star_residual"] = json!(residual);
        verdict["truncation"] = json!(rows);
        pass &= residual.abs() <= 1e-10;
    }
    Ok(outcome(cfg, Status::from_pass(pass), verdict, tables))
}
