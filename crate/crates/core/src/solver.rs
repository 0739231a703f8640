//! Alternating projections `u <- P_S P_M u` with history capture.
//!
//! Metrics for iterate `u^ν` are evaluated while the next step is already
//! computing `P_M u^ν`, so recording costs no extra transforms and never
//! feeds back into the iteration. Metric work is excluded from the timers.

use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::Executor;
use crate::error::{Error, Result};
use crate::grid::{phases_of, Field, PhaseMask, Plane, Real, RealGrid};
use crate::metrics::{
    distance, intensity_from_spectrum, physical_error_with, target_energy, ConvergenceRecord,
    ErrorTolerances, PhysicalError,
};
use crate::projections::{project_slm, FourierConstraint, SlmConstraint};
use crate::transform::FourierProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Initialization {
    /// Inverse transform of the target moduli with all phases zero.
    #[default]
    TargetModulus,
    /// Target moduli with seeded uniform random Fourier phases.
    RandomPhase { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub max_iters: usize,
    pub record_every: usize,
    /// Stop once the relative change of the gap drops to this value.
    pub early_stop_tol: Option<f64>,
    pub tolerances: ErrorTolerances,
    pub init: Initialization,
    /// Soft wall-clock budget; checked between iterations.
    pub deadline: Option<Duration>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            max_iters: 25,
            record_every: 1,
            early_stop_tol: None,
            tolerances: ErrorTolerances::default(),
            init: Initialization::TargetModulus,
            deadline: None,
        }
    }
}

impl SolveConfig {
    pub fn with_iters(max_iters: usize) -> Self {
        SolveConfig {
            max_iters,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if let Some(tol) = self.early_stop_tol {
            if !(tol >= 0.0 && tol.is_finite()) {
                return Err(Error::Config(format!("early stop tolerance {tol} must be nonnegative")));
            }
        }
        ErrorTolerances::new(self.tolerances.t_lit, self.tolerances.t_dark)?;
        Ok(())
    }

    /// Number of history records a run of `iters` iterations produces.
    pub fn records_for(&self, iters: usize) -> usize {
        iters.div_ceil(self.record_every)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    EarlyStop,
    Deadline,
    Cancelled,
}

/// Time spent in the iteration proper (metrics excluded).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveTiming {
    pub fft: Duration,
    pub constraint: Duration,
    /// Sum of per-iteration totals.
    pub iterations: Duration,
    /// Wall time of the whole call, metrics included.
    pub wall: Duration,
}

impl SolveTiming {
    pub fn per_iter(&self, iters: usize) -> Duration {
        if iters == 0 {
            Duration::ZERO
        } else {
            self.iterations / iters as u32
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult<T> {
    pub mask: PhaseMask,
    /// Final iterate, a point of S.
    pub u_star: Field<T>,
    /// Fourier projection `u_star` was obtained from, a point of M.
    pub v_star: Field<T>,
    pub history: Vec<ConvergenceRecord>,
    pub iters_run: usize,
    pub stop_reason: StopReason,
    pub timing: SolveTiming,
    /// Gap of `u_star`.
    pub final_gap: f64,
    pub final_error: PhysicalError,
    /// Energy-normalized intensity produced by `u_star` (frequency order).
    pub reconstruction: RealGrid<f64>,
}

fn check_inputs<T: Real>(
    slm: &SlmConstraint<T>,
    target: &FourierConstraint<T>,
    fft: &dyn FourierProvider<T>,
) -> Result<()> {
    let spec = fft.spec();
    spec.ensure_same(&slm.amplitude().spec())?;
    spec.ensure_same(&target.amplitude().spec())?;
    if slm.amplitude().max() <= T::zero() {
        return Err(Error::Degenerate("all-zero SLM amplitude"));
    }
    if target.amplitude().max() <= T::zero() {
        return Err(Error::Degenerate("all-dark target"));
    }
    Ok(())
}

/// Starting point: the target moduli with zero Fourier phase, transformed
/// back to the modulator plane.
pub fn initial_iterate<T: Real>(
    target: &FourierConstraint<T>,
    slm: &SlmConstraint<T>,
    fft: &dyn FourierProvider<T>,
    exec: &Executor,
) -> Result<Field<T>> {
    slm.amplitude().spec().ensure_same(&target.amplitude().spec())?;
    initial_iterate_with(target, Initialization::TargetModulus, fft, exec)
}

pub fn initial_iterate_with<T: Real>(
    target: &FourierConstraint<T>,
    init: Initialization,
    fft: &dyn FourierProvider<T>,
    exec: &Executor,
) -> Result<Field<T>> {
    let m = target.amplitude();
    let spectrum = match init {
        Initialization::TargetModulus => Field::from_modulus(m, Plane::FourierPlane),
        Initialization::RandomPhase { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = m
                .data()
                .iter()
                .map(|&a| Complex::from_polar(a, T::of(rng.random::<f64>() * std::f64::consts::TAU)))
                .collect();
            Field::from_raw(m.spec(), Plane::FourierPlane, data)
        }
    };
    fft.inverse_owned(spectrum, exec)
}

pub fn solve<T: Real>(
    slm: &SlmConstraint<T>,
    target: &FourierConstraint<T>,
    cfg: &SolveConfig,
    fft: &dyn FourierProvider<T>,
    exec: &Executor,
) -> Result<SolveResult<T>> {
    solve_observed(slm, target, cfg, fft, exec, |_| ControlFlow::Continue(()))
}

/// Like [`solve`], calling `observer` after every history record.
/// Returning `Break` stops after the current iteration.
pub fn solve_observed<T: Real>(
    slm: &SlmConstraint<T>,
    target: &FourierConstraint<T>,
    cfg: &SolveConfig,
    fft: &dyn FourierProvider<T>,
    exec: &Executor,
    mut observer: impl FnMut(&ConvergenceRecord) -> ControlFlow<()>,
) -> Result<SolveResult<T>> {
    cfg.validate()?;
    check_inputs(slm, target, fft)?;

    let wall = Instant::now();
    let target_intensity = target.amplitude().cast::<f64>().squared();
    let energy = target_energy(target);

    let mut u = initial_iterate_with(target, cfg.init, fft, exec)?;
    let mut v_prev: Option<Field<T>> = None;
    let mut pending: Option<ConvergenceRecord> = None;
    let mut history = Vec::with_capacity(cfg.records_for(cfg.max_iters));
    let mut timing = SolveTiming::default();
    let mut prev_gap: Option<f64> = None;
    let mut iter = 0usize;
    let mut stop_reason = StopReason::MaxIters;

    let (final_gap, final_intensity) = loop {
        let step_start = Instant::now();
        let mut metric_time = Duration::ZERO;

        let t = Instant::now();
        let mut uhat = fft.forward(&u, exec)?;
        let mut fft_time = t.elapsed();

        let recording = iter >= 1 && (iter - 1).is_multiple_of(cfg.record_every);
        let intensity = if recording || iter == cfg.max_iters {
            let t = Instant::now();
            let i = intensity_from_spectrum(&uhat, energy, exec)?;
            metric_time += t.elapsed();
            Some(i)
        } else {
            None
        };

        let t = Instant::now();
        target.0.apply_in_place(uhat.data_mut(), exec);
        let mut constraint_time = t.elapsed();

        let t = Instant::now();
        let v = fft.inverse_owned(uhat, exec)?;
        fft_time += t.elapsed();

        if iter >= 1 {
            let t = Instant::now();
            let on_s = project_slm(&u, slm, exec)?;
            let gap = distance(&on_s, &v, exec);
            if !gap.is_finite() {
                return Err(Error::NonFinite { iter });
            }
            let mut control = ControlFlow::Continue(());
            let mut record = pending.take().expect("timing of the previous step");
            if recording {
                let e = physical_error_with(
                    intensity.as_ref().expect("intensity is computed when recording"),
                    &target_intensity,
                    &cfg.tolerances,
                    exec,
                )?;
                record.gap = gap;
                record.err_lit = e.lit;
                record.err_dark = e.dark;
                history.push(record);
                control = observer(&record);
            }
            metric_time += t.elapsed();

            if iter == cfg.max_iters {
                break (gap, intensity);
            }
            if control.is_break() {
                stop_reason = StopReason::Cancelled;
                break (gap, intensity);
            }
            if let (Some(tol), Some(prev)) = (cfg.early_stop_tol, prev_gap) {
                if (gap - prev).abs() <= tol * gap {
                    stop_reason = StopReason::EarlyStop;
                    break (gap, intensity);
                }
            }
            if cfg.deadline.is_some_and(|d| wall.elapsed() >= d) {
                stop_reason = StopReason::Deadline;
                break (gap, intensity);
            }
            prev_gap = Some(gap);
        }

        let t = Instant::now();
        let mut next = v.clone();
        slm.0.apply_in_place(next.data_mut(), exec);
        constraint_time += t.elapsed();

        let total = step_start.elapsed().saturating_sub(metric_time);
        timing.fft += fft_time;
        timing.constraint += constraint_time;
        timing.iterations += total;
        iter += 1;
        pending = Some(ConvergenceRecord {
            iter,
            gap: 0.0,
            err_lit: 0.0,
            err_dark: 0.0,
            time_fft_ms: ms(fft_time),
            time_constraint_ms: ms(constraint_time),
            time_total_ms: ms(total),
        });
        v_prev = Some(v);
        u = next;
    };

    let reconstruction = match final_intensity {
        Some(i) => i,
        None => {
            let uhat = fft.forward(&u, exec)?;
            intensity_from_spectrum(&uhat, energy, exec)?
        }
    };
    let final_error = physical_error_with(&reconstruction, &target_intensity, &cfg.tolerances, exec)?;
    let mask = phases_of(&u, slm.precision().zero_tol)?;
    timing.wall = wall.elapsed();

    Ok(SolveResult {
        mask,
        u_star: u,
        v_star: v_prev.expect("at least one iteration ran"),
        history,
        iters_run: iter,
        stop_reason,
        timing,
        final_gap,
        final_error,
        reconstruction,
    })
}

pub(crate) fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}
