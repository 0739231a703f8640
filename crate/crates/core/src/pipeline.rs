//! One solve from a visual-frame target intensity to display products, with
//! the working precision picked at run time.

use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendSelector, Executor};
use crate::error::{Error, Result};
use crate::grid::{PhaseMask, PrecisionTag, Real, RealGrid};
use crate::metrics::{contrast_ratio, ConvergenceRecord, Contrast, PhysicalError};
use crate::patterns::{to_frequency_layout, to_visual_layout};
use crate::projections::{FourierConstraint, SlmConstraint};
use crate::solver::{solve_observed, SolveConfig, SolveTiming, StopReason};
use crate::transform::{PlanCache, RustFftProvider};

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    /// Target intensity in the visual frame (zero frequency at the center).
    pub target: RealGrid<f64>,
    /// Modulator amplitudes; `None` means uniform illumination carrying the
    /// target's energy.
    pub slm_amplitude: Option<RealGrid<f64>>,
    pub backend: BackendSelector,
    pub config: SolveConfig,
}

impl Job {
    pub fn new(target: RealGrid<f64>, backend: BackendSelector, config: SolveConfig) -> Self {
        Job {
            target,
            slm_amplitude: None,
            backend,
            config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub gap: f64,
    pub err_lit: f64,
    pub err_dark: f64,
    /// Lit/dark median ratio; `None` when the target has no dark or no lit
    /// pixels. Infinite when the dark median is exactly zero.
    pub contrast: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct JobOutput {
    pub mask: PhaseMask,
    /// Energy-normalized reconstructed intensity in the visual frame.
    pub reconstruction: RealGrid<f64>,
    pub history: Vec<ConvergenceRecord>,
    pub metrics: FinalMetrics,
    pub error: PhysicalError,
    pub contrast: Option<Contrast>,
    pub iters_run: usize,
    pub stop_reason: StopReason,
    pub precision: PrecisionTag,
    pub timing: SolveTiming,
    /// Target validation, layout shift, constraint setup and pool start.
    pub ingest: Duration,
    /// Obtaining the transform plan.
    pub plan: Duration,
    pub plan_cache_hit: bool,
}

impl JobOutput {
    pub fn per_iter(&self) -> Duration {
        self.timing.per_iter(self.iters_run)
    }

    /// Ingest, planning and the whole solve.
    pub fn total(&self) -> Duration {
        self.ingest + self.plan + self.timing.wall
    }
}

/// Target validation shared by every front end: finite, nonnegative and
/// with at least one lit pixel.
pub fn check_target(target: &RealGrid<f64>) -> Result<()> {
    if let Some((index, &value)) = target
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        return Err(Error::InvalidAmplitude { index, value });
    }
    if target.count_positive() == 0 {
        return Err(Error::Degenerate("all-dark target"));
    }
    Ok(())
}

pub fn run_job(job: &Job, plans: &PlanCache) -> Result<JobOutput> {
    run_job_observed(job, plans, |_| ControlFlow::Continue(()))
}

/// [`run_job`] with a callback per history record; `Break` stops the solve.
pub fn run_job_observed(
    job: &Job,
    plans: &PlanCache,
    observer: impl FnMut(&ConvergenceRecord) -> ControlFlow<()>,
) -> Result<JobOutput> {
    match job.backend.precision {
        PrecisionTag::Single => run_typed::<f32>(job, plans, observer),
        PrecisionTag::Double => run_typed::<f64>(job, plans, observer),
    }
}

fn run_typed<T: Real>(
    job: &Job,
    plans: &PlanCache,
    observer: impl FnMut(&ConvergenceRecord) -> ControlFlow<()>,
) -> Result<JobOutput> {
    let ingest_start = Instant::now();
    check_target(&job.target)?;
    job.config.validate()?;
    let spec = job.target.spec();
    let target_freq = to_frequency_layout(&job.target);
    let m = FourierConstraint::new(target_freq.sqrt().cast::<T>());
    let p = match &job.slm_amplitude {
        Some(a) => {
            spec.ensure_same(&a.spec())?;
            SlmConstraint::new(a.cast::<T>())
        }
        None => SlmConstraint::uniform_matching(&m)?,
    };
    let exec = Executor::new(job.backend.strategy)?;
    let ingest = ingest_start.elapsed();

    let cached = plans.get::<T>(spec);
    let fft: &RustFftProvider<T> = &cached.provider;

    let res = solve_observed(&p, &m, &job.config, fft, &exec, observer)?;
    let contrast = contrast_ratio(&res.reconstruction, &target_freq).ok();
    Ok(JobOutput {
        mask: res.mask,
        reconstruction: to_visual_layout(&res.reconstruction),
        metrics: FinalMetrics {
            gap: res.final_gap,
            err_lit: res.final_error.lit,
            err_dark: res.final_error.dark,
            contrast: contrast.map(|c| c.ratio()),
        },
        history: res.history,
        error: res.final_error,
        contrast,
        iters_run: res.iters_run,
        stop_reason: res.stop_reason,
        precision: T::TAG,
        timing: res.timing,
        ingest,
        plan: cached.elapsed,
        plan_cache_hit: cached.hit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Strategy;
    use crate::grid::GridSpec;
    use crate::patterns::{spot_pattern, SpotSpec};

    fn spots(n: usize) -> RealGrid<f64> {
        spot_pattern(&SpotSpec::scattered(GridSpec::square(n).unwrap(), 5, 4).unwrap()).unwrap()
    }

    #[test]
    fn job_products_line_up() {
        let plans = PlanCache::new();
        let job = Job::new(spots(64), BackendSelector::default(), SolveConfig::with_iters(5));
        let out = run_job(&job, &plans).unwrap();
        assert_eq!(out.history.len(), 5);
        assert_eq!(out.iters_run, 5);
        assert_eq!(out.metrics.gap, out.history[4].gap);
        assert!(!out.plan_cache_hit);
        // Energy-normalized, visual frame: the spots are the brightest pixels.
        assert!((out.reconstruction.data().iter().sum::<f64>() - 5.0).abs() < 1e-9);
        let lit_min = job.target.data().iter().zip(out.reconstruction.data())
            .filter(|(t, _)| **t > 0.0).map(|(_, r)| *r).fold(f64::INFINITY, f64::min);
        let dark_max = job.target.data().iter().zip(out.reconstruction.data())
            .filter(|(t, _)| **t == 0.0).map(|(_, r)| *r).fold(0.0, f64::max);
        assert!(lit_min > dark_max);
        assert!(out.metrics.contrast.unwrap() > 100.0);

        let again = run_job(&job, &plans).unwrap();
        assert!(again.plan_cache_hit);
        assert_eq!(again.mask, out.mask);
    }

    #[test]
    fn precisions_and_strategies_dispatch() {
        let plans = PlanCache::new();
        let mut job = Job::new(spots(32), BackendSelector::default(), SolveConfig::with_iters(3));
        let double = run_job(&job, &plans).unwrap();
        job.backend.strategy = Strategy::Threaded(4);
        let threaded = run_job(&job, &plans).unwrap();
        assert_eq!(double.mask, threaded.mask);
        job.backend.precision = PrecisionTag::Single;
        let single = run_job(&job, &plans).unwrap();
        assert_eq!(single.precision, PrecisionTag::Single);
        assert!((single.metrics.gap - double.metrics.gap).abs() <= 1e-3 * double.metrics.gap);
        assert_eq!(plans.stats().entries, 2);
    }

    #[test]
    fn bad_targets_are_rejected() {
        let plans = PlanCache::new();
        let grid = GridSpec::square(8).unwrap();
        let dark = Job::new(RealGrid::zeros(grid), BackendSelector::default(), SolveConfig::default());
        assert!(matches!(run_job(&dark, &plans), Err(Error::Degenerate(_))));
        let mut nan = vec![0.0; 64];
        nan[3] = f64::NAN;
        assert!(matches!(check_target(&RealGrid::from_raw(grid, nan)), Err(Error::InvalidAmplitude { index: 3, .. })));
    }

    #[test]
    fn fully_lit_target_has_no_contrast() {
        let plans = PlanCache::new();
        let grid = GridSpec::square(8).unwrap();
        let job = Job::new(RealGrid::filled(grid, 1.0).unwrap(), BackendSelector::default(), SolveConfig::with_iters(2));
        let out = run_job(&job, &plans).unwrap();
        assert!(out.contrast.is_none() && out.metrics.contrast.is_none());
    }
}
