//! Unitary 2D discrete Fourier transform behind a provider trait.
//!
//! Both directions scale by `1/sqrt(N)`, so the transform preserves the
//! Euclidean norm and the modulus projection is a true nearest-point map.
//! Frequencies are in standard DFT order (no shift).

use std::any::Any;
use std::collections::HashMap;
use std::f64::consts::TAU;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::backends::Executor;
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, Plane, PrecisionTag, Real};

/// Rows handed to one task when transposing.
const TRANSPOSE_ROWS: usize = 16;

/// Largest grid the naive DFT oracle accepts.
pub const NAIVE_DFT_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Planned 2D transform for one grid size.
///
/// Implementations are immutable once planned and may be shared between
/// threads; the executor decides how the work is spread.
pub trait FourierProvider<T: Real>: Send + Sync {
    fn spec(&self) -> GridSpec;

    /// Transforms a row-major buffer of `spec().len()` values in place.
    fn process(&self, data: &mut [Complex<T>], direction: Direction, exec: &Executor);

    fn name(&self) -> &'static str {
        "unnamed"
    }

    /// SLM plane to Fourier plane, consuming the input buffer.
    fn forward_owned(&self, mut f: Field<T>, exec: &Executor) -> Result<Field<T>> {
        f.expect_plane(Plane::SlmPlane)?;
        self.spec().ensure_same(&f.spec())?;
        self.process(f.data_mut(), Direction::Forward, exec);
        f.set_plane(Plane::FourierPlane);
        Ok(f)
    }

    /// Fourier plane to SLM plane, consuming the input buffer.
    fn inverse_owned(&self, mut f: Field<T>, exec: &Executor) -> Result<Field<T>> {
        f.expect_plane(Plane::FourierPlane)?;
        self.spec().ensure_same(&f.spec())?;
        self.process(f.data_mut(), Direction::Inverse, exec);
        f.set_plane(Plane::SlmPlane);
        Ok(f)
    }

    fn forward(&self, f: &Field<T>, exec: &Executor) -> Result<Field<T>> {
        self.forward_owned(f.clone(), exec)
    }

    fn inverse(&self, f: &Field<T>, exec: &Executor) -> Result<Field<T>> {
        self.inverse_owned(f.clone(), exec)
    }
}

/// Row/column decomposition on top of `rustfft` plans.
pub struct RustFftProvider<T: Real> {
    spec: GridSpec,
    rows_forward: Arc<dyn Fft<T>>,
    rows_inverse: Arc<dyn Fft<T>>,
    cols_forward: Arc<dyn Fft<T>>,
    cols_inverse: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> std::fmt::Debug for RustFftProvider<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RustFftProvider")
            .field("spec", &self.spec)
            .finish()
    }
}

impl<T: Real> RustFftProvider<T> {
    pub fn new(spec: GridSpec) -> Self {
        let mut planner = FftPlanner::<T>::new();
        RustFftProvider {
            spec,
            rows_forward: planner.plan_fft_forward(spec.n_x),
            rows_inverse: planner.plan_fft_inverse(spec.n_x),
            cols_forward: planner.plan_fft_forward(spec.n_y),
            cols_inverse: planner.plan_fft_inverse(spec.n_y),
            scale: T::one() / T::of(spec.len() as f64).sqrt(),
        }
    }

    fn rows(&self, data: &mut [Complex<T>], plan: &Arc<dyn Fft<T>>, len: usize, exec: &Executor) {
        if len == 1 {
            return;
        }
        exec.for_each_chunk(data, len, |rows| {
            let mut scratch = vec![Complex::new(T::zero(), T::zero()); plan.get_inplace_scratch_len()];
            plan.process_with_scratch(rows, &mut scratch);
        });
    }
}

/// `dst[j * n_y + k] = src[k * n_x + j] * scale`, tiled over destination rows.
fn transpose<T: Real>(
    src: &[Complex<T>],
    dst: &mut [Complex<T>],
    n_x: usize,
    n_y: usize,
    scale: Option<T>,
    exec: &Executor,
) {
    exec.for_each_row_block(dst, n_y, TRANSPOSE_ROWS, |first, block| {
        let rows = block.len() / n_y;
        for k in 0..n_y {
            let src_row = &src[k * n_x + first..k * n_x + first + rows];
            for (r, &v) in src_row.iter().enumerate() {
                block[r * n_y + k] = match scale {
                    Some(s) => v * s,
                    None => v,
                };
            }
        }
    });
}

impl<T: Real> FourierProvider<T> for RustFftProvider<T> {
    fn spec(&self) -> GridSpec {
        self.spec
    }

    fn name(&self) -> &'static str {
        "rustfft"
    }

    fn process(&self, data: &mut [Complex<T>], direction: Direction, exec: &Executor) {
        let GridSpec { n_x, n_y, .. } = self.spec;
        assert_eq!(data.len(), n_x * n_y, "buffer does not match the planned grid");
        let (rows, cols) = match direction {
            Direction::Forward => (&self.rows_forward, &self.cols_forward),
            Direction::Inverse => (&self.rows_inverse, &self.cols_inverse),
        };

        self.rows(data, rows, n_x, exec);
        let mut columns = vec![Complex::new(T::zero(), T::zero()); data.len()];
        transpose(data, &mut columns, n_x, n_y, None, exec);
        self.rows(&mut columns, cols, n_y, exec);
        transpose(&columns, data, n_y, n_x, Some(self.scale), exec);
    }
}

/// Shared planned providers keyed by grid shape and precision.
///
/// Lookups take a read lock; a miss plans outside the lock and the first
/// inserted plan wins, so concurrent callers always share one instance.
#[derive(Default)]
pub struct PlanCache {
    plans: RwLock<HashMap<(GridSpec, PrecisionTag), Arc<dyn Any + Send + Sync>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PlanCacheStats {
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
}

/// A provider handed out by the cache, with how it was obtained.
pub struct CachedPlan<T: Real> {
    pub provider: Arc<RustFftProvider<T>>,
    pub hit: bool,
    pub elapsed: Duration,
}

impl PlanCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get<T: Real>(&self, spec: GridSpec) -> CachedPlan<T> {
        let start = Instant::now();
        let key = (spec, T::TAG);
        let found = self.plans.read().unwrap_or_else(|e| e.into_inner()).get(&key).cloned();
        if let Some(plan) = found {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return CachedPlan {
                provider: downcast(plan),
                hit: true,
                elapsed: start.elapsed(),
            };
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let planned: Arc<dyn Any + Send + Sync> = Arc::new(RustFftProvider::<T>::new(spec));
        let plan = self
            .plans
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .entry(key)
            .or_insert(planned)
            .clone();
        CachedPlan {
            provider: downcast(plan),
            hit: false,
            elapsed: start.elapsed(),
        }
    }

    pub fn stats(&self) -> PlanCacheStats {
        PlanCacheStats {
            entries: self.plans.read().unwrap_or_else(|e| e.into_inner()).len(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

impl std::fmt::Debug for PlanCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlanCache").field("stats", &self.stats()).finish()
    }
}

fn downcast<T: Real>(plan: Arc<dyn Any + Send + Sync>) -> Arc<RustFftProvider<T>> {
    plan.downcast::<RustFftProvider<T>>()
        .expect("plan cache keys include the precision tag")
}

/// Textbook double-sum unitary DFT, always evaluated in double precision.
///
/// Intended as a test oracle; refuses grids above [`NAIVE_DFT_LIMIT`] pixels.
pub fn naive_dft<T: Real>(f: &Field<T>, direction: Direction) -> Result<Field<f64>> {
    let spec = f.spec();
    let n = spec.len();
    if n > NAIVE_DFT_LIMIT {
        return Err(Error::OracleTooLarge {
            pixels: n,
            limit: NAIVE_DFT_LIMIT,
        });
    }
    let (expected, out_plane) = match direction {
        Direction::Forward => (Plane::SlmPlane, Plane::FourierPlane),
        Direction::Inverse => (Plane::FourierPlane, Plane::SlmPlane),
    };
    f.expect_plane(expected)?;

    let sign = match direction {
        Direction::Forward => -1.0,
        Direction::Inverse => 1.0,
    };
    let twiddles = |len: usize| -> Vec<Complex<f64>> {
        (0..len)
            .map(|r| Complex::from_polar(1.0, sign * TAU * r as f64 / len as f64))
            .collect()
    };
    let (tw_x, tw_y) = (twiddles(spec.n_x), twiddles(spec.n_y));
    let input: Vec<Complex<f64>> = f
        .data()
        .iter()
        .map(|v| Complex::new(v.re.as_f64(), v.im.as_f64()))
        .collect();
    let norm = 1.0 / (n as f64).sqrt();

    let mut out = Vec::with_capacity(n);
    for b in 0..spec.n_y {
        for a in 0..spec.n_x {
            let mut acc = Complex::new(0.0, 0.0);
            for k in 0..spec.n_y {
                let wy = tw_y[(k * b) % spec.n_y];
                for j in 0..spec.n_x {
                    acc += input[spec.flatten(j, k)] * tw_x[(j * a) % spec.n_x] * wy;
                }
            }
            out.push(acc * norm);
        }
    }
    Field::from_vec(spec, out_plane, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Strategy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field<T: Real>(spec: GridSpec, plane: Plane, seed: u64) -> Field<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(spec, plane, |_, _| {
            Complex::new(
                T::of(rng.random::<f64>() * 2.0 - 1.0),
                T::of(rng.random::<f64>() * 2.0 - 1.0),
            )
        })
        .unwrap()
    }

    fn delta<T: Real>(spec: GridSpec, plane: Plane) -> Field<T> {
        Field::from_fn(spec, plane, |j, k| {
            if j == 0 && k == 0 {
                Complex::new(T::one(), T::zero())
            } else {
                Complex::new(T::zero(), T::zero())
            }
        })
        .unwrap()
    }

    #[test]
    fn delta_transforms_to_constant() {
        let spec = GridSpec::square(4).unwrap();
        let fft = RustFftProvider::<f64>::new(spec);
        let out = fft.forward(&delta(spec, Plane::SlmPlane), &Executor::serial()).unwrap();
        assert_eq!(out.plane(), Plane::FourierPlane);
        for v in out.data() {
            assert!((v - Complex::new(0.25, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_transforms_to_scaled_delta() {
        let n = 6;
        let c = Complex::new(0.7, -1.1);
        let spec = GridSpec::square(n).unwrap();
        let fft = RustFftProvider::<f64>::new(spec);
        let exec = Executor::serial();
        let out = fft
            .forward(&Field::from_fn(spec, Plane::SlmPlane, |_, _| c).unwrap(), &exec)
            .unwrap();
        for (x, v) in out.data().iter().enumerate() {
            let expected = if x == 0 { c * n as f64 } else { Complex::new(0.0, 0.0) };
            assert!((v - expected).norm() < 1e-13, "x={x} v={v}");
        }
        let back = fft
            .inverse(&Field::from_fn(spec, Plane::FourierPlane, |_, _| c).unwrap(), &exec)
            .unwrap();
        assert!((back.data()[0] - c * (spec.len() as f64).sqrt()).norm() < 1e-13);
    }

    #[test]
    fn matches_naive_oracle_both_directions() {
        for (n_x, n_y) in [(8, 8), (5, 7), (16, 4), (1, 9)] {
            let spec = GridSpec::new(n_x, n_y).unwrap();
            let fft = RustFftProvider::<f64>::new(spec);
            let f = random_field::<f64>(spec, Plane::SlmPlane, 3);
            let fast = fft.forward(&f, &Executor::serial()).unwrap();
            assert!(fast.max_abs_diff(&naive_dft(&f, Direction::Forward).unwrap()) <= 1e-12);

            let g = random_field::<f64>(spec, Plane::FourierPlane, 4);
            let fast = fft.inverse(&g, &Executor::serial()).unwrap();
            assert!(fast.max_abs_diff(&naive_dft(&g, Direction::Inverse).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn single_precision_matches_oracle() {
        for n in [8, 16, 64] {
            let spec = GridSpec::square(n).unwrap();
            let f = random_field::<f32>(spec, Plane::SlmPlane, 9);
            let fast = RustFftProvider::<f32>::new(spec)
                .forward(&f, &Executor::serial())
                .unwrap();
            let oracle = naive_dft(&f, Direction::Forward).unwrap();
            assert!(fast.cast::<f64>().max_abs_diff(&oracle) <= 1e-4);
        }
    }

    #[test]
    fn round_trip_and_unitarity() {
        let exec = Executor::serial();
        for n in [8, 16, 64, 256] {
            let spec = GridSpec::square(n).unwrap();
            let fft = RustFftProvider::<f64>::new(spec);
            let f = random_field::<f64>(spec, Plane::SlmPlane, n as u64);
            let norm = f.norm2();
            let fwd = fft.forward(&f, &exec).unwrap();
            let ratio = fwd.norm2() / norm;
            assert!((ratio - 1.0).abs() <= 16.0 * f64::EPSILON, "n={n} ratio={ratio}");
            let back = fft.inverse_owned(fwd, &exec).unwrap();
            assert!(back.max_abs_diff(&f) <= 16.0 * f64::EPSILON * norm);
        }
    }

    #[test]
    fn plan_reuse_and_strategies_are_bitwise_stable() {
        let spec = GridSpec::new(96, 80).unwrap();
        let fft = RustFftProvider::<f64>::new(spec);
        let f = random_field::<f64>(spec, Plane::SlmPlane, 5);
        let serial = Executor::serial();
        let a = fft.forward(&f, &serial).unwrap();
        let b = fft.forward(&f, &serial).unwrap();
        assert_eq!(a, b);
        let threaded = Executor::new(Strategy::Threaded(8)).unwrap();
        assert_eq!(fft.forward(&f, &threaded).unwrap(), a);
    }

    #[test]
    fn rejects_mismatched_grid_and_plane() {
        let fft = RustFftProvider::<f64>::new(GridSpec::square(4).unwrap());
        let exec = Executor::serial();
        let wrong_size = Field::<f64>::zeros(GridSpec::square(5).unwrap(), Plane::SlmPlane);
        assert!(matches!(fft.forward(&wrong_size, &exec), Err(Error::SpecMismatch { .. })));
        let wrong_plane = Field::<f64>::zeros(GridSpec::square(4).unwrap(), Plane::FourierPlane);
        assert!(matches!(fft.forward(&wrong_plane, &exec), Err(Error::WrongPlane { .. })));
    }

    #[test]
    fn naive_dft_properties() {
        let spec = GridSpec::square(8).unwrap();
        let d = naive_dft(&delta::<f64>(spec, Plane::SlmPlane), Direction::Forward).unwrap();
        assert!(d.data().iter().all(|v| (v - Complex::new(1.0 / 8.0, 0.0)).norm() < 1e-15));

        let f = random_field::<f64>(spec, Plane::SlmPlane, 1);
        let g = random_field::<f64>(spec, Plane::SlmPlane, 2);
        let (a, b) = (Complex::new(0.3, 2.0), Complex::new(-1.5, 0.25));
        let combo = Field::from_vec(
            spec,
            Plane::SlmPlane,
            f.data().iter().zip(g.data()).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        let lhs = naive_dft(&combo, Direction::Forward).unwrap();
        let (ff, fg) = (
            naive_dft(&f, Direction::Forward).unwrap(),
            naive_dft(&g, Direction::Forward).unwrap(),
        );
        let rhs = Field::from_vec(
            spec,
            Plane::FourierPlane,
            ff.data().iter().zip(fg.data()).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);

        let (e_in, e_out) = (f.norm2().powi(2), ff.norm2().powi(2));
        assert!((e_in - e_out).abs() <= 1e-12 * e_in);
    }

    #[test]
    fn naive_dft_refuses_large_grids() {
        let f = Field::<f64>::zeros(GridSpec::square(65).unwrap(), Plane::SlmPlane);
        assert!(matches!(
            naive_dft(&f, Direction::Forward),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn plan_cache_shares_plans_per_shape_and_precision() {
        let cache = PlanCache::new();
        let spec = GridSpec::new(12, 8).unwrap();
        let a = cache.get::<f64>(spec);
        let b = cache.get::<f64>(spec);
        let c = cache.get::<f32>(spec);
        let d = cache.get::<f64>(GridSpec::new(12, 8).unwrap().with_extent(1.0, 1.0));
        assert!(!a.hit && b.hit && !c.hit && d.hit);
        assert!(Arc::ptr_eq(&a.provider, &b.provider));
        assert_eq!(c.provider.spec(), spec);
        assert_eq!(cache.stats(), PlanCacheStats { entries: 2, hits: 2, misses: 2 });
    }
}
