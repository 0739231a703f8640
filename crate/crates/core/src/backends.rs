//! Execution strategies for per-pixel kernels.
//!
//! A kernel is a pure function of the pixel index (it may read any input
//! grid at that index, nothing else). The same kernel runs serially or on
//! a private worker pool and yields bitwise identical output either way.
//! Reductions use a fixed tree whose shape depends only on the input
//! length, never on the worker count.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PrecisionTag, Real};

/// Leaf size of the reduction tree.
pub const REDUCE_BLOCK: usize = 64;

/// Smallest slice a worker is handed in parallel maps.
const MIN_PARALLEL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "workers")]
pub enum Strategy {
    Serial,
    Threaded(usize),
}

impl Strategy {
    pub fn workers(self) -> usize {
        match self {
            Strategy::Serial => 1,
            Strategy::Threaded(n) => n,
        }
    }

    /// Threaded strategy using every available core.
    pub fn threaded_all() -> Self {
        Strategy::Threaded(
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Serial => f.write_str("serial"),
            Strategy::Threaded(n) => write!(f, "threaded:{n}"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    /// `serial`, `threaded` (all cores) or `threaded:N`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let strategy = match s.split_once(':') {
            None if s == "serial" => Strategy::Serial,
            None if s == "threaded" => Strategy::threaded_all(),
            Some(("threaded", n)) => Strategy::Threaded(
                n.parse()
                    .map_err(|_| Error::Config(format!("invalid worker count `{n}`")))?,
            ),
            _ => return Err(Error::Config(format!("unknown strategy `{s}`"))),
        };
        if strategy.workers() == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        Ok(strategy)
    }
}

/// Run-time choice of execution strategy and precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendSelector {
    pub strategy: Strategy,
    pub precision: PrecisionTag,
}

impl Default for BackendSelector {
    fn default() -> Self {
        BackendSelector {
            strategy: Strategy::Serial,
            precision: PrecisionTag::Double,
        }
    }
}

/// Runs pixel kernels under a [`Strategy`]. Cloning shares the pool.
#[derive(Clone)]
pub struct Executor {
    strategy: Strategy,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor")
            .field("strategy", &self.strategy)
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::serial()
    }
}

impl Executor {
    pub fn serial() -> Self {
        Executor {
            strategy: Strategy::Serial,
            pool: None,
        }
    }

    /// Builds the worker pool once; it is reused for every call.
    pub fn new(strategy: Strategy) -> Result<Self> {
        match strategy {
            Strategy::Serial => Ok(Executor::serial()),
            Strategy::Threaded(0) => Err(Error::Config("worker count must be at least 1".into())),
            Strategy::Threaded(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .thread_name(|i| format!("holomask-worker-{i}"))
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
                Ok(Executor {
                    strategy,
                    pool: Some(Arc::new(pool)),
                })
            }
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    fn run<R: Send>(&self, op: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(pool) => pool.install(op),
            None => op(),
        }
    }

    /// Output pixel `x` is `kernel(x)`.
    pub fn map_pixels<O, K>(&self, len: usize, kernel: K) -> Vec<O>
    where
        O: Send,
        K: Fn(usize) -> O + Sync + Send,
    {
        match &self.pool {
            None => (0..len).map(kernel).collect(),
            Some(_) => self.run(|| {
                (0..len)
                    .into_par_iter()
                    .with_min_len(MIN_PARALLEL_CHUNK)
                    .map(&kernel)
                    .collect()
            }),
        }
    }

    /// Two-input pixel map; inputs must have equal length.
    pub fn map2<A, B, O, K>(&self, a: &[A], b: &[B], kernel: K) -> Result<Vec<O>>
    where
        A: Sync,
        B: Sync,
        O: Send,
        K: Fn(&A, &B) -> O + Sync + Send,
    {
        if a.len() != b.len() {
            return Err(Error::Config(format!(
                "pixel map inputs differ in length ({} vs {})",
                a.len(),
                b.len()
            )));
        }
        Ok(self.map_pixels(a.len(), |x| kernel(&a[x], &b[x])))
    }

    /// Applies `kernel` to each element in place.
    pub fn for_each_mut<E, K>(&self, data: &mut [E], kernel: K)
    where
        E: Send,
        K: Fn(usize, &mut E) + Sync + Send,
    {
        match &self.pool {
            None => data.iter_mut().enumerate().for_each(|(x, e)| kernel(x, e)),
            Some(_) => self.run(|| {
                data.par_iter_mut()
                    .with_min_len(MIN_PARALLEL_CHUNK)
                    .enumerate()
                    .for_each(|(x, e)| kernel(x, e))
            }),
        }
    }

    /// Hands disjoint `chunk`-sized slices of `data` to `op`.
    pub fn for_each_chunk<E, F>(&self, data: &mut [E], chunk: usize, op: F)
    where
        E: Send,
        F: Fn(&mut [E]) + Sync + Send,
    {
        match &self.pool {
            None => op(data),
            Some(pool) => {
                let rows = data.len() / chunk.max(1);
                // A few batches per worker keeps per-task overhead low.
                let per_task = rows.div_ceil(4 * pool.current_num_threads()).max(1) * chunk;
                self.run(|| data.par_chunks_mut(per_task).for_each(&op))
            }
        }
    }

    /// Splits `data` into rows of `row_len` and hands consecutive groups of
    /// `rows_per_block` rows to `op` along with the index of the first row.
    pub fn for_each_row_block<E, F>(&self, data: &mut [E], row_len: usize, rows_per_block: usize, op: F)
    where
        E: Send,
        F: Fn(usize, &mut [E]) + Sync + Send,
    {
        let block = row_len * rows_per_block.max(1);
        match &self.pool {
            None => data
                .chunks_mut(block)
                .enumerate()
                .for_each(|(b, rows)| op(b * rows_per_block, rows)),
            Some(_) => self.run(|| {
                data.par_chunks_mut(block)
                    .enumerate()
                    .for_each(|(b, rows)| op(b * rows_per_block, rows))
            }),
        }
    }

    /// Fixed-tree reduction of `leaf(x)` over `0..len`.
    ///
    /// Leaves are folded left-to-right inside blocks of [`REDUCE_BLOCK`];
    /// block results are combined pairwise by recursive halving.
    pub fn reduce_pixels<A, L, C>(&self, len: usize, leaf: L, combine: C) -> Result<A>
    where
        A: Send + Copy,
        L: Fn(usize) -> A + Sync + Send,
        C: Fn(A, A) -> A + Sync + Send,
    {
        if len == 0 {
            return Err(Error::Degenerate("reduction over an empty grid"));
        }
        let blocks = len.div_ceil(REDUCE_BLOCK);
        let block_value = |b: usize| {
            let start = b * REDUCE_BLOCK;
            let end = (start + REDUCE_BLOCK).min(len);
            (start + 1..end).fold(leaf(start), |acc, x| combine(acc, leaf(x)))
        };
        let partial: Vec<A> = match &self.pool {
            None => (0..blocks).map(block_value).collect(),
            Some(_) => self.run(|| (0..blocks).into_par_iter().map(block_value).collect()),
        };
        Ok(combine_tree(&partial, &combine))
    }

    /// Fixed-tree sum; zero for an empty range.
    pub fn sum<L>(&self, len: usize, leaf: L) -> f64
    where
        L: Fn(usize) -> f64 + Sync + Send,
    {
        self.reduce_pixels(len, leaf, |a, b| a + b).unwrap_or(0.0)
    }

    /// Euclidean norm of a complex buffer with the fixed tree.
    pub fn norm2<T: Real>(&self, data: &[num_complex::Complex<T>]) -> f64 {
        self.sum(data.len(), |x| {
            let (re, im) = (data[x].re.as_f64(), data[x].im.as_f64());
            re * re + im * im
        })
        .sqrt()
    }
}

fn combine_tree<A: Copy, C: Fn(A, A) -> A>(values: &[A], combine: &C) -> A {
    match values.len() {
        1 => values[0],
        n => {
            let (left, right) = values.split_at(n / 2);
            combine(combine_tree(left, combine), combine_tree(right, combine))
        }
    }
}

/// The serial executor's fixed-tree sum, for callers without an executor.
pub(crate) fn tree_sum_serial(len: usize, leaf: impl Fn(usize) -> f64 + Sync + Send) -> f64 {
    Executor::serial().sum(len, leaf)
}
