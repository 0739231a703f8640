//! Request and response bodies of the holomask solve service, shared by the
//! server, the client and the command line.
//!
//! Images travel as base64 PNG inside JSON. Streaming solves send
//! server-sent events named [`EVENT_PROGRESS`] (one [`ConvergenceRecord`]
//! per recorded iteration) and a closing [`EVENT_FINAL`] carrying the
//! [`SolveResponse`], or [`EVENT_ERROR`] with an [`ErrorBody`].

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use holomask_core::backends::{BackendSelector, Strategy};
use holomask_core::grid::{GridSpec, PrecisionTag};
use holomask_core::metrics::ConvergenceRecord;
use holomask_core::patterns::{self, PatternKind, Scale, Spot, SpotSpec};
use holomask_core::pipeline::{check_target, Job, JobOutput};
use holomask_core::solver::{Initialization, SolveConfig, StopReason};
use holomask_core::transform::PlanCacheStats;
use serde::{Deserialize, Serialize};

pub use holomask_core::metrics::ConvergenceRecord as ProgressEvent;

pub const EVENT_PROGRESS: &str = "progress";
pub const EVENT_FINAL: &str = "final";
pub const EVENT_ERROR: &str = "error";

/// Longest accepted grid side; requests above it are rejected as too large.
pub const MAX_SIDE: usize = 4096;
pub const MAX_ITERS: usize = 100_000;
pub const MAX_WORKERS: usize = 256;
pub const DEFAULT_ITERS: usize = 25;
pub const DEFAULT_BUDGET_MS: f64 = 10.0;

mod as_string {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

fn default_iters() -> usize {
    DEFAULT_ITERS
}

fn one() -> usize {
    1
}

fn default_precision() -> PrecisionTag {
    PrecisionTag::Double
}

fn default_strategy() -> Strategy {
    Strategy::Serial
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    /// Single spots or discs of the given radius (visual frame).
    Spots {
        spots: Vec<Spot>,
        #[serde(default = "one")]
        radius: usize,
    },
    /// Base64 PNG or PGM, 8- or 16-bit grayscale, sized like the grid.
    Image { data: String },
    /// A generator name such as `siemens:32` or `spots:3x3`.
    Pattern { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveRequest {
    /// `WxH`.
    #[serde(with = "as_string")]
    pub size: GridSpec,
    pub target: Target,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_precision")]
    pub precision: PrecisionTag,
    /// `serial`, `threaded` or `threaded:N`.
    #[serde(default = "default_strategy", with = "as_string")]
    pub strategy: Strategy,
    #[serde(default = "one")]
    pub record_every: usize,
    /// Answer with an event stream instead of a single body.
    #[serde(default)]
    pub stream: bool,
    /// Random initial Fourier phases from this seed; zero phases if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Stop iterating once this much time has passed and return the
    /// current mask. Off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_ms: Option<f64>,
}

impl SolveRequest {
    pub fn new(size: GridSpec, target: Target) -> Self {
        SolveRequest {
            size,
            target,
            iters: DEFAULT_ITERS,
            precision: PrecisionTag::Double,
            strategy: Strategy::Serial,
            record_every: 1,
            stream: false,
            seed: None,
            deadline_ms: None,
        }
    }

    pub fn spots(size: GridSpec, centers: &[(usize, usize)]) -> Self {
        Self::new(
            size,
            Target::Spots {
                spots: centers.iter().map(|&(j, k)| Spot::at(j, k)).collect(),
                radius: 1,
            },
        )
    }

    pub fn from_json(body: &[u8]) -> Result<Self, RequestError> {
        serde_json::from_slice(body).map_err(|e| RequestError::Malformed(e.to_string()))
    }

    /// Validates the request and builds the solver job. The target is
    /// decoded here, so the time spent counts as ingestion.
    pub fn to_job(&self) -> Result<Job, RequestError> {
        let size = self.size;
        if size.n_x > MAX_SIDE || size.n_y > MAX_SIDE {
            return Err(RequestError::TooLarge(format!(
                "grid {size} exceeds {MAX_SIDE}x{MAX_SIDE}"
            )));
        }
        if !(1..=MAX_ITERS).contains(&self.iters) {
            return Err(RequestError::Malformed(format!("iters must lie in 1..={MAX_ITERS}")));
        }
        if self.strategy.workers() > MAX_WORKERS {
            return Err(RequestError::Malformed(format!("at most {MAX_WORKERS} workers")));
        }
        if self.record_every == 0 {
            return Err(RequestError::Malformed("record_every must be at least 1".into()));
        }
        let deadline = match self.deadline_ms {
            None => None,
            Some(ms) if ms.is_finite() && ms >= 0.0 => Some(Duration::from_secs_f64(ms / 1e3)),
            Some(ms) => return Err(RequestError::Malformed(format!("deadline_ms {ms} is not a duration"))),
        };

        let target = match &self.target {
            Target::Spots { spots, radius } => {
                let spec = SpotSpec {
                    grid: size,
                    spots: spots.clone(),
                    radius: *radius,
                };
                patterns::spot_pattern(&spec).map_err(|e| RequestError::Malformed(e.to_string()))?
            }
            Target::Image { data } => {
                // Base64 of a raw 16-bit image of the largest size, with slack for headers.
                if data.len() > (MAX_SIDE * MAX_SIDE * 2 + 4096) * 4 / 3 {
                    return Err(RequestError::TooLarge("image payload too large".into()));
                }
                let bytes = B64
                    .decode(data)
                    .map_err(|e| RequestError::Malformed(format!("image is not base64: {e}")))?;
                let grid = patterns::decode_target(&bytes).map_err(|e| RequestError::Malformed(e.to_string()))?;
                if grid.spec() != size {
                    return Err(RequestError::Malformed(format!(
                        "image is {} but size is {size}",
                        grid.spec()
                    )));
                }
                grid
            }
            Target::Pattern { name } => name
                .parse::<PatternKind>()
                .and_then(|p| p.generate(size))
                .map_err(|e| RequestError::Malformed(e.to_string()))?,
        };
        check_target(&target).map_err(|e| RequestError::Unprocessable(e.to_string()))?;

        let config = SolveConfig {
            max_iters: self.iters,
            record_every: self.record_every,
            init: match self.seed {
                Some(seed) => Initialization::RandomPhase { seed },
                None => Initialization::TargetModulus,
            },
            deadline,
            ..Default::default()
        };
        Ok(Job::new(
            target,
            BackendSelector {
                strategy: self.strategy,
                precision: self.precision,
            },
            config,
        ))
    }
}

/// Why a request was refused, with its HTTP status.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RequestError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("request too large: {0}")]
    TooLarge(String),
    #[error("degenerate target: {0}")]
    Unprocessable(String),
}

impl RequestError {
    pub fn status(&self) -> u16 {
        match self {
            RequestError::Malformed(_) => 400,
            RequestError::TooLarge(_) => 413,
            RequestError::Unprocessable(_) => 422,
        }
    }
}

/// Flat query form of a spot or pattern request, for the streaming GET.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamQuery {
    pub size: String,
    /// `j,k;j,k;...`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spots: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_ms: Option<f64>,
}

impl StreamQuery {
    /// Query form of `req`; `None` for image targets, which need a body.
    pub fn from_request(req: &SolveRequest) -> Option<Self> {
        let mut q = StreamQuery {
            size: req.size.to_string(),
            iters: Some(req.iters),
            precision: Some(req.precision.to_string()),
            strategy: Some(req.strategy.to_string()),
            record_every: Some(req.record_every),
            seed: req.seed,
            deadline_ms: req.deadline_ms,
            ..Default::default()
        };
        match &req.target {
            Target::Spots { spots, radius } => {
                if spots.iter().any(|s| s.intensity != 1.0) {
                    return None;
                }
                q.spots = Some(spots.iter().map(|s| format!("{},{}", s.j, s.k)).collect::<Vec<_>>().join(";"));
                q.radius = Some(*radius);
            }
            Target::Pattern { name } => q.pattern = Some(name.clone()),
            Target::Image { .. } => return None,
        }
        Some(q)
    }

    pub fn to_request(&self) -> Result<SolveRequest, RequestError> {
        let bad = |what: &str| RequestError::Malformed(format!("invalid {what}"));
        let size: GridSpec = self.size.parse().map_err(|_| bad("size"))?;
        let target = match (&self.spots, &self.pattern) {
            (Some(list), None) => {
                let spots = list
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(|pair| {
                        let (j, k) = pair.split_once(',').ok_or_else(|| bad("spots"))?;
                        Ok(Spot::at(
                            j.trim().parse().map_err(|_| bad("spots"))?,
                            k.trim().parse().map_err(|_| bad("spots"))?,
                        ))
                    })
                    .collect::<Result<Vec<_>, RequestError>>()?;
                Target::Spots {
                    spots,
                    radius: self.radius.unwrap_or(1),
                }
            }
            (None, Some(name)) => Target::Pattern { name: name.clone() },
            _ => return Err(RequestError::Malformed("give exactly one of spots or pattern".into())),
        };
        let mut req = SolveRequest::new(size, target);
        req.iters = self.iters.unwrap_or(DEFAULT_ITERS);
        if let Some(p) = &self.precision {
            req.precision = p.parse().map_err(|_| bad("precision"))?;
        }
        if let Some(s) = &self.strategy {
            req.strategy = s.parse().map_err(|_| bad("strategy"))?;
        }
        req.record_every = self.record_every.unwrap_or(1);
        req.seed = self.seed;
        req.deadline_ms = self.deadline_ms;
        req.stream = true;
        Ok(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub gap: f64,
    pub err_lit: f64,
    pub err_dark: f64,
    /// Lit/dark median ratio; null when unbounded (dark median zero) or
    /// undefined (no lit or no dark pixels).
    pub contrast: Option<f64>,
    pub lit_median: Option<f64>,
    pub dark_median: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Target decode, constraint setup and pool start.
    pub ingest_ms: f64,
    pub plan_ms: f64,
    pub plan_cache_hit: bool,
    pub per_iter_ms: f64,
    pub fft_ms: f64,
    pub constraint_ms: f64,
    /// Solver wall time, metric evaluation included.
    pub solve_ms: f64,
    /// Ingest, planning and solve.
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResponse {
    #[serde(with = "as_string")]
    pub size: GridSpec,
    /// 8-bit PNG; code `c` is phase `2π·c/256`.
    pub mask_png: String,
    /// 8-bit PNG, log scale over six decades.
    pub reconstruction_log_png: String,
    pub reconstruction_linear_png: String,
    pub metrics: Metrics,
    pub timing: Timing,
    pub budget_ms: f64,
    pub budget_met: bool,
    pub iters_run: usize,
    pub stop_reason: StopReason,
    pub precision: PrecisionTag,
    #[serde(with = "as_string")]
    pub strategy: Strategy,
    pub history: Vec<ConvergenceRecord>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl SolveResponse {
    /// `decode` is time spent turning the request into a job before the
    /// pipeline started; it is added to the ingest time.
    pub fn from_output(
        out: &JobOutput,
        strategy: Strategy,
        decode: Duration,
        budget_ms: f64,
    ) -> holomask_core::Result<Self> {
        let spec = out.mask.spec();
        let png = |codes: Vec<u8>| patterns::encode_png8(spec, &codes).map(|b| B64.encode(b));
        let iters = out.iters_run.max(1) as f64;
        let ingest_ms = ms(decode + out.ingest);
        let total_ms = ms(decode + out.total());
        Ok(SolveResponse {
            size: spec,
            mask_png: png(out.mask.to_u8())?,
            reconstruction_log_png: png(patterns::to_gray8(&out.reconstruction, Scale::Log))?,
            reconstruction_linear_png: png(patterns::to_gray8(&out.reconstruction, Scale::Linear))?,
            metrics: Metrics {
                gap: out.metrics.gap,
                err_lit: out.metrics.err_lit,
                err_dark: out.metrics.err_dark,
                contrast: out.metrics.contrast.filter(|c| c.is_finite()),
                lit_median: out.contrast.map(|c| c.lit_median),
                dark_median: out.contrast.map(|c| c.dark_median),
            },
            timing: Timing {
                ingest_ms,
                plan_ms: ms(out.plan),
                plan_cache_hit: out.plan_cache_hit,
                per_iter_ms: ms(out.timing.iterations) / iters,
                fft_ms: ms(out.timing.fft) / iters,
                constraint_ms: ms(out.timing.constraint) / iters,
                solve_ms: ms(out.timing.wall),
                total_ms,
            },
            budget_ms,
            budget_met: total_ms <= budget_ms,
            iters_run: out.iters_run,
            stop_reason: out.stop_reason,
            precision: out.precision,
            strategy,
            history: out.history.clone(),
        })
    }

    /// Raw 8-bit phase codes of the mask.
    pub fn mask_codes(&self) -> Result<Vec<u8>, DecodeError> {
        decode_png8(&self.mask_png, self.size)
    }

    pub fn reconstruction_log_codes(&self) -> Result<Vec<u8>, DecodeError> {
        decode_png8(&self.reconstruction_log_png, self.size)
    }

    pub fn reconstruction_linear_codes(&self) -> Result<Vec<u8>, DecodeError> {
        decode_png8(&self.reconstruction_linear_png, self.size)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("payload is not base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error(transparent)]
    Image(#[from] holomask_core::Error),
    #[error("image is {actual}, expected {expected}")]
    Size { expected: GridSpec, actual: GridSpec },
}

pub fn decode_png8(data: &str, expected: GridSpec) -> Result<Vec<u8>, DecodeError> {
    let (actual, codes) = patterns::decode_gray8(&B64.decode(data)?)?;
    if actual != expected {
        return Err(DecodeError::Size { expected, actual });
    }
    Ok(codes)
}

/// Base64 of raw image bytes, for [`Target::Image`].
pub fn encode_image(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub status: u16,
}

impl From<&RequestError> for ErrorBody {
    fn from(e: &RequestError) -> Self {
        ErrorBody {
            error: e.to_string(),
            status: e.status(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub plan_cache: PlanCacheStats,
    pub solves_completed: u64,
    pub active_streams: u64,
    pub budget_ms: f64,
}
