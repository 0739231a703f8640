//! Per-iteration timing across grid sizes, precisions and strategies.
//!
//! Each cell runs the full solver on a seeded spot layout. Transform and
//! constraint phases are timed inside the iteration; metric evaluation is
//! outside the timers. Cells run one after another.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backends::{Executor, Strategy};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, PrecisionTag, Real};
use crate::patterns::{spot_pattern, to_frequency_layout, SpotSpec};
use crate::projections::{FourierConstraint, SlmConstraint};
use crate::solver::{ms, solve, SolveConfig};
use crate::transform::RustFftProvider;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub sizes: Vec<GridSpec>,
    pub iters: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub strategies: Vec<Strategy>,
    pub precisions: Vec<PrecisionTag>,
    /// Seed of the spot layout solved in every cell.
    pub seed: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        let sq = |n| GridSpec::square(n).expect("nonzero");
        BenchPlan {
            sizes: vec![sq(256), sq(512), GridSpec::new(800, 600).expect("nonzero"), sq(1024)],
            iters: 25,
            repetitions: 5,
            warmup: 1,
            strategies: vec![Strategy::Serial, Strategy::threaded_all()],
            precisions: vec![PrecisionTag::Single, PrecisionTag::Double],
            seed: 1,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.iters == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.sizes.len() * self.precisions.len() * self.strategies.len()
    }
}

/// Per-iteration averages of one timed run, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub per_iter_ms: f64,
    pub fft_ms: f64,
    pub constraint_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub size: GridSpec,
    pub precision: PrecisionTag,
    pub strategy: Strategy,
    pub iters: usize,
    /// Constraint setup from the target image plus pool start.
    pub ingest_ms: f64,
    pub plan_ms: f64,
    pub samples: Vec<Sample>,
    pub error: Option<String>,
}

impl BenchCell {
    /// The run with the median per-iteration time (lower median for an
    /// even count). Shares come from this one run so they always satisfy
    /// `fft + constraint <= total`.
    pub fn median(&self) -> Option<Sample> {
        let mut sorted = self.samples.clone();
        sorted.sort_by(|a, b| a.per_iter_ms.total_cmp(&b.per_iter_ms));
        sorted.get(sorted.len().saturating_sub(1) / 2).copied()
    }

    pub fn fft_share(&self) -> Option<f64> {
        self.median().map(|s| share(s.fft_ms, s.per_iter_ms))
    }

    pub fn constraint_share(&self) -> Option<f64> {
        self.median().map(|s| share(s.constraint_ms, s.per_iter_ms))
    }
}

fn share(part: f64, total: f64) -> f64 {
    if total > 0.0 {
        part / total
    } else {
        0.0
    }
}

/// Serial median over threaded median for one size and precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub size: GridSpec,
    pub precision: PrecisionTag,
    pub strategy: Strategy,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, size: GridSpec, precision: PrecisionTag, strategy: Strategy) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.size == size && c.precision == precision && c.strategy == strategy)
    }

    pub fn speedups(&self) -> Vec<Speedup> {
        let mut out = Vec::new();
        for c in &self.cells {
            if c.strategy == Strategy::Serial {
                continue;
            }
            let (Some(base), Some(this)) = (
                self.cell(c.size, c.precision, Strategy::Serial).and_then(BenchCell::median),
                c.median(),
            ) else {
                continue;
            };
            if this.per_iter_ms > 0.0 {
                out.push(Speedup {
                    size: c.size,
                    precision: c.precision,
                    strategy: c.strategy,
                    speedup: base.per_iter_ms / this.per_iter_ms,
                });
            }
        }
        out
    }
}

pub fn run_bench(plan: &BenchPlan) -> Result<BenchReport> {
    run_bench_with(plan, |_| {})
}

/// [`run_bench`] reporting each finished cell. A failing cell records its
/// error and the run moves on.
pub fn run_bench_with(plan: &BenchPlan, mut progress: impl FnMut(&BenchCell)) -> Result<BenchReport> {
    plan.validate()?;
    let mut report = BenchReport::default();
    for &size in &plan.sizes {
        for &precision in &plan.precisions {
            for &strategy in &plan.strategies {
                let mut cell = BenchCell {
                    size,
                    precision,
                    strategy,
                    iters: plan.iters,
                    ingest_ms: 0.0,
                    plan_ms: 0.0,
                    samples: Vec::new(),
                    error: None,
                };
                let outcome = match precision {
                    PrecisionTag::Single => run_cell::<f32>(plan, &mut cell),
                    PrecisionTag::Double => run_cell::<f64>(plan, &mut cell),
                };
                if let Err(e) = outcome {
                    cell.error = Some(e.to_string());
                }
                progress(&cell);
                report.cells.push(cell);
            }
        }
    }
    Ok(report)
}

/// Spot layout solved by every bench cell of this size.
pub fn bench_target(size: GridSpec, seed: u64) -> Result<SpotSpec> {
    let count = 9.min(size.len() / 16).max(1);
    SpotSpec::scattered(size, count, seed)
}

fn run_cell<T: Real>(plan: &BenchPlan, cell: &mut BenchCell) -> Result<()> {
    let target = spot_pattern(&bench_target(cell.size, plan.seed)?)?;

    let t = Instant::now();
    let m = FourierConstraint::new(to_frequency_layout(&target).sqrt().cast::<T>());
    let p = SlmConstraint::uniform_matching(&m)?;
    let exec = Executor::new(cell.strategy)?;
    cell.ingest_ms = ms(t.elapsed());

    let t = Instant::now();
    let fft = RustFftProvider::<T>::new(cell.size);
    cell.plan_ms = ms(t.elapsed());

    let cfg = SolveConfig {
        max_iters: plan.iters,
        record_every: plan.iters,
        ..Default::default()
    };
    for _ in 0..plan.warmup {
        solve(&p, &m, &cfg, &fft, &exec)?;
    }
    for _ in 0..plan.repetitions {
        let res = solve(&p, &m, &cfg, &fft, &exec)?;
        let n = res.iters_run as f64;
        cell.samples.push(Sample {
            per_iter_ms: ms(res.timing.iterations) / n,
            fft_ms: ms(res.timing.fft) / n,
            constraint_ms: ms(res.timing.constraint) / n,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    #[default]
    Table,
    Csv,
    JsonLines,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ReportFormat::JsonLines),
            _ => Err(Error::Config(format!("unknown report format `{s}` (table, csv, json-lines)"))),
        }
    }
}

const CSV_COLUMNS: [&str; 12] = [
    "size",
    "precision",
    "strategy",
    "iters",
    "ingest_ms",
    "plan_ms",
    "per_iter_ms",
    "fft_ms",
    "constraint_ms",
    "samples_per_iter_ms",
    "samples_fft_ms",
    "samples_constraint_ms",
];

pub fn emit_report<W: Write>(report: &BenchReport, format: ReportFormat, out: W) -> Result<()> {
    match format {
        ReportFormat::Table => write_table(report, out),
        ReportFormat::Csv => write_csv(report, out),
        ReportFormat::JsonLines => write_json_lines(report, out),
    }
}

pub fn report_string(report: &BenchReport, format: ReportFormat) -> String {
    let mut buf = Vec::new();
    emit_report(report, format, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("reports are UTF-8")
}

fn write_table<W: Write>(report: &BenchReport, mut out: W) -> Result<()> {
    writeln!(
        out,
        "{:<10} {:<9} {:<12} {:>5} {:>5} {:>12} {:>7} {:>7} {:>10} {:>10}  error",
        "size", "precision", "strategy", "iters", "reps", "per_iter_ms", "fft%", "constr%", "ingest_ms", "plan_ms"
    )?;
    for c in &report.cells {
        let (per_iter, fft, con) = match c.median() {
            Some(s) => (
                format!("{:.4}", s.per_iter_ms),
                format!("{:.1}", 100.0 * share(s.fft_ms, s.per_iter_ms)),
                format!("{:.1}", 100.0 * share(s.constraint_ms, s.per_iter_ms)),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        writeln!(
            out,
            "{:<10} {:<9} {:<12} {:>5} {:>5} {:>12} {:>7} {:>7} {:>10.4} {:>10.4}  {}",
            c.size.to_string(),
            c.precision.as_str(),
            c.strategy.to_string(),
            c.iters,
            c.samples.len(),
            per_iter,
            fft,
            con,
            c.ingest_ms,
            c.plan_ms,
            c.error.as_deref().unwrap_or("-")
        )?;
    }
    let speedups = report.speedups();
    if !speedups.is_empty() {
        writeln!(out)?;
        writeln!(out, "{:<10} {:<9} {:<12} {:>8}", "size", "precision", "strategy", "speedup")?;
        for s in speedups {
            writeln!(
                out,
                "{:<10} {:<9} {:<12} {:>8.3}",
                s.size.to_string(),
                s.precision.as_str(),
                s.strategy.to_string(),
                s.speedup
            )?;
        }
    }
    Ok(())
}

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn write_csv<W: Write>(report: &BenchReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    header.push("error");
    w.write_record(&header).map_err(csv_error)?;
    for c in &report.cells {
        let m = c.median();
        let opt = |f: fn(&Sample) -> f64| m.as_ref().map(|s| f(s).to_string()).unwrap_or_default();
        w.write_record([
            c.size.to_string(),
            c.precision.as_str().to_string(),
            c.strategy.to_string(),
            c.iters.to_string(),
            c.ingest_ms.to_string(),
            c.plan_ms.to_string(),
            opt(|s| s.per_iter_ms),
            opt(|s| s.fft_ms),
            opt(|s| s.constraint_ms),
            join(c.samples.iter().map(|s| s.per_iter_ms)),
            join(c.samples.iter().map(|s| s.fft_ms)),
            join(c.samples.iter().map(|s| s.constraint_ms)),
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Reads a report written in the csv format.
pub fn parse_csv<R: std::io::Read>(input: R) -> Result<BenchReport> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    let expected: Vec<&str> = CSV_COLUMNS.iter().copied().chain(["error"]).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Config("unexpected bench csv header".into()));
    }
    let mut cells = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_error)?;
        let bad = |what: &str| Error::Config(format!("bench csv: bad {what} in `{}`", row.iter().collect::<Vec<_>>().join(",")));
        let num = |i: usize, what: &str| row[i].parse::<f64>().map_err(|_| bad(what));
        let list = |i: usize, what: &str| -> Result<Vec<f64>> {
            if row[i].is_empty() {
                return Ok(Vec::new());
            }
            row[i].split(';').map(|v| v.parse::<f64>().map_err(|_| bad(what))).collect()
        };
        let (per_iter, fft, con) = (list(9, "samples")?, list(10, "samples")?, list(11, "samples")?);
        if per_iter.len() != fft.len() || fft.len() != con.len() {
            return Err(bad("sample counts"));
        }
        cells.push(BenchCell {
            size: row[0].parse().map_err(|_| bad("size"))?,
            precision: row[1].parse().map_err(|_| bad("precision"))?,
            strategy: row[2].parse().map_err(|_| bad("strategy"))?,
            iters: row[3].parse().map_err(|_| bad("iters"))?,
            ingest_ms: num(4, "ingest_ms")?,
            plan_ms: num(5, "plan_ms")?,
            samples: per_iter
                .into_iter()
                .zip(fft)
                .zip(con)
                .map(|((per_iter_ms, fft_ms), constraint_ms)| Sample {
                    per_iter_ms,
                    fft_ms,
                    constraint_ms,
                })
                .collect(),
            error: Some(row[12].to_string()).filter(|e| !e.is_empty()),
        });
    }
    Ok(BenchReport { cells })
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line<'a> {
    Cell {
        #[serde(flatten)]
        cell: &'a BenchCell,
        median: Option<Sample>,
        fft_share: Option<f64>,
        constraint_share: Option<f64>,
    },
    Speedup(Speedup),
}

fn write_json_lines<W: Write>(report: &BenchReport, mut out: W) -> Result<()> {
    let io = |e: serde_json::Error| Error::Io(e.into());
    for cell in &report.cells {
        let line = Line::Cell {
            cell,
            median: cell.median(),
            fft_share: cell.fft_share(),
            constraint_share: cell.constraint_share(),
        };
        serde_json::to_writer(&mut out, &line).map_err(io)?;
        writeln!(out)?;
    }
    for s in report.speedups() {
        serde_json::to_writer(&mut out, &Line::Speedup(s)).map_err(io)?;
        writeln!(out)?;
    }
    Ok(())
}
