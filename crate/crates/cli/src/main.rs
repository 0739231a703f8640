//! `holomask`: phase masks, test patterns, benchmarks and the local service.
//!
//! Exit status is 0 on success, 1 for unusable flags or configuration and 2
//! when the work itself fails.

mod config;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use holomask_api::{encode_image, SolveRequest, SolveResponse, Target, DEFAULT_ITERS};
use holomask_client::Client;
use holomask_core::bench::{emit_report, run_bench_with, BenchPlan, ReportFormat};
use holomask_core::metrics::write_table;
use holomask_core::patterns::{self, BitDepth, PatternKind, Scale, StarSpec};
use holomask_core::pipeline::run_job;
use holomask_core::transform::PlanCache;
use holomask_core::{GridSpec, PrecisionTag, Strategy};
use holomask_service::ServiceConfig;

use crate::config::{parsed, parsed_list, FileConfig};

fn default_size() -> GridSpec {
    GridSpec::square(256).expect("nonzero")
}

#[derive(Parser)]
#[command(name = "holomask", version, about = "Phase masks for spatial light modulators by alternating projections")]
struct Cli {
    /// TOML file of defaults; flags and HOLOMASK_* variables take precedence.
    #[arg(long, global = true, env = "HOLOMASK_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a target and write the mask, reconstructions and convergence table.
    Solve(SolveArgs),
    /// Render a test pattern to an image.
    Patterns(PatternsArgs),
    /// Time solves over sizes, precisions and strategies.
    Bench(BenchArgs),
    /// Print or write the convergence table of one solve.
    Curves(CurvesArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct Problem {
    /// Grayscale target image (PNG or PGM, 8 or 16 bit).
    #[arg(long, value_name = "FILE", conflicts_with = "pattern")]
    target: Option<PathBuf>,
    /// Generated target: spots:CxR, scatter:N[:SEED] or siemens[:SPOKES].
    #[arg(long, value_name = "SPEC")]
    pattern: Option<String>,
    #[arg(long, env = "HOLOMASK_SIZE", value_name = "WxH")]
    size: Option<GridSpec>,
    #[arg(long, env = "HOLOMASK_ITERS", value_name = "N")]
    iters: Option<usize>,
    /// single or double.
    #[arg(long, env = "HOLOMASK_PRECISION")]
    precision: Option<PrecisionTag>,
    /// serial, threaded or threaded:N.
    #[arg(long, env = "HOLOMASK_STRATEGY")]
    strategy: Option<Strategy>,
    /// Start from random Fourier phases drawn from this seed.
    #[arg(long, env = "HOLOMASK_SEED")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    record_every: Option<usize>,
    /// Stop after this long and keep the current mask.
    #[arg(long, value_name = "MS")]
    deadline_ms: Option<f64>,
    /// Solve on a running service instead of in process.
    #[arg(long, env = "HOLOMASK_SERVER", value_name = "URL")]
    server: Option<String>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long, env = "HOLOMASK_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    #[command(flatten)]
    problem: Problem,
    /// Write convergence.txt here instead of printing.
    #[arg(long, env = "HOLOMASK_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
    /// Leave out the timing columns, which vary between runs.
    #[arg(long)]
    no_timings: bool,
}

#[derive(Args)]
struct PatternsArgs {
    /// siemens, spots or scatter, or a full spec such as siemens:16.
    kind: Option<String>,
    #[arg(long, env = "HOLOMASK_SIZE", value_name = "WxH")]
    size: Option<GridSpec>,
    /// Spokes of the Siemens star.
    #[arg(long)]
    spokes: Option<usize>,
    /// Lattice of a spots pattern.
    #[arg(long, value_name = "CxR")]
    grid: Option<String>,
    /// Spots of a scatter pattern.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, env = "HOLOMASK_SEED")]
    seed: Option<u64>,
    /// linear or log.
    #[arg(long)]
    scale: Option<Scale>,
    /// 8 or 16.
    #[arg(long)]
    depth: Option<u8>,
    /// png or pgm.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["png", "pgm"]))]
    format: Option<String>,
    #[arg(long, env = "HOLOMASK_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sizes, each N or WxH.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<GridSpec>>,
    #[arg(long, env = "HOLOMASK_ITERS", value_name = "N")]
    iters: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    /// Comma-separated precisions.
    #[arg(long, value_delimiter = ',')]
    precisions: Option<Vec<PrecisionTag>>,
    /// Seed of the spot layout.
    #[arg(long, env = "HOLOMASK_SEED")]
    seed: Option<u64>,
    /// table, csv or json-lines.
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Write the report here instead of printing it.
    #[arg(long, env = "HOLOMASK_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "HOLOMASK_BIND", value_name = "ADDR")]
    bind: Option<SocketAddr>,
    /// Port on the bind address; 0 picks a free one.
    #[arg(long, env = "HOLOMASK_PORT")]
    port: Option<u16>,
    #[arg(long, env = "HOLOMASK_BUDGET_MS", value_name = "MS")]
    budget_ms: Option<f64>,
    #[arg(long, value_name = "N")]
    max_concurrent: Option<usize>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Solve(args) => solve(args, &cfg),
        Command::Curves(args) => curves(args, &cfg),
        Command::Patterns(args) => render_pattern(args, &cfg),
        Command::Bench(args) => bench(args, &cfg),
        Command::Serve(args) => serve(args, &cfg),
    }
}

/// A request with flags merged over the config file.
fn build_request(p: &Problem, cfg: &FileConfig) -> Result<SolveRequest, Failure> {
    let size = p.size.or(parsed("size", cfg.size.as_deref())?);
    // A target given on the command line replaces both config keys.
    let (target, pattern) = if p.target.is_some() || p.pattern.is_some() {
        (p.target.clone(), p.pattern.clone())
    } else {
        (cfg.solve.target.clone(), cfg.solve.pattern.clone())
    };

    let (size, target) = match (target, pattern) {
        (Some(path), None) => {
            let bytes = fs::read(&path).with_context(|| format!("cannot read target {}", path.display()))?;
            let grid = patterns::decode_target(&bytes).with_context(|| format!("cannot decode {}", path.display()))?;
            if let Some(size) = size.filter(|s| *s != grid.spec()) {
                return Err(usage(format!("--size {size} does not match the {} target image", grid.spec())));
            }
            (grid.spec(), Target::Image { data: encode_image(&bytes) })
        }
        (None, Some(name)) => {
            name.parse::<PatternKind>().map_err(|e| usage(e.to_string()))?;
            (size.unwrap_or_else(default_size), Target::Pattern { name })
        }
        (Some(_), Some(_)) => return Err(usage("give either a target image or a pattern, not both")),
        (None, None) => return Err(usage("nothing to solve: give --target FILE or --pattern SPEC")),
    };

    let mut req = SolveRequest::new(size, target);
    req.iters = p.iters.or(cfg.iters).unwrap_or(DEFAULT_ITERS);
    req.precision = match p.precision {
        Some(v) => v,
        None => parsed("precision", cfg.precision.as_deref())?.unwrap_or(PrecisionTag::Double),
    };
    req.strategy = match p.strategy {
        Some(v) => v,
        None => parsed("strategy", cfg.strategy.as_deref())?.unwrap_or(Strategy::Serial),
    };
    req.seed = p.seed.or(cfg.seed);
    req.record_every = p.record_every.or(cfg.solve.record_every).unwrap_or(1);
    req.deadline_ms = p.deadline_ms.or(cfg.solve.deadline_ms);
    Ok(req)
}

/// Runs the request in process or on the service named by `--server`.
fn execute(p: &Problem, req: &SolveRequest, cfg: &FileConfig) -> Result<SolveResponse, Failure> {
    if let Some(url) = p.server.clone().or_else(|| cfg.server.clone()) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().context("starting runtime")?;
        let client = Client::new(url);
        return Ok(rt.block_on(client.solve(req)).context("remote solve failed")?);
    }
    let start = Instant::now();
    let job = req.to_job().map_err(|e| match e.status() {
        422 => Failure::Runtime(e.into()),
        _ => usage(e.to_string()),
    })?;
    let decode = start.elapsed();
    let out = run_job(&job, &PlanCache::new()).context("solve failed")?;
    Ok(SolveResponse::from_output(&out, req.strategy, decode, cfg.serve.budget_ms).context("encoding results")?)
}

fn solve(args: SolveArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let req = build_request(&args.problem, cfg)?;
    let resp = execute(&args.problem, &req, cfg)?;
    let out = args.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    write_products(&out, &resp)?;

    let m = &resp.metrics;
    let contrast = match (m.contrast, m.dark_median) {
        (Some(c), _) => format!("{c:.4e}"),
        (None, Some(0.0)) => "unbounded".into(),
        _ => "undefined".into(),
    };
    println!("G        {:.6e}", m.gap);
    println!("E_lit    {:.6e}", m.err_lit);
    println!("E_dark   {:.6e}", m.err_dark);
    println!("contrast {contrast}");
    println!(
        "wall     {:.3} ms ({} iterations, {:.4} ms/iter, {})",
        resp.timing.total_ms,
        resp.iters_run,
        resp.timing.per_iter_ms,
        if resp.budget_met { "within budget" } else { "over budget" }
    );
    println!("wrote    {}", out.display());
    Ok(())
}

/// Encodes every product before touching the disk, then moves the files
/// into place, so a failure leaves no partial set behind.
fn write_products(dir: &Path, resp: &SolveResponse) -> Result<(), Failure> {
    let spec = resp.size;
    let png = |codes: Vec<u8>| patterns::encode_png8(spec, &codes);
    let mut table = Vec::new();
    write_table(&mut table, &resp.history, true).context("formatting convergence table")?;
    let files = [
        ("mask.png", png(resp.mask_codes().context("mask payload")?).context("encoding mask")?),
        (
            "reconstruction_linear.png",
            png(resp.reconstruction_linear_codes().context("reconstruction payload")?).context("encoding image")?,
        ),
        (
            "reconstruction_log.png",
            png(resp.reconstruction_log_codes().context("reconstruction payload")?).context("encoding image")?,
        ),
        ("convergence.txt", table),
    ];
    write_all(dir, &files)
}

fn write_all(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let staged: Vec<(PathBuf, PathBuf)> = files
        .iter()
        .map(|(name, _)| (dir.join(format!(".{name}.partial")), dir.join(name)))
        .collect();
    let result = (|| -> anyhow::Result<()> {
        for ((tmp, _), (_, bytes)) in staged.iter().zip(files) {
            fs::write(tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
        }
        for (tmp, dest) in &staged {
            fs::rename(tmp, dest).with_context(|| format!("cannot write {}", dest.display()))?;
        }
        Ok(())
    })();
    if result.is_err() {
        for (tmp, _) in &staged {
            let _ = fs::remove_file(tmp);
        }
    }
    Ok(result?)
}

fn curves(args: CurvesArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let req = build_request(&args.problem, cfg)?;
    let resp = execute(&args.problem, &req, cfg)?;
    let mut table = Vec::new();
    write_table(&mut table, &resp.history, !args.no_timings).context("formatting convergence table")?;
    match args.out.or_else(|| cfg.out.clone()) {
        Some(dir) => write_all(&dir, &[("convergence.txt", table)]),
        None => std::io::stdout().write_all(&table).context("writing to stdout").map_err(Failure::from),
    }
}

fn render_pattern(args: PatternsArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let pc = &cfg.patterns;
    let kind_name = args.kind.or_else(|| pc.kind.clone()).unwrap_or_else(|| "siemens".into());
    let (base, kind) = if kind_name.contains(':') {
        let kind = kind_name.parse::<PatternKind>().map_err(|e| usage(e.to_string()))?;
        (kind_name.split(':').next().unwrap_or("pattern").to_string(), kind)
    } else {
        let kind = match kind_name.as_str() {
            "siemens" => PatternKind::Siemens {
                spokes: args.spokes.or(pc.spokes).unwrap_or(StarSpec::DEFAULT_SPOKES),
            },
            "spots" => {
                let grid = args.grid.or_else(|| pc.grid.clone()).unwrap_or_else(|| "3x3".into());
                format!("spots:{grid}").parse().map_err(|e: holomask_core::Error| usage(e.to_string()))?
            }
            "scatter" => PatternKind::Scatter {
                count: args.count.or(pc.count).unwrap_or(patterns::SUITE_SPOTS),
                seed: args.seed.or(cfg.seed).unwrap_or(1),
            },
            other => return Err(usage(format!("unknown pattern kind `{other}` (siemens, spots, scatter)"))),
        };
        (kind_name, kind)
    };
    let size = match args.size {
        Some(s) => s,
        None => parsed("size", cfg.size.as_deref())?.unwrap_or_else(default_size),
    };
    let scale = match args.scale {
        Some(s) => s,
        None => parsed("patterns.scale", pc.scale.as_deref())?.unwrap_or_default(),
    };
    let depth = match args.depth.or(pc.depth) {
        None | Some(8) => BitDepth::Eight,
        Some(16) => BitDepth::Sixteen,
        Some(d) => return Err(usage(format!("bit depth {d} is not 8 or 16"))),
    };
    let ext = args.format.or_else(|| pc.format.clone()).unwrap_or_else(|| "png".into());
    if ext != "png" && ext != "pgm" {
        return Err(usage(format!("image format `{ext}` is not png or pgm")));
    }

    let grid = kind.generate(size).context("generating pattern")?;
    let dir = args.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(format!("{base}.{ext}"));
    patterns::save_image(&grid, &path, scale, depth).context("writing pattern")?;
    println!("wrote {} ({size}, {} lit pixels)", path.display(), grid.count_positive());
    Ok(())
}

fn bench(args: BenchArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let bc = &cfg.bench;
    let mut plan = BenchPlan::default();
    if let Some(sizes) = args.sizes.or(parsed_list("bench.sizes", bc.sizes.as_deref())?) {
        plan.sizes = sizes;
    }
    plan.iters = args.iters.or(cfg.iters).unwrap_or(plan.iters);
    plan.repetitions = args.repetitions.or(bc.repetitions).unwrap_or(plan.repetitions);
    plan.warmup = args.warmup.or(bc.warmup).unwrap_or(plan.warmup);
    if let Some(s) = args.strategies.or(parsed_list("bench.strategies", bc.strategies.as_deref())?) {
        plan.strategies = s;
    }
    if let Some(p) = args.precisions.or(parsed_list("bench.precisions", bc.precisions.as_deref())?) {
        plan.precisions = p;
    }
    plan.seed = args.seed.or(cfg.seed).unwrap_or(plan.seed);
    plan.validate().map_err(|e| usage(e.to_string()))?;
    let format = match args.format {
        Some(f) => f,
        None => parsed("bench.format", bc.format.as_deref())?.unwrap_or_default(),
    };

    let total = plan.cell_count();
    let mut done = 0;
    let report = run_bench_with(&plan, |cell| {
        done += 1;
        let status = match (&cell.error, cell.median()) {
            (Some(e), _) => format!("failed: {e}"),
            (None, Some(m)) => format!("{:.4} ms/iter", m.per_iter_ms),
            (None, None) => "no samples".into(),
        };
        eprintln!("[{done}/{total}] {} {} {}: {status}", cell.size, cell.precision, cell.strategy);
    })
    .context("benchmark failed")?;

    let mut text = Vec::new();
    emit_report(&report, format, &mut text).context("formatting report")?;
    match args.out.or_else(|| cfg.out.clone()) {
        Some(dir) => {
            let name = match format {
                ReportFormat::Table => "bench.txt",
                ReportFormat::Csv => "bench.csv",
                ReportFormat::JsonLines => "bench.jsonl",
            };
            write_all(&dir, &[(name, text)])?;
            println!("wrote {}", dir.join(name).display());
            Ok(())
        }
        None => std::io::stdout().write_all(&text).context("writing to stdout").map_err(Failure::from),
    }
}

fn serve(args: ServeArgs, cfg: &FileConfig) -> Result<(), Failure> {
    let mut config: ServiceConfig = cfg.serve.clone();
    if let Some(bind) = args.bind {
        config.bind = bind;
    }
    if let Some(port) = args.port {
        config.bind.set_port(port);
    }
    if let Some(budget) = args.budget_ms {
        config.budget_ms = budget;
    }
    if let Some(n) = args.max_concurrent {
        config.max_concurrent = n;
    }
    if !(config.budget_ms.is_finite() && config.budget_ms >= 0.0) {
        return Err(usage("budget must be a nonnegative number of milliseconds"));
    }

    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async {
        let running = holomask_service::spawn(config).await.context("cannot bind")?;
        println!("listening on {}", running.url());
        std::io::stdout().flush().ok();
        tokio::signal::ctrl_c().await.context("waiting for interrupt")?;
        running.stop().await.context("shutting down")
    })?;
    Ok(())
}
