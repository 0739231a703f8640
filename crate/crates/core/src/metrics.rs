//! Convergence diagnostics: constraint gap, physical error and contrast.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backends::Executor;
use crate::error::{Error, Result};
use crate::grid::{Field, Plane, Real, RealGrid};
use crate::projections::{project_fourier, project_slm, FourierConstraint, SlmConstraint};
use crate::transform::FourierProvider;

/// Deviation tolerances for lit (relative) and dark (absolute) pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorTolerances {
    pub t_lit: f64,
    pub t_dark: f64,
}

impl Default for ErrorTolerances {
    fn default() -> Self {
        ErrorTolerances {
            t_lit: 0.1,
            t_dark: 3e-4,
        }
    }
}

impl ErrorTolerances {
    pub fn new(t_lit: f64, t_dark: f64) -> Result<Self> {
        if !(t_lit > 0.0 && t_dark > 0.0 && t_lit.is_finite() && t_dark.is_finite()) {
            return Err(Error::Config(format!(
                "tolerances must be positive (t_lit={t_lit}, t_dark={t_dark})"
            )));
        }
        Ok(ErrorTolerances { t_lit, t_dark })
    }
}

/// One row of the convergence history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub iter: usize,
    pub gap: f64,
    pub err_lit: f64,
    pub err_dark: f64,
    pub time_fft_ms: f64,
    pub time_constraint_ms: f64,
    pub time_total_ms: f64,
}

impl ConvergenceRecord {
    pub fn physical_error(&self) -> f64 {
        self.err_lit + self.err_dark
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalError {
    pub lit: f64,
    pub dark: f64,
}

impl PhysicalError {
    pub fn total(&self) -> f64 {
        self.lit + self.dark
    }
}

/// Distance between the two projections of `u`.
pub fn gap<T: Real>(
    u: &Field<T>,
    slm: &SlmConstraint<T>,
    target: &FourierConstraint<T>,
    fft: &dyn FourierProvider<T>,
    exec: &Executor,
) -> Result<f64> {
    let on_s = project_slm(u, slm, exec)?;
    let on_m = project_fourier(u, target, fft, exec)?;
    Ok(distance(&on_s, &on_m, exec))
}

/// Euclidean distance, differences taken in the working precision.
pub(crate) fn distance<T: Real>(a: &Field<T>, b: &Field<T>, exec: &Executor) -> f64 {
    let (a, b) = (a.data(), b.data());
    exec.sum(a.len(), |x| {
        let d = a[x] - b[x];
        let (re, im) = (d.re.as_f64(), d.im.as_f64());
        re * re + im * im
    })
    .sqrt()
}

/// Energy-normalized intensity `|F u|^2` with the same total as the target.
pub fn reconstructed_intensity<T: Real>(
    u: &Field<T>,
    target: &FourierConstraint<T>,
    fft: &dyn FourierProvider<T>,
    exec: &Executor,
) -> Result<RealGrid<f64>> {
    let uhat = fft.forward(u, exec)?;
    intensity_from_spectrum(&uhat, target_energy(target), exec)
}

pub(crate) fn target_energy<T: Real>(target: &FourierConstraint<T>) -> f64 {
    target.amplitude().energy()
}

pub(crate) fn intensity_from_spectrum<T: Real>(
    uhat: &Field<T>,
    target_energy: f64,
    exec: &Executor,
) -> Result<RealGrid<f64>> {
    uhat.expect_plane(Plane::FourierPlane)?;
    if target_energy <= 0.0 {
        return Err(Error::Degenerate("all-dark target"));
    }
    let data = uhat.data();
    let raw = exec.map_pixels(data.len(), |x| {
        let (re, im) = (data[x].re.as_f64(), data[x].im.as_f64());
        re * re + im * im
    });
    let energy = exec.sum(raw.len(), |x| raw[x]);
    if energy <= 0.0 {
        return Err(Error::Degenerate("reconstruction carries no energy"));
    }
    let s = target_energy / energy;
    let scaled = exec.map_pixels(raw.len(), |x| raw[x] * s);
    Ok(RealGrid::from_raw(uhat.spec(), scaled))
}

/// Summed tolerance violations of lit (`target > 0`) and dark pixels.
///
/// A pixel exactly at its tolerance does not count as a violation.
pub fn physical_error(
    intensity: &RealGrid<f64>,
    target: &RealGrid<f64>,
    tol: &ErrorTolerances,
) -> Result<PhysicalError> {
    physical_error_with(intensity, target, tol, &Executor::serial())
}

pub(crate) fn physical_error_with(
    intensity: &RealGrid<f64>,
    target: &RealGrid<f64>,
    tol: &ErrorTolerances,
    exec: &Executor,
) -> Result<PhysicalError> {
    intensity.spec().ensure_same(&target.spec())?;
    let (u, m) = (intensity.data(), target.data());
    // Written negated so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if let Some(index) = u.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidAmplitude {
            index,
            value: u[index],
        });
    }
    let ErrorTolerances { t_lit, t_dark } = *tol;
    let lit = exec.sum(u.len(), |x| {
        let (m, u) = (m[x], u[x]);
        if m > 0.0 {
            let dev = (m - u).abs();
            if dev / m - t_lit > 0.0 {
                return t_dark * dev / (t_lit * m) - t_dark;
            }
        }
        0.0
    });
    let dark = exec.sum(u.len(), |x| {
        if m[x] == 0.0 && u[x] - t_dark > 0.0 {
            u[x] - t_dark
        } else {
            0.0
        }
    });
    Ok(PhysicalError { lit, dark })
}

/// Lit-to-dark median intensity ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub lit_median: f64,
    pub dark_median: f64,
}

impl Contrast {
    /// `f64::INFINITY` when the dark median is zero.
    pub fn ratio(&self) -> f64 {
        if self.dark_median == 0.0 {
            f64::INFINITY
        } else {
            self.lit_median / self.dark_median
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.dark_median == 0.0
    }
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

pub fn contrast_ratio(intensity: &RealGrid<f64>, target: &RealGrid<f64>) -> Result<Contrast> {
    intensity.spec().ensure_same(&target.spec())?;
    let mut lit = Vec::new();
    let mut dark = Vec::new();
    for (&u, &m) in intensity.data().iter().zip(target.data()) {
        if m > 0.0 {
            lit.push(u);
        } else {
            dark.push(u);
        }
    }
    if lit.is_empty() {
        return Err(Error::Degenerate("contrast of an all-dark target"));
    }
    if dark.is_empty() {
        return Err(Error::Degenerate("contrast of an all-lit target"));
    }
    Ok(Contrast {
        lit_median: median(&mut lit),
        dark_median: median(&mut dark),
    })
}

const TABLE_COLUMNS: [&str; 7] = [
    "iter",
    "gap",
    "err_lit",
    "err_dark",
    "time_fft_ms",
    "time_constraint_ms",
    "time_total_ms",
];

/// Tab-separated history, one record per line after a header.
///
/// Values use the shortest round-trip representation, so the table is
/// lossless and reproducible for deterministic runs. Timing columns are
/// left out when `with_timings` is false.
pub fn write_table<W: Write>(
    out: &mut W,
    records: &[ConvergenceRecord],
    with_timings: bool,
) -> io::Result<()> {
    let columns = if with_timings { &TABLE_COLUMNS[..] } else { &TABLE_COLUMNS[..4] };
    writeln!(out, "{}", columns.join("\t"))?;
    for r in records {
        write!(out, "{}\t{:e}\t{:e}\t{:e}", r.iter, r.gap, r.err_lit, r.err_dark)?;
        if with_timings {
            write!(
                out,
                "\t{:e}\t{:e}\t{:e}",
                r.time_fft_ms, r.time_constraint_ms, r.time_total_ms
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn table_string(records: &[ConvergenceRecord], with_timings: bool) -> String {
    let mut buf = Vec::new();
    write_table(&mut buf, records, with_timings).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("table is ASCII")
}

/// Parses the output of [`write_table`]; missing timing columns read as zero.
pub fn read_table<R: BufRead>(input: R) -> Result<Vec<ConvergenceRecord>> {
    let bad = |line: usize, what: &str| Error::Config(format!("convergence table line {line}: {what}"));
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))??;
    let columns: Vec<&str> = header.split('\t').collect();
    if columns.len() != 4 && columns.len() != 7 || columns[..] != TABLE_COLUMNS[..columns.len()] {
        return Err(bad(1, "unexpected header"));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns.len() {
            return Err(bad(i + 2, "wrong column count"));
        }
        let num = |k: usize| fields[k].parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
        records.push(ConvergenceRecord {
            iter: fields[0].parse().map_err(|_| bad(i + 2, "bad iteration"))?,
            gap: num(1)?,
            err_lit: num(2)?,
            err_dark: num(3)?,
            time_fft_ms: if fields.len() == 7 { num(4)? } else { 0.0 },
            time_constraint_ms: if fields.len() == 7 { num(5)? } else { 0.0 },
            time_total_ms: if fields.len() == 7 { num(6)? } else { 0.0 },
        });
    }
    Ok(records)
}
