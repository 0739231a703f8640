//! Grid containers, precision parameterization and elementwise field helpers.
//!
//! Pixels are stored row-major: the lexicographic index of column `j` and
//! row `k` is `x = k * n_x + j`.

use std::f64::consts::TAU;
use std::fmt;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point scalar the hot path is generic over (`f32` or `f64`).
pub trait Real:
    rustfft::FftNum + num_traits::Float + num_traits::FloatConst + Default + fmt::Display
{
    const TAG: PrecisionTag;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const TAG: PrecisionTag = PrecisionTag::Single;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const TAG: PrecisionTag = PrecisionTag::Double;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionTag {
    Single,
    Double,
}

impl PrecisionTag {
    /// Machine epsilon of the underlying float type.
    pub fn eps(self) -> f64 {
        match self {
            PrecisionTag::Single => f32::EPSILON as f64,
            PrecisionTag::Double => f64::EPSILON,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrecisionTag::Single => "single",
            PrecisionTag::Double => "double",
        }
    }
}

impl fmt::Display for PrecisionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PrecisionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "f32" | "float" => Ok(PrecisionTag::Single),
            "double" | "f64" => Ok(PrecisionTag::Double),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Multiple of machine epsilon below which a modulus counts as zero.
pub const ZERO_TOL_FACTOR: f64 = 1024.0;

/// Precision tag together with the tolerances derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    pub tag: PrecisionTag,
    pub eps_machine: f64,
    /// Moduli strictly below this are treated as zero.
    pub zero_tol: f64,
}

impl Precision {
    /// Tolerances for amplitudes whose largest value is `scale`.
    pub fn for_scale(tag: PrecisionTag, scale: f64) -> Self {
        let eps = tag.eps();
        // A zero scale (all-dark grid) still needs a positive threshold.
        let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
        Precision {
            tag,
            eps_machine: eps,
            zero_tol: ZERO_TOL_FACTOR * eps * scale,
        }
    }

    pub fn single() -> Self {
        Self::for_scale(PrecisionTag::Single, 1.0)
    }

    pub fn double() -> Self {
        Self::for_scale(PrecisionTag::Double, 1.0)
    }
}

/// Grid shape. Equality and hashing look at the pixel counts only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_x: usize,
    pub n_y: usize,
    /// Physical extent of the modulator, carried as metadata only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<(f64, f64)>,
}

impl PartialEq for GridSpec {
    fn eq(&self, other: &Self) -> bool {
        self.same_shape(other)
    }
}

impl Eq for GridSpec {}

impl std::hash::Hash for GridSpec {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.n_x.hash(state);
        self.n_y.hash(state);
    }
}

impl GridSpec {
    pub fn new(n_x: usize, n_y: usize) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(Error::EmptyGrid { n_x, n_y });
        }
        n_x.checked_mul(n_y)
            .ok_or_else(|| Error::Config(format!("grid {n_x}x{n_y} overflows")))?;
        Ok(GridSpec {
            n_x,
            n_y,
            extent: None,
        })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn with_extent(mut self, l_x: f64, l_y: f64) -> Self {
        self.extent = Some((l_x, l_y));
        self
    }

    /// Total pixel count N.
    #[inline]
    pub fn len(&self) -> usize {
        self.n_x * self.n_y
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn flatten(&self, j: usize, k: usize) -> usize {
        debug_assert!(j < self.n_x && k < self.n_y);
        k * self.n_x + j
    }

    #[inline]
    pub fn unflatten(&self, x: usize) -> (usize, usize) {
        (x % self.n_x, x / self.n_x)
    }

    /// Same pixel counts; physical extents are ignored.
    #[inline]
    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.n_x == other.n_x && self.n_y == other.n_y
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::SpecMismatch {
                expected: *self,
                actual: *other,
            })
        }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.n_x, self.n_y)
    }
}

impl std::str::FromStr for GridSpec {
    type Err = Error;

    /// Accepts `WxH` or a single `N` for a square grid.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid grid size `{s}` (expected WxH or N)"));
        let s = s.trim();
        match s.split_once(['x', 'X']) {
            Some((w, h)) => {
                let w = w.trim().parse().map_err(|_| bad())?;
                let h = h.trim().parse().map_err(|_| bad())?;
                GridSpec::new(w, h)
            }
            None => GridSpec::square(s.parse().map_err(|_| bad())?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    SlmPlane,
    FourierPlane,
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Plane::SlmPlane => f.write_str("SLM plane"),
            Plane::FourierPlane => f.write_str("Fourier plane"),
        }
    }
}

/// Complex amplitudes on a grid, tagged with the plane they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    spec: GridSpec,
    plane: Plane,
    data: Vec<Complex<T>>,
}

impl<T: Real> Field<T> {
    /// Builds a field, rejecting non-finite entries.
    pub fn from_vec(spec: GridSpec, plane: Plane, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != spec.len() {
            return Err(Error::LengthMismatch {
                spec,
                len: data.len(),
            });
        }
        if let Some((index, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.re.is_finite() && v.im.is_finite()))
        {
            return Err(Error::InvalidAmplitude {
                index,
                value: v.re.as_f64() + v.im.as_f64(),
            });
        }
        Ok(Field { spec, plane, data })
    }

    /// Skips the finiteness scan; callers uphold the length invariant.
    pub(crate) fn from_raw(spec: GridSpec, plane: Plane, data: Vec<Complex<T>>) -> Self {
        debug_assert_eq!(data.len(), spec.len());
        Field { spec, plane, data }
    }

    pub fn zeros(spec: GridSpec, plane: Plane) -> Self {
        Field::from_raw(spec, plane, vec![Complex::new(T::zero(), T::zero()); spec.len()])
    }

    pub fn from_fn(
        spec: GridSpec,
        plane: Plane,
        mut f: impl FnMut(usize, usize) -> Complex<T>,
    ) -> Result<Self> {
        let data = (0..spec.len())
            .map(|x| {
                let (j, k) = spec.unflatten(x);
                f(j, k)
            })
            .collect();
        Self::from_vec(spec, plane, data)
    }

    /// Field with modulus `amplitude` and phase `phase` per pixel.
    pub fn from_polar(amplitude: &RealGrid<T>, phase: &[f64], plane: Plane) -> Result<Self> {
        let spec = amplitude.spec();
        if phase.len() != spec.len() {
            return Err(Error::LengthMismatch {
                spec,
                len: phase.len(),
            });
        }
        let data = amplitude
            .data()
            .iter()
            .zip(phase)
            .map(|(&a, &phi)| Complex::from_polar(a, T::of(phi)))
            .collect();
        Self::from_vec(spec, plane, data)
    }

    /// Real nonnegative grid interpreted as a field with zero phase.
    pub fn from_modulus(amplitude: &RealGrid<T>, plane: Plane) -> Self {
        let data = amplitude
            .data()
            .iter()
            .map(|&a| Complex::new(a, T::zero()))
            .collect();
        Field::from_raw(amplitude.spec(), plane, data)
    }

    #[inline]
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    #[inline]
    pub fn plane(&self) -> Plane {
        self.plane
    }

    #[inline]
    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub(crate) fn set_plane(&mut self, plane: Plane) {
        self.plane = plane;
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> Complex<T> {
        self.data[self.spec.flatten(j, k)]
    }

    pub(crate) fn expect_plane(&self, plane: Plane) -> Result<()> {
        if self.plane == plane {
            Ok(())
        } else {
            Err(Error::WrongPlane {
                expected: plane,
                actual: self.plane,
            })
        }
    }

    /// Euclidean norm, accumulated in double precision in a fixed order.
    pub fn norm2(&self) -> f64 {
        crate::backends::tree_sum_serial(self.data.len(), |x| {
            let v = self.data[x];
            let (re, im) = (v.re.as_f64(), v.im.as_f64());
            re * re + im * im
        })
        .sqrt()
    }

    pub fn scale(&self, alpha: Complex<T>) -> Self {
        let data = self.data.iter().map(|&v| v * alpha).collect();
        Field::from_raw(self.spec, self.plane, data)
    }

    /// Elementwise moduli.
    pub fn modulus(&self) -> RealGrid<T> {
        let data = self.data.iter().map(|v| v.norm_sqr().sqrt()).collect();
        RealGrid::from_raw(self.spec, data)
    }

    /// Converts to another precision.
    pub fn cast<U: Real>(&self) -> Field<U> {
        let data = self
            .data
            .iter()
            .map(|v| Complex::new(U::of(v.re.as_f64()), U::of(v.im.as_f64())))
            .collect();
        Field::from_raw(self.spec, self.plane, data)
    }

    /// Largest elementwise distance to `other`.
    pub fn max_abs_diff(&self, other: &Field<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = Complex::new(a.re.as_f64() - b.re.as_f64(), a.im.as_f64() - b.im.as_f64());
                d.norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Nonnegative real values on a grid: SLM amplitudes, target moduli, intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct RealGrid<T> {
    spec: GridSpec,
    data: Vec<T>,
}

impl<T: Real> RealGrid<T> {
    pub fn from_vec(spec: GridSpec, data: Vec<T>) -> Result<Self> {
        if data.len() != spec.len() {
            return Err(Error::LengthMismatch {
                spec,
                len: data.len(),
            });
        }
        if let Some((index, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= T::zero()))
        {
            return Err(Error::InvalidAmplitude {
                index,
                value: v.as_f64(),
            });
        }
        Ok(RealGrid { spec, data })
    }

    pub(crate) fn from_raw(spec: GridSpec, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), spec.len());
        RealGrid { spec, data }
    }

    pub fn filled(spec: GridSpec, value: T) -> Result<Self> {
        Self::from_vec(spec, vec![value; spec.len()])
    }

    pub fn zeros(spec: GridSpec) -> Self {
        RealGrid::from_raw(spec, vec![T::zero(); spec.len()])
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let data = (0..spec.len())
            .map(|x| {
                let (j, k) = spec.unflatten(x);
                f(j, k)
            })
            .collect();
        Self::from_vec(spec, data)
    }

    #[inline]
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> T {
        self.data[self.spec.flatten(j, k)]
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::zero(), T::max)
    }

    /// Sum of squares in double precision, fixed reduction order.
    pub fn energy(&self) -> f64 {
        crate::backends::tree_sum_serial(self.data.len(), |x| {
            let v = self.data[x].as_f64();
            v * v
        })
    }

    pub fn norm2(&self) -> f64 {
        self.energy().sqrt()
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|v| **v > T::zero()).count()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        RealGrid::from_vec(self.spec, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise square root: intensity to amplitude.
    pub fn sqrt(&self) -> Self {
        RealGrid::from_raw(self.spec, self.data.iter().map(|v| v.sqrt()).collect())
    }

    /// Elementwise square: amplitude to intensity.
    pub fn squared(&self) -> Self {
        RealGrid::from_raw(self.spec, self.data.iter().map(|&v| v * v).collect())
    }

    pub fn cast<U: Real>(&self) -> RealGrid<U> {
        RealGrid::from_raw(
            self.spec,
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }
}

/// Per-pixel phases in `[0, 2π)`: the deliverable shown on the modulator.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMask {
    spec: GridSpec,
    phases: Vec<f64>,
}

impl PhaseMask {
    pub fn from_vec(spec: GridSpec, phases: Vec<f64>) -> Result<Self> {
        if phases.len() != spec.len() {
            return Err(Error::LengthMismatch {
                spec,
                len: phases.len(),
            });
        }
        if let Some((index, &value)) = phases
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && (0.0..TAU).contains(*p)))
        {
            return Err(Error::InvalidAmplitude { index, value });
        }
        Ok(PhaseMask { spec, phases })
    }

    #[inline]
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    #[inline]
    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// 8-bit linear encoding: code `c` stands for phase `2π·c/256`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.phases.iter().map(|&p| encode_phase_u8(p)).collect()
    }

    pub fn from_u8(spec: GridSpec, codes: &[u8]) -> Result<Self> {
        Self::from_vec(spec, codes.iter().map(|&c| decode_phase_u8(c)).collect())
    }
}

#[inline]
pub fn encode_phase_u8(phase: f64) -> u8 {
    ((phase / TAU * 256.0).round() as i64).rem_euclid(256) as u8
}

#[inline]
pub fn decode_phase_u8(code: u8) -> f64 {
    TAU * code as f64 / 256.0
}

/// Wraps an angle into `[0, 2π)`.
#[inline]
pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Phase of every pixel; zero moduli and those below `zero_tol` get phase 0.
pub fn phases_of<T: Real>(f: &Field<T>, zero_tol: f64) -> Result<PhaseMask> {
    f.expect_plane(Plane::SlmPlane)?;
    let phases = f
        .data()
        .iter()
        .map(|v| {
            let (re, im) = (v.re.as_f64(), v.im.as_f64());
            let a = (re * re + im * im).sqrt();
            if a < zero_tol || a == 0.0 {
                0.0
            } else {
                wrap_phase(im.atan2(re))
            }
        })
        .collect();
    Ok(PhaseMask {
        spec: f.spec(),
        phases,
    })
}
