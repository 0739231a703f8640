//! Target intensities: spot arrays, the Siemens star, synthetically
//! consistent problems and grayscale image files.
//!
//! Generators work in a centered visual frame. [`to_frequency_layout`]
//! moves a visual grid into standard DFT order before it becomes a
//! constraint, and [`to_visual_layout`] undoes it for display.

use std::f64::consts::TAU;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::Executor;
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, Plane, Real, RealGrid};
use crate::projections::SlmConstraint;
use crate::transform::FourierProvider;

/// Log renderings clamp normalized intensities here before `log10`.
pub const LOG_FLOOR: f64 = 1e-6;

/// Spots per layout and seeds of the irregular spot suite.
pub const SUITE_SPOTS: usize = 9;
pub const SUITE_SEEDS: [u64; 3] = [1, 2, 3];

fn one() -> f64 {
    1.0
}

fn one_px() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub j: usize,
    pub k: usize,
    #[serde(default = "one")]
    pub intensity: f64,
}

impl Spot {
    pub fn at(j: usize, k: usize) -> Self {
        Spot { j, k, intensity: 1.0 }
    }
}

/// Bright discs on a dark background. A pixel belongs to a disc when its
/// squared distance to the center is below `radius²`, so radius 1 lights
/// the center pixel only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotSpec {
    pub grid: GridSpec,
    pub spots: Vec<Spot>,
    #[serde(default = "one_px")]
    pub radius: usize,
}

impl SpotSpec {
    pub fn new(grid: GridSpec, centers: &[(usize, usize)]) -> Self {
        SpotSpec {
            grid,
            spots: centers.iter().map(|&(j, k)| Spot::at(j, k)).collect(),
            radius: 1,
        }
    }

    pub fn with_radius(mut self, radius: usize) -> Self {
        self.radius = radius;
        self
    }

    /// Regular `cols x rows` array spread over the central half of the grid.
    pub fn lattice(grid: GridSpec, cols: usize, rows: usize) -> Result<Self> {
        if cols == 0 || rows == 0 {
            return Err(Error::Pattern("lattice needs at least one row and column".into()));
        }
        let axis = |n: usize, count: usize| -> Vec<usize> {
            (0..count)
                .map(|i| (n as f64 / 4.0 + (i as f64 + 0.5) * (n as f64 / 2.0) / count as f64) as usize)
                .collect()
        };
        let (xs, ys) = (axis(grid.n_x, cols), axis(grid.n_y, rows));
        let centers: Vec<_> = ys.iter().flat_map(|&k| xs.iter().map(move |&j| (j, k))).collect();
        let spec = SpotSpec::new(grid, &centers);
        spec.validate()?;
        Ok(spec)
    }

    /// `count` spots at seeded random positions in the central half of the
    /// grid, no two discs touching.
    pub fn scattered(grid: GridSpec, count: usize, seed: u64) -> Result<Self> {
        Self::scattered_with_radius(grid, count, 1, seed)
    }

    pub fn scattered_with_radius(grid: GridSpec, count: usize, radius: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x0, x1) = (grid.n_x / 4, (3 * grid.n_x).div_ceil(4).max(grid.n_x / 4 + 1));
        let (y0, y1) = (grid.n_y / 4, (3 * grid.n_y).div_ceil(4).max(grid.n_y / 4 + 1));
        let min_sep = 2 * radius;
        let mut centers: Vec<(usize, usize)> = Vec::with_capacity(count);
        let mut attempts = 0;
        while centers.len() < count {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Pattern(format!("cannot place {count} separated spots on {grid}")));
            }
            let c = (rng.random_range(x0..x1), rng.random_range(y0..y1));
            if centers.iter().all(|&(j, k)| j.abs_diff(c.0).max(k.abs_diff(c.1)) >= min_sep) {
                centers.push(c);
            }
        }
        let spec = SpotSpec::new(grid, &centers).with_radius(radius);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.raster().map(|_| ())
    }

    fn raster(&self) -> Result<Vec<f64>> {
        let g = self.grid;
        if self.radius == 0 {
            return Err(Error::Pattern("spot radius must be at least 1".into()));
        }
        let mut data = vec![0.0; g.len()];
        let r = self.radius as i64;
        for s in &self.spots {
            if s.j >= g.n_x || s.k >= g.n_y {
                return Err(Error::Pattern(format!("spot ({}, {}) outside grid {g}", s.j, s.k)));
            }
            if !(s.intensity.is_finite() && s.intensity > 0.0) {
                return Err(Error::Pattern(format!("spot ({}, {}) has intensity {}", s.j, s.k, s.intensity)));
            }
            for dk in -(r - 1)..r {
                for dj in -(r - 1)..r {
                    if dj * dj + dk * dk >= r * r {
                        continue;
                    }
                    let (j, k) = (s.j as i64 + dj, s.k as i64 + dk);
                    if j < 0 || k < 0 || j >= g.n_x as i64 || k >= g.n_y as i64 {
                        continue;
                    }
                    let x = g.flatten(j as usize, k as usize);
                    if data[x] != 0.0 {
                        return Err(Error::Pattern(format!("spots overlap at ({j}, {k})")));
                    }
                    data[x] = s.intensity;
                }
            }
        }
        Ok(data)
    }
}

/// Target intensity of a spot array (visual frame).
pub fn spot_pattern(s: &SpotSpec) -> Result<RealGrid<f64>> {
    Ok(RealGrid::from_raw(s.grid, s.raster()?))
}

/// The irregular spot layouts used to characterize convergence.
pub fn spot_suite(grid: GridSpec) -> Result<Vec<SpotSpec>> {
    SUITE_SEEDS.iter().map(|&seed| SpotSpec::scattered(grid, SUITE_SPOTS, seed)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StarSpec {
    pub grid: GridSpec,
    pub spokes: usize,
    /// Outer radius in pixels.
    pub radius: f64,
}

impl StarSpec {
    pub const DEFAULT_SPOKES: usize = 32;

    /// Star filling 90% of the shorter grid side.
    pub fn new(grid: GridSpec, spokes: usize) -> Self {
        StarSpec {
            grid,
            spokes,
            radius: 0.45 * grid.n_x.min(grid.n_y) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spokes < 2 || !self.spokes.is_multiple_of(2) {
            return Err(Error::Pattern(format!("spoke count {} must be even and at least 2", self.spokes)));
        }
        let limit = self.grid.n_x.min(self.grid.n_y) as f64 / 2.0;
        if !(self.radius > 0.0 && self.radius <= limit) {
            return Err(Error::Pattern(format!("star radius {} must lie in (0, {limit}]", self.radius)));
        }
        Ok(())
    }
}

/// Alternating lit and dark wedges. Pixel centers sit at `+0.5`; the angle
/// is measured about the grid center and sector indices within 1e-9 of an
/// integer snap to it so boundary rays are classified reproducibly.
pub fn siemens_star(s: &StarSpec) -> Result<RealGrid<f64>> {
    s.validate()?;
    let g = s.grid;
    let (cx, cy) = (g.n_x as f64 / 2.0, g.n_y as f64 / 2.0);
    let spokes = s.spokes as f64;
    RealGrid::from_fn(g, |j, k| {
        let (dx, dy) = (j as f64 + 0.5 - cx, k as f64 + 0.5 - cy);
        let r = dx.hypot(dy);
        if r == 0.0 || r > s.radius {
            return 0.0;
        }
        let phi = dy.atan2(dx).rem_euclid(TAU);
        let mut t = spokes * phi / TAU;
        if (t - t.round()).abs() < 1e-9 {
            t = t.round();
        }
        if (t.floor() as i64).rem_euclid(s.spokes as i64) % 2 == 0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Target modulus `|F(p·e^{iφ})|` for seeded uniform phases, so the
/// problem has a feasible point by construction.
pub fn consistent_target<T: Real>(
    slm: &SlmConstraint<T>,
    seed: u64,
    fft: &dyn FourierProvider<T>,
    exec: &Executor,
) -> Result<RealGrid<T>> {
    let p = slm.amplitude();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = p
        .data()
        .iter()
        .map(|&a| Complex::from_polar(a, T::of(rng.random::<f64>() * TAU)))
        .collect();
    let w = Field::from_raw(p.spec(), Plane::SlmPlane, data);
    Ok(fft.forward_owned(w, exec)?.modulus())
}

fn shifted<T: Real>(g: &RealGrid<T>, forward: bool) -> RealGrid<T> {
    let s = g.spec();
    let (hx, hy) = (s.n_x / 2, s.n_y / 2);
    let src = g.data();
    let data = (0..s.len())
        .map(|x| {
            let (j, k) = s.unflatten(x);
            let (sj, sk) = if forward {
                ((j + hx) % s.n_x, (k + hy) % s.n_y)
            } else {
                ((j + s.n_x - hx) % s.n_x, (k + s.n_y - hy) % s.n_y)
            };
            src[s.flatten(sj, sk)]
        })
        .collect();
    RealGrid::from_raw(s, data)
}

/// Visual frame to DFT order: the visual center lands on the zero frequency.
pub fn to_frequency_layout<T: Real>(visual: &RealGrid<T>) -> RealGrid<T> {
    shifted(visual, true)
}

/// Inverse of [`to_frequency_layout`].
pub fn to_visual_layout<T: Real>(frequency: &RealGrid<T>) -> RealGrid<T> {
    shifted(frequency, false)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternKind {
    /// `spots:CxR`
    Lattice { cols: usize, rows: usize },
    /// `scatter:N[:SEED]`
    Scatter { count: usize, seed: u64 },
    /// `siemens[:SPOKES]`
    Siemens { spokes: usize },
}

impl PatternKind {
    pub fn generate(&self, grid: GridSpec) -> Result<RealGrid<f64>> {
        match *self {
            PatternKind::Lattice { cols, rows } => spot_pattern(&SpotSpec::lattice(grid, cols, rows)?),
            PatternKind::Scatter { count, seed } => spot_pattern(&SpotSpec::scattered(grid, count, seed)?),
            PatternKind::Siemens { spokes } => siemens_star(&StarSpec::new(grid, spokes)),
        }
    }
}

impl std::str::FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Pattern(format!("unknown pattern `{s}` (spots:CxR, scatter:N[:SEED], siemens[:SPOKES])"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let mut parts = s.trim().split(':');
        let kind = parts.next().ok_or_else(bad)?;
        let args: Vec<&str> = parts.collect();
        match (kind, args.as_slice()) {
            ("spots", [dims]) => {
                let (c, r) = dims.split_once(['x', 'X']).ok_or_else(bad)?;
                Ok(PatternKind::Lattice { cols: num(c)?, rows: num(r)? })
            }
            ("scatter", [n]) => Ok(PatternKind::Scatter { count: num(n)?, seed: 1 }),
            ("scatter", [n, seed]) => Ok(PatternKind::Scatter {
                count: num(n)?,
                seed: seed.trim().parse().map_err(|_| bad())?,
            }),
            ("siemens", []) => Ok(PatternKind::Siemens { spokes: StarSpec::DEFAULT_SPOKES }),
            ("siemens", [n]) => Ok(PatternKind::Siemens { spokes: num(n)? }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Scale::Linear),
            "log" => Ok(Scale::Log),
            _ => Err(Error::Config(format!("unknown scale `{s}` (linear, log)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

/// Intensities mapped to `[0, 1]` by the peak value; log scale clamps at
/// [`LOG_FLOOR`] and spans six decades.
pub fn normalized(grid: &RealGrid<f64>, scale: Scale) -> Vec<f64> {
    let peak = grid.max();
    grid.data()
        .iter()
        .map(|&v| {
            let n = if peak > 0.0 { (v / peak).clamp(0.0, 1.0) } else { 0.0 };
            match scale {
                Scale::Linear => n,
                Scale::Log => {
                    let decades = -LOG_FLOOR.log10();
                    (n.max(LOG_FLOOR).log10() + decades) / decades
                }
            }
        })
        .collect()
}

pub fn to_gray8(grid: &RealGrid<f64>, scale: Scale) -> Vec<u8> {
    normalized(grid, scale).into_iter().map(|v| (v * 255.0).round() as u8).collect()
}

pub fn to_gray16(grid: &RealGrid<f64>, scale: Scale) -> Vec<u16> {
    normalized(grid, scale).into_iter().map(|v| (v * 65535.0).round() as u16).collect()
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "pgm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::Image {
            path: path.to_owned(),
            reason: "unsupported extension (use .png or .pgm)".into(),
        }),
    }
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_owned(),
        reason: e.to_string(),
    }
}

fn dims(spec: GridSpec) -> Result<(u32, u32)> {
    match (u32::try_from(spec.n_x), u32::try_from(spec.n_y)) {
        (Ok(w), Ok(h)) => Ok((w, h)),
        _ => Err(Error::Config(format!("grid {spec} too large for an image"))),
    }
}

fn gray8_image(spec: GridSpec, pixels: &[u8]) -> Result<DynamicImage> {
    let (w, h) = dims(spec)?;
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, pixels.to_vec())
        .ok_or(Error::LengthMismatch { spec, len: pixels.len() })?;
    Ok(DynamicImage::ImageLuma8(buf))
}

fn gray16_image(spec: GridSpec, pixels: &[u16]) -> Result<DynamicImage> {
    let (w, h) = dims(spec)?;
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w, h, pixels.to_vec())
        .ok_or(Error::LengthMismatch { spec, len: pixels.len() })?;
    Ok(DynamicImage::ImageLuma16(buf))
}

/// Writes raw 8-bit codes (phase masks, pre-rendered previews).
pub fn save_gray8(spec: GridSpec, pixels: &[u8], path: &Path) -> Result<()> {
    let format = format_for(path)?;
    gray8_image(spec, pixels)?
        .save_with_format(path, format)
        .map_err(|e| image_error(path, e))
}

pub fn save_image(grid: &RealGrid<f64>, path: &Path, scale: Scale, depth: BitDepth) -> Result<()> {
    let format = format_for(path)?;
    let img = match depth {
        BitDepth::Eight => gray8_image(grid.spec(), &to_gray8(grid, scale))?,
        BitDepth::Sixteen => gray16_image(grid.spec(), &to_gray16(grid, scale))?,
    };
    img.save_with_format(path, format).map_err(|e| image_error(path, e))
}

/// PNG bytes of an 8-bit grayscale raster.
pub fn encode_png8(spec: GridSpec, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    gray8_image(spec, pixels)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| image_error(Path::new("<memory>"), e))?;
    Ok(out.into_inner())
}

/// Raw codes of an 8-bit grayscale image.
pub fn decode_gray8(bytes: &[u8]) -> Result<(GridSpec, Vec<u8>)> {
    decode_gray8_from(Path::new("<memory>"), image::load_from_memory(bytes))
}

pub fn load_gray8(path: &Path) -> Result<(GridSpec, Vec<u8>)> {
    decode_gray8_from(path, open(path))
}

fn decode_gray8_from(path: &Path, img: image::ImageResult<DynamicImage>) -> Result<(GridSpec, Vec<u8>)> {
    match img.map_err(|e| image_error(path, e))? {
        DynamicImage::ImageLuma8(buf) => {
            let spec = GridSpec::new(buf.width() as usize, buf.height() as usize)?;
            Ok((spec, buf.into_raw()))
        }
        other => Err(image_error(path, format!("expected 8-bit grayscale, found {:?}", other.color()))),
    }
}

fn open(path: &Path) -> image::ImageResult<DynamicImage> {
    image::ImageReader::open(path)?.with_guessed_format()?.decode()
}

/// Grayscale intensities in `[0, 1]` from an 8- or 16-bit image.
pub fn decode_target(bytes: &[u8]) -> Result<RealGrid<f64>> {
    gray_to_grid(Path::new("<memory>"), image::load_from_memory(bytes))
}

pub fn load_target(path: &Path) -> Result<RealGrid<f64>> {
    gray_to_grid(path, open(path))
}

fn gray_to_grid(path: &Path, img: image::ImageResult<DynamicImage>) -> Result<RealGrid<f64>> {
    let img = img.map_err(|e| image_error(path, e))?;
    let spec = GridSpec::new(img.width() as usize, img.height() as usize)?;
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other if other.color().has_color() => return Err(image_error(path, "not a grayscale image")),
        other => return Err(image_error(path, format!("unsupported pixel layout {:?}", other.color()))),
    };
    RealGrid::from_vec(spec, data)
}
