//! Projections onto the SLM amplitude set and the Fourier modulus set.
//!
//! Both projections are set-valued where the modulus vanishes; we always
//! pick phase 0 there, which makes them plain functions.

use num_complex::Complex;

use crate::backends::Executor;
use crate::error::Result;
use crate::grid::{Field, Plane, Precision, RealGrid, Real};
use crate::transform::FourierProvider;

/// Rescales `v` to modulus `target`; values below `zero_tol` become `target + 0i`.
#[inline(always)]
pub fn replace_modulus<T: Real>(v: Complex<T>, target: T, zero_tol: T) -> Complex<T> {
    let a = v.norm_sqr().sqrt();
    if a < zero_tol {
        Complex::new(target, T::zero())
    } else {
        v * (target / a)
    }
}

/// A nonnegative amplitude grid plus its treated-as-zero threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulusConstraint<T> {
    amplitude: RealGrid<T>,
    precision: Precision,
}

impl<T: Real> ModulusConstraint<T> {
    pub fn new(amplitude: RealGrid<T>) -> Self {
        let precision = Precision::for_scale(T::TAG, amplitude.max().as_f64());
        ModulusConstraint {
            amplitude,
            precision,
        }
    }

    pub fn amplitude(&self) -> &RealGrid<T> {
        &self.amplitude
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn zero_tol(&self) -> T {
        T::of(self.precision.zero_tol)
    }

    fn apply(&self, data: &[Complex<T>], exec: &Executor) -> Result<Vec<Complex<T>>> {
        let tol = self.zero_tol();
        exec.map2(data, self.amplitude.data(), |&v, &a| replace_modulus(v, a, tol))
    }

    /// In-place variant used by the solver; same kernel, same bits.
    pub(crate) fn apply_in_place(&self, data: &mut [Complex<T>], exec: &Executor) {
        let tol = self.zero_tol();
        let amp = self.amplitude.data();
        exec.for_each_mut(data, |x, v| *v = replace_modulus(*v, amp[x], tol));
    }
}

/// Amplitudes `p` imposed on the modulator plane (the set S).
#[derive(Debug, Clone, PartialEq)]
pub struct SlmConstraint<T>(pub(crate) ModulusConstraint<T>);

/// Target moduli `m` in the Fourier plane (the set M).
#[derive(Debug, Clone, PartialEq)]
pub struct FourierConstraint<T>(pub(crate) ModulusConstraint<T>);

impl<T: Real> SlmConstraint<T> {
    pub fn new(p: RealGrid<T>) -> Self {
        SlmConstraint(ModulusConstraint::new(p))
    }

    /// Uniform illumination carrying the same energy as the target.
    pub fn uniform_matching(target: &FourierConstraint<T>) -> Result<Self> {
        let spec = target.amplitude().spec();
        let level = target.amplitude().norm2() / (spec.len() as f64).sqrt();
        Ok(SlmConstraint::new(RealGrid::filled(spec, T::of(level))?))
    }

    pub fn amplitude(&self) -> &RealGrid<T> {
        self.0.amplitude()
    }

    pub fn precision(&self) -> Precision {
        self.0.precision()
    }
}

impl<T: Real> FourierConstraint<T> {
    pub fn new(m: RealGrid<T>) -> Self {
        FourierConstraint(ModulusConstraint::new(m))
    }

    /// Target moduli from a target intensity image: `m = sqrt(I)`.
    pub fn from_intensity(intensity: &RealGrid<T>) -> Self {
        FourierConstraint::new(intensity.sqrt())
    }

    pub fn amplitude(&self) -> &RealGrid<T> {
        self.0.amplitude()
    }

    pub fn precision(&self) -> Precision {
        self.0.precision()
    }
}

/// Nearest point of S: keep each pixel's phase, impose modulus `p`.
pub fn project_slm<T: Real>(u: &Field<T>, c: &SlmConstraint<T>, exec: &Executor) -> Result<Field<T>> {
    u.expect_plane(Plane::SlmPlane)?;
    u.spec().ensure_same(&c.amplitude().spec())?;
    Ok(Field::from_raw(u.spec(), Plane::SlmPlane, c.0.apply(u.data(), exec)?))
}

/// Modulus replacement in the Fourier plane (no transform involved).
pub fn project_modulus<T: Real>(
    uhat: &Field<T>,
    c: &FourierConstraint<T>,
    exec: &Executor,
) -> Result<Field<T>> {
    uhat.expect_plane(Plane::FourierPlane)?;
    uhat.spec().ensure_same(&c.amplitude().spec())?;
    Ok(Field::from_raw(uhat.spec(), Plane::FourierPlane, c.0.apply(uhat.data(), exec)?))
}

/// Nearest point of M: transform, replace moduli, transform back.
pub fn project_fourier<T: Real>(
    u: &Field<T>,
    c: &FourierConstraint<T>,
    fft: &dyn FourierProvider<T>,
    exec: &Executor,
) -> Result<Field<T>> {
    u.spec().ensure_same(&c.amplitude().spec())?;
    let mut uhat = fft.forward(u, exec)?;
    c.0.apply_in_place(uhat.data_mut(), exec);
    fft.inverse_owned(uhat, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Strategy;
    use crate::grid::GridSpec;
    use crate::transform::{naive_dft, Direction, RustFftProvider};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn single(v: Complex<f64>, plane: Plane) -> Field<f64> {
        Field::from_vec(GridSpec::square(1).unwrap(), plane, vec![v]).unwrap()
    }

    fn amp(v: f64) -> RealGrid<f64> {
        RealGrid::from_vec(GridSpec::square(1).unwrap(), vec![v]).unwrap()
    }

    fn random_field(spec: GridSpec, plane: Plane, rng: &mut ChaCha8Rng) -> Field<f64> {
        Field::from_fn(spec, plane, |_, _| c(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0))
            .unwrap()
    }

    fn random_amplitudes(spec: GridSpec, rng: &mut ChaCha8Rng) -> RealGrid<f64> {
        RealGrid::from_fn(spec, |_, _| rng.random::<f64>() * 2.0).unwrap()
    }

    #[test]
    fn slm_projection_examples() {
        let exec = Executor::serial();
        let out = project_slm(&single(c(3.0, 4.0), Plane::SlmPlane), &SlmConstraint::new(amp(1.0)), &exec).unwrap();
        assert!((out.data()[0] - c(0.6, 0.8)).norm() < 1e-15);

        let out = project_slm(&single(c(0.0, 0.0), Plane::SlmPlane), &SlmConstraint::new(amp(2.0)), &exec).unwrap();
        assert_eq!(out.data()[0], c(2.0, 0.0));
    }

    #[test]
    fn modulus_projection_examples() {
        let exec = Executor::serial();
        let fc = |m: f64| FourierConstraint::new(amp(m));
        let out = project_modulus(&single(c(1.0, -1.0), Plane::FourierPlane), &fc(2f64.sqrt()), &exec).unwrap();
        assert!((out.data()[0] - c(1.0, -1.0)).norm() < 1e-15);
        let out = project_modulus(&single(c(-5.0, 0.0), Plane::FourierPlane), &fc(1.0), &exec).unwrap();
        assert_eq!(out.data()[0], c(-1.0, 0.0));
        let out = project_modulus(&single(c(0.0, 0.0), Plane::FourierPlane), &fc(0.5), &exec).unwrap();
        assert_eq!(out.data()[0], c(0.5, 0.0));
    }

    #[test]
    fn projection_onto_s_fixes_points_of_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = GridSpec::square(16).unwrap();
        let p = random_amplitudes(spec, &mut rng);
        let phases: Vec<f64> = (0..spec.len()).map(|_| rng.random::<f64>() * TAU).collect();
        let u = Field::from_polar(&p, &phases, Plane::SlmPlane).unwrap();
        let out = project_slm(&u, &SlmConstraint::new(p), &Executor::serial()).unwrap();
        for (a, b) in out.data().iter().zip(u.data()) {
            assert!((a - b).norm() <= 4.0 * f64::EPSILON * b.norm().max(1.0));
        }
    }

    #[test]
    fn projections_are_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = GridSpec::square(32).unwrap();
        let exec = Executor::serial();
        for _ in 0..10 {
            let u = random_field(spec, Plane::SlmPlane, &mut rng);
            let s = SlmConstraint::new(random_amplitudes(spec, &mut rng));
            let once = project_slm(&u, &s, &exec).unwrap();
            let twice = project_slm(&once, &s, &exec).unwrap();
            assert!(once.max_abs_diff(&twice) <= 4.0 * f64::EPSILON * 2.0);

            let uhat = random_field(spec, Plane::FourierPlane, &mut rng);
            let m = FourierConstraint::new(random_amplitudes(spec, &mut rng));
            let once = project_modulus(&uhat, &m, &exec).unwrap();
            let twice = project_modulus(&once, &m, &exec).unwrap();
            assert!(once.max_abs_diff(&twice) <= 4.0 * f64::EPSILON * 2.0);
        }
    }

    #[test]
    fn zero_branch_is_bitwise_idempotent() {
        let spec = GridSpec::new(3, 1).unwrap();
        let u = Field::from_vec(spec, Plane::SlmPlane, vec![c(0.0, 0.0), c(1e-300, 0.0), c(0.0, -1e-20)]).unwrap();
        let s = SlmConstraint::new(RealGrid::from_vec(spec, vec![0.5, 0.25, 4.0]).unwrap());
        let exec = Executor::serial();
        let once = project_slm(&u, &s, &exec).unwrap();
        assert_eq!(once.data(), &[c(0.5, 0.0), c(0.25, 0.0), c(4.0, 0.0)]);
        assert_eq!(project_slm(&once, &s, &exec).unwrap(), once);
    }

    #[test]
    fn feasibility_after_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = GridSpec::new(24, 20).unwrap();
        let exec = Executor::serial();
        let fft = RustFftProvider::new(spec);
        let u = random_field(spec, Plane::SlmPlane, &mut rng);
        let p = random_amplitudes(spec, &mut rng);
        let v = project_slm(&u, &SlmConstraint::new(p.clone()), &exec).unwrap();
        for (val, &target) in v.data().iter().zip(p.data()) {
            assert!((val.norm() - target).abs() <= 4.0 * f64::EPSILON * target);
        }

        let m = random_amplitudes(spec, &mut rng);
        let w = project_fourier(&u, &FourierConstraint::new(m.clone()), &fft, &exec).unwrap();
        assert_eq!(w.plane(), Plane::SlmPlane);
        let what = fft.forward(&w, &exec).unwrap();
        let scale = m.max();
        for (val, &target) in what.data().iter().zip(m.data()) {
            // Absolute slack at the largest target value: roundoff of the
            // two transforms is relative to the field, not to each pixel.
            assert!((val.norm() - target).abs() <= 32.0 * f64::EPSILON * scale);
        }
        let ratio = w.norm2() / m.norm2();
        assert!((ratio - 1.0).abs() <= 16.0 * f64::EPSILON);
    }

    #[test]
    fn slm_projection_is_nearest_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = GridSpec::square(8).unwrap();
        let exec = Executor::serial();
        for _ in 0..1000 {
            let u = random_field(spec, Plane::SlmPlane, &mut rng);
            let p = random_amplitudes(spec, &mut rng);
            let proj = project_slm(&u, &SlmConstraint::new(p.clone()), &exec).unwrap();
            let phases: Vec<f64> = (0..spec.len()).map(|_| rng.random::<f64>() * TAU).collect();
            let other = Field::from_polar(&p, &phases, Plane::SlmPlane).unwrap();
            let dist = |a: &Field<f64>| {
                a.data().iter().zip(u.data()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
            };
            assert!(dist(&proj) <= dist(&other) + 1e-12);
        }
    }

    #[test]
    fn fourier_projection_of_a_point_in_m_is_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = GridSpec::square(16).unwrap();
        let exec = Executor::serial();
        let fft = RustFftProvider::new(spec);
        let u = random_field(spec, Plane::SlmPlane, &mut rng);
        let m = fft.forward(&u, &exec).unwrap().modulus();
        let out = project_fourier(&u, &FourierConstraint::new(m), &fft, &exec).unwrap();
        assert!(out.max_abs_diff(&u) <= 32.0 * f64::EPSILON * u.norm2());
    }

    #[test]
    fn fourier_projection_of_delta() {
        let n = 8;
        let spec = GridSpec::square(n).unwrap();
        let exec = Executor::serial();
        let fft = RustFftProvider::new(spec);
        let level = 0.75;
        let delta = Field::from_fn(spec, Plane::SlmPlane, |j, k| {
            if j == 0 && k == 0 { c(1.0, 0.0) } else { c(0.0, 0.0) }
        })
        .unwrap();
        let m = FourierConstraint::new(RealGrid::filled(spec, level).unwrap());
        let out = project_fourier(&delta, &m, &fft, &exec).unwrap();
        for (x, v) in out.data().iter().enumerate() {
            let expected = if x == 0 { level * n as f64 } else { 0.0 };
            assert!((v - c(expected, 0.0)).norm() < 1e-13);
        }
    }

    #[test]
    fn fourier_projection_matches_naive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = GridSpec::square(8).unwrap();
        let exec = Executor::serial();
        let fft = RustFftProvider::new(spec);
        let u = random_field(spec, Plane::SlmPlane, &mut rng);
        let m = random_amplitudes(spec, &mut rng);
        let fast = project_fourier(&u, &FourierConstraint::new(m.clone()), &fft, &exec).unwrap();

        let uhat = naive_dft(&u, Direction::Forward).unwrap();
        let replaced: Vec<Complex<f64>> = uhat
            .data()
            .iter()
            .zip(m.data())
            .map(|(v, &a)| if v.norm() == 0.0 { c(a, 0.0) } else { v / v.norm() * a })
            .collect();
        let replaced = Field::from_vec(spec, Plane::FourierPlane, replaced).unwrap();
        let oracle = naive_dft(&replaced, Direction::Inverse).unwrap();
        assert!(fast.max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn pixel_map_matches_direct_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = GridSpec::square(64).unwrap();
        let u = random_field(spec, Plane::SlmPlane, &mut rng);
        let s = SlmConstraint::new(random_amplitudes(spec, &mut rng));
        let tol = s.0.zero_tol();
        let direct: Vec<Complex<f64>> = u
            .data()
            .iter()
            .zip(s.amplitude().data())
            .map(|(&v, &a)| replace_modulus(v, a, tol))
            .collect();
        let mapped = project_slm(&u, &s, &Executor::serial()).unwrap();
        assert_eq!(mapped.data(), &direct[..]);
    }

    #[test]
    fn strategies_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = GridSpec::square(256).unwrap();
        let u = random_field(spec, Plane::FourierPlane, &mut rng);
        let m = FourierConstraint::new(random_amplitudes(spec, &mut rng));
        let serial = project_modulus(&u, &m, &Executor::serial()).unwrap();
        let threaded = project_modulus(&u, &m, &Executor::new(Strategy::Threaded(8)).unwrap()).unwrap();
        assert_eq!(serial, threaded);

        let s = SlmConstraint::new(random_amplitudes(spec, &mut rng));
        let u = random_field(spec, Plane::SlmPlane, &mut rng);
        let serial = project_slm(&u, &s, &Executor::serial()).unwrap();
        let threaded = project_slm(&u, &s, &Executor::new(Strategy::Threaded(3)).unwrap()).unwrap();
        assert_eq!(serial, threaded);
    }

    #[test]
    fn single_precision_kernel_stays_single() {
        // Forced-single reference: every operation spelled out in f32.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = GridSpec::square(32).unwrap();
        let u: Field<f32> = random_field(spec, Plane::SlmPlane, &mut rng).cast();
        let p: RealGrid<f32> = random_amplitudes(spec, &mut rng).cast();
        let s = SlmConstraint::new(p.clone());
        let tol = s.precision().zero_tol as f32;
        let out = project_slm(&u, &s, &Executor::serial()).unwrap();
        let mut promoted_differs = false;
        for ((v, &a), o) in u.data().iter().zip(p.data()).zip(out.data()) {
            let norm = (v.re * v.re + v.im * v.im).sqrt();
            let expected = if norm < tol {
                Complex::new(a, 0.0f32)
            } else {
                let k = a / norm;
                Complex::new(v.re * k, v.im * k)
            };
            assert_eq!(*o, expected);
            let n64 = ((v.re as f64).powi(2) + (v.im as f64).powi(2)).sqrt();
            let promoted = Complex::new((v.re as f64 * a as f64 / n64) as f32, (v.im as f64 * a as f64 / n64) as f32);
            promoted_differs |= promoted != expected;
        }
        // The check above is meaningful only if promotion would be visible.
        assert!(promoted_differs);
    }
}
