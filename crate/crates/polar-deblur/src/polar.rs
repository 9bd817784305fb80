//! Polarization image formation and inversion.
//!
//! A linear polarizer at angle `alpha` in front of a sensor observing light
//! with total intensity `I`, degree of linear polarization `p` and angle of
//! linear polarization `theta` transmits
//!
//! ```text
//! I_alpha = 0.5 * I * (1 - p * cos(2 * (alpha - theta)))
//! ```
//!
//! A division-of-focal-plane camera measures this at the four angles
//! 0°, 45°, 90° and 135° in a single shot. The linear Stokes parameters
//! follow from sums and differences of the four measurements, and `p` and
//! `theta` follow from the Stokes parameters. Everything in this module is
//! pure, stateless and generic over `f32`/`f64`.

use crate::error::{Error, Result};
use crate::image_buf::RadianceImage;
use crate::scalar::Scalar;

/// The four polarizer angles of a division-of-focal-plane camera, radians.
pub const POLARIZER_ANGLES: [f64; 4] = [
    0.0,
    std::f64::consts::FRAC_PI_4,
    std::f64::consts::FRAC_PI_2,
    3.0 * std::f64::consts::FRAC_PI_4,
];

/// Default guard for divisions by `S0` on dark pixels.
pub const DEFAULT_S0_EPS: f64 = 1e-6;

/// Four spatially-aligned linear-polarized images at 0°, 45°, 90°, 135°.
///
/// For a noise-free physically rendered set the complementary pairs satisfy
/// `i000 + i090 == i045 + i135` pointwise up to float rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarizedImageSet<T = f32> {
    pub i000: RadianceImage<T>,
    pub i045: RadianceImage<T>,
    pub i090: RadianceImage<T>,
    pub i135: RadianceImage<T>,
}

impl<T: Scalar> PolarizedImageSet<T> {
    /// Bundle four images, enforcing identical dimensions.
    pub fn new(
        i000: RadianceImage<T>,
        i045: RadianceImage<T>,
        i090: RadianceImage<T>,
        i135: RadianceImage<T>,
    ) -> Result<Self> {
        i000.shape_check(&i045, "polarized set")?;
        i000.shape_check(&i090, "polarized set")?;
        i000.shape_check(&i135, "polarized set")?;
        Ok(PolarizedImageSet { i000, i045, i090, i135 })
    }

    pub fn height(&self) -> usize {
        self.i000.height()
    }

    pub fn width(&self) -> usize {
        self.i000.width()
    }

    /// The four images in angle order.
    pub fn angles(&self) -> [&RadianceImage<T>; 4] {
        [&self.i000, &self.i045, &self.i090, &self.i135]
    }

    /// Apply the same image transform to all four angles.
    pub fn map_images(&self, f: impl Fn(&RadianceImage<T>) -> RadianceImage<T>) -> Self {
        PolarizedImageSet {
            i000: f(&self.i000),
            i045: f(&self.i045),
            i090: f(&self.i090),
            i135: f(&self.i135),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PolarizedImageSet<U> {
        PolarizedImageSet {
            i000: self.i000.cast(),
            i045: self.i045.cast(),
            i090: self.i090.cast(),
            i135: self.i135.cast(),
        }
    }
}

/// Per-pixel linear Stokes parameters.
///
/// `s0` is the total intensity (non-negative for physical sets); `s1` and
/// `s2` are signed difference maps. Physically admissible states satisfy
/// `sqrt(s1^2 + s2^2) <= s0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StokesMaps<T = f32> {
    pub s0: RadianceImage<T>,
    pub s1: RadianceImage<T>,
    pub s2: RadianceImage<T>,
}

/// Per-pixel degree (`[0,1]`) and angle (`[0,pi)`) of linear polarization.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarizationState<T = f32> {
    pub dolp: RadianceImage<T>,
    pub aolp: RadianceImage<T>,
}

/// Render one polarized image through a linear polarizer at `angle` radians.
///
/// Returns `0.5 * I * (1 - p * cos(2 * (angle - theta)))` pointwise. The
/// output is non-negative and bounded by `I`.
///
/// # Examples
///
/// ```
/// use polar_deblur::RadianceImage;
/// use polar_deblur::polar::malus_render;
///
/// let i = RadianceImage::constant(4, 4, 0.8_f32);
/// let p = RadianceImage::constant(4, 4, 0.5);
/// let theta = RadianceImage::constant(4, 4, std::f32::consts::FRAC_PI_4);
/// let out = malus_render(&i, &p, &theta, 0.0).unwrap();
/// assert!((out.get(0, 0, 0) - 0.4).abs() < 1e-6);
/// ```
pub fn malus_render<T: Scalar>(
    intensity: &RadianceImage<T>,
    dolp: &RadianceImage<T>,
    aolp: &RadianceImage<T>,
    angle: T,
) -> Result<RadianceImage<T>> {
    intensity.shape_check(dolp, "malus_render dolp")?;
    intensity.shape_check(aolp, "malus_render aolp")?;
    if dolp.data().iter().any(|&p| p < T::zero() || p > T::one()) {
        return Err(Error::Domain("dolp outside [0, 1]".into()));
    }
    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    let mut out = RadianceImage::zeros(intensity.height(), intensity.width());
    let (id, pd, td) = (intensity.data(), dolp.data(), aolp.data());
    for (o, ((&i, &p), &t)) in out
        .data_mut()
        .iter_mut()
        .zip(id.iter().zip(pd.iter()).zip(td.iter()))
    {
        *o = half * i * (T::one() - p * (two * (angle - t)).cos());
    }
    Ok(out)
}

/// Render the full four-angle set at 0°, 45°, 90°, 135°.
pub fn render_polarized_set<T: Scalar>(
    intensity: &RadianceImage<T>,
    dolp: &RadianceImage<T>,
    aolp: &RadianceImage<T>,
) -> Result<PolarizedImageSet<T>> {
    let [a0, a45, a90, a135] = POLARIZER_ANGLES.map(T::from_f64);
    Ok(PolarizedImageSet {
        i000: malus_render(intensity, dolp, aolp, a0)?,
        i045: malus_render(intensity, dolp, aolp, a45)?,
        i090: malus_render(intensity, dolp, aolp, a90)?,
        i135: malus_render(intensity, dolp, aolp, a135)?,
    })
}

/// Linear Stokes parameters of a four-angle set:
/// `s0 = (i000 + i045 + i090 + i135) / 2`, `s1 = i090 - i000`,
/// `s2 = i135 - i045`.
///
/// ```
/// use polar_deblur::RadianceImage;
/// use polar_deblur::polar::{render_polarized_set, stokes_from_set};
///
/// let i = RadianceImage::constant(2, 2, 0.8_f32);
/// let p = RadianceImage::constant(2, 2, 0.5);
/// let theta = RadianceImage::constant(2, 2, std::f32::consts::FRAC_PI_4);
/// let set = render_polarized_set(&i, &p, &theta).unwrap();
/// let st = stokes_from_set(&set);
/// assert!((st.s0.get(0, 0, 0) - 0.8).abs() < 1e-6);
/// assert!(st.s1.get(0, 0, 0).abs() < 1e-6);
/// assert!((st.s2.get(0, 0, 0) - 0.4).abs() < 1e-6);
/// ```
pub fn stokes_from_set<T: Scalar>(set: &PolarizedImageSet<T>) -> StokesMaps<T> {
    let half = T::from_f64(0.5);
    let (h, w) = (set.height(), set.width());
    let mut s0 = RadianceImage::zeros(h, w);
    let mut s1 = RadianceImage::zeros(h, w);
    let mut s2 = RadianceImage::zeros(h, w);
    let (a, b, c, d) = (
        set.i000.data(),
        set.i045.data(),
        set.i090.data(),
        set.i135.data(),
    );
    for idx in 0..a.len() {
        s0.data_mut()[idx] = half * (a[idx] + b[idx] + c[idx] + d[idx]);
        s1.data_mut()[idx] = c[idx] - a[idx];
        s2.data_mut()[idx] = d[idx] - b[idx];
    }
    StokesMaps { s0, s1, s2 }
}

/// Degree of linear polarization `sqrt(s1^2 + s2^2) / s0`, clamped to
/// `[0, 1]`; pixels with `s0 < eps` are defined as unpolarized (`p = 0`).
pub fn dolp_from_stokes<T: Scalar>(st: &StokesMaps<T>, eps: T) -> RadianceImage<T> {
    let mut out = RadianceImage::zeros(st.s0.height(), st.s0.width());
    let (s0, s1, s2) = (st.s0.data(), st.s1.data(), st.s2.data());
    for (o, idx) in out.data_mut().iter_mut().zip(0..s0.len()) {
        if s0[idx] < eps {
            *o = T::zero();
        } else {
            let mag = (s1[idx] * s1[idx] + s2[idx] * s2[idx]).sqrt();
            *o = (mag / s0[idx]).min(T::one()).max(T::zero());
        }
    }
    out
}

/// Angle of linear polarization `0.5 * atan2(s2, s1)`, wrapped to `[0, pi)`.
/// Pixels with `s1 = s2 = 0` return 0.
pub fn aolp_from_stokes<T: Scalar>(st: &StokesMaps<T>) -> RadianceImage<T> {
    let pi = T::from_f64(std::f64::consts::PI);
    let half = T::from_f64(0.5);
    let mut out = RadianceImage::zeros(st.s0.height(), st.s0.width());
    let (s1, s2) = (st.s1.data(), st.s2.data());
    for (o, idx) in out.data_mut().iter_mut().zip(0..s1.len()) {
        let mut theta = half * s2[idx].atan2(s1[idx]);
        if theta < T::zero() {
            theta += pi;
        }
        if theta >= pi {
            theta -= pi;
        }
        *o = theta;
    }
    out
}

/// Both polarization parameters from a Stokes triple.
pub fn polarization_from_stokes<T: Scalar>(st: &StokesMaps<T>, eps: T) -> PolarizationState<T> {
    PolarizationState {
        dolp: dolp_from_stokes(st, eps),
        aolp: aolp_from_stokes(st),
    }
}

/// The unpolarized image `I = S0` of a set.
pub fn unpolarized_from_set<T: Scalar>(set: &PolarizedImageSet<T>) -> RadianceImage<T> {
    stokes_from_set(set).s0
}

/// Result of the physical-consistency checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalReport<T = f32> {
    /// Largest pointwise violation of `i000 + i090 == i045 + i135`.
    pub max_pair_violation: T,
    /// Largest pointwise violation of `sqrt(s1^2 + s2^2) <= s0`.
    pub max_admissibility_violation: T,
    /// True when both violations are within tolerance.
    pub pass: bool,
}

impl<T: Scalar> std::fmt::Display for PhysicalReport<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "pair violation {:.3e}, admissibility violation {:.3e}: {}",
            self.max_pair_violation.to_f64(),
            self.max_admissibility_violation.to_f64(),
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Check the complementary-pair identity and Stokes admissibility of a set.
pub fn validate_physical<T: Scalar>(set: &PolarizedImageSet<T>, tol: T) -> PhysicalReport<T> {
    let mut pair = T::zero();
    let (a, b, c, d) = (
        set.i000.data(),
        set.i045.data(),
        set.i090.data(),
        set.i135.data(),
    );
    for idx in 0..a.len() {
        pair = pair.max(((a[idx] + c[idx]) - (b[idx] + d[idx])).abs());
    }
    let st = stokes_from_set(set);
    let adm = validate_stokes(&st, tol).max_admissibility_violation;
    PhysicalReport {
        max_pair_violation: pair,
        max_admissibility_violation: adm,
        pass: pair <= tol && adm <= tol,
    }
}

/// Check Stokes admissibility (`sqrt(s1^2 + s2^2) <= s0`) alone.
pub fn validate_stokes<T: Scalar>(st: &StokesMaps<T>, tol: T) -> PhysicalReport<T> {
    let mut adm = T::zero();
    let (s0, s1, s2) = (st.s0.data(), st.s1.data(), st.s2.data());
    for idx in 0..s0.len() {
        let mag = (s1[idx] * s1[idx] + s2[idx] * s2[idx]).sqrt();
        adm = adm.max(mag - s0[idx]);
    }
    PhysicalReport {
        max_pair_violation: T::zero(),
        max_admissibility_violation: adm,
        pass: adm <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn const_scene(i: f64, p: f64, t: f64) -> (RadianceImage<f64>, RadianceImage<f64>, RadianceImage<f64>) {
        (
            RadianceImage::constant(3, 4, i),
            RadianceImage::constant(3, 4, p),
            RadianceImage::constant(3, 4, t),
        )
    }

    #[test]
    fn malus_analytic_values() {
        let (i, p, t) = const_scene(0.8, 0.5, FRAC_PI_4);
        let at0 = malus_render(&i, &p, &t, 0.0).unwrap();
        assert!((at0.get(0, 0, 0) - 0.4).abs() < 1e-12);
        let at135 = malus_render(&i, &p, &t, 3.0 * FRAC_PI_4).unwrap();
        assert!((at135.get(1, 2, 3) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn malus_unpolarized_halves_intensity() {
        let (i, _, t) = const_scene(0.62, 0.0, 1.1);
        let p = RadianceImage::constant(3, 4, 0.0);
        for angle in [0.0, 0.3, 2.0] {
            let out = malus_render(&i, &p, &t, angle).unwrap();
            assert!((out.get(2, 1, 1) - 0.31).abs() < 1e-12);
        }
    }

    #[test]
    fn malus_rejects_bad_inputs() {
        let (i, _, t) = const_scene(0.8, 0.5, 0.0);
        let bad_p = RadianceImage::constant(3, 4, 1.5);
        assert!(matches!(
            malus_render(&i, &bad_p, &t, 0.0),
            Err(Error::Domain(_))
        ));
        let p = RadianceImage::constant(3, 4, 0.5);
        let small = RadianceImage::<f64>::constant(2, 2, 0.1);
        assert!(matches!(
            malus_render(&i, &p, &small, 0.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rendered_set_matches_hand_evaluation() {
        // Independent scalar evaluation of the formula at the four angles.
        let (i, p, t) = const_scene(0.8, 0.5, FRAC_PI_4);
        let set = render_polarized_set(&i, &p, &t).unwrap();
        let expect = [0.4, 0.2, 0.4, 0.6];
        for (img, e) in set.angles().into_iter().zip(expect) {
            assert!((img.get(0, 2, 2) - e).abs() < 1e-12, "angle image vs {e}");
        }
    }

    #[test]
    fn fully_polarized_horizontal() {
        let (i, p, t) = const_scene(1.0, 1.0, 0.0);
        let set = render_polarized_set(&i, &p, &t).unwrap();
        let expect = [0.0, 0.5, 1.0, 0.5];
        for (img, e) in set.angles().into_iter().zip(expect) {
            assert!((img.get(0, 0, 0) - e).abs() < 1e-12);
        }
        let st = stokes_from_set(&set);
        assert!((st.s0.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!((st.s1.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!(st.s2.get(0, 0, 0).abs() < 1e-12);
    }

    #[test]
    fn unpolarized_set_is_flat() {
        let (i, p, t) = const_scene(0.6, 0.0, 2.3);
        let set = render_polarized_set(&i, &p, &t).unwrap();
        for img in set.angles() {
            assert!((img.get(1, 1, 1) - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn stokes_of_equal_images() {
        let img = RadianceImage::<f64>::constant(2, 2, 0.35);
        let set = PolarizedImageSet::new(img.clone(), img.clone(), img.clone(), img).unwrap();
        let st = stokes_from_set(&set);
        assert!((st.s0.get(0, 0, 0) - 0.7).abs() < 1e-12);
        assert_eq!(st.s1.get(0, 0, 0), 0.0);
        assert_eq!(st.s2.get(0, 0, 0), 0.0);
    }

    #[test]
    fn dolp_worked_example_and_degenerate_pixels() {
        let s0 = RadianceImage::constant(2, 2, 0.8_f64);
        let s1 = RadianceImage::constant(2, 2, 0.0);
        let s2 = RadianceImage::constant(2, 2, 0.4);
        let st = StokesMaps { s0, s1, s2 };
        let p = dolp_from_stokes(&st, 1e-6);
        assert!((p.get(0, 0, 0) - 0.5).abs() < 1e-12);

        let zero = StokesMaps {
            s0: RadianceImage::constant(2, 2, 0.0_f64),
            s1: RadianceImage::constant(2, 2, 0.3),
            s2: RadianceImage::constant(2, 2, 0.0),
        };
        assert_eq!(dolp_from_stokes(&zero, 1e-6).get(0, 0, 0), 0.0);

        let flat = StokesMaps {
            s0: RadianceImage::constant(2, 2, 1.0_f64),
            s1: RadianceImage::constant(2, 2, 0.0),
            s2: RadianceImage::constant(2, 2, 0.0),
        };
        assert_eq!(dolp_from_stokes(&flat, 1e-6).get(1, 1, 1), 0.0);
    }

    #[test]
    fn aolp_quadrants() {
        let mk = |s1: f64, s2: f64| StokesMaps {
            s0: RadianceImage::constant(1, 1, 1.0),
            s1: RadianceImage::constant(1, 1, s1),
            s2: RadianceImage::constant(1, 1, s2),
        };
        assert!((aolp_from_stokes(&mk(0.0, 0.4)).get(0, 0, 0) - FRAC_PI_4).abs() < 1e-12);
        assert_eq!(aolp_from_stokes(&mk(1.0, 0.0)).get(0, 0, 0), 0.0);
        assert!((aolp_from_stokes(&mk(-1.0, 0.0)).get(0, 0, 0) - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(aolp_from_stokes(&mk(0.0, 0.0)).get(0, 0, 0), 0.0);
    }

    #[test]
    fn validator_flags_perturbed_set() {
        let (i, p, t) = const_scene(0.8, 0.5, FRAC_PI_4);
        let set = render_polarized_set(&i, &p, &t).unwrap();
        assert!(validate_physical(&set, 1e-6).pass);

        let mut bad = set.clone();
        let v = bad.i000.get(0, 1, 1);
        bad.i000.set(0, 1, 1, v + 0.1);
        let report = validate_physical(&bad, 1e-6);
        assert!(!report.pass);
        assert!((report.max_pair_violation - 0.1).abs() < 1e-9);

        let zeros = PolarizedImageSet::new(
            RadianceImage::<f64>::zeros(2, 2),
            RadianceImage::zeros(2, 2),
            RadianceImage::zeros(2, 2),
            RadianceImage::zeros(2, 2),
        )
        .unwrap();
        assert!(validate_physical(&zeros, 1e-6).pass);
    }

    proptest! {
        /// Render then invert recovers (p, theta) for non-degenerate pixels.
        #[test]
        fn round_trip_recovers_polarization(
            i in 0.05f64..2.0,
            p in 0.01f64..1.0,
            t in 0.0f64..PI,
        ) {
            let (iv, pv, tv) = const_scene(i, p, t);
            let set = render_polarized_set(&iv, &pv, &tv).unwrap();
            let st = stokes_from_set(&set);
            let state = polarization_from_stokes(&st, 1e-9);
            let dp = (state.dolp.get(0, 0, 0) - p).abs();
            let dt_raw = (state.aolp.get(0, 0, 0) - t).abs();
            let dt = dt_raw.min(PI - dt_raw);
            prop_assert!(dp < 1e-6, "dp = {dp}");
            prop_assert!(dt < 1e-6, "dt = {dt}");
        }

        /// Stokes computation is linear in the set.
        #[test]
        fn stokes_is_linear(
            a in 0.0f64..2.0,
            b in 0.0f64..2.0,
            p1 in 0.0f64..1.0,
            p2 in 0.0f64..1.0,
            t1 in 0.0f64..PI,
            t2 in 0.0f64..PI,
        ) {
            let (i1, pv1, tv1) = const_scene(0.7, p1, t1);
            let (i2, pv2, tv2) = const_scene(0.4, p2, t2);
            let set1 = render_polarized_set(&i1, &pv1, &tv1).unwrap();
            let set2 = render_polarized_set(&i2, &pv2, &tv2).unwrap();
            let combo = PolarizedImageSet {
                i000: set1.i000.zip_map(&set2.i000, |x, y| a * x + b * y),
                i045: set1.i045.zip_map(&set2.i045, |x, y| a * x + b * y),
                i090: set1.i090.zip_map(&set2.i090, |x, y| a * x + b * y),
                i135: set1.i135.zip_map(&set2.i135, |x, y| a * x + b * y),
            };
            let st = stokes_from_set(&combo);
            let st1 = stokes_from_set(&set1);
            let st2 = stokes_from_set(&set2);
            for (got, (x, y)) in [
                (&st.s0, (&st1.s0, &st2.s0)),
                (&st.s1, (&st1.s1, &st2.s1)),
                (&st.s2, (&st1.s2, &st2.s2)),
            ] {
                let want = x.zip_map(y, |u, v| a * u + b * v);
                prop_assert!(got.max_abs_diff(&want) < 1e-6);
            }
        }

        /// Complementary polarizer pairs sum to the full intensity.
        #[test]
        fn complementary_pairs_sum_to_intensity(
            i in 0.0f64..2.0,
            p in 0.0f64..1.0,
            t in 0.0f64..PI,
        ) {
            let (iv, pv, tv) = const_scene(i, p, t);
            let set = render_polarized_set(&iv, &pv, &tv).unwrap();
            let report = validate_physical(&set, 1e-6);
            prop_assert!(report.pass, "{report}");
            let sum = set.i000.get(0, 0, 0) + set.i090.get(0, 0, 0);
            prop_assert!((sum - i).abs() < 1e-9);
        }

        /// Recovered parameters always live in their domains, even for
        /// unphysical Stokes inputs.
        #[test]
        fn recovered_domains_always_valid(
            s0 in -0.5f64..2.0,
            s1 in -2.0f64..2.0,
            s2 in -2.0f64..2.0,
        ) {
            let st = StokesMaps {
                s0: RadianceImage::constant(1, 1, s0),
                s1: RadianceImage::constant(1, 1, s1),
                s2: RadianceImage::constant(1, 1, s2),
            };
            let state = polarization_from_stokes(&st, 1e-6);
            let p = state.dolp.get(0, 0, 0);
            let t = state.aolp.get(0, 0, 0);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((0.0..PI).contains(&t));
        }
    }
}
