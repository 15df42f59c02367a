//! Quasi quadrature measures: the 1-D pointwise form, the oriented 2-D
//! field, spatial post-smoothing, and closed-form analysis helpers.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::image_io::Image;
use crate::scale_space::{self, directional_derivatives, Jet2};

/// Weighting between odd and even components that minimizes response
/// ripple for a Gaussian blob when `s = s0`.
pub const DEFAULT_C: f64 = 8.0 / 11.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqParams {
    /// Weight of the squared second-order term.
    pub c: f64,
    /// Complementary normalization power Γ; 0 gives exact scale covariance.
    pub big_gamma: f64,
    /// Relative post-smoothing scale r; 0 disables post-smoothing.
    pub r_post: f64,
}

impl Default for QqParams {
    fn default() -> Self {
        QqParams {
            c: DEFAULT_C,
            big_gamma: 0.0,
            r_post: 0.0,
        }
    }
}

impl QqParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(domain!("C must be positive, got {}", self.c));
        }
        if !(self.r_post >= 0.0) {
            return Err(domain!("r_post must be non-negative, got {}", self.r_post));
        }
        if !self.big_gamma.is_finite() {
            return Err(domain!("Gamma must be finite"));
        }
        Ok(())
    }
}

/// `sqrt((Lx_norm² + C Lxx_norm²) / s^Γ)` for γ = 1 normalized inputs.
pub fn qq_pointwise_1d(lx_norm: f64, lxx_norm: f64, s: f64, params: &QqParams) -> Result<f64> {
    if !(s > 0.0) {
        return Err(domain!("scale must be positive, got {s}"));
    }
    Ok(((lx_norm * lx_norm + params.c * lxx_norm * lxx_norm) / s.powf(params.big_gamma)).sqrt())
}

/// Oriented measure from precomputed γ = 1 directional derivative fields.
pub(crate) fn qq_from_directional(lphi: &Image, lphiphi: &Image, s: f64, params: &QqParams) -> Image {
    let denom = s.powf(params.big_gamma);
    let c = params.c;
    let data = lphi
        .data()
        .iter()
        .zip(lphiphi.data())
        .map(|(&a, &b)| ((a * a + c * b * b) / denom).sqrt())
        .collect();
    Image::field(lphi.width(), lphi.height(), data)
}

/// Oriented quasi quadrature field in direction `phi` from a γ = 1 jet.
pub fn qq_oriented(jet: &Jet2, phi: f64, params: &QqParams) -> Result<Image> {
    if !jet.normalized || jet.gamma != 1.0 {
        return Err(domain!("oriented quasi quadrature needs a γ = 1 normalized jet"));
    }
    if !(jet.scale_s > 0.0) {
        return Err(domain!("scale must be positive, got {}", jet.scale_s));
    }
    let (lphi, lphiphi) = directional_derivatives(jet, phi);
    Ok(qq_from_directional(&lphi, &lphiphi, jet.scale_s, params))
}

/// Square, smooth at `r_post² s`, then take the square root.
pub fn qq_post_smooth(q: &Image, s: f64, params: &QqParams, eps: f64) -> Result<Image> {
    if params.r_post == 0.0 {
        return Ok(q.clone());
    }
    if !(params.r_post > 0.0) {
        return Err(domain!("r_post must be non-negative"));
    }
    let squared = q.map(|v| v * v);
    let smoothed = scale_space::smooth(&squared, params.r_post * params.r_post * s, eps)?;
    Ok(smoothed.map(|v| v.max(0.0).sqrt()))
}

/// `C = 4 (s + s0) / (11 s)`, the minimizer of the squared-measure ripple
/// for a Gaussian blob of variance `s0` observed at scale `s`.
pub fn optimal_c(s: f64, s0: f64) -> Result<f64> {
    if !(s > 0.0 && s0 > 0.0) {
        return Err(domain!("scales must be positive, got s={s}, s0={s0}"));
    }
    Ok(4.0 * (s + s0) / (11.0 * s))
}

/// Scale at which the measure at the origin of the Gaussian derivative
/// blob `g_{x^n}(·; s0)` peaks over scale.
pub fn predicted_selection_scale(n: u32, s0: f64, big_gamma: f64) -> Result<f64> {
    if !(s0 > 0.0) {
        return Err(domain!("s0 must be positive, got {s0}"));
    }
    let g = big_gamma;
    let s = match n {
        0 => s0 * (2.0 - g) / (2.0 + g),
        1 => s0 * (1.0 - g) / (3.0 + g),
        2 => s0 * (2.0 - g) / (4.0 + g),
        _ => return Err(domain!("derivative order must be 0, 1 or 2, got {n}")),
    };
    if !(s > 0.0) || !s.is_finite() {
        return Err(domain!("no positive selection scale for n={n}, Gamma={g}"));
    }
    Ok(s)
}

/// First-order relative perturbation `sqrt(s) ∂x(Q) / Q` expressed in γ = 1
/// normalized derivatives of orders 1 to 3.
pub fn phase_sensitivity(lx: f64, lxx: f64, lxxx: f64, params: &QqParams) -> Result<f64> {
    let denom = lx * lx + params.c * lxx * lxx;
    if denom == 0.0 {
        return Err(Error::Undefined(
            "phase sensitivity is undefined where both Lx and Lxx vanish".into(),
        ));
    }
    Ok(lxx * (lx + params.c * lxxx) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale_space::{jet2, DEFAULT_EPS};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn jet1(img: &Image, s: f64) -> Jet2 {
        jet2(img, s, 1.0, DEFAULT_EPS).unwrap()
    }

    #[test]
    fn pointwise_basics() {
        let p = QqParams::default();
        assert_eq!(qq_pointwise_1d(0.0, 0.0, 2.0, &p).unwrap(), 0.0);
        assert!(qq_pointwise_1d(1.0, 1.0, 0.0, &p).is_err());
        let a = qq_pointwise_1d(0.3, -0.7, 3.0, &p).unwrap();
        let b = qq_pointwise_1d(0.3 * 2.5, -0.7 * 2.5, 3.0, &p).unwrap();
        assert!((b - 2.5 * a).abs() < 1e-14);
    }

    #[test]
    fn variance_of_taylor_model() {
        // Q² with C = 1/2, Γ = 0 equals s c1² + s² c2² / 2
        let p = QqParams {
            c: 0.5,
            big_gamma: 0.0,
            r_post: 0.0,
        };
        for (c1, c2, s) in [(1.0f64, 2.0f64, 3.0f64), (-0.4, 0.25, 10.0), (0.0, 1.5, 0.5)] {
            let q = qq_pointwise_1d(s.sqrt() * c1, s * c2, s, &p).unwrap();
            let v = s * c1 * c1 + s * s * c2 * c2 / 2.0;
            assert!((q * q - v).abs() < 1e-10 * v.max(1.0));
        }
    }

    #[test]
    fn optimal_c_values() {
        assert!((optimal_c(1.0, 1.0).unwrap() - 8.0 / 11.0).abs() < 1e-15);
        assert!((optimal_c(1e12, 1.0).unwrap() - 4.0 / 11.0).abs() < 1e-10);
        assert!(optimal_c(0.0, 1.0).is_err());
    }

    #[test]
    fn optimal_c_against_brute_force_ripple() {
        // closed-form derivatives of g(x; s + s0), ripple integral by quadrature
        let (s, s0) = (2.0, 1.0);
        let t = s + s0;
        let xs: Vec<f64> = (-6000..=6000).map(|i| i as f64 * 0.005).collect();
        let ripple = |c: f64| -> f64 {
            let q2: Vec<f64> = xs
                .iter()
                .map(|&x| {
                    let g = (-x * x / (2.0 * t)).exp() / (2.0 * PI * t).sqrt();
                    let lx = -x / t * g;
                    let lxx = (x * x - t) / (t * t) * g;
                    s * lx * lx + c * s * s * lxx * lxx
                })
                .collect();
            q2.windows(3).map(|w| ((w[2] - w[0]) / 0.01).powi(2) * 0.005).sum()
        };
        let best = (0..=2000)
            .map(|i| i as f64 * 0.001)
            .min_by(|a, b| ripple(*a).partial_cmp(&ripple(*b)).unwrap())
            .unwrap();
        assert!((best - optimal_c(s, s0).unwrap()).abs() < 2e-3, "best {best}");
    }

    #[test]
    fn selection_scales() {
        assert_eq!(predicted_selection_scale(0, 16.0, 0.0).unwrap(), 16.0);
        assert!((predicted_selection_scale(1, 18.0, 0.0).unwrap() - 6.0).abs() < 1e-12);
        assert!((predicted_selection_scale(2, 16.0, 0.0).unwrap() - 8.0).abs() < 1e-12);
        assert!(predicted_selection_scale(1, 16.0, 1.0).is_err());
        assert!(predicted_selection_scale(3, 16.0, 0.0).is_err());
        assert!((predicted_selection_scale(0, 10.0, 0.5).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn phase_sensitivity_cases() {
        let p = QqParams::default();
        assert_eq!(phase_sensitivity(0.7, 0.0, 0.3, &p).unwrap(), 0.0);
        assert_eq!(phase_sensitivity(0.0, 0.5, 0.0, &p).unwrap(), 0.0);
        assert!(matches!(
            phase_sensitivity(0.0, 0.0, 1.0, &p),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn phase_sensitivity_matches_finite_difference() {
        // analytic signal L(x) = sin(a x) + 0.3 cos(b x) at scale s
        let (a, b, s) = (0.4f64, 0.9f64, 2.0f64);
        let p = QqParams::default();
        let d = |x: f64, k: u32| -> f64 {
            let f = |w: f64, ph: f64| w.powi(k as i32) * (w * x + ph + k as f64 * PI / 2.0).sin();
            f(a, 0.0) + 0.3 * f(b, PI / 2.0)
        };
        let q = |x: f64| {
            qq_pointwise_1d(s.sqrt() * d(x, 1), s * d(x, 2), s, &p).unwrap()
        };
        for x in [0.3, 1.1, 2.7, -4.0] {
            let h = 1e-5;
            let fd = s.sqrt() * (q(x + h).ln() - q(x - h).ln()) / (2.0 * h);
            let analytic =
                phase_sensitivity(s.sqrt() * d(x, 1), s * d(x, 2), s.powf(1.5) * d(x, 3), &p)
                    .unwrap();
            assert!((fd - analytic).abs() < 1e-3, "x={x}: {fd} vs {analytic}");
        }
    }

    #[test]
    fn oriented_on_constant_and_ramp() {
        let p = QqParams::default();
        let q = qq_oriented(&jet1(&Image::constant(32, 32, 0.4), 2.0), 0.3, &p).unwrap();
        assert!(q.data().iter().all(|&v| v.abs() < 1e-12));

        let ramp = Image::from_fn(48, 48, |x, _| x as f64 * 0.01);
        let s = 3.0;
        let q = qq_oriented(&jet1(&ramp, s), 0.0, &p).unwrap();
        for y in 0..48 {
            for x in 15..33 {
                assert!((q.at(x, y) - s.sqrt() * 0.01).abs() < 1e-10);
            }
        }
        let j0 = jet2(&ramp, s, 0.0, DEFAULT_EPS).unwrap();
        assert!(qq_oriented(&j0, 0.0, &p).is_err());
    }

    #[test]
    fn grating_prefers_gradient_direction() {
        let wavelength = 12.0;
        let img = Image::from_fn(96, 96, |x, _| 0.5 + 0.5 * (2.0 * PI * x as f64 / wavelength).sin());
        // matched scale for a sine of angular frequency w: s = 1 / w² (order-1 peak)
        let w = 2.0 * PI / wavelength;
        let jet = jet1(&img, 1.0 / (w * w));
        let p = QqParams::default();
        let mean = |q: Image| q.data().iter().sum::<f64>() / q.data().len() as f64;
        let responses: Vec<f64> = (0..8)
            .map(|m| mean(qq_oriented(&jet, m as f64 * PI / 8.0, &p).unwrap()))
            .collect();
        let max_i = (0..8).max_by(|&a, &b| responses[a].total_cmp(&responses[b])).unwrap();
        let min_i = (0..8).min_by(|&a, &b| responses[a].total_cmp(&responses[b])).unwrap();
        assert_eq!(max_i, 0);
        assert_eq!(min_i, 4);
    }

    #[test]
    fn post_smoothing() {
        let p = QqParams {
            r_post: 2f64.sqrt(),
            ..QqParams::default()
        };
        let c = Image::constant(20, 20, 0.7);
        let out = qq_post_smooth(&c, 3.0, &p, DEFAULT_EPS).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        let mut data = vec![0.0; 41 * 41];
        data[20 * 41 + 20] = 1.0;
        let spike = Image::new(41, 41, 1, data).unwrap();
        let out = qq_post_smooth(&spike, 2.0, &p, DEFAULT_EPS).unwrap();
        assert!(out.at(20, 20) < 1.0);
        assert!(out.at(22, 20) > 0.0);

        let off = QqParams::default();
        assert_eq!(qq_post_smooth(&spike, 2.0, &off, DEFAULT_EPS).unwrap(), spike);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn oriented_invariants(
            data in proptest::collection::vec(-1.0f64..1.0, 16 * 16),
            phi in 0.0f64..PI,
            t in 0.1f64..5.0,
            s in 0.5f64..4.0,
        ) {
            let p = QqParams::default();
            let img = Image::new(16, 16, 1, data).unwrap();
            let q = qq_oriented(&jet1(&img, s), phi, &p).unwrap();
            prop_assert!(q.data().iter().all(|&v| v >= 0.0));

            // φ + π gives the same field
            let q_pi = qq_oriented(&jet1(&img, s), phi + PI, &p).unwrap();
            for (a, b) in q.data().iter().zip(q_pi.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            // polarity
            let neg = qq_oriented(&jet1(&img.map(|v| -v), s), phi, &p).unwrap();
            prop_assert_eq!(neg.data(), q.data());
            // homogeneity
            let scaled = qq_oriented(&jet1(&img.map(|v| t * v), s), phi, &p).unwrap();
            for (a, b) in q.data().iter().zip(scaled.data()) {
                prop_assert!((t * a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
