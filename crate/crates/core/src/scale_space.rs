//! Discrete Gaussian scale space and γ-normalized derivative jets.
//!
//! Smoothing uses the discrete analogue of the Gaussian,
//! `T(n; s) = exp(-s) I_n(s)`, applied separably with whole-sample
//! symmetric (mirror) boundary extension. Derivatives are the small-support
//! central difference stencils `(-1/2, 0, 1/2)` and `(1, -2, 1)`.

use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::image_io::Image;

/// Default truncation tolerance for the tail mass of a kernel.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Scales above this use normalized backward recurrence instead of the series.
const SERIES_LIMIT: f64 = 30.0;

/// Symmetric 1-D smoothing kernel, `coeffs[radius + n]` holds `T(n; s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D {
    pub radius: usize,
    pub coeffs: Vec<f64>,
    pub scale_s: f64,
}

impl Kernel1D {
    pub fn center(&self) -> f64 {
        self.coeffs[self.radius]
    }

    /// Coefficient at integer offset `n`, zero outside the support.
    pub fn at(&self, n: isize) -> f64 {
        let k = n.unsigned_abs();
        if k > self.radius {
            0.0
        } else {
            self.coeffs[self.radius + k]
        }
    }
}

/// `exp(-s) I_n(s)` for `n = 0, 1, ...` by the power series
/// `I_n(s) = Σ_k (s/2)^(n+2k) / (k! (n+k)!)`, stopping once the values are
/// negligible. Only used for moderate `s` where `exp(-s)` does not underflow
/// the leading terms.
pub(crate) fn bessel_weights_series(s: f64) -> Vec<f64> {
    let half = s / 2.0;
    let q = half * half;
    let mut out = Vec::new();
    // lead = exp(-s) (s/2)^n / n!
    let mut lead = (-s).exp();
    let mut n = 0usize;
    loop {
        let mut term = lead;
        let mut sum = 0.0;
        let mut k = 0usize;
        while term > sum * 1e-18 || k == 0 {
            sum += term;
            k += 1;
            term *= q / (k as f64 * (n + k) as f64);
            if term == 0.0 {
                break;
            }
        }
        out.push(sum);
        if n as f64 > s && sum < 1e-30 {
            break;
        }
        n += 1;
        lead *= half / n as f64;
    }
    out
}

/// `exp(-s) I_n(s)` by Miller's backward recurrence
/// `I_(n-1) = I_(n+1) + (2n/s) I_n`, normalized with
/// `I_0 + 2 Σ_(n≥1) I_n = exp(s)`.
pub(crate) fn bessel_weights_miller(s: f64) -> Vec<f64> {
    let start = (s + 16.0 * s.sqrt() + 40.0).ceil() as usize;
    let mut vals = vec![0.0f64; start + 2];
    vals[start] = 1e-280;
    for n in (1..=start).rev() {
        let prev = vals[n + 1] + (2.0 * n as f64 / s) * vals[n];
        vals[n - 1] = prev;
        if prev > 1e250 {
            for v in vals[n - 1..].iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    let total = vals[0] + 2.0 * vals[1..].iter().sum::<f64>();
    vals.iter_mut().for_each(|v| *v /= total);
    while vals.len() > 1 && *vals.last().unwrap() < 1e-300 {
        vals.pop();
    }
    vals
}

/// The discrete analogue of the Gaussian kernel at variance `s`, truncated at
/// the smallest radius whose two-sided tail mass is below `eps` and
/// renormalized to unit sum.
pub fn discrete_gaussian_kernel(s: f64, eps: f64) -> Result<Kernel1D> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(domain!("scale must be non-negative, got {s}"));
    }
    if !(eps > 0.0 && eps < 1e-3) {
        return Err(domain!("truncation tolerance must lie in (0, 1e-3), got {eps}"));
    }
    if s == 0.0 {
        return Ok(Kernel1D {
            radius: 0,
            coeffs: vec![1.0],
            scale_s: 0.0,
        });
    }
    let weights = if s <= SERIES_LIMIT {
        bessel_weights_series(s)
    } else {
        bessel_weights_miller(s)
    };
    // tail[r] = 2 Σ_{n>r} T_n, accumulated from the far end
    let mut tail = vec![0.0; weights.len()];
    for r in (0..weights.len() - 1).rev() {
        tail[r] = tail[r + 1] + 2.0 * weights[r + 1];
    }
    let radius = tail.iter().position(|&t| t < eps).unwrap_or(weights.len() - 1);
    let mut coeffs = Vec::with_capacity(2 * radius + 1);
    coeffs.extend(weights[1..=radius].iter().rev());
    coeffs.extend(&weights[..=radius]);
    let sum: f64 = coeffs.iter().sum();
    coeffs.iter_mut().for_each(|c| *c /= sum);
    Ok(Kernel1D {
        radius,
        coeffs,
        scale_s: s,
    })
}

/// Whole-sample symmetric reflection of index `i` into `0..n`.
#[inline]
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn convolve_rows(data: &[f64], width: usize, kernel: &Kernel1D) -> Vec<f64> {
    let r = kernel.radius;
    let half = &kernel.coeffs[r..];
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(width)
        .zip(data.par_chunks(width))
        .for_each_init(
            || vec![0.0; width + 2 * r],
            |ext, (dst, src)| {
                for (j, e) in ext.iter_mut().enumerate() {
                    *e = src[mirror_index(j as isize - r as isize, width)];
                }
                for (x, d) in dst.iter_mut().enumerate() {
                    let c = x + r;
                    let mut acc = half[0] * ext[c];
                    for k in 1..=r {
                        acc += half[k] * (ext[c - k] + ext[c + k]);
                    }
                    *d = acc;
                }
            },
        );
    out
}

fn transpose(data: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    const B: usize = 32;
    for by in (0..height).step_by(B) {
        for bx in (0..width).step_by(B) {
            for y in by..(by + B).min(height) {
                for x in bx..(bx + B).min(width) {
                    out[x * height + y] = data[y * width + x];
                }
            }
        }
    }
    out
}

/// Separable convolution of a single-channel image with an explicit kernel.
pub fn smooth_with(img: &Image, kernel: &Kernel1D) -> Image {
    if kernel.radius == 0 {
        return img.map(|v| v * kernel.coeffs[0]);
    }
    let (w, h) = (img.width(), img.height());
    let rows = convolve_rows(img.data(), w, kernel);
    let cols = convolve_rows(&transpose(&rows, w, h), h, kernel);
    Image::field(w, h, transpose(&cols, h, w))
}

/// Discrete Gaussian smoothing at variance `s` (pixels²).
pub fn smooth(img: &Image, s: f64, eps: f64) -> Result<Image> {
    if img.channels() != 1 {
        return Err(domain!("smoothing expects a single-channel image"));
    }
    let kernel = discrete_gaussian_kernel(s, eps)?;
    Ok(smooth_with(img, &kernel))
}

/// Second-order jet of the scale-space representation at one scale.
#[derive(Debug, Clone)]
pub struct Jet2 {
    pub l: Image,
    pub lx: Image,
    pub ly: Image,
    pub lxx: Image,
    pub lxy: Image,
    pub lyy: Image,
    pub scale_s: f64,
    pub gamma: f64,
    pub normalized: bool,
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

fn central_diff(img: &Image, axis: Axis, scale: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let d = img.data();
    let mut out = vec![0.0; d.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let (a, b) = match axis {
                Axis::X => (
                    d[y * w + mirror_index(x as isize + 1, w)],
                    d[y * w + mirror_index(x as isize - 1, w)],
                ),
                Axis::Y => (
                    d[mirror_index(y as isize + 1, h) * w + x],
                    d[mirror_index(y as isize - 1, h) * w + x],
                ),
            };
            *o = 0.5 * (a - b) * scale;
        }
    });
    Image::field(w, h, out)
}

fn second_diff(img: &Image, axis: Axis, scale: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let d = img.data();
    let mut out = vec![0.0; d.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let c = d[y * w + x];
            let (a, b) = match axis {
                Axis::X => (
                    d[y * w + mirror_index(x as isize + 1, w)],
                    d[y * w + mirror_index(x as isize - 1, w)],
                ),
                Axis::Y => (
                    d[mirror_index(y as isize + 1, h) * w + x],
                    d[mirror_index(y as isize - 1, h) * w + x],
                ),
            };
            *o = (a - 2.0 * c + b) * scale;
        }
    });
    Image::field(w, h, out)
}

/// Computes the jet of `img` at variance `s`, with derivatives of order `n`
/// multiplied by `s^(n γ / 2)`.
pub fn jet2(img: &Image, s: f64, gamma: f64, eps: f64) -> Result<Jet2> {
    if !(s > 0.0) {
        return Err(domain!("derivative jets need a positive scale, got {s}"));
    }
    let l = smooth(img, s, eps)?;
    Ok(jet_of_smoothed(l, s, gamma))
}

pub(crate) fn jet_of_smoothed(l: Image, s: f64, gamma: f64) -> Jet2 {
    let n1 = s.powf(gamma / 2.0);
    let n2 = s.powf(gamma);
    let lx = central_diff(&l, Axis::X, n1);
    let ly = central_diff(&l, Axis::Y, n1);
    let lxx = second_diff(&l, Axis::X, n2);
    let lyy = second_diff(&l, Axis::Y, n2);
    let lxy = central_diff(&central_diff(&l, Axis::Y, 1.0), Axis::X, n2);
    Jet2 {
        l,
        lx,
        ly,
        lxx,
        lxy,
        lyy,
        scale_s: s,
        gamma,
        normalized: true,
    }
}

/// First- and second-order directional derivatives in direction `phi`
/// (measured from the x axis towards the y axis).
pub fn directional_derivatives(jet: &Jet2, phi: f64) -> (Image, Image) {
    let (c, s) = (phi.cos(), phi.sin());
    let (cc, cs2, ss) = (c * c, 2.0 * c * s, s * s);
    let n = jet.l.data().len();
    let (lx, ly) = (jet.lx.data(), jet.ly.data());
    let (lxx, lxy, lyy) = (jet.lxx.data(), jet.lxy.data(), jet.lyy.data());
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for i in 0..n {
        first.push(c * lx[i] + s * ly[i]);
        second.push(cc * lxx[i] + cs2 * lxy[i] + ss * lyy[i]);
    }
    let (w, h) = (jet.l.width(), jet.l.height());
    (Image::field(w, h, first), Image::field(w, h, second))
}

/// 2x2 symmetric matrix, row-major.
pub type Mat2 = [[f64; 2]; 2];

/// Affine covariance matrix with eigenvalues `lambda1`, `lambda2` along the
/// directions `alpha` and `alpha + π/2`, scaled so the largest eigenvalue is 1.
pub fn affine_covariance_matrix(lambda1: f64, lambda2: f64, alpha: f64) -> Result<Mat2> {
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(domain!("eigenvalues must be positive, got {lambda1}, {lambda2}"));
    }
    let (c, s) = (alpha.cos(), alpha.sin());
    let m = lambda1.max(lambda2);
    let a = (lambda1 * c * c + lambda2 * s * s) / m;
    let b = (lambda1 - lambda2) * c * s / m;
    let d = (lambda1 * s * s + lambda2 * c * c) / m;
    Ok([[a, b], [b, d]])
}

/// Square 2-D kernel sampled on `[-radius, radius]²`, row-major.
#[derive(Debug, Clone)]
pub struct Kernel2D {
    pub radius: usize,
    pub coeffs: Vec<f64>,
}

impl Kernel2D {
    pub fn at(&self, x: isize, y: isize) -> f64 {
        let side = 2 * self.radius + 1;
        let r = self.radius as isize;
        self.coeffs[((y + r) as usize) * side + (x + r) as usize]
    }

    /// Second moment matrix `[[Σx², Σxy], [Σxy, Σy²]]` about the origin.
    pub fn second_moments(&self) -> Mat2 {
        let r = self.radius as isize;
        let mut m = [[0.0; 2]; 2];
        for y in -r..=r {
            for x in -r..=r {
                let v = self.at(x, y);
                let (xf, yf) = (x as f64, y as f64);
                m[0][0] += v * xf * xf;
                m[0][1] += v * xf * yf;
                m[1][1] += v * yf * yf;
            }
        }
        m[1][0] = m[0][1];
        m
    }
}

/// Point-sampled affine Gaussian `g(x; s, Σ)` renormalized to unit sum.
pub fn sample_affine_gaussian(s: f64, sigma: &Mat2, radius: usize) -> Result<Kernel2D> {
    if !(s > 0.0) {
        return Err(domain!("scale must be positive, got {s}"));
    }
    let det = sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0];
    if !(det > 0.0) || sigma[0][0] <= 0.0 || (sigma[0][1] - sigma[1][0]).abs() > 1e-12 {
        return Err(domain!("covariance matrix must be symmetric positive definite"));
    }
    let inv = [
        [sigma[1][1] / det, -sigma[0][1] / det],
        [-sigma[1][0] / det, sigma[0][0] / det],
    ];
    let r = radius as isize;
    let mut coeffs = Vec::with_capacity((2 * radius + 1).pow(2));
    for y in -r..=r {
        for x in -r..=r {
            let (xf, yf) = (x as f64, y as f64);
            let q = xf * (inv[0][0] * xf + inv[0][1] * yf) + yf * (inv[1][0] * xf + inv[1][1] * yf);
            coeffs.push((-q / (2.0 * s)).exp());
        }
    }
    let sum: f64 = coeffs.iter().sum();
    coeffs.iter_mut().for_each(|c| *c /= sum);
    Ok(Kernel2D { radius, coeffs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Independent oracle: direct power series with explicit factorials.
    fn bessel_oracle(n: usize, s: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..60 {
            let mut denom = 1.0;
            for i in 1..=k {
                denom *= i as f64;
            }
            for i in 1..=(n + k) {
                denom *= i as f64;
            }
            total += (s / 2.0).powi((n + 2 * k) as i32) / denom;
        }
        (-s).exp() * total
    }

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn kernel_at_zero_scale() {
        let k = discrete_gaussian_kernel(0.0, 1e-8).unwrap();
        assert_eq!(k.radius, 0);
        assert_eq!(k.coeffs, vec![1.0]);
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(discrete_gaussian_kernel(-1.0, 1e-8).is_err());
        assert!(discrete_gaussian_kernel(1.0, 0.0).is_err());
        assert!(discrete_gaussian_kernel(1.0, 1e-2).is_err());
    }

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        for s in [0.5, 1.0, 4.0, 16.0, 64.0, 400.0] {
            let k = discrete_gaussian_kernel(s, 1e-8).unwrap();
            let sum: f64 = k.coeffs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-8, "s={s}");
            for n in 0..=k.radius {
                assert_eq!(k.coeffs[k.radius + n], k.coeffs[k.radius - n]);
            }
            assert!(k.coeffs.iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn center_coefficient_matches_series_oracle() {
        let k = discrete_gaussian_kernel(1.0, 1e-14).unwrap();
        let expected = bessel_oracle(0, 1.0);
        assert!((expected - 0.4657596075936404).abs() < 1e-12);
        assert!((k.center() - expected).abs() < 1e-10);
        for n in 1..5 {
            assert!((k.at(n) - bessel_oracle(n as usize, 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn series_and_recurrence_agree() {
        for s in [2.0, 10.0, 25.0] {
            let a = bessel_weights_series(s);
            let b = bessel_weights_miller(s);
            for n in 0..a.len().min(b.len()) {
                assert!((a[n] - b[n]).abs() < 1e-13, "s={s} n={n}");
            }
        }
    }

    #[test]
    fn large_scale_kernel_has_variance_s() {
        // the discrete analogue has variance exactly s
        for s in [50.0, 1000.0, 20000.0] {
            let k = discrete_gaussian_kernel(s, 1e-12).unwrap();
            let var: f64 = (0..k.coeffs.len())
                .map(|i| {
                    let n = i as f64 - k.radius as f64;
                    n * n * k.coeffs[i]
                })
                .sum();
            assert!((var - s).abs() / s < 1e-8, "s={s} var={var}");
        }
    }

    #[test]
    fn mirror_index_reflects() {
        let idx: Vec<usize> = (-4..9).map(|i| mirror_index(i, 4)).collect();
        assert_eq!(idx, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(mirror_index(-7, 1), 0);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let c = Image::constant(17, 9, 0.3);
        for s in [0.5, 4.0, 200.0] {
            let out = smooth(&c, s, DEFAULT_EPS).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn impulse_response_is_outer_product() {
        let mut img = Image::constant(65, 65, 0.0).into_data();
        img[32 * 65 + 32] = 1.0;
        let img = Image::new(65, 65, 1, img).unwrap();
        let k = discrete_gaussian_kernel(2.0, DEFAULT_EPS).unwrap();
        let out = smooth_with(&img, &k);
        for y in 0..65isize {
            for x in 0..65isize {
                let expected = k.at(x - 32) * k.at(y - 32);
                assert!((out.at(x as usize, y as usize) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn semigroup_in_interior() {
        let img = noise(128, 128, 7);
        let eps = 1e-10;
        let two = smooth(&smooth(&img, 1.5, eps).unwrap(), 2.5, eps).unwrap();
        let one = smooth(&img, 4.0, eps).unwrap();
        let r = discrete_gaussian_kernel(4.0, eps).unwrap().radius;
        let mut max = 0.0f64;
        for y in r..128 - r {
            for x in r..128 - r {
                max = max.max((two.at(x, y) - one.at(x, y)).abs());
            }
        }
        assert!(max < 1e-6, "max {max}");
    }

    #[test]
    fn jet_on_ramp_and_quadratic() {
        let s = 2.0;
        for gamma in [0.0, 1.0] {
            let ramp = Image::from_fn(48, 48, |x, _| x as f64);
            let jet = jet2(&ramp, s, gamma, DEFAULT_EPS).unwrap();
            let quad = Image::from_fn(48, 48, |x, _| (x as f64).powi(2) / 2.0);
            let qj = jet2(&quad, s, gamma, DEFAULT_EPS).unwrap();
            for y in 14..34 {
                for x in 14..34 {
                    assert!((jet.lx.at(x, y) - s.powf(gamma / 2.0)).abs() < 1e-9);
                    assert!(jet.ly.at(x, y).abs() < 1e-9);
                    assert!(jet.lxx.at(x, y).abs() < 1e-9);
                    assert!((qj.lxx.at(x, y) - s.powf(gamma)).abs() < 1e-8);
                    assert!(qj.lxy.at(x, y).abs() < 1e-9);
                    // smoothing x²/2 adds s/2
                    let expected = (x as f64).powi(2) / 2.0 + s / 2.0;
                    assert!((qj.l.at(x, y) - expected).abs() < 1e-5);
                }
            }
        }
        assert!(jet2(&Image::constant(8, 8, 1.0), 0.0, 1.0, DEFAULT_EPS).is_err());
    }

    #[test]
    fn gamma_normalization_factors() {
        let img = noise(32, 32, 1);
        let s = 3.0;
        let j0 = jet2(&img, s, 0.0, DEFAULT_EPS).unwrap();
        let j1 = jet2(&img, s, 1.0, DEFAULT_EPS).unwrap();
        for i in 0..img.data().len() {
            assert!((j1.lx.data()[i] - s.sqrt() * j0.lx.data()[i]).abs() < 1e-14);
            assert!((j1.lxy.data()[i] - s * j0.lxy.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn directional_special_angles() {
        let img = noise(24, 24, 5);
        let jet = jet2(&img, 2.0, 1.0, DEFAULT_EPS).unwrap();
        let (p, pp) = directional_derivatives(&jet, 0.0);
        assert_eq!(p, jet.lx);
        assert_eq!(pp, jet.lxx);
        let (p, pp) = directional_derivatives(&jet, std::f64::consts::FRAC_PI_2);
        for i in 0..p.data().len() {
            assert!((p.data()[i] - jet.ly.data()[i]).abs() < 1e-15);
            assert!((pp.data()[i] - jet.lyy.data()[i]).abs() < 1e-15);
        }
        let ramp = Image::from_fn(40, 40, |x, _| x as f64);
        let rj = jet2(&ramp, 2.0, 0.0, DEFAULT_EPS).unwrap();
        let (p, _) = directional_derivatives(&rj, std::f64::consts::FRAC_PI_4);
        assert!((p.at(20, 20) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn opposite_direction_flips_first_order_only() {
        let img = noise(20, 20, 11);
        let jet = jet2(&img, 1.5, 1.0, DEFAULT_EPS).unwrap();
        let phi = 0.7;
        let (a, aa) = directional_derivatives(&jet, phi);
        let (b, bb) = directional_derivatives(&jet, phi + std::f64::consts::PI);
        for i in 0..a.data().len() {
            assert!((a.data()[i] + b.data()[i]).abs() < 1e-14);
            assert!((aa.data()[i] - bb.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_covariance_cases() {
        let m = affine_covariance_matrix(2.0, 2.0, 0.6).unwrap();
        assert!((m[0][0] - 1.0).abs() < 1e-15 && m[0][1].abs() < 1e-15 && (m[1][1] - 1.0).abs() < 1e-15);
        let m = affine_covariance_matrix(4.0, 1.0, 0.0).unwrap();
        assert_eq!(m, [[1.0, 0.0], [0.0, 0.25]]);
        let m = affine_covariance_matrix(1.0, 5.0, 1.1).unwrap();
        let tr = m[0][0] + m[1][1];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let disc = (tr * tr / 4.0 - det).sqrt();
        assert!((tr / 2.0 + disc - 1.0).abs() < 1e-12);
        assert!((tr / 2.0 - disc - 0.2).abs() < 1e-12);
        assert!(affine_covariance_matrix(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn affine_gaussian_moments() {
        let s = 4.0;
        let k = sample_affine_gaussian(s, &[[1.0, 0.0], [0.0, 1.0]], 10).unwrap();
        assert!((k.coeffs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let k = sample_affine_gaussian(s, &[[1.0, 0.0], [0.0, 0.25]], 12).unwrap();
        let m = k.second_moments();
        assert!((m[0][0] - s).abs() < 0.05 * s, "{m:?}");
        assert!((m[1][1] - s / 4.0).abs() < 0.1 * s / 4.0, "{m:?}");

        let alpha = 0.5f64;
        let sigma = affine_covariance_matrix(1.0, 0.25, alpha).unwrap();
        let k = sample_affine_gaussian(9.0, &sigma, 14).unwrap();
        let m = k.second_moments();
        let axis = 0.5 * (2.0 * m[0][1]).atan2(m[0][0] - m[1][1]);
        assert!((axis - alpha).abs() < 1f64.to_radians());

        assert!(sample_affine_gaussian(1.0, &[[1.0, 1.0], [1.0, 1.0]], 3).is_err());
    }

    fn count_extrema(v: &[f64]) -> usize {
        v.windows(3)
            .filter(|w| (w[1] > w[0] && w[1] > w[2]) || (w[1] < w[0] && w[1] < w[2]))
            .count()
    }

    proptest! {
        #[test]
        fn smoothing_does_not_create_extrema(
            row in proptest::collection::vec(0.0f64..1.0, 8..40),
            s in 0.1f64..6.0,
        ) {
            let w = row.len();
            let img = Image::new(w, 1, 1, row.clone()).unwrap();
            let k = discrete_gaussian_kernel(s, 1e-12).unwrap();
            let out = convolve_rows(img.data(), w, &k);
            // compare on the mirror-extended periodic signal so both see the same topology
            let ext = |v: &[f64]| -> Vec<f64> {
                (-(w as isize)..2 * w as isize).map(|i| v[mirror_index(i, w)]).collect()
            };
            prop_assert!(count_extrema(&ext(&out)) <= count_extrema(&ext(&row)));
        }
    }
}
