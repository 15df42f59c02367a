//! Procedural test images: Gaussian derivative blobs and five stationary
//! texture families. Every generator is deterministic under its seed and
//! produces values in [0, 1] (blobs excepted, which are signed for n > 0).

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::image_io::Image;
use crate::scale_space;

/// Sampled `g_{x^n}(x, y; s0)` centred at pixel `(size/2, size/2)`, scaled
/// by `2π s0` so that the order-0 peak is 1.
pub fn make_blob(n: u32, s0: f64, size: usize) -> Result<Image> {
    if n > 2 {
        return Err(domain!("blob order must be 0, 1 or 2, got {n}"));
    }
    if !(s0 > 0.0) {
        return Err(domain!("blob scale must be positive"));
    }
    if (size as f64) < 8.0 * s0.sqrt() {
        return Err(domain!("grid of {size} px cannot hold a blob with s0={s0}"));
    }
    let c = (size / 2) as f64;
    Ok(Image::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        let g = (-(dx * dx + dy * dy) / (2.0 * s0)).exp();
        match n {
            0 => g,
            1 => -dx / s0 * g,
            _ => (dx * dx - s0) / (s0 * s0) * g,
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Grating,
    Checker,
    BlobNoise,
    StripesIrregular,
    Spots,
}

impl TextureKind {
    pub const ALL: [TextureKind; 5] = [
        TextureKind::Grating,
        TextureKind::Checker,
        TextureKind::BlobNoise,
        TextureKind::StripesIrregular,
        TextureKind::Spots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Grating => "grating",
            TextureKind::Checker => "checker",
            TextureKind::BlobNoise => "blob_noise",
            TextureKind::StripesIrregular => "stripes_irregular",
            TextureKind::Spots => "spots",
        }
    }
}

impl FromStr for TextureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TextureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| domain!("unknown texture kind {s:?}"))
    }
}

/// Shape parameters. `None` orientation or phase is drawn from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureParams {
    /// Characteristic period or feature size in pixels.
    pub wavelength: f64,
    pub orientation: Option<f64>,
    pub phase: Option<f64>,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            wavelength: 8.0,
            orientation: None,
            phase: None,
        }
    }
}

/// White noise smoothed at variance `s`, standardized to zero mean and unit
/// standard deviation.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, s: f64) -> Result<Vec<f64>> {
    let white = Image::from_fn(size, size, |_, _| rng.gen::<f64>() - 0.5);
    let smoothed = scale_space::smooth(&white, s, 1e-8)?.into_data();
    let n = smoothed.len() as f64;
    let mean = smoothed.iter().sum::<f64>() / n;
    let var = smoothed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-300);
    Ok(smoothed.into_iter().map(|v| (v - mean) / sd).collect())
}

pub fn make_texture(kind: TextureKind, params: &TextureParams, seed: u64, size: usize) -> Result<Image> {
    if size < 64 {
        return Err(domain!("textures need at least 64x64 pixels, got {size}"));
    }
    let lambda = params.wavelength;
    if !(lambda > 0.0) {
        return Err(domain!("wavelength must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = params.orientation.unwrap_or_else(|| rng.gen::<f64>() * PI);
    let phase = params.phase.unwrap_or_else(|| rng.gen::<f64>() * 2.0 * PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let k = 2.0 * PI / lambda;

    let img = match kind {
        TextureKind::Grating => Image::from_fn(size, size, |x, y| {
            let u = x as f64 * ct + y as f64 * st;
            0.5 + 0.5 * (k * u + phase).sin()
        }),
        TextureKind::Checker => {
            let phase2 = rng.gen::<f64>() * 2.0 * PI;
            Image::from_fn(size, size, |x, y| {
                let (xf, yf) = (x as f64, y as f64);
                let u = xf * ct + yf * st;
                let v = -xf * st + yf * ct;
                0.5 + 0.5 * (3.0 * (k * u + phase).sin() * (k * v + phase2).sin()).tanh()
            })
        }
        TextureKind::BlobNoise => {
            let field = smooth_noise(&mut rng, size, (lambda / 4.0).powi(2))?;
            Image::field(size, size, field.into_iter().map(|v| (0.5 + 0.15 * v).clamp(0.0, 1.0)).collect())
        }
        TextureKind::StripesIrregular => {
            let warp = smooth_noise(&mut rng, size, (lambda * 1.5).powi(2))?;
            Image::from_fn(size, size, |x, y| {
                let u = x as f64 * ct + y as f64 * st;
                0.5 + 0.5 * (k * u + phase + 1.5 * warp[y * size + x]).sin()
            })
        }
        TextureKind::Spots => {
            let radius = lambda / 4.0;
            let count = ((size * size) as f64 / (lambda * lambda) * 0.8).ceil() as usize;
            let margin = 3.0 * radius;
            let centres: Vec<(f64, f64)> = (0..count)
                .map(|_| {
                    let span = size as f64 + 2.0 * margin;
                    (rng.gen::<f64>() * span - margin, rng.gen::<f64>() * span - margin)
                })
                .collect();
            let mut acc = vec![0.0; size * size];
            let reach = (4.0 * radius).ceil() as isize;
            for &(cx, cy) in &centres {
                let (x0, y0) = (cx.round() as isize, cy.round() as isize);
                for y in (y0 - reach).max(0)..(y0 + reach + 1).min(size as isize) {
                    for x in (x0 - reach).max(0)..(x0 + reach + 1).min(size as isize) {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        acc[y as usize * size + x as usize] += (-d2 / (2.0 * radius * radius)).exp();
                    }
                }
            }
            Image::field(size, size, acc.into_iter().map(|v| 1.0 - (-1.5 * v).exp()).collect())
        }
    };
    Ok(img)
}
