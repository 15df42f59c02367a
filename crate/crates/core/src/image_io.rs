//! Raster type, file I/O, colour conversion and the geometric transforms
//! used to generate covariance experiment inputs.

use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{domain, Error, Result};
use crate::scale_space;

/// Row-major raster of `f64` samples, channel-interleaved.
///
/// Single-channel images double as scalar fields for every feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(domain!("image dimensions must be positive, got {width}x{height}"));
        }
        if channels != 1 && channels != 3 {
            return Err(domain!("unsupported channel count {channels}"));
        }
        if data.len() != width * height * channels {
            return Err(domain!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(domain!("image contains non-finite samples"));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single-channel field; callers guarantee the length and finiteness.
    pub(crate) fn field(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Image::field(width, height, vec![value; width * height])
    }

    /// Single-channel image from a function of pixel coordinates.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image::field(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Sample of a single-channel image.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn channel(&self, c: usize) -> Image {
        assert!(c < self.channels, "channel {c} out of range");
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        Image::field(self.width, self.height, data)
    }

    pub fn from_channels(channels: &[Image]) -> Result<Image> {
        let first = channels
            .first()
            .ok_or_else(|| domain!("no channels to merge"))?;
        if channels.iter().any(|c| !c.same_geometry(first) || c.channels != 1) {
            return Err(domain!("channels must be single-channel with equal geometry"));
        }
        let n = first.width * first.height;
        let mut data = Vec::with_capacity(n * channels.len());
        for i in 0..n {
            data.extend(channels.iter().map(|c| c.data[i]));
        }
        Image::new(first.width, first.height, channels.len(), data)
    }

    /// Pointwise map of every sample.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear lookup at a fractional position of a single-channel image.
    /// Coordinates outside the raster are clamped.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Loads an 8- or 16-bit greyscale or RGB PNG/PGM/PPM, scaling samples to [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(Error::Io)?;
    let decoded = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match decoded {
        DynamicImage::ImageLuma8(buf) => (1, scale_samples(buf.as_raw(), 255.0)),
        DynamicImage::ImageRgb8(buf) => (3, scale_samples(buf.as_raw(), 255.0)),
        DynamicImage::ImageLuma16(buf) => (1, scale_samples(buf.as_raw(), 65535.0)),
        DynamicImage::ImageRgb16(buf) => (3, scale_samples(buf.as_raw(), 65535.0)),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported pixel layout {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::new(w, h, channels, data)
}

fn scale_samples<T: Copy + Into<f64>>(raw: &[T], max: f64) -> Vec<f64> {
    raw.iter().map(|&v| v.into() / max).collect()
}

/// Writes an 8-bit PNG, min-max normalized over all samples of the image.
pub fn save_png_normalized(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("buffer size"))
    };
    dynamic
        .save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format(other.to_string()),
        })
}

/// Writes an 8-bit PNG without normalization; samples are clamped to [0, 1].
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let clamped = img.map(|v| v.clamp(0.0, 1.0));
    let (w, h) = (img.width as u32, img.height as u32);
    let bytes: Vec<u8> = clamped.data.iter().map(|v| (v * 255.0).round() as u8).collect();
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("buffer size"))
    };
    dynamic
        .save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))
}

/// Rec. 601 luma. Single-channel input is returned unchanged.
pub fn to_grey(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
        .collect();
    Image::field(img.width, img.height, data)
}

// sRGB (linear) to XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn chromaticity(x: f64, y: f64, z: f64) -> Option<(f64, f64)> {
    let denom = x + 15.0 * y + 3.0 * z;
    (denom > 0.0).then(|| (4.0 * x / denom, 9.0 * y / denom))
}

/// CIE 1976 L*u*v* under D65, every channel divided by 100.
///
/// The white point is taken as the XYZ image of linear (1, 1, 1) so that
/// achromatic inputs land exactly on the u = v = 0 axis.
pub fn to_luv(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(domain!("LUV conversion needs 3 channels, got {}", img.channels));
    }
    let white: [f64; 3] = [0, 1, 2].map(|r| RGB_TO_XYZ[r].iter().sum());
    let (un, vn) = chromaticity(white[0], white[1], white[2]).expect("white point");
    let eps = (6.0f64 / 29.0).powi(3);
    let kappa = (29.0f64 / 3.0).powi(3);

    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let lin = [srgb_to_linear(px[0]), srgb_to_linear(px[1]), srgb_to_linear(px[2])];
        let [x, y, z] = [0, 1, 2].map(|r| {
            RGB_TO_XYZ[r][0] * lin[0] + RGB_TO_XYZ[r][1] * lin[1] + RGB_TO_XYZ[r][2] * lin[2]
        });
        let yr = y / white[1];
        let l = if yr > eps {
            116.0 * yr.cbrt() - 16.0
        } else {
            kappa * yr
        };
        let (u, v) = match chromaticity(x, y, z) {
            Some((up, vp)) => (13.0 * l * (up - un), 13.0 * l * (vp - vn)),
            None => (0.0, 0.0),
        };
        data.extend([l / 100.0, u / 100.0, v / 100.0]);
    }
    Image::new(img.width, img.height, 3, data)
}

/// Keys cubic convolution weight, a = -1/2.
fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

fn bicubic_channel(src: &Image, out_w: usize, out_h: usize, factor: f64) -> Image {
    let (w, h) = (src.width as isize, src.height as isize);
    // taps per output column/row: (first index, 4 weights)
    let taps = |n_out: usize| -> Vec<(isize, [f64; 4])> {
        (0..n_out)
            .map(|o| {
                let pos = o as f64 / factor;
                let base = pos.floor();
                let frac = pos - base;
                let weights = [
                    cubic_weight(frac + 1.0),
                    cubic_weight(frac),
                    cubic_weight(1.0 - frac),
                    cubic_weight(2.0 - frac),
                ];
                (base as isize - 1, weights)
            })
            .collect()
    };
    let xt = taps(out_w);
    let yt = taps(out_h);

    // horizontal pass into (out_w x h), then vertical
    let mut tmp = vec![0.0; out_w * h as usize];
    for y in 0..h as usize {
        let row = &src.data[y * w as usize..(y + 1) * w as usize];
        for (ox, (start, wts)) in xt.iter().enumerate() {
            let mut acc = 0.0;
            for (k, wt) in wts.iter().enumerate() {
                acc += wt * row[scale_space::mirror_index(start + k as isize, w as usize)];
            }
            tmp[y * out_w + ox] = acc;
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (oy, (start, wts)) in yt.iter().enumerate() {
        for ox in 0..out_w {
            let mut acc = 0.0;
            for (k, wt) in wts.iter().enumerate() {
                let yy = scale_space::mirror_index(start + k as isize, h as usize);
                acc += wt * tmp[yy * out_w + ox];
            }
            out[oy * out_w + ox] = acc;
        }
    }
    Image::field(out_w, out_h, out)
}

/// Rescales an image so that input position `x` maps to output position
/// `factor * x` (pixel origins coincide).
///
/// Downscaling first applies discrete Gaussian smoothing at variance
/// `(1/factor^2 - 1) / 4` input pixels², then samples bicubically.
pub fn resample(img: &Image, factor: f64) -> Result<Image> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(domain!("resampling factor must be positive, got {factor}"));
    }
    let out_w = (img.width as f64 * factor).round() as usize;
    let out_h = (img.height as f64 * factor).round() as usize;
    if out_w < 8 || out_h < 8 {
        return Err(domain!("resampled image {out_w}x{out_h} is smaller than 8x8"));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let channels: Vec<Image> = (0..img.channels)
        .map(|c| {
            let mut ch = img.channel(c);
            if factor < 1.0 {
                let s_pre = (1.0 / (factor * factor) - 1.0) / 4.0;
                ch = scale_space::smooth(&ch, s_pre, scale_space::DEFAULT_EPS)?;
            }
            Ok(bicubic_channel(&ch, out_w, out_h, factor))
        })
        .collect::<Result<_>>()?;
    Image::from_channels(&channels)
}

/// Lossless rotation by `quarter_turns` × 90°.
///
/// One turn maps input pixel `(x, y)` to output `(h - 1 - y, x)`: the x axis
/// is carried onto the y axis, i.e. a rotation by +π/2 in the (x, y) frame
/// with y pointing down.
pub fn rotate90(img: &Image, quarter_turns: u32) -> Image {
    let mut current = img.clone();
    for _ in 0..quarter_turns % 4 {
        let (w, h, c) = (current.width, current.height, current.channels);
        let mut data = vec![0.0; current.data.len()];
        // output geometry: width h, height w
        for yo in 0..w {
            for xo in 0..h {
                let (xi, yi) = (yo, h - 1 - xo);
                let src = (yi * w + xi) * c;
                let dst = (yo * h + xo) * c;
                data[dst..dst + c].copy_from_slice(&current.data[src..src + c]);
            }
        }
        current = Image {
            width: h,
            height: w,
            channels: c,
            data,
        };
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn rejects_bad_geometry_and_nan() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn grey_conversion() {
        let rgb = Image::new(2, 1, 3, vec![0.3, 0.3, 0.3, 1.0, 0.0, 0.0]).unwrap();
        let g = to_grey(&rgb);
        assert!((g.data()[0] - 0.3).abs() < 1e-15);
        assert!((g.data()[1] - 0.299).abs() < 1e-15);
        let single = Image::constant(3, 3, 0.25);
        assert_eq!(to_grey(&single), single);
    }

    #[test]
    fn luv_reference_points() {
        let img = Image::new(3, 1, 3, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5]).unwrap();
        let luv = to_luv(&img).unwrap();
        let d = luv.data();
        assert_eq!(&d[0..3], &[0.0, 0.0, 0.0]);
        assert!((d[3] - 1.0).abs() < 1e-9);
        assert!(d[4].abs() < 1e-10 && d[5].abs() < 1e-10);
        assert!(d[7].abs() < 1e-10 && d[8].abs() < 1e-10);
        assert!(to_luv(&Image::constant(2, 2, 0.5)).is_err());
    }

    #[test]
    fn luv_is_chromatic_for_colours() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let luv = to_luv(&img).unwrap();
        // red: L* ~ 53.2, u* ~ 175
        assert!((luv.data()[0] - 0.5324).abs() < 1e-3);
        assert!((luv.data()[1] - 1.7501).abs() < 2e-3);
    }

    #[test]
    fn resample_identity_and_constants() {
        let img = noise(20, 16, 3);
        assert_eq!(resample(&img, 1.0).unwrap(), img);
        let c = Image::constant(32, 32, 0.625);
        for f in [0.5, 0.75, 1.5, 2.0, 3.0] {
            let r = resample(&c, f).unwrap();
            assert!(r.data().iter().all(|v| (v - 0.625).abs() < 1e-12), "factor {f}");
        }
        assert!(resample(&img, 0.3).is_err());
        assert!(resample(&img, 0.0).is_err());
    }

    #[test]
    fn upsampling_by_two_keeps_grid_samples() {
        let img = noise(16, 16, 9);
        let up = resample(&img, 2.0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert!((up.at(2 * x, 2 * y) - img.at(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn down_then_up_tracks_smoothed_original() {
        let img = noise(256, 256, 17);
        let down = resample(&img, 0.5).unwrap();
        let up = resample(&down, 2.0).unwrap();
        // pre-filter (4-1)/4 plus the same allowance for reconstruction from the coarse grid
        let composed = 0.75 + 0.75;
        let reference = scale_space::smooth(&img, composed, scale_space::DEFAULT_EPS).unwrap();
        let mut se = 0.0;
        let mut n = 0.0;
        for y in 4..252 {
            for x in 4..252 {
                se += (up.at(x, y) - reference.at(x, y)).powi(2);
                n += 1.0;
            }
        }
        let rms = (se / n).sqrt();
        assert!(rms < 0.05, "rms {rms}");
    }

    #[test]
    fn resample_composition_on_smooth_image() {
        let img = Image::from_fn(40, 40, |x, y| {
            0.5 + 0.3 * (x as f64 * 0.15).sin() * (y as f64 * 0.11).cos()
        });
        let two_step = resample(&resample(&img, 1.5).unwrap(), 2.0).unwrap();
        let direct = resample(&img, 3.0).unwrap();
        assert!(two_step.same_geometry(&direct));
        let (w, h) = (direct.width(), direct.height());
        let mut se = 0.0;
        let mut n = 0.0;
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                se += (two_step.at(x, y) - direct.at(x, y)).powi(2);
                n += 1.0;
            }
        }
        assert!((se / n).sqrt() < 1e-2);
    }

    #[test]
    fn rotate90_small_case_and_group() {
        let img = Image::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let r = rotate90(&img, 1);
        assert_eq!((r.width(), r.height()), (1, 2));
        assert_eq!(r.data(), &[1.0, 2.0]);

        let sq = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rotate90(&sq, 1).data(), &[3.0, 1.0, 4.0, 2.0]);
        assert_eq!(rotate90(&sq, 0), sq);

        let rgb = Image::new(3, 2, 3, (0..18).map(|v| v as f64).collect()).unwrap();
        let mut r = rgb.clone();
        for _ in 0..4 {
            r = rotate90(&r, 1);
        }
        assert_eq!(r, rgb);
        assert_eq!(rotate90(&rotate90(&rgb, 1), 1), rotate90(&rgb, 2));
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        std::fs::write(&p, &bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 1));
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);

        let ascii = dir.path().join("a.pgm");
        std::fs::write(&ascii, "P2\n2 1\n255\n0 255\n").unwrap();
        assert_eq!(load_image(&ascii).unwrap().data(), &[0.0, 1.0]);

        let truncated = dir.path().join("bad.pgm");
        std::fs::write(&truncated, b"P5\n4 4\n255\n\x01\x02").unwrap();
        assert!(matches!(load_image(&truncated), Err(Error::Format(_))));

        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn png_black_and_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        image::GrayImage::new(4, 3).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));

        let p16 = dir.path().join("w16.png");
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(1, 1, vec![65535u16]).unwrap();
        buf.save(&p16).unwrap();
        assert_eq!(load_image(&p16).unwrap().data(), &[1.0]);

        let rgb = dir.path().join("rgb.png");
        image::RgbImage::from_raw(1, 1, vec![255, 0, 51]).unwrap().save(&rgb).unwrap();
        assert_eq!(load_image(&rgb).unwrap().data(), &[1.0, 0.0, 0.2]);
    }
}
