//! Planar float image container and the pixel primitives everything else is
//! built from: I/O, grayscale conversion, resampling, reflect-101 convolution,
//! disc kernels and block reshaping.

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major, channel-interleaved float image with nominal range `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageF {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::constant(height, width, channels, 0.0)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels > 0, "image needs at least one channel");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::arg("channel count must be at least 1"));
        }
        if data.len() != height * width * channels {
            return Err(Error::arg(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite pixel value {bad}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageF) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &ImageF, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageF {
        ImageF {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &ImageF, f: impl Fn(f64, f64) -> f64) -> Result<ImageF> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(ImageF {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageF {
        assert!(c < self.channels);
        ImageF {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamped(&self) -> ImageF {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Copies the sub-rectangle with origin `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<ImageF> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::arg(format!(
                "crop {height}x{width}+{y0}+{x0} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in y0..y0 + height {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(ImageF {
            height,
            width,
            channels: c,
            data,
        })
    }

    /// Mean absolute difference over all samples.
    pub fn mean_abs_diff(&self, other: &ImageF) -> Result<f64> {
        self.ensure_same_shape(other, "mean_abs_diff")?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }
}

/// Reads a PNG or JPEG file, scaling samples by the bit-depth maximum.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageF> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    from_dynamic(decoded).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn from_dynamic(img: DynamicImage) -> Result<ImageF> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        other => {
            let color = other.color();
            return Err(Error::Format(format!(
                "unsupported channel count {} (color type {color:?}); expected 1 or 3 channels of 8 or 16 bit",
                color.channel_count()
            )));
        }
    };
    ImageF::from_vec(h, w, channels, data)
}

/// Quantizes a `[0,1]` sample to 8 bits.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG. Values are clamped to `[0, 1]` and rounded.
pub fn save_image(img: &ImageF, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        n => {
            return Err(Error::Format(format!(
                "cannot save image with channel count {n}; expected 1 or 3"
            )))
        }
    };
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// BT.601 luma. Single-channel input is returned unchanged.
pub fn to_grayscale(img: &ImageF) -> ImageF {
    match img.channels {
        1 => img.clone(),
        3 => ImageF {
            height: img.height,
            width: img.width,
            channels: 1,
            data: img
                .data
                .chunks_exact(3)
                .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
                .collect(),
        },
        // Other channel counts only appear after space_to_depth; average them.
        c => ImageF {
            height: img.height,
            width: img.width,
            channels: 1,
            data: img
                .data
                .chunks_exact(c)
                .map(|p| p.iter().sum::<f64>() / c as f64)
                .collect(),
        },
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

/// Half-pixel-centered linear sampling positions along one axis.
fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                t: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize using the align-corners = false convention.
pub fn resize_bilinear(img: &ImageF, out_h: usize, out_w: usize) -> Result<ImageF> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!("resize target {out_h}x{out_w} has a zero dimension")));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::arg("cannot resize an empty image"));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let rows = bilinear_taps(img.height, out_h);
    let cols = bilinear_taps(img.width, out_w);
    let c = img.channels;
    let mut out = ImageF::zeros(out_h, out_w, c);
    out.data
        .par_chunks_mut(out_w * c)
        .zip(rows.par_iter())
        .for_each(|(row, ry)| {
            for (x, cx) in cols.iter().enumerate() {
                for ch in 0..c {
                    let p00 = img.get(ry.lo, cx.lo, ch);
                    let p01 = img.get(ry.lo, cx.hi, ch);
                    let p10 = img.get(ry.hi, cx.lo, ch);
                    let p11 = img.get(ry.hi, cx.hi, ch);
                    let top = p00 + (p01 - p00) * cx.t;
                    let bottom = p10 + (p11 - p10) * cx.t;
                    row[x * c + ch] = top + (bottom - top) * ry.t;
                }
            }
        });
    Ok(out)
}

/// Mean pooling over `factor`×`factor` blocks. Trailing rows/columns that do
/// not fill a block are dropped.
pub fn downsample_mean(img: &ImageF, factor: usize) -> Result<ImageF> {
    if factor == 0 {
        return Err(Error::arg("pooling factor must be positive"));
    }
    let (oh, ow) = (img.height / factor, img.width / factor);
    if oh == 0 || ow == 0 {
        return Err(Error::arg(format!(
            "{}x{} image is too small for pooling factor {factor}",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let norm = 1.0 / (factor * factor) as f64;
    Ok(ImageF::from_fn(oh, ow, c, |y, x, ch| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += img.get(y * factor + dy, x * factor + dx, ch);
            }
        }
        s * norm
    }))
}

/// Reflect-101 index mapping (`dcb|abcd|cba`) for any integer offset.
#[inline]
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Square, odd-sized correlation kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::arg(format!("kernel size {size} must be odd")));
        }
        if weights.len() != size * size {
            return Err(Error::arg(format!(
                "kernel of size {size} needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        Ok(Self { size, weights })
    }

    pub fn identity() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    /// Uniform `size`×`size` averaging kernel.
    pub fn box_filter(size: usize) -> Result<Self> {
        let n = (size * size) as f64;
        Self::new(size, vec![1.0 / n; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, ky: usize, kx: usize) -> f64 {
        self.weights[ky * self.size + kx]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Antialiased disc of the given radius, normalized to unit sum. Each tap's
/// weight is the fraction of a 3×3 subpixel grid lying within the radius.
pub fn disc_kernel(radius: f64) -> Result<Kernel2D> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::arg(format!("disc radius must be finite and >= 0, got {radius}")));
    }
    if radius == 0.0 {
        return Ok(Kernel2D::identity());
    }
    let r = radius.ceil() as isize;
    let size = (2 * r + 1) as usize;
    let r2 = radius * radius;
    const SUB: [f64; 3] = [-1.0 / 3.0, 0.0, 1.0 / 3.0];
    let mut weights = Vec::with_capacity(size * size);
    for dy in -r..=r {
        for dx in -r..=r {
            let mut hits = 0u32;
            for sy in SUB {
                for sx in SUB {
                    let (py, px) = (dy as f64 + sy, dx as f64 + sx);
                    if py * py + px * px <= r2 {
                        hits += 1;
                    }
                }
            }
            weights.push(f64::from(hits) / 9.0);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Kernel2D::new(size, weights)
}

/// Dense 2-D correlation with reflect-101 borders, applied to every channel.
pub fn convolve2d(img: &ImageF, kernel: &Kernel2D) -> Result<ImageF> {
    let (h, w, c) = img.shape();
    if kernel.size > 2 * h || kernel.size > 2 * w {
        return Err(Error::arg(format!(
            "kernel size {} exceeds twice the image extent {h}x{w}",
            kernel.size
        )));
    }
    if kernel.size == 1 {
        let k = kernel.weights[0];
        return Ok(img.map(|v| v * k));
    }
    let r = kernel.radius() as isize;
    let taps: Vec<(isize, usize, f64)> = (0..kernel.size)
        .flat_map(|ky| (0..kernel.size).map(move |kx| (ky, kx)))
        .filter_map(|(ky, kx)| {
            let wgt = kernel.get(ky, kx);
            (wgt != 0.0).then_some((ky as isize - r, kx, wgt))
        })
        .collect();
    // Column lookup for x + kx - r, shifted so index 0 corresponds to -r.
    let colmap: Vec<usize> = (-r..w as isize + r).map(|x| reflect101(x, w)).collect();
    let mut out = ImageF::zeros(h, w, c);
    out.data
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            for &(dy, kx, wgt) in &taps {
                let sy = reflect101(y as isize + dy, h);
                let src = &img.data[sy * w * c..(sy + 1) * w * c];
                let cols = &colmap[kx..kx + w];
                if c == 1 {
                    for (o, &sx) in row.iter_mut().zip(cols) {
                        *o += wgt * src[sx];
                    }
                } else {
                    for (x, &sx) in cols.iter().enumerate() {
                        let o = &mut row[x * c..(x + 1) * c];
                        let s = &src[sx * c..(sx + 1) * c];
                        for (ov, sv) in o.iter_mut().zip(s) {
                            *ov += wgt * sv;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Normalized 1-D Gaussian taps covering `[-radius, radius]`.
pub fn gaussian_1d(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable filtering with reflect-101 borders.
pub fn separable_filter(img: &ImageF, taps: &[f64]) -> ImageF {
    let (h, w, c) = img.shape();
    let r = (taps.len() / 2) as isize;
    let mut tmp = ImageF::zeros(h, w, c);
    tmp.data
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                for (i, &t) in taps.iter().enumerate() {
                    let sx = reflect101(x as isize + i as isize - r, w);
                    for ch in 0..c {
                        row[x * c + ch] += t * img.data[(y * w + sx) * c + ch];
                    }
                }
            }
        });
    let mut out = ImageF::zeros(h, w, c);
    out.data
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            for (i, &t) in taps.iter().enumerate() {
                let sy = reflect101(y as isize + i as isize - r, h);
                let src = &tmp.data[sy * w * c..(sy + 1) * w * c];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += t * s;
                }
            }
        });
    out
}

/// Gaussian blur with a kernel truncated at 4 sigma.
pub fn gaussian_blur(img: &ImageF, sigma: f64) -> ImageF {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = ((4.0 * sigma).ceil() as usize).max(1);
    separable_filter(img, &gaussian_1d(sigma, radius))
}

/// Moves each `block`×`block` spatial tile into the channel dimension:
/// `out[y, x, c*b*b + by*b + bx] = in[y*b + by, x*b + bx, c]`.
pub fn space_to_depth(img: &ImageF, block: usize) -> Result<ImageF> {
    if block == 0 {
        return Err(Error::arg("block size must be positive"));
    }
    if img.height % block != 0 {
        return Err(Error::arg(format!(
            "height {} is not divisible by block {block}",
            img.height
        )));
    }
    if img.width % block != 0 {
        return Err(Error::arg(format!(
            "width {} is not divisible by block {block}",
            img.width
        )));
    }
    let (oh, ow) = (img.height / block, img.width / block);
    let oc = img.channels * block * block;
    let mut out = ImageF::zeros(oh, ow, oc);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let (by, bx) = (y % block, x % block);
                out.set(y / block, x / block, c * block * block + by * block + bx, img.get(y, x, c));
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space(img: &ImageF, block: usize) -> Result<ImageF> {
    if block == 0 {
        return Err(Error::arg("block size must be positive"));
    }
    let bb = block * block;
    if img.channels % bb != 0 {
        return Err(Error::arg(format!(
            "channel count {} is not divisible by block^2 = {bb}",
            img.channels
        )));
    }
    let oc = img.channels / bb;
    let mut out = ImageF::zeros(img.height * block, img.width * block, oc);
    for y in 0..img.height {
        for x in 0..img.width {
            for k in 0..img.channels {
                let (c, rem) = (k / bb, k % bb);
                let (by, bx) = (rem / block, rem % block);
                out.set(y * block + by, x * block + bx, c, img.get(y, x, k));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> ImageF {
        ImageF::from_fn(h, w, c, |y, x, ch| ((y * 7 + x * 3 + ch * 11) % 17) as f64 / 16.0)
    }

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(ImageF::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageF::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn load_scales_by_bit_depth() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("g8.png");
        image::GrayImage::from_raw(3, 1, vec![255, 0, 128]).unwrap().save(&p8).unwrap();
        let img = load_image(&p8).unwrap();
        assert_eq!(img.shape(), (1, 3, 1));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 1, 0), 0.0);
        assert!((img.get(0, 2, 0) - 128.0 / 255.0).abs() < 1e-12);

        let p16 = dir.path().join("g16.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 1, vec![65535u16, 32768])
            .unwrap()
            .save(&p16)
            .unwrap();
        let img = load_image(&p16).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert!((img.get(0, 1, 0) - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn load_rejects_alpha_naming_channel_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        image::RgbaImage::from_raw(1, 1, vec![1, 2, 3, 4]).unwrap().save(&p).unwrap();
        match load_image(&p) {
            Err(Error::Format(msg)) => assert!(msg.contains("channel count 4"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(load_image(dir.path().join("missing.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn save_clamps_and_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.png");
        let img = ImageF::from_vec(1, 3, 1, vec![1.0, -0.2, 0.5]).unwrap();
        save_image(&img, &p).unwrap();
        let raw = image::open(&p).unwrap().into_luma8().into_raw();
        assert_eq!(raw, vec![255, 0, 128]);
        assert!(save_image(&img, dir.path().join("no/such/dir/o.png")).is_err());
    }

    #[test]
    fn grayscale_coefficients() {
        let img = ImageF::from_vec(1, 3, 3, vec![1., 1., 1., 0., 0., 0., 1., 0., 0.]).unwrap();
        let g = to_grayscale(&img);
        assert!((g.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(g.get(0, 1, 0), 0.0);
        assert!((g.get(0, 2, 0) - 0.299).abs() < 1e-12);
        let mono = ImageF::constant(2, 2, 1, 0.3);
        assert_eq!(to_grayscale(&mono), mono);
    }

    #[test]
    fn resize_matches_half_pixel_formula() {
        // 2x1 image [0, 1] upsampled to 4x1.
        let img = ImageF::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 4, 1).unwrap();
        let oracle = |o: usize| -> f64 {
            let s: f64 = ((o as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
            s // linear ramp from 0 at source row 0 to 1 at row 1
        };
        for y in 0..4 {
            assert!((out.get(y, 0, 0) - oracle(y)).abs() < 1e-12);
        }
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
        assert!(resize_bilinear(&img, 0, 3).is_err());
        let same = ramp(5, 4, 3);
        assert_eq!(resize_bilinear(&same, 5, 4).unwrap(), same);
        let k = ImageF::constant(7, 9, 3, 0.7);
        let r = resize_bilinear(&k, 13, 4).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn convolve_identity_box_and_errors() {
        let img = ramp(6, 5, 3);
        assert_eq!(convolve2d(&img, &Kernel2D::identity()).unwrap(), img);

        let mut delta = ImageF::zeros(7, 7, 1);
        delta.set(3, 3, 0, 1.0);
        let out = convolve2d(&delta, &Kernel2D::box_filter(3).unwrap()).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                // direct summation oracle
                let mut s = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (sy, sx) = (y as isize + dy, x as isize + dx);
                        if sy == 3 && sx == 3 {
                            s += 1.0 / 9.0;
                        }
                    }
                }
                assert!((out.get(y, x, 0) - s).abs() < 1e-12);
            }
        }
        let big = Kernel2D::box_filter(15).unwrap();
        assert!(convolve2d(&ImageF::zeros(7, 7, 1), &big).is_err());
        assert!(Kernel2D::new(2, vec![0.25; 4]).is_err());
    }

    #[test]
    fn reflect101_mapping() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect101(-4, 1), 0);
    }

    fn coverage_oracle(radius: f64, dy: i32, dx: i32) -> f64 {
        let mut hits = 0;
        for i in 0..3 {
            for j in 0..3 {
                let py = dy as f64 + (i as f64 - 1.0) / 3.0;
                let px = dx as f64 + (j as f64 - 1.0) / 3.0;
                if (py * py + px * px).sqrt() <= radius {
                    hits += 1;
                }
            }
        }
        hits as f64 / 9.0
    }

    #[test]
    fn disc_kernel_shapes() {
        assert_eq!(disc_kernel(0.0).unwrap(), Kernel2D::identity());
        assert!(disc_kernel(-1.0).is_err());

        let k = disc_kernel(1.0).unwrap();
        assert_eq!(k.size(), 3);
        let raw: Vec<f64> = (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| coverage_oracle(1.0, dy, dx)))
            .collect();
        let total: f64 = raw.iter().sum();
        for (w, r) in k.weights().iter().zip(&raw) {
            assert!((w - r / total).abs() < 1e-12);
        }
        // centre weighs most, then the cross, then the corners
        assert!(k.get(1, 1) > k.get(0, 1) && k.get(0, 1) > k.get(0, 0) && k.get(0, 0) > 0.0);
        assert_eq!(k.get(0, 1), k.get(1, 0));

        for r in [0.3, 1.7, 2.5, 6.0, 12.4] {
            let k = disc_kernel(r).unwrap();
            assert_eq!(k.size(), 2 * (r as f64).ceil() as usize + 1);
            assert!((k.sum() - 1.0).abs() < 1e-6);
            assert!(k.weights().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn space_to_depth_index_formula() {
        let img = ImageF::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64);
        let s = space_to_depth(&img, 2).unwrap();
        assert_eq!(s.shape(), (2, 2, 4));
        let b = 2;
        for y in 0..2 {
            for x in 0..2 {
                for by in 0..b {
                    for bx in 0..b {
                        assert_eq!(s.get(y, x, by * b + bx), img.get(y * b + by, x * b + bx, 0));
                    }
                }
            }
        }
        assert_eq!(s.pixel(0, 0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(depth_to_space(&s, 2).unwrap(), img);
        assert_eq!(space_to_depth(&img, 1).unwrap(), img);
        assert_eq!(depth_to_space(&img, 1).unwrap(), img);
        let err = space_to_depth(&ImageF::zeros(4, 6, 1), 4).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
        let err = space_to_depth(&ImageF::zeros(6, 4, 1), 4).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
        assert!(depth_to_space(&ImageF::zeros(2, 2, 3), 2).is_err());
    }

    #[test]
    fn downsample_mean_averages_blocks() {
        let img = ImageF::from_fn(4, 5, 1, |y, x, _| (y * 5 + x) as f64);
        let d = downsample_mean(&img, 2).unwrap();
        assert_eq!(d.shape(), (2, 2, 1));
        assert_eq!(d.get(0, 0, 0), (0.0 + 1.0 + 5.0 + 6.0) / 4.0);
    }

    fn arb_image() -> impl Strategy<Value = ImageF> {
        (1usize..12, 1usize..12, 1usize..4).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(0.0f64..1.0, h * w * c)
                .prop_map(move |d| ImageF::from_vec(h, w, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn space_depth_roundtrip(hb in 1usize..5, wb in 1usize..5, c in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
            let (h, w) = (hb * b, wb * b);
            let img = ImageF::from_fn(h, w, c, |y, x, ch| {
                let v = (seed ^ ((y * 131 + x * 17 + ch) as u64)).wrapping_mul(0x9E3779B97F4A7C15);
                (v >> 11) as f64 / (1u64 << 53) as f64
            });
            let s = space_to_depth(&img, b).unwrap();
            prop_assert_eq!(s.shape(), (hb, wb, c * b * b));
            prop_assert_eq!(depth_to_space(&s, b).unwrap(), img);
        }

        #[test]
        fn normalized_kernel_preserves_constant(v in 0.0f64..1.0, r in 0.0f64..4.0, h in 9usize..16, w in 9usize..16) {
            let img = ImageF::constant(h, w, 3, v);
            let out = convolve2d(&img, &disc_kernel(r).unwrap()).unwrap();
            prop_assert!(out.data().iter().all(|o| (o - v).abs() <= 1e-6));
        }

        #[test]
        fn resize_has_no_overshoot(img in arb_image(), oh in 1usize..20, ow in 1usize..20) {
            let (lo, hi) = img.min_max();
            let out = resize_bilinear(&img, oh, ow).unwrap();
            prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn grayscale_stays_in_unit_range(img in arb_image()) {
            let g = to_grayscale(&img);
            prop_assert!(g.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn save_load_roundtrip_error_bound() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.png");
        let img = ImageF::from_fn(9, 11, 3, |y, x, c| ((y * 37 + x * 13 + c * 5) % 101) as f64 / 80.0 - 0.1);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        let clamped = img.clamped();
        let max_err = back
            .data()
            .iter()
            .zip(clamped.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-9, "{max_err}");
    }
}
