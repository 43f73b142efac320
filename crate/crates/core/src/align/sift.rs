//! Difference-of-Gaussians keypoints with gradient-histogram descriptors.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, resize_bilinear, to_grayscale, ImageF};

const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
pub const DESCRIPTOR_LEN: usize = DESC_WIDTH * DESC_WIDTH * DESC_BINS;
const ORI_BINS: usize = 36;
const BORDER: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub contrast_threshold: f64,
    pub edge_ratio: f64,
    pub sigma: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            octaves: 3,
            scales_per_octave: 3,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
            sigma: 1.6,
        }
    }
}

/// A scale-space feature in input-image pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Blur scale in input pixels.
    pub scale: f64,
    /// Dominant gradient direction, radians.
    pub orientation: f64,
    /// Absolute interpolated DoG value.
    pub response: f64,
    /// Unit-norm descriptor of length [`DESCRIPTOR_LEN`].
    pub descriptor: Vec<f64>,
}

struct Octave {
    gauss: Vec<ImageF>,
    dog: Vec<ImageF>,
}

fn build_octaves(base: &ImageF, cfg: &DetectorConfig) -> Vec<Octave> {
    let s = cfg.scales_per_octave;
    let k = 2f64.powf(1.0 / s as f64);
    let mut octaves = Vec::with_capacity(cfg.octaves);
    let mut first = base.clone();
    for o in 0..cfg.octaves {
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(first.clone());
        for i in 1..s + 3 {
            let prev = cfg.sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            let inc = (total * total - prev * prev).sqrt();
            let next = gaussian_blur(&gauss[i - 1], inc);
            gauss.push(next);
        }
        let dog = gauss
            .windows(2)
            .map(|g| g[1].zip_map(&g[0], |a, b| a - b).expect("same shape"))
            .collect();
        if o + 1 < cfg.octaves {
            let src = &gauss[s];
            let (h, w) = (src.height() / 2, src.width() / 2);
            if h < 2 * BORDER + 3 || w < 2 * BORDER + 3 {
                octaves.push(Octave { gauss, dog });
                break;
            }
            first = ImageF::from_fn(h, w, 1, |y, x, _| src.get(2 * y, 2 * x, 0));
        }
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

#[inline]
fn at(img: &ImageF, y: usize, x: usize) -> f64 {
    img.get(y, x, 0)
}

fn is_extremum(dog: &[ImageF], layer: usize, y: usize, x: usize) -> bool {
    let v = at(&dog[layer], y, x);
    let mut is_max = true;
    let mut is_min = true;
    for img in &dog[layer - 1..=layer + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if std::ptr::eq(img, &dog[layer]) && yy == y && xx == x {
                    continue;
                }
                let n = at(img, yy, xx);
                if n >= v {
                    is_max = false;
                }
                if n <= v {
                    is_min = false;
                }
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    is_max || is_min
}

struct Refined {
    x: f64,
    y: f64,
    layer: usize,
    layer_offset: f64,
    response: f64,
}

/// Quadratic sub-pixel refinement with contrast and edge rejection.
fn refine(dog: &[ImageF], mut layer: usize, mut y: usize, mut x: usize, cfg: &DetectorConfig) -> Option<Refined> {
    let s = cfg.scales_per_octave;
    let (h, w) = (dog[0].height(), dog[0].width());
    for _ in 0..5 {
        let (c, p, n) = (&dog[layer], &dog[layer - 1], &dog[layer + 1]);
        let v = at(c, y, x);
        let dx = (at(c, y, x + 1) - at(c, y, x - 1)) * 0.5;
        let dy = (at(c, y + 1, x) - at(c, y - 1, x)) * 0.5;
        let ds = (at(n, y, x) - at(p, y, x)) * 0.5;
        let dxx = at(c, y, x + 1) + at(c, y, x - 1) - 2.0 * v;
        let dyy = at(c, y + 1, x) + at(c, y - 1, x) - 2.0 * v;
        let dss = at(n, y, x) + at(p, y, x) - 2.0 * v;
        let dxy = (at(c, y + 1, x + 1) - at(c, y + 1, x - 1) - at(c, y - 1, x + 1) + at(c, y - 1, x - 1)) * 0.25;
        let dxs = (at(n, y, x + 1) - at(n, y, x - 1) - at(p, y, x + 1) + at(p, y, x - 1)) * 0.25;
        let dys = (at(n, y + 1, x) - at(n, y - 1, x) - at(p, y + 1, x) + at(p, y - 1, x)) * 0.25;
        let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let grad = nalgebra::Vector3::new(dx, dy, ds);
        let off = -(hess.try_inverse()? * grad);
        if off.iter().any(|o| !o.is_finite()) {
            return None;
        }
        if off.iter().all(|o| o.abs() < 0.5) {
            let response = v + 0.5 * grad.dot(&off);
            if response.abs() < cfg.contrast_threshold {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let r = cfg.edge_ratio;
            if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
                return None;
            }
            return Some(Refined {
                x: x as f64 + off[0],
                y: y as f64 + off[1],
                layer,
                layer_offset: off[2],
                response: response.abs(),
            });
        }
        let nx = x as isize + off[0].round() as isize;
        let ny = y as isize + off[1].round() as isize;
        let nl = layer as isize + off[2].round() as isize;
        if nl < 1 || nl > s as isize || nx < BORDER as isize || ny < BORDER as isize
            || nx >= (w - BORDER) as isize || ny >= (h - BORDER) as isize
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    None
}

fn gradient(img: &ImageF, y: usize, x: usize) -> Option<(f64, f64)> {
    if y == 0 || x == 0 || y + 1 >= img.height() || x + 1 >= img.width() {
        return None;
    }
    let gx = at(img, y, x + 1) - at(img, y, x - 1);
    let gy = at(img, y + 1, x) - at(img, y - 1, x);
    Some(((gx * gx + gy * gy).sqrt(), gy.atan2(gx)))
}

fn orientations(img: &ImageF, x: f64, y: f64, sigma: f64) -> Vec<f64> {
    let weight_sigma = 1.5 * sigma;
    let radius = (3.0 * weight_sigma).round() as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = [0.0f64; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (py, px) = (cy + dy, cx + dx);
            if py < 0 || px < 0 {
                continue;
            }
            let Some((mag, ang)) = gradient(img, py as usize, px as usize) else { continue };
            let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * weight_sigma * weight_sigma)).exp();
            let bin = ((ang + PI) / (2.0 * PI) * ORI_BINS as f64).floor() as isize;
            hist[bin.rem_euclid(ORI_BINS as isize) as usize] += wgt * mag;
        }
    }
    // circular smoothing
    for _ in 0..2 {
        let prev = hist;
        for i in 0..ORI_BINS {
            let l = prev[(i + ORI_BINS - 1) % ORI_BINS];
            let r = prev[(i + 1) % ORI_BINS];
            hist[i] = 0.25 * l + 0.5 * prev[i] + 0.25 * r;
        }
    }
    let peak = hist.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..ORI_BINS {
        let l = hist[(i + ORI_BINS - 1) % ORI_BINS];
        let r = hist[(i + 1) % ORI_BINS];
        let c = hist[i];
        if c > l && c > r && c >= 0.8 * peak {
            let denom = l - 2.0 * c + r;
            let shift = if denom.abs() > 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
            let bin = i as f64 + 0.5 + shift;
            out.push(bin / ORI_BINS as f64 * 2.0 * PI - PI);
        }
    }
    out
}

fn descriptor(img: &ImageF, x: f64, y: f64, sigma: f64, orientation: f64) -> Option<Vec<f64>> {
    let d = DESC_WIDTH as f64;
    let hist_width = 3.0 * sigma;
    let radius = (hist_width * std::f64::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize;
    let (cos_t, sin_t) = (orientation.cos(), orientation.sin());
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = vec![0.0f64; DESCRIPTOR_LEN];
    let bins_per_rad = DESC_BINS as f64 / (2.0 * PI);
    let exp_scale = -1.0 / (0.5 * d * d);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            // rotate into the keypoint frame, in units of histogram cells
            let rx = (cos_t * dx as f64 + sin_t * dy as f64) / hist_width;
            let ry = (-sin_t * dx as f64 + cos_t * dy as f64) / hist_width;
            let bx = rx + d / 2.0 - 0.5;
            let by = ry + d / 2.0 - 0.5;
            if bx <= -1.0 || bx >= d || by <= -1.0 || by >= d {
                continue;
            }
            let (py, px) = (cy + dy, cx + dx);
            if py < 0 || px < 0 {
                continue;
            }
            let Some((mag, ang)) = gradient(img, py as usize, px as usize) else { continue };
            let wgt = ((rx * rx + ry * ry) * exp_scale).exp() * mag;
            let mut ob = (ang - orientation).rem_euclid(2.0 * PI) * bins_per_rad;
            if ob >= DESC_BINS as f64 {
                ob -= DESC_BINS as f64;
            }
            let (x0, y0, o0) = (bx.floor(), by.floor(), ob.floor());
            let (fx, fy, fo) = (bx - x0, by - y0, ob - o0);
            for (iy, wy) in [(y0 as isize, 1.0 - fy), (y0 as isize + 1, fy)] {
                if iy < 0 || iy >= DESC_WIDTH as isize {
                    continue;
                }
                for (ix, wx) in [(x0 as isize, 1.0 - fx), (x0 as isize + 1, fx)] {
                    if ix < 0 || ix >= DESC_WIDTH as isize {
                        continue;
                    }
                    for (io, wo) in [(o0 as usize % DESC_BINS, 1.0 - fo), ((o0 as usize + 1) % DESC_BINS, fo)] {
                        let idx = (iy as usize * DESC_WIDTH + ix as usize) * DESC_BINS + io;
                        hist[idx] += wgt * wy * wx * wo;
                    }
                }
            }
        }
    }
    normalize(&mut hist)?;
    hist.iter_mut().for_each(|v| *v = v.min(0.2));
    normalize(&mut hist)?;
    Some(hist)
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(())
}

/// Detects up to `max_count` keypoints, strongest response first.
pub fn detect_keypoints(img: &ImageF, max_count: usize) -> Result<Vec<Keypoint>> {
    detect_keypoints_with(img, max_count, &DetectorConfig::default())
}

pub fn detect_keypoints_with(img: &ImageF, max_count: usize, cfg: &DetectorConfig) -> Result<Vec<Keypoint>> {
    if img.height() < 32 || img.width() < 32 {
        return Err(Error::arg(format!(
            "keypoint detection needs at least 32x32 pixels, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    if cfg.octaves == 0 || cfg.scales_per_octave == 0 {
        return Err(Error::arg("detector needs at least one octave and one scale"));
    }
    let gray = to_grayscale(img);
    // first octave runs on a 2x upsampled copy
    let up = resize_bilinear(&gray, gray.height() * 2, gray.width() * 2)?;
    let assumed = 1.0;
    let base = gaussian_blur(&up, (cfg.sigma * cfg.sigma - assumed * assumed).max(0.01).sqrt());
    let octaves = build_octaves(&base, cfg);
    let s = cfg.scales_per_octave;
    let prefilter = 0.5 * cfg.contrast_threshold;

    let mut found = Vec::new();
    for (o, oct) in octaves.iter().enumerate() {
        let (h, w) = (oct.dog[0].height(), oct.dog[0].width());
        if h <= 2 * BORDER || w <= 2 * BORDER {
            continue;
        }
        let step = 2f64.powi(o as i32);
        for layer in 1..=s {
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    let v = at(&oct.dog[layer], y, x);
                    if v.abs() <= prefilter || !is_extremum(&oct.dog, layer, y, x) {
                        continue;
                    }
                    let Some(r) = refine(&oct.dog, layer, y, x, cfg) else { continue };
                    let oct_sigma = cfg.sigma * 2f64.powf((r.layer as f64 + r.layer_offset) / s as f64);
                    let g = &oct.gauss[r.layer];
                    for ori in orientations(g, r.x, r.y, oct_sigma) {
                        let Some(desc) = descriptor(g, r.x, r.y, oct_sigma, ori) else { continue };
                        // octave pixel -> upsampled base pixel -> input pixel
                        let bx = r.x * step;
                        let by = r.y * step;
                        let kx = ((bx + 0.5) / 2.0 - 0.5).clamp(0.0, (img.width() - 1) as f64);
                        let ky = ((by + 0.5) / 2.0 - 0.5).clamp(0.0, (img.height() - 1) as f64);
                        found.push(Keypoint {
                            x: kx,
                            y: ky,
                            scale: oct_sigma * step / 2.0,
                            orientation: ori,
                            response: r.response,
                            descriptor: desc,
                        });
                    }
                }
            }
        }
    }
    found.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.orientation.total_cmp(&b.orientation))
    });
    found.truncate(max_count);
    Ok(found)
}
