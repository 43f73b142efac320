//! Defocus-guided layered bokeh rendering.
//!
//! The pipeline turns a depth map into a per-pixel blur radius, splits the
//! image into soft depth layers, blurs each layer with a disc whose radius is
//! the layer's circle of confusion, and composites the layers back to front.
//! Rendering may run at reduced resolution; the result is upsampled and the
//! in-focus foreground is pasted back from the full-resolution original.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::image::{self, convolve2d, disc_kernel, resize_bilinear, to_grayscale, ImageF};

/// Floor added to luma before powering, so black pixels keep a tiny weight.
pub const WEIGHT_FLOOR: f64 = 1e-3;
/// Coverage below which a blurred layer is treated as absent at a pixel.
pub const DIV_EPS: f64 = 1e-8;

/// Relative depth in `(0, 1]`, larger is farther.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(ImageF);

impl DepthMap {
    pub fn new(img: ImageF) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::arg(format!(
                "depth map must have one channel, got {}",
                img.channels()
            )));
        }
        if let Some(v) = img.data().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::arg(format!("depth values must be positive and finite, found {v}")));
        }
        Ok(Self(img))
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(ImageF::constant(height, width, 1, depth))
    }

    /// Loads a single-channel depth PNG. Zero samples map to the smallest
    /// representable depth, `1 / bit-depth max`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = ::image::load_from_memory(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let max = match decoded {
            ::image::DynamicImage::ImageLuma8(_) => 255.0,
            ::image::DynamicImage::ImageLuma16(_) => 65535.0,
            other => {
                return Err(Error::Format(format!(
                    "{}: depth map must be single-channel 8 or 16 bit, got {:?} with channel count {}",
                    path.display(),
                    other.color(),
                    other.color().channel_count()
                )))
            }
        };
        let img = image::from_dynamic(decoded)?;
        let floor = 1.0 / max;
        Self::new(img.map(|v| if v <= 0.0 { floor } else { v }))
    }

    pub fn image(&self) -> &ImageF {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }
}

/// Per-pixel blur radius in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DefocusMap(ImageF);

impl DefocusMap {
    pub fn new(img: ImageF) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::arg("defocus map must have one channel"));
        }
        if let Some(v) = img.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::arg(format!("defocus values must be finite and >= 0, found {v}")));
        }
        Ok(Self(img))
    }

    pub fn constant(height: usize, width: usize, radius: f64) -> Result<Self> {
        Self::new(ImageF::constant(height, width, 1, radius))
    }

    pub fn image(&self) -> &ImageF {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn max(&self) -> f64 {
        self.values().iter().copied().fold(0.0, f64::max)
    }

    fn scaled(&self, f: f64) -> DefocusMap {
        DefocusMap(self.0.map(|v| v * f))
    }
}

/// Resolution the layered render runs at, relative to the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WorkScale {
    #[default]
    Full,
    Half,
    Quarter,
}

impl WorkScale {
    pub fn factor(self) -> f64 {
        1.0 / self.divisor() as f64
    }

    pub fn divisor(self) -> usize {
        match self {
            WorkScale::Full => 1,
            WorkScale::Half => 2,
            WorkScale::Quarter => 4,
        }
    }

    pub fn from_factor(f: f64) -> Result<Self> {
        match f {
            x if (x - 1.0).abs() < 1e-9 => Ok(WorkScale::Full),
            x if (x - 0.5).abs() < 1e-9 => Ok(WorkScale::Half),
            x if (x - 0.25).abs() < 1e-9 => Ok(WorkScale::Quarter),
            other => Err(Error::arg(format!("work scale must be 1, 0.5 or 0.25, got {other}"))),
        }
    }
}

impl Serialize for WorkScale {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.factor())
    }
}

impl<'de> Deserialize<'de> for WorkScale {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = f64::deserialize(d)?;
        WorkScale::from_factor(f).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub focus_depth: f64,
    pub max_radius: f64,
    pub num_layers: usize,
    pub radiance_gamma: f64,
    pub fg_threshold: f64,
    pub fg_softness: f64,
    pub work_scale: WorkScale,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            focus_depth: 0.5,
            max_radius: 12.0,
            num_layers: 8,
            radiance_gamma: 4.0,
            fg_threshold: 1.0,
            fg_softness: 1.0,
            work_scale: WorkScale::Full,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focus_depth > 0.0 && self.focus_depth <= 1.0) {
            return Err(Error::arg(format!("focus_depth must be in (0, 1], got {}", self.focus_depth)));
        }
        if !(self.max_radius >= 0.0) || !self.max_radius.is_finite() {
            return Err(Error::arg(format!("max_radius must be >= 0, got {}", self.max_radius)));
        }
        if self.num_layers == 0 {
            return Err(Error::arg("num_layers must be at least 1"));
        }
        if !(self.radiance_gamma >= 1.0) {
            return Err(Error::arg(format!("radiance_gamma must be >= 1, got {}", self.radiance_gamma)));
        }
        if !(self.fg_softness > 0.0) {
            return Err(Error::arg(format!("fg_softness must be > 0, got {}", self.fg_softness)));
        }
        Ok(())
    }
}

/// `d = max_radius * |1/depth - 1/focus| / max |1/depth - 1/focus|`.
pub fn defocus_from_depth(depth: &DepthMap, focus_depth: f64, max_radius: f64) -> Result<DefocusMap> {
    if !(focus_depth > 0.0 && focus_depth <= 1.0) {
        return Err(Error::arg(format!("focus depth must be in (0, 1], got {focus_depth}")));
    }
    if !(max_radius >= 0.0) {
        return Err(Error::arg(format!("max radius must be >= 0, got {max_radius}")));
    }
    let inv_focus = 1.0 / focus_depth;
    let dist = depth.image().map(|z| (1.0 / z - inv_focus).abs());
    let peak = dist.data().iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return DefocusMap::new(dist.map(|_| 0.0));
    }
    DefocusMap::new(dist.map(|v| (max_radius * v / peak).min(max_radius)))
}

/// Luminance-power weight map, `(luma + 1e-3)^gamma`.
pub fn radiance_weight(img: &ImageF, gamma: f64) -> Result<ImageF> {
    if !(gamma >= 1.0) {
        return Err(Error::arg(format!("radiance gamma must be >= 1, got {gamma}")));
    }
    Ok(to_grayscale(img).map(|l| (l + WEIGHT_FLOOR).powf(gamma)))
}

/// Blur radius of each layer, front (0) to back (maximum defocus).
pub fn layer_radii(max_defocus: f64, num_layers: usize) -> Vec<f64> {
    match num_layers {
        0 => Vec::new(),
        1 => vec![max_defocus],
        n => (0..n).map(|l| max_defocus * l as f64 / (n - 1) as f64).collect(),
    }
}

/// Soft layer memberships: linear hats centred on [`layer_radii`]. The
/// memberships of every pixel sum to one.
pub fn layer_masks(defocus: &DefocusMap, num_layers: usize) -> Result<(Vec<f64>, Vec<ImageF>)> {
    if num_layers == 0 {
        return Err(Error::arg("num_layers must be at least 1"));
    }
    let max = defocus.max();
    let radii = layer_radii(max, num_layers);
    let (h, w) = (defocus.image().height(), defocus.image().width());
    let mut masks = vec![ImageF::zeros(h, w, 1); num_layers];
    if num_layers == 1 || max <= 0.0 {
        masks[0] = ImageF::constant(h, w, 1, 1.0);
        if num_layers == 1 {
            return Ok((radii, masks));
        }
        // everything sits on the radius-0 layer
        return Ok((radii, masks));
    }
    let step = max / (num_layers - 1) as f64;
    for (i, &d) in defocus.values().iter().enumerate() {
        let pos = (d / step).clamp(0.0, (num_layers - 1) as f64);
        let lo = pos.floor() as usize;
        let t = pos - lo as f64;
        if lo + 1 < num_layers {
            masks[lo].data_mut()[i] = 1.0 - t;
            masks[lo + 1].data_mut()[i] = t;
        } else {
            masks[lo].data_mut()[i] = 1.0;
        }
    }
    Ok((radii, masks))
}

struct BlurredLayer {
    /// Blurred `w * rgb * m` (premultiplied colour channels).
    color: ImageF,
    /// Blurred `w * m`.
    weight: ImageF,
    /// Blurred `m`, the layer coverage.
    coverage: ImageF,
    /// Blurred membership of this layer and every layer behind it.
    behind: ImageF,
}

/// Layered disc-blur render.
///
/// Layers are processed from the largest blur radius to the smallest. Each
/// layer's colour is normalized by its blurred weight and laid "over" the
/// accumulator with an opacity equal to its coverage relative to the blurred
/// coverage of everything composited so far.
pub fn render_layered(
    img: &ImageF,
    defocus: &DefocusMap,
    weights: &ImageF,
    num_layers: usize,
) -> Result<ImageF> {
    let (h, w, c) = img.shape();
    let dimg = defocus.image();
    if (dimg.height(), dimg.width()) != (h, w) {
        return Err(Error::arg(format!(
            "defocus map {}x{} does not match image {h}x{w}",
            dimg.height(),
            dimg.width()
        )));
    }
    if weights.shape() != (h, w, 1) {
        return Err(Error::arg(format!(
            "weight map {:?} does not match image {h}x{w}x1",
            weights.shape()
        )));
    }
    if num_layers == 0 {
        return Err(Error::arg("num_layers must be at least 1"));
    }
    let (radii, masks) = layer_masks(defocus, num_layers)?;

    // cumulative membership of layers at or behind each index
    let mut behind_masks = masks.clone();
    for l in (0..num_layers.saturating_sub(1)).rev() {
        let next = behind_masks[l + 1].clone();
        behind_masks[l] = behind_masks[l].zip_map(&next, |a, b| a + b)?;
    }

    let active: Vec<usize> = (0..num_layers)
        .filter(|&l| masks[l].data().iter().any(|&m| m > 0.0))
        .collect();

    let blurred: Vec<(usize, BlurredLayer)> = active
        .par_iter()
        .map(|&l| -> Result<(usize, BlurredLayer)> {
            let k = disc_kernel(radii[l])?;
            let m = &masks[l];
            // channels: w*m*rgb..., w*m, m, behind
            let stack = ImageF::from_fn(h, w, c + 3, |y, x, ch| {
                let mv = m.get(y, x, 0);
                let wv = weights.get(y, x, 0);
                match ch {
                    ch if ch < c => wv * mv * img.get(y, x, ch),
                    ch if ch == c => wv * mv,
                    ch if ch == c + 1 => mv,
                    _ => behind_masks[l].get(y, x, 0),
                }
            });
            let b = convolve2d(&stack, &k)?;
            Ok((
                l,
                BlurredLayer {
                    color: ImageF::from_fn(h, w, c, |y, x, ch| b.get(y, x, ch)),
                    weight: b.channel(c),
                    coverage: b.channel(c + 1),
                    behind: b.channel(c + 2),
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut acc = ImageF::zeros(h, w, c);
    let mut acc_alpha = ImageF::zeros(h, w, 1);
    // back to front: largest radius first
    for (_, layer) in blurred.iter().rev() {
        for y in 0..h {
            for x in 0..w {
                let cov = layer.coverage.get(y, x, 0);
                let denom = layer.behind.get(y, x, 0);
                let wsum = layer.weight.get(y, x, 0);
                if cov <= DIV_EPS || denom <= DIV_EPS || wsum <= 0.0 {
                    continue;
                }
                let alpha = (cov / denom).clamp(0.0, 1.0);
                for ch in 0..c {
                    let col = layer.color.get(y, x, ch) / wsum;
                    let prev = acc.get(y, x, ch);
                    acc.set(y, x, ch, prev * (1.0 - alpha) + col * alpha);
                }
                let pa = acc_alpha.get(y, x, 0);
                acc_alpha.set(y, x, 0, pa * (1.0 - alpha) + alpha);
            }
        }
    }
    Ok(ImageF::from_fn(h, w, c, |y, x, ch| {
        let a = acc_alpha.get(y, x, 0);
        if a > DIV_EPS {
            acc.get(y, x, ch) / a
        } else {
            img.get(y, x, ch)
        }
    }))
}

/// Soft foreground paste: `alpha = clamp((threshold - d) / softness + 0.5, 0, 1)`.
pub fn composite_foreground(
    original: &ImageF,
    rendered: &ImageF,
    defocus: &DefocusMap,
    threshold: f64,
    softness: f64,
) -> Result<ImageF> {
    if !(softness > 0.0) {
        return Err(Error::arg(format!("softness must be > 0, got {softness}")));
    }
    original.ensure_same_shape(rendered, "composite_foreground")?;
    let d = defocus.image();
    if (d.height(), d.width()) != (original.height(), original.width()) {
        return Err(Error::arg("composite_foreground: defocus map shape mismatch"));
    }
    Ok(ImageF::from_fn(original.height(), original.width(), original.channels(), |y, x, c| {
        let alpha = ((threshold - d.get(y, x, 0)) / softness + 0.5).clamp(0.0, 1.0);
        alpha * original.get(y, x, c) + (1.0 - alpha) * rendered.get(y, x, c)
    }))
}

fn downscale(img: &ImageF, divisor: usize, oh: usize, ow: usize) -> Result<ImageF> {
    if img.height() % divisor == 0 && img.width() % divisor == 0 {
        image::downsample_mean(img, divisor)
    } else {
        resize_bilinear(img, oh, ow)
    }
}

/// Full pipeline: defocus estimation, radiance weights, layered render at the
/// configured working resolution, bilinear upsampling and foreground paste.
pub fn render_bokeh(img: &ImageF, depth: &DepthMap, cfg: &RenderConfig) -> Result<ImageF> {
    cfg.validate().stage("config")?;
    if (depth.height(), depth.width()) != (img.height(), img.width()) {
        return Err(Error::arg(format!(
            "depth map {}x{} does not match image {}x{}",
            depth.height(),
            depth.width(),
            img.height(),
            img.width()
        )))
        .stage("input");
    }
    let defocus = defocus_from_depth(depth, cfg.focus_depth, cfg.max_radius).stage("defocus estimation")?;
    let weights = radiance_weight(img, cfg.radiance_gamma).stage("radiance")?;

    let rendered = if cfg.work_scale == WorkScale::Full {
        render_layered(img, &defocus, &weights, cfg.num_layers).stage("rendering")?
    } else {
        let div = cfg.work_scale.divisor();
        let oh = (img.height() / div).max(1);
        let ow = (img.width() / div).max(1);
        let small = (|| -> Result<_> {
            let small_img = downscale(img, div, oh, ow)?;
            let small_w = downscale(&weights, div, oh, ow)?;
            let small_d = DefocusMap::new(downscale(defocus.image(), div, oh, ow)?)?.scaled(cfg.work_scale.factor());
            Ok((small_img, small_d, small_w))
        })()
        .stage("downsampling")?;
        let low = render_layered(&small.0, &small.1, &small.2, cfg.num_layers).stage("rendering")?;
        resize_bilinear(&low, img.height(), img.width()).stage("upsampling")?
    };
    composite_foreground(img, &rendered, &defocus, cfg.fg_threshold, cfg.fg_softness).stage("compositing")
}
