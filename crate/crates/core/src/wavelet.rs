//! Orthonormal 2-D Haar transform.

use crate::error::{Error, Result};
use crate::image::ImageF;

/// One level of Haar subbands, each half the input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Subbands {
    pub ll: ImageF,
    pub lh: ImageF,
    pub hl: ImageF,
    pub hh: ImageF,
}

impl Subbands {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.ll.shape()
    }

    /// Sum of squares over all four bands.
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .flat_map(|b| b.data().iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Forward transform. For every 2×2 block `[a b; c d]`:
/// `ll = (a+b+c+d)/2`, `lh = (a+b-c-d)/2`, `hl = (a-b+c-d)/2`, `hh = (a-b-c+d)/2`.
pub fn dwt2_haar(img: &ImageF) -> Result<Subbands> {
    let (h, w, ch) = img.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::arg(format!(
            "haar transform needs even dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut bands = [
        ImageF::zeros(oh, ow, ch),
        ImageF::zeros(oh, ow, ch),
        ImageF::zeros(oh, ow, ch),
        ImageF::zeros(oh, ow, ch),
    ];
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..ch {
                let a = img.get(2 * y, 2 * x, c);
                let b = img.get(2 * y, 2 * x + 1, c);
                let cc = img.get(2 * y + 1, 2 * x, c);
                let d = img.get(2 * y + 1, 2 * x + 1, c);
                bands[0].set(y, x, c, (a + b + cc + d) * 0.5);
                bands[1].set(y, x, c, (a + b - cc - d) * 0.5);
                bands[2].set(y, x, c, (a - b + cc - d) * 0.5);
                bands[3].set(y, x, c, (a - b - cc + d) * 0.5);
            }
        }
    }
    let [ll, lh, hl, hh] = bands;
    Ok(Subbands { ll, lh, hl, hh })
}

/// Inverse of [`dwt2_haar`].
pub fn idwt2_haar(s: &Subbands) -> Result<ImageF> {
    let shape = s.ll.shape();
    for (name, band) in [("lh", &s.lh), ("hl", &s.hl), ("hh", &s.hh)] {
        if band.shape() != shape {
            return Err(Error::arg(format!(
                "subband {name} has shape {:?}, ll has {shape:?}",
                band.shape()
            )));
        }
    }
    let (oh, ow, ch) = shape;
    let mut out = ImageF::zeros(oh * 2, ow * 2, ch);
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..ch {
                let ll = s.ll.get(y, x, c);
                let lh = s.lh.get(y, x, c);
                let hl = s.hl.get(y, x, c);
                let hh = s.hh.get(y, x, c);
                out.set(2 * y, 2 * x, c, (ll + lh + hl + hh) * 0.5);
                out.set(2 * y, 2 * x + 1, c, (ll + lh - hl - hh) * 0.5);
                out.set(2 * y + 1, 2 * x, c, (ll - lh + hl - hh) * 0.5);
                out.set(2 * y + 1, 2 * x + 1, c, (ll - lh - hl + hh) * 0.5);
            }
        }
    }
    Ok(out)
}

/// Multi-level decomposition; level `k` transforms the `ll` band of level `k-1`.
pub fn wavelet_pyramid(img: &ImageF, levels: usize) -> Result<Vec<Subbands>> {
    if levels == 0 {
        return Err(Error::arg("pyramid needs at least one level"));
    }
    let mut out: Vec<Subbands> = Vec::with_capacity(levels);
    for level in 1..=levels {
        let src = out.last().map(|s| &s.ll).unwrap_or(img);
        if src.height() % 2 != 0 || src.width() % 2 != 0 {
            return Err(Error::arg(format!(
                "level {level}: band {}x{} is not divisible by 2 (input must be divisible by 2^{levels})",
                src.height(),
                src.width()
            )));
        }
        let bands = dwt2_haar(src)?;
        out.push(bands);
    }
    Ok(out)
}

/// Rebuilds the image from a pyramid, inverting levels deepest first. The
/// stored `ll` of every level but the last is ignored.
pub fn reconstruct_pyramid(levels: &[Subbands]) -> Result<ImageF> {
    let (deepest, rest) = levels
        .split_last()
        .ok_or_else(|| Error::arg("empty pyramid"))?;
    let mut current = idwt2_haar(deepest)?;
    for (i, level) in rest.iter().enumerate().rev() {
        if current.shape() != level.ll.shape() {
            return Err(Error::arg(format!(
                "level {}: reconstructed band {:?} does not fit subbands {:?}",
                i + 1,
                current.shape(),
                level.ll.shape()
            )));
        }
        current = idwt2_haar(&Subbands {
            ll: current,
            lh: level.lh.clone(),
            hl: level.hl.clone(),
            hh: level.hh.clone(),
        })?;
    }
    Ok(current)
}
