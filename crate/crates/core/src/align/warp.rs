use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::homography::Homography;
use crate::error::{Error, Result};
use crate::image::ImageF;

const EDGE_TOL: f64 = 1e-9;

/// Per-pixel flag marking samples that came from inside the source frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl ValidityMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn all_valid(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// True when every pixel of `rect` is valid.
    pub fn contains_rect(&self, rect: &Rect) -> bool {
        rect.y + rect.height <= self.height
            && rect.x + rect.width <= self.width
            && (rect.y..rect.y + rect.height).all(|y| (rect.x..rect.x + rect.width).all(|x| self.get(y, x)))
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

#[inline]
fn in_frame(sx: f64, sy: f64, h: usize, w: usize) -> bool {
    sx >= -EDGE_TOL && sy >= -EDGE_TOL && sx <= (w - 1) as f64 + EDGE_TOL && sy <= (h - 1) as f64 + EDGE_TOL
}

fn sample_bilinear(img: &ImageF, sx: f64, sy: f64, out: &mut [f64]) {
    let sx = sx.clamp(0.0, (img.width() - 1) as f64);
    let sy = sy.clamp(0.0, (img.height() - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
    for (c, o) in out.iter_mut().enumerate() {
        let top = img.get(y0, x0, c) * (1.0 - tx) + img.get(y0, x1, c) * tx;
        let bot = img.get(y1, x0, c) * (1.0 - tx) + img.get(y1, x1, c) * tx;
        *o = top * (1.0 - ty) + bot * ty;
    }
}

/// Warps `img` by `h` (source to output pixel coordinates) with inverse
/// mapping and bilinear sampling. Unmapped pixels are zero and invalid.
pub fn warp_perspective(img: &ImageF, h: &Homography, out_h: usize, out_w: usize) -> Result<(ImageF, ValidityMask)> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("warp output must be non-empty"));
    }
    let inv = h.inverse()?;
    let c = img.channels();
    let (sh, sw) = (img.height(), img.width());
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..out_h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; out_w * c];
            let mut valid = vec![false; out_w];
            for x in 0..out_w {
                if let Some((sx, sy)) = inv.apply(x as f64, y as f64) {
                    if in_frame(sx, sy, sh, sw) {
                        sample_bilinear(img, sx, sy, &mut row[x * c..(x + 1) * c]);
                        valid[x] = true;
                    }
                }
            }
            (row, valid)
        })
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    let mut mask = Vec::with_capacity(out_h * out_w);
    for (r, v) in rows {
        data.extend(r);
        mask.extend(v);
    }
    Ok((
        ImageF::from_vec(out_h, out_w, c, data)?,
        ValidityMask {
            height: out_h,
            width: out_w,
            data: mask,
        },
    ))
}

/// Pixels of frame A (`shape_a`) covered by frame B (`shape_b`) mapped through `h`.
pub fn intersection_mask(shape_a: (usize, usize), shape_b: (usize, usize), h: &Homography) -> Result<ValidityMask> {
    let inv = h.inverse()?;
    let (ha, wa) = shape_a;
    let (hb, wb) = shape_b;
    if ha == 0 || wa == 0 || hb == 0 || wb == 0 {
        return Err(Error::arg("frames must be non-empty"));
    }
    let mut mask = ValidityMask::full(ha, wa);
    for y in 0..ha {
        for x in 0..wa {
            mask.data[y * wa + x] = matches!(inv.apply(x as f64, y as f64), Some((sx, sy)) if in_frame(sx, sy, hb, wb));
        }
    }
    Ok(mask)
}

/// Maximal all-valid rectangle; ties go to the topmost, then leftmost origin,
/// then the flatter shape.
pub fn largest_valid_rect(mask: &ValidityMask) -> Option<Rect> {
    let (h, w) = (mask.height, mask.width);
    let mut heights = vec![0usize; w];
    let mut best: Option<Rect> = None;
    let consider = |cand: Rect, best: &mut Option<Rect>| {
        let better = match best {
            None => cand.area() > 0,
            Some(b) => {
                cand.area() > b.area()
                    || (cand.area() == b.area() && (cand.y, cand.x, cand.height) < (b.y, b.x, b.height))
            }
        };
        if better {
            *best = Some(cand);
        }
    };
    for y in 0..h {
        for x in 0..w {
            heights[x] = if mask.get(y, x) { heights[x] + 1 } else { 0 };
        }
        // monotone stack over histogram bars
        let mut stack: Vec<usize> = Vec::new();
        for x in 0..=w {
            let cur = if x < w { heights[x] } else { 0 };
            while let Some(&top) = stack.last() {
                if heights[top] < cur {
                    break;
                }
                stack.pop();
                let hgt = heights[top];
                if hgt == 0 {
                    continue;
                }
                let left = stack.last().map_or(0, |&l| l + 1);
                consider(
                    Rect {
                        x: left,
                        y: y + 1 - hgt,
                        width: x - left,
                        height: hgt,
                    },
                    &mut best,
                );
            }
            stack.push(x);
        }
    }
    best
}

/// Largest axis-aligned rectangle inside frame A and the `h`-warp of frame B.
pub fn crop_to_intersection(shape_a: (usize, usize), shape_b: (usize, usize), h: &Homography) -> Result<Rect> {
    let mask = intersection_mask(shape_a, shape_b, h)?;
    largest_valid_rect(&mask).ok_or_else(|| Error::Estimation("frames do not intersect".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(mask: &ValidityMask) -> Option<Rect> {
        let mut best: Option<Rect> = None;
        for y in 0..mask.height {
            for x in 0..mask.width {
                for hh in 1..=mask.height - y {
                    for ww in 1..=mask.width - x {
                        let r = Rect { x, y, width: ww, height: hh };
                        if mask.contains_rect(&r) && best.map_or(true, |b| r.area() > b.area()) {
                            best = Some(r);
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn largest_rect_matches_brute_force_with_tie_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
            let p = if trial % 2 == 0 { 0.7 } else { 0.5 };
            let mask = ValidityMask {
                height: h,
                width: w,
                data: (0..h * w).map(|_| rng.random_bool(p)).collect(),
            };
            // scanning in row-major order keeps the first, i.e. topmost-leftmost, maximum
            assert_eq!(largest_valid_rect(&mask), brute_force(&mask), "{mask:?}");
        }
    }

    fn gradient_image(h: usize, w: usize) -> ImageF {
        ImageF::from_fn(h, w, 1, |y, x, _| (0.05 * x as f64).sin() * 0.4 + 0.5 + 0.002 * y as f64)
    }

    #[test]
    fn identity_warp_is_lossless() {
        let img = gradient_image(20, 30);
        let (out, mask) = warp_perspective(&img, &Homography::identity(), 20, 30).unwrap();
        assert_eq!(out, img);
        assert!(mask.all_valid());
    }

    #[test]
    fn translation_invalidates_left_columns() {
        let img = gradient_image(16, 40);
        let (out, mask) = warp_perspective(&img, &Homography::translation(10.0, 0.0), 16, 40).unwrap();
        for y in 0..16 {
            for x in 0..40 {
                assert_eq!(mask.get(y, x), x >= 10);
                if x >= 10 {
                    assert!((out.get(y, x, 0) - img.get(y, x - 10, 0)).abs() < 1e-12);
                } else {
                    assert_eq!(out.get(y, x, 0), 0.0);
                }
            }
        }
        let r = crop_to_intersection((16, 40), (16, 40), &Homography::translation(10.0, 0.0)).unwrap();
        assert_eq!(r, Rect { x: 10, y: 0, width: 30, height: 16 });
    }

    #[test]
    fn rotation_matches_pointwise_inverse_map() {
        let (h, w) = (48, 64);
        let f = |x: f64, y: f64| 0.5 + 0.3 * (0.11 * x).sin() * (0.07 * y).cos();
        let img = ImageF::from_fn(h, w, 1, |y, x, _| f(x as f64, y as f64));
        let hm = Homography::rotation_about(0.2, 32.0, 24.0);
        let inv = hm.inverse().unwrap();
        let (out, mask) = warp_perspective(&img, &hm, h, w).unwrap();
        // bilinear error bound: (fxx + fyy)/8 with |fxx| <= 0.3*0.11^2, |fyy| <= 0.3*0.07^2
        let bound = 1.0 / 255.0 + (0.3 * 0.11f64.powi(2) + 0.3 * 0.07f64.powi(2)) / 8.0;
        let mut checked = 0;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    let (sx, sy) = inv.apply(x as f64, y as f64).unwrap();
                    assert!((out.get(y, x, 0) - f(sx, sy)).abs() <= bound);
                    checked += 1;
                }
            }
        }
        assert!(checked > h * w / 2);
    }

    #[test]
    fn random_homography_crop_is_inside_both_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let hm = Homography::new([
                [1.0 + rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-8.0..8.0)],
                [rng.random_range(-0.05..0.05), 1.0 + rng.random_range(-0.05..0.05), rng.random_range(-8.0..8.0)],
                [rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4), 1.0],
            ])
            .unwrap();
            let (ha, wa, hb, wb) = (60, 80, 64, 72);
            let r = crop_to_intersection((ha, wa), (hb, wb), &hm).unwrap();
            assert!(r.x + r.width <= wa && r.y + r.height <= ha);
            let mut mask_b = ValidityMask::full(ha, wa);
            let inv = hm.inverse().unwrap();
            for y in 0..ha {
                for x in 0..wa {
                    let (sx, sy) = inv.apply(x as f64, y as f64).unwrap();
                    mask_b.data[y * wa + x] = sx >= -1e-9 && sy >= -1e-9 && sx <= (wb - 1) as f64 + 1e-9 && sy <= (hb - 1) as f64 + 1e-9;
                }
            }
            assert!(mask_b.contains_rect(&r));
            assert!(ValidityMask::full(ha, wa).contains_rect(&r));
            assert!(r.area() > ha * wa / 2);
        }
    }

    #[test]
    fn identity_crop_is_full_frame_and_disjoint_fails() {
        let r = crop_to_intersection((30, 40), (30, 40), &Homography::identity()).unwrap();
        assert_eq!(r, Rect { x: 0, y: 0, width: 40, height: 30 });
        let far = Homography::translation(500.0, 0.0);
        assert!(matches!(crop_to_intersection((30, 40), (30, 40), &far), Err(Error::Estimation(_))));
        let singular = Homography { h: [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };
        assert!(warp_perspective(&ImageF::zeros(4, 4, 1), &singular, 4, 4).is_err());
    }
}
