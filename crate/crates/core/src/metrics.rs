//! Fidelity metrics and the pixel losses used to train bokeh models.

use crate::error::{Error, Result};
use crate::image::{reflect101, to_grayscale, ImageF};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Per-pair metric record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: Option<f64>,
    pub l1: Option<f64>,
    pub charbonnier: Option<f64>,
    pub sobel: Option<f64>,
    pub gray_l1: Option<f64>,
}

impl MetricReport {
    /// Named values in a fixed order, skipping the ones not computed.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("psnr", self.psnr), ("ssim", self.ssim)];
        let opt = [
            ("ms_ssim", self.ms_ssim),
            ("l1", self.l1),
            ("charbonnier", self.charbonnier),
            ("sobel", self.sobel),
            ("gray_l1", self.gray_l1),
        ];
        v.extend(opt.into_iter().filter_map(|(k, x)| x.map(|x| (k, x))));
        v
    }
}

fn check_shapes(a: &ImageF, b: &ImageF, what: &str) -> Result<()> {
    a.ensure_same_shape(b, what)
}

/// Peak signal-to-noise ratio in dB. Identical inputs give `+inf`.
pub fn psnr(a: &ImageF, b: &ImageF, peak: f64) -> Result<f64> {
    check_shapes(a, b, "psnr")?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::arg("psnr of empty images"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn l1(a: &ImageF, b: &ImageF) -> Result<f64> {
    check_shapes(a, b, "l1")?;
    a.mean_abs_diff(b)
}

/// Mean of `sqrt((a-b)^2 + eps^2)`.
pub fn charbonnier(a: &ImageF, b: &ImageF, eps: f64) -> Result<f64> {
    check_shapes(a, b, "charbonnier")?;
    let n = a.data().len().max(1) as f64;
    let eps2 = eps * eps;
    // sqrt(d^2 + e^2) - e, written so that d = 0 contributes exactly zero
    let excess: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d2 = (x - y) * (x - y);
            d2 / ((d2 + eps2).sqrt() + eps)
        })
        .sum();
    Ok(eps + excess / n)
}

pub fn gray_l1(a: &ImageF, b: &ImageF) -> Result<f64> {
    check_shapes(a, b, "gray_l1")?;
    to_grayscale(a).mean_abs_diff(&to_grayscale(b))
}

/// Sobel gradient magnitude of the grayscale image, reflect-101 border.
pub fn sobel_magnitude(img: &ImageF) -> ImageF {
    let g = to_grayscale(img);
    let (h, w) = (g.height(), g.width());
    let at = |y: isize, x: isize| g.get(reflect101(y, h), reflect101(x, w), 0);
    ImageF::from_fn(h, w, 1, |y, x, _| {
        let (y, x) = (y as isize, x as isize);
        let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// Mean absolute difference of Sobel gradient magnitudes.
pub fn sobel_loss(a: &ImageF, b: &ImageF) -> Result<f64> {
    check_shapes(a, b, "sobel_loss")?;
    sobel_magnitude(a).mean_abs_diff(&sobel_magnitude(b))
}

/// Valid-mode separable filtering of a single-channel image.
fn filter_valid(img: &ImageF, taps: &[f64]) -> ImageF {
    let k = taps.len();
    let (h, w) = (img.height(), img.width());
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let src = img.data();
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let r = &horiz[(y + i) * ow..(y + i + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(r) {
                *o += t * v;
            }
        }
    }
    ImageF::from_vec(oh, ow, 1, out).expect("valid filter output is well formed")
}

fn ssim_taps() -> Vec<f64> {
    crate::image::gaussian_1d(SSIM_SIGMA, SSIM_WINDOW / 2)
}

/// Mean SSIM and mean contrast-structure term over all valid window positions
/// of two single-channel images.
fn ssim_and_cs(a: &ImageF, b: &ImageF) -> (f64, f64) {
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let sq = |x: &ImageF, y: &ImageF| x.zip_map(y, |p, q| p * q).expect("same shape");
    let e_aa = filter_valid(&sq(a, a), &taps);
    let e_bb = filter_valid(&sq(b, b), &taps);
    let e_ab = filter_valid(&sq(a, b), &taps);
    let n = mu_a.data().len() as f64;
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.data().len() {
        let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
        let va = e_aa.data()[i] - ma * ma;
        let vb = e_bb.data()[i] - mb * mb;
        let cov = e_ab.data()[i] - ma * mb;
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        s_sum += lum * cs;
        cs_sum += cs;
    }
    (s_sum / n, cs_sum / n)
}

fn check_ssim_size(a: &ImageF, min: usize, what: &str) -> Result<()> {
    if a.height() < min || a.width() < min {
        return Err(Error::arg(format!(
            "{what} needs images of at least {min}x{min}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Single-scale SSIM on the BT.601 luma, 11×11 Gaussian window (σ = 1.5),
/// peak 1, averaged over valid window positions.
pub fn ssim(a: &ImageF, b: &ImageF) -> Result<f64> {
    check_shapes(a, b, "ssim")?;
    check_ssim_size(a, SSIM_WINDOW, "ssim")?;
    Ok(ssim_and_cs(&to_grayscale(a), &to_grayscale(b)).0)
}

/// The first `levels` published scale weights, rescaled to sum to one. The
/// published five values themselves sum to 1.0001.
pub fn ms_ssim_weights(levels: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..levels.min(MS_SSIM_WEIGHTS.len())];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Multi-scale SSIM with the standard five-scale weights. For fewer levels
/// the leading weights are renormalized to sum to one.
pub fn ms_ssim(a: &ImageF, b: &ImageF, levels: usize) -> Result<f64> {
    check_shapes(a, b, "ms_ssim")?;
    if levels == 0 || levels > MS_SSIM_WEIGHTS.len() {
        return Err(Error::arg(format!(
            "ms_ssim levels must be in 1..={}, got {levels}",
            MS_SSIM_WEIGHTS.len()
        )));
    }
    check_ssim_size(a, SSIM_WINDOW << (levels - 1), "ms_ssim")?;
    let weights = ms_ssim_weights(levels);
    let mut ga = to_grayscale(a);
    let mut gb = to_grayscale(b);
    let mut value = 1.0;
    for (level, w) in weights.iter().enumerate() {
        let (s, cs) = ssim_and_cs(&ga, &gb);
        let term = if level + 1 == levels { s } else { cs };
        value *= term.max(0.0).powf(*w);
        if level + 1 < levels {
            ga = crate::image::downsample_mean(&ga, 2)?;
            gb = crate::image::downsample_mean(&gb, 2)?;
        }
    }
    Ok(value)
}

/// `w_l1 * L1 + w_ssim * (1 - SSIM)`.
pub fn combined_l1_ssim(a: &ImageF, b: &ImageF, w_l1: f64, w_ssim: f64) -> Result<f64> {
    Ok(w_l1 * l1(a, b)? + w_ssim * (1.0 - ssim(a, b)?))
}

pub const DEFAULT_L1_WEIGHT: f64 = 0.5;
pub const DEFAULT_SSIM_WEIGHT: f64 = 1.0;

/// Computes every metric; MS-SSIM is included only when the images are large
/// enough for five scales.
pub fn evaluate_pair(pred: &ImageF, gt: &ImageF) -> Result<MetricReport> {
    check_shapes(pred, gt, "evaluate")?;
    let ms = if pred.height().min(pred.width()) >= SSIM_WINDOW << 4 {
        Some(ms_ssim(pred, gt, 5)?)
    } else {
        None
    };
    Ok(MetricReport {
        psnr: psnr(pred, gt, 1.0)?,
        ssim: ssim(pred, gt)?,
        ms_ssim: ms,
        l1: Some(l1(pred, gt)?),
        charbonnier: Some(charbonnier(pred, gt, CHARBONNIER_EPS)?),
        sobel: Some(sobel_loss(pred, gt)?),
        gray_l1: Some(gray_l1(pred, gt)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> ImageF {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageF::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageF::constant(8, 8, 3, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b1 = a.map(|v| v + 1.0 / 255.0);
        let b2 = a.map(|v| v + 2.0 / 255.0);
        let p1 = psnr(&a, &b1, 1.0).unwrap();
        let p2 = psnr(&a, &b2, 1.0).unwrap();
        assert!((p1 - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert!((p1 - 48.1308).abs() < 1e-3);
        assert!((p1 - p2 - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!(psnr(&a, &ImageF::zeros(8, 7, 3), 1.0).is_err());
    }

    #[test]
    fn psnr_strictly_decreasing_in_error() {
        let a = ImageF::constant(4, 4, 1, 0.2);
        let values: Vec<f64> = (1..=5)
            .map(|k| psnr(&a, &a.map(|v| v + k as f64 * 0.01), 1.0).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn ssim_identity_and_constant_offset() {
        let a = noise(24, 20, 3, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);

        let x = ImageF::constant(16, 16, 1, 0.4);
        let y = ImageF::constant(16, 16, 1, 0.6);
        let c1 = 0.01f64.powi(2);
        let lum = (2.0 * 0.4 * 0.6 + c1) / (0.4f64.powi(2) + 0.6f64.powi(2) + c1);
        let got = ssim(&x, &y).unwrap();
        assert!((got - lum).abs() < 1e-9, "{got} vs {lum}");
        assert!(got < 1.0);
        assert!(ssim(&ImageF::zeros(10, 30, 1), &ImageF::zeros(10, 30, 1)).is_err());
    }

    #[test]
    fn ssim_of_independent_noise_is_near_zero() {
        let a = noise(256, 256, 1, 7);
        let b = noise(256, 256, 1, 8);
        assert!(ssim(&a, &b).unwrap().abs() < 0.1);
    }

    #[test]
    fn ssim_shift_invariance_with_shared_offset() {
        let a = noise(32, 32, 1, 3).map(|v| v * 0.5);
        let b = noise(32, 32, 1, 4).map(|v| v * 0.5);
        let base = ssim(&a, &b).unwrap();
        let shifted = ssim(&a.map(|v| v + 0.3), &b.map(|v| v + 0.3)).unwrap();
        // only the luminance term moves, and it stays within c1 of 1
        assert!((base - shifted).abs() < 0.05);
    }

    #[test]
    fn ms_ssim_properties() {
        for levels in 1..=5 {
            assert!((ms_ssim_weights(levels).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!((MS_SSIM_WEIGHTS.iter().sum::<f64>() - 1.0001).abs() < 1e-12);
        let a = noise(176, 176, 1, 5);
        assert!((ms_ssim(&a, &a, 5).unwrap() - 1.0).abs() < 1e-9);
        let b = a.map(|v| (v * 0.8 + 0.1).min(1.0));
        let one = ms_ssim(&a, &b, 1).unwrap();
        assert!((one - ssim(&a, &b).unwrap()).abs() < 1e-12);
        assert!(ms_ssim(&ImageF::zeros(100, 200, 1), &ImageF::zeros(100, 200, 1), 5).is_err());
        assert!(ms_ssim(&a, &b, 0).is_err());
    }

    #[test]
    fn charbonnier_values() {
        let a = noise(5, 5, 3, 9);
        assert_eq!(charbonnier(&a, &a, 1e-3).unwrap(), 1e-3);
        let z = ImageF::zeros(3, 3, 1);
        let o = ImageF::constant(3, 3, 1, 1.0);
        let v = charbonnier(&z, &o, 1e-3).unwrap();
        assert!((v - (1.0f64 + 1e-6).sqrt()).abs() < 1e-12);
        let b = noise(5, 5, 3, 10);
        assert!(charbonnier(&a, &b, 1e-3).unwrap() >= l1(&a, &b).unwrap());
    }

    #[test]
    fn sobel_loss_cases() {
        let a = noise(9, 9, 3, 11);
        assert_eq!(sobel_loss(&a, &a).unwrap(), 0.0);
        let c1 = ImageF::constant(9, 9, 1, 0.2);
        let c2 = ImageF::constant(9, 9, 1, 0.9);
        assert_eq!(sobel_loss(&c1, &c2).unwrap(), 0.0);

        // vertical step edge vs flat: direct stencil oracle
        let (h, w) = (8usize, 10usize);
        let edge = ImageF::from_fn(h, w, 1, |_, x, _| if x >= 5 { 1.0 } else { 0.0 });
        let flat = ImageF::zeros(h, w, 1);
        let col = |x: isize| -> f64 {
            let xr = reflect101(x, w);
            if xr >= 5 {
                1.0
            } else {
                0.0
            }
        };
        let mut total = 0.0;
        for _y in 0..h {
            for x in 0..w as isize {
                // columns are constant so gy vanishes and gx = 4 (right - left)
                let gx = 4.0 * (col(x + 1) - col(x - 1));
                total += gx.abs();
            }
        }
        let expect = total / (h * w) as f64;
        assert!((sobel_loss(&edge, &flat).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.8).abs() < 1e-12);
    }

    #[test]
    fn gray_l1_red_vs_green() {
        let red = ImageF::from_fn(4, 4, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        let green = ImageF::from_fn(4, 4, 3, |_, _, c| if c == 1 { 1.0 } else { 0.0 });
        assert!((gray_l1(&red, &green).unwrap() - 0.288).abs() < 1e-12);
        assert_eq!(gray_l1(&red, &green).unwrap(), gray_l1(&green, &red).unwrap());
    }

    #[test]
    fn combined_loss_defaults() {
        assert_eq!(DEFAULT_L1_WEIGHT, 0.5);
        assert_eq!(DEFAULT_SSIM_WEIGHT, 1.0);
        let a = noise(16, 16, 3, 12);
        assert!(combined_l1_ssim(&a, &a, 0.5, 1.0).unwrap().abs() < 1e-9);
        let b = noise(16, 16, 3, 13);
        assert!(combined_l1_ssim(&a, &b, 0.5, 1.0).unwrap() >= 0.0);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = noise(24, 24, 3, 20);
        let b = noise(24, 24, 3, 21);
        let fwd = evaluate_pair(&a, &b).unwrap().fields();
        let rev = evaluate_pair(&b, &a).unwrap().fields();
        for ((k, x), (_, y)) in fwd.iter().zip(&rev) {
            assert!((x - y).abs() < 1e-9, "{k}: {x} vs {y}");
        }
        assert!(evaluate_pair(&a, &a).unwrap().ms_ssim.is_none());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = ImageF::zeros(12, 12, 3);
        let b = ImageF::zeros(12, 12, 1);
        assert!(l1(&a, &b).is_err());
        assert!(charbonnier(&a, &b, 1e-3).is_err());
        assert!(sobel_loss(&a, &b).is_err());
        assert!(gray_l1(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }
}
