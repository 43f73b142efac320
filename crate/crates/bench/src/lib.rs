//! Deterministic inputs shared by the benchmarks.

use bokeh_core::align::{Correspondence, Homography};
use bokeh_core::image::gaussian_blur;
use bokeh_core::render::DepthMap;
use bokeh_core::ImageF;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smoothed noise, so metrics and detectors see natural-ish structure.
pub fn texture(height: usize, width: usize, channels: usize, seed: u64) -> ImageF {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = ImageF::from_fn(height, width, channels, |_, _, _| rng.random::<f64>());
    gaussian_blur(&raw, 1.5)
}

/// Left-to-right depth ramp from near to far.
pub fn ramp_depth(height: usize, width: usize) -> DepthMap {
    let w = (width.max(2) - 1) as f64;
    DepthMap::new(ImageF::from_fn(height, width, 1, |_, x, _| 0.1 + 0.9 * x as f64 / w)).expect("positive depth")
}

/// `n` correspondences under a fixed similarity-plus-shift, a fraction of them replaced by outliers.
pub fn correspondences(n: usize, outlier_fraction: f64, seed: u64) -> Vec<Correspondence> {
    let truth = Homography::new([[0.98, -0.05, 12.0], [0.05, 0.98, -7.0], [1e-5, -2e-5, 1.0]]).expect("invertible");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            if rng.random::<f64>() < outlier_fraction {
                Correspondence::new(x, y, rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
            } else {
                let (u, v) = truth.apply(x, y).expect("finite");
                Correspondence::new(x, y, u, v)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(texture(8, 9, 3, 1), texture(8, 9, 3, 1));
        assert_eq!(texture(8, 9, 3, 1).shape(), (8, 9, 3));
        assert_eq!(correspondences(50, 0.3, 2), correspondences(50, 0.3, 2));
        assert_eq!(ramp_depth(4, 5).image().shape(), (4, 5, 1));
    }
}
