//! Pair alignment: keypoints, descriptor matching, robust homography, warp,
//! crop to the common region and rescale to a fixed output height.

mod homography;
mod sift;
mod warp;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use homography::{
    estimate_homography_ransac, fit_homography_dlt, Correspondence, Homography, RansacParams, RansacResult,
};
pub use sift::{detect_keypoints, detect_keypoints_with, DetectorConfig, Keypoint, DESCRIPTOR_LEN};
pub use warp::{crop_to_intersection, intersection_mask, largest_valid_rect, warp_perspective, Rect, ValidityMask};

use crate::error::{Error, Result, StageExt};
use crate::image::{load_image, resize_bilinear, save_image, ImageF};

pub const OUTPUT_HEIGHT: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nearest_two(query: &[f64], pool: &[Keypoint]) -> Option<(usize, f64, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, k) in pool.iter().enumerate() {
        let d = l2(query, &k.descriptor);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1, second))
}

/// Nearest-neighbour matches that pass the ratio test and are mutual best
/// matches. Sorted by `index_a`.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Result<Vec<Match>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::arg(format!("ratio must be in (0, 1], got {ratio}")));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(Vec::new());
    }
    let forward: Vec<Option<(usize, f64, f64)>> = a.par_iter().map(|k| nearest_two(&k.descriptor, b)).collect();
    let backward: Vec<Option<usize>> = b
        .par_iter()
        .map(|k| nearest_two(&k.descriptor, a).map(|(i, _, _)| i))
        .collect();
    Ok(forward
        .into_iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let (j, d1, d2) = f?;
            let passes = d1 < ratio * d2;
            (passes && backward[j] == Some(i)).then_some(Match {
                index_a: i,
                index_b: j,
                distance: d1,
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub max_keypoints: usize,
    /// Images are downscaled so their longer side is at most this before detection.
    pub detect_max_dim: usize,
    pub ratio: f64,
    pub ransac: RansacParams,
    pub detector: DetectorConfig,
    pub output_height: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            max_keypoints: 4000,
            detect_max_dim: 640,
            ratio: 0.75,
            ransac: RansacParams::default(),
            detector: DetectorConfig::default(),
            output_height: OUTPUT_HEIGHT,
        }
    }
}

/// Result of aligning one wide/shallow pair.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub wide: ImageF,
    pub shallow: ImageF,
    /// Maps shallow-frame pixels to wide-frame pixels.
    pub homography: Homography,
    pub inlier_count: usize,
    /// Crop in the wide frame before rescaling.
    pub crop_rect: Rect,
}

/// JSON sidecar written next to each aligned pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSidecar {
    pub homography: [[f64; 3]; 3],
    pub inlier_count: usize,
    pub crop_rect: Rect,
}

impl From<&PreparedPair> for AlignmentSidecar {
    fn from(p: &PreparedPair) -> Self {
        Self {
            homography: p.homography.h,
            inlier_count: p.inlier_count,
            crop_rect: p.crop_rect,
        }
    }
}

/// Width after scaling to `height`, rounded to the nearest even integer.
pub fn even_width(h: usize, w: usize, height: usize) -> usize {
    let scaled = w as f64 * height as f64 / h as f64;
    ((scaled / 2.0).round() as usize * 2).max(2)
}

fn detect_scaled(img: &ImageF, cfg: &AlignConfig) -> Result<Vec<Keypoint>> {
    let longest = img.height().max(img.width());
    if longest <= cfg.detect_max_dim {
        return detect_keypoints_with(img, cfg.max_keypoints, &cfg.detector);
    }
    let f = cfg.detect_max_dim as f64 / longest as f64;
    let (h, w) = (
        ((img.height() as f64 * f).round() as usize).max(1),
        ((img.width() as f64 * f).round() as usize).max(1),
    );
    let small = resize_bilinear(img, h, w)?;
    let (fy, fx) = (h as f64 / img.height() as f64, w as f64 / img.width() as f64);
    let mut kps = detect_keypoints_with(&small, cfg.max_keypoints, &cfg.detector)?;
    for k in &mut kps {
        k.x = ((k.x + 0.5) / fx - 0.5).clamp(0.0, (img.width() - 1) as f64);
        k.y = ((k.y + 0.5) / fy - 0.5).clamp(0.0, (img.height() - 1) as f64);
        k.scale /= fx.min(fy);
    }
    Ok(kps)
}

/// Aligns the shallow frame onto the wide frame and crops both to their
/// common region, rescaled to the configured height.
pub fn prepare_pair(wide: &ImageF, shallow: &ImageF, cfg: &AlignConfig) -> Result<PreparedPair> {
    for (name, img) in [("wide", wide), ("shallow", shallow)] {
        if img.height() < 256 || img.width() < 256 {
            return Err(Error::arg(format!(
                "{name} image is {}x{}, pairs must be at least 256x256",
                img.height(),
                img.width()
            )))
            .stage("input");
        }
    }
    if wide.channels() != shallow.channels() {
        return Err(Error::arg("wide and shallow images differ in channel count")).stage("input");
    }
    let (kw, ks) = rayon::join(|| detect_scaled(wide, cfg), || detect_scaled(shallow, cfg));
    let kw = kw.stage("keypoint detection")?;
    let ks = ks.stage("keypoint detection")?;
    let matches = match_descriptors(&ks, &kw, cfg.ratio).stage("matching")?;
    let corr: Vec<Correspondence> = matches
        .iter()
        .map(|m| Correspondence::new(ks[m.index_a].x, ks[m.index_a].y, kw[m.index_b].x, kw[m.index_b].y))
        .collect();
    let fit = estimate_homography_ransac(&corr, &cfg.ransac).stage("homography estimation")?;
    let (warped, _) =
        warp_perspective(shallow, &fit.homography, wide.height(), wide.width()).stage("warping")?;
    let rect = crop_to_intersection(
        (wide.height(), wide.width()),
        (shallow.height(), shallow.width()),
        &fit.homography,
    )
    .stage("cropping")?;
    let (out_wide, out_shallow) = (|| -> Result<_> {
        let cw = wide.crop(rect.y, rect.x, rect.height, rect.width)?;
        let cs = warped.crop(rect.y, rect.x, rect.height, rect.width)?;
        let ow = even_width(rect.height, rect.width, cfg.output_height);
        Ok((
            resize_bilinear(&cw, cfg.output_height, ow)?,
            resize_bilinear(&cs, cfg.output_height, ow)?,
        ))
    })()
    .stage("resizing")?;
    Ok(PreparedPair {
        wide: out_wide,
        shallow: out_shallow,
        homography: fit.homography,
        inlier_count: fit.inlier_count(),
        crop_rect: rect,
    })
}

/// Ids of `<root>/wide/<id>.png` files, sorted.
pub fn pair_ids(root: &Path) -> Result<Vec<String>> {
    let wide = root.join("wide");
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&wide).map_err(|e| Error::io(&wide, e))? {
        let entry = entry.map_err(|e| Error::io(&wide, e))?;
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

#[derive(Debug)]
pub struct PairOutcome {
    pub id: String,
    pub result: Result<AlignmentSidecar>,
}

fn prepare_one(root: &Path, id: &str, cfg: &AlignConfig) -> Result<AlignmentSidecar> {
    let wide = load_image(root.join("wide").join(format!("{id}.png")))?;
    let shallow = load_image(root.join("shallow").join(format!("{id}.png")))?;
    let pair = prepare_pair(&wide, &shallow, cfg)?;
    let out = root.join("aligned");
    for sub in ["wide", "shallow"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    save_image(&pair.wide, out.join("wide").join(format!("{id}.png")))?;
    save_image(&pair.shallow, out.join("shallow").join(format!("{id}.png")))?;
    let sidecar = AlignmentSidecar::from(&pair);
    let path: PathBuf = out.join(format!("{id}.json"));
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(sidecar)
}

/// Aligns every pair under `root` using up to `jobs` worker threads.
pub fn prepare_directory(root: &Path, cfg: &AlignConfig, jobs: usize) -> Result<Vec<PairOutcome>> {
    let ids = pair_ids(root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Runner(e.to_string()))?;
    Ok(pool.install(|| {
        ids.par_iter()
            .map(|id| PairOutcome {
                id: id.clone(),
                result: prepare_one(root, id, cfg),
            })
            .collect()
    }))
}
