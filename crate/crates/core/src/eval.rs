//! Directory-level evaluation of predictions against ground truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::canonical::{format_sig, sig_value, to_canonical_json};
use crate::error::{Error, Result};
use crate::image::load_image;
use crate::metrics::{evaluate_pair, MetricReport};

pub const METRIC_COLUMNS: [&str; 7] = ["psnr", "ssim", "ms_ssim", "l1", "charbonnier", "sobel", "gray_l1"];

/// `stem -> path` for the PNG and JPEG files directly inside `dir`.
pub fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) || !p.is_file() {
            continue;
        }
        if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), p.clone()) {
                return Err(Error::Validation(format!(
                    "{} and {} share the id {stem}",
                    prev.display(),
                    p.display()
                )));
            }
        }
    }
    Ok(out)
}

/// Matches files by id; any id present on only one side is a validation error.
pub fn pair_files(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let p = image_files(pred)?;
    let mut g = image_files(gt)?;
    let no_gt: Vec<&str> = p.keys().filter(|k| !g.contains_key(*k)).map(String::as_str).collect();
    let no_pred: Vec<&str> = g.keys().filter(|k| !p.contains_key(*k)).map(String::as_str).collect();
    if !no_gt.is_empty() || !no_pred.is_empty() {
        let mut parts = Vec::new();
        if !no_pred.is_empty() {
            parts.push(format!("missing predictions for: {}", no_pred.join(", ")));
        }
        if !no_gt.is_empty() {
            parts.push(format!("missing ground truth for: {}", no_gt.join(", ")));
        }
        return Err(Error::Validation(parts.join("; ")));
    }
    if p.is_empty() {
        return Err(Error::Validation(format!("no images in {}", pred.display())));
    }
    Ok(p.into_iter()
        .map(|(id, pp)| {
            let gp = g.remove(&id).expect("checked above");
            (id, pp, gp)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<(String, MetricReport)>,
}

impl Evaluation {
    /// Mean of each metric over the images that have it.
    pub fn means(&self) -> BTreeMap<&'static str, f64> {
        let mut acc: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
        for (_, r) in &self.per_image {
            for (k, v) in r.fields() {
                let e = acc.entry(k).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary {
            count: usize,
            mean: BTreeMap<&'static str, Value>,
        }
        let s = Summary {
            count: self.per_image.len(),
            mean: self.means().into_iter().map(|(k, v)| (k, sig_value(v))).collect(),
        };
        to_canonical_json(&s)
    }

    pub fn per_image_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id"];
        header.extend(METRIC_COLUMNS);
        w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
        for (id, r) in &self.per_image {
            let vals: BTreeMap<&str, f64> = r.fields().into_iter().collect();
            let mut row = vec![id.clone()];
            row.extend(METRIC_COLUMNS.iter().map(|k| vals.get(k).map(|&v| format_sig(v)).unwrap_or_default()));
            w.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Evaluates every pair using `jobs` threads; results are in id order.
pub fn evaluate_dirs(pred: &Path, gt: &Path, jobs: usize) -> Result<Evaluation> {
    let pairs = pair_files(pred, gt)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Runner(e.to_string()))?;
    let per_image = pool.install(|| {
        pairs
            .par_iter()
            .map(|(id, p, g)| {
                let a = load_image(p)?;
                let b = load_image(g)?;
                let r = evaluate_pair(&a, &b).map_err(|e| Error::Validation(format!("{id}: {e}")))?;
                Ok((id.clone(), r))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(Evaluation { per_image })
}
