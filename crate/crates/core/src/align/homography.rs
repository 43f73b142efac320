//! Projective transforms, normalized DLT and RANSAC.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 3×3 projective transform normalized so that `h[2][2] = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub h: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self::from_matrix_unchecked(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            h: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation by `angle` radians about `(cx, cy)`.
    pub fn rotation_about(angle: f64, cx: f64, cy: f64) -> Self {
        let (c, s) = (angle.cos(), angle.sin());
        Self {
            h: [
                [c, -s, cx - c * cx + s * cy],
                [s, c, cy - s * cx - c * cy],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn new(h: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| h[r][c]))
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("homography has non-finite entries"));
        }
        let scale = m[(2, 2)];
        if scale.abs() < 1e-12 {
            return Err(Error::arg("homography cannot be normalized: h[2][2] is zero"));
        }
        let hm = Self::from_matrix_unchecked(m / scale);
        if hm.det().abs() <= 1e-12 {
            return Err(Error::arg(format!("homography is singular (det = {:e})", hm.det())));
        }
        Ok(hm)
    }

    fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        let mut h = [[0.0; 3]; 3];
        for (r, row) in h.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        Self { h }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.h[r][c])
    }

    pub fn det(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::arg("homography is singular"))?;
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.matrix() * other.matrix())
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let h = &self.h;
        let w = h[2][0] * x + h[2][1] * y + h[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((
            (h[0][0] * x + h[0][1] * y + h[0][2]) / w,
            (h[1][0] * x + h[1][1] * y + h[1][2]) / w,
        ))
    }

    pub fn reprojection_error(&self, c: &Correspondence) -> f64 {
        match self.apply(c.xa, c.ya) {
            Some((x, y)) => ((x - c.xb).powi(2) + (y - c.yb).powi(2)).sqrt(),
            None => f64::INFINITY,
        }
    }
}

/// A point pair: `(xa, ya)` in the source frame, `(xb, yb)` in the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
}

impl Correspondence {
    pub fn new(xa: f64, ya: f64, xb: f64, yb: f64) -> Self {
        Self { xa, ya, xb, yb }
    }
}

/// Similarity taking points to zero centroid and mean distance √2.
fn normalizing_transform(pts: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = pts.clone().count().max(1) as f64;
    let (sx, sy) = pts.clone().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = pts.map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Least-squares homography by Hartley-normalized direct linear transform.
pub fn fit_homography_dlt(corr: &[Correspondence]) -> Result<Homography> {
    if corr.len() < 4 {
        return Err(Error::arg(format!("homography needs >= 4 correspondences, got {}", corr.len())));
    }
    let ta = normalizing_transform(corr.iter().map(|c| (c.xa, c.ya)));
    let tb = normalizing_transform(corr.iter().map(|c| (c.xb, c.yb)));
    let rows = (2 * corr.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in corr.iter().enumerate() {
        let p = ta * Vector3::new(c.xa, c.ya, 1.0);
        let q = tb * Vector3::new(c.xb, c.yb, 1.0);
        let (x, y) = (p[0] / p[2], p[1] / p[2]);
        let (u, v) = (q[0] / q[2], q[1] / q[2]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Estimation("SVD did not converge".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let hvec = v_t.row(min_idx);
    let hn = Matrix3::from_fn(|r, c| hvec[r * 3 + c]);
    let tb_inv = tb
        .try_inverse()
        .ok_or_else(|| Error::Estimation("degenerate target points".into()))?;
    Homography::from_matrix(tb_inv * hn * ta).map_err(|e| Error::Estimation(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_px: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 2000,
            inlier_px: 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn triangle_area2(p: (f64, f64), q: (f64, f64), r: (f64, f64)) -> f64 {
    ((q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)).abs()
}

fn degenerate(pts: [(f64, f64); 4]) -> bool {
    const MIN_AREA2: f64 = 1e-6;
    (0..4).any(|skip| {
        let t: Vec<_> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
        triangle_area2(t[0], t[1], t[2]) < MIN_AREA2
    })
}

fn score(h: &Homography, corr: &[Correspondence], thr: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = Vec::with_capacity(corr.len());
    let (mut count, mut err_sum) = (0usize, 0.0);
    for c in corr {
        let e = h.reprojection_error(c);
        let ok = e <= thr;
        if ok {
            count += 1;
            err_sum += e;
        }
        mask.push(ok);
    }
    (mask, count, err_sum)
}

/// Robust homography from 4-point minimal samples, refit on the consensus set.
/// Deterministic for a given seed.
pub fn estimate_homography_ransac(corr: &[Correspondence], params: &RansacParams) -> Result<RansacResult> {
    if corr.len() < 4 {
        return Err(Error::arg(format!(
            "RANSAC needs >= 4 correspondences, got {}",
            corr.len()
        )));
    }
    if !(params.inlier_px > 0.0) {
        return Err(Error::arg(format!("inlier threshold must be > 0, got {}", params.inlier_px)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Homography, Vec<bool>, usize, f64)> = None;
    for _ in 0..params.iterations.max(1) {
        let idx = sample(&mut rng, corr.len(), 4);
        let picked: Vec<Correspondence> = idx.iter().map(|i| corr[i]).collect();
        let src = [0, 1, 2, 3].map(|i| (picked[i].xa, picked[i].ya));
        let dst = [0, 1, 2, 3].map(|i| (picked[i].xb, picked[i].yb));
        if degenerate(src) || degenerate(dst) {
            continue;
        }
        let Ok(h) = fit_homography_dlt(&picked) else { continue };
        let (mask, count, err) = score(&h, corr, params.inlier_px);
        let better = match &best {
            None => true,
            Some((_, _, bc, be)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            best = Some((h, mask, count, err));
        }
        if count == corr.len() {
            break;
        }
    }
    let (mut h, mut mask, mut count, _) = best
        .filter(|b| b.2 >= 4)
        .ok_or_else(|| Error::Estimation("no model reached 4 inliers".into()))?;
    for _ in 0..5 {
        let inl: Vec<Correspondence> = corr.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
        let Ok(refit) = fit_homography_dlt(&inl) else { break };
        let (m2, c2, _) = score(&refit, corr, params.inlier_px);
        if c2 < count {
            break;
        }
        let changed = m2 != mask;
        h = refit;
        mask = m2;
        count = c2;
        if !changed {
            break;
        }
    }
    Ok(RansacResult {
        homography: h,
        inliers: mask,
    })
}
