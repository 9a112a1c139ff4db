//! Normalized DLT homography fit and corner-error metrics.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{apply_homography, mat3_inverse, mat3_mul, Mat3};
use crate::math;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors (as columns of the second output,
/// row-major `n×n`).
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = alloc::vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j] * a[i * n + j]).sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalizer(points: &[[f64; 2]]) -> Mat3 {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_d = points.iter().map(|p| math::sqrt((p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy))).sum::<f64>() / n;
    let s = if mean_d > 0.0 { core::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]]
}

/// Least-squares homography `dst ≃ H·src` from at least four
/// correspondences (Hartley-normalized DLT).
pub fn fit_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Mat3> {
    if src.len() != dst.len() {
        return Err(Error::Geometry(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    if src.len() < 4 {
        return Err(Error::Geometry(format!("{} correspondences, need 4", src.len())));
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let mut ata = [0.0; 81];
    for (p, q) in src.iter().zip(dst) {
        let a = apply_homography(&ts, *p).unwrap_or(*p);
        let b = apply_homography(&td, *q).unwrap_or(*q);
        let rows = [
            [-a[0], -a[1], -1.0, 0.0, 0.0, 0.0, b[0] * a[0], b[0] * a[1], b[0]],
            [0.0, 0.0, 0.0, -a[0], -a[1], -1.0, b[1] * a[0], b[1] * a[1], b[1]],
        ];
        for r in &rows {
            for i in 0..9 {
                for j in 0..9 {
                    ata[i * 9 + j] += r[i] * r[j];
                }
            }
        }
    }
    let (vals, vecs) = symmetric_eigen(&ata, 9);
    let k = (0..9).min_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap_or(0);
    let h: Vec<f64> = (0..9).map(|i| vecs[i * 9 + k]).collect();
    let hn: Mat3 = core::array::from_fn(|i| [h[3 * i], h[3 * i + 1], h[3 * i + 2]]);
    let out = mat3_mul(&mat3_mul(&mat3_inverse(&td)?, &hn), &ts);
    let norm = if out[2][2].abs() > 1e-12 {
        out[2][2]
    } else {
        math::sqrt(out.iter().flatten().map(|x| x * x).sum())
    };
    if !(norm.abs() > 0.0) || out.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Geometry("degenerate homography fit".into()));
    }
    Ok(core::array::from_fn(|i| core::array::from_fn(|j| out[i][j] / norm)))
}

/// Image corners in pixel-center coordinates.
pub fn image_corners(height: usize, width: usize) -> [[f64; 2]; 4] {
    let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
}

/// Maximum distance between the corners warped by the estimate and by the
/// ground truth. Infinite if either maps a corner to infinity.
pub fn max_corner_error(estimate: &Mat3, truth: &Mat3, height: usize, width: usize) -> f64 {
    image_corners(height, width)
        .iter()
        .map(|c| match (apply_homography(estimate, *c), apply_homography(truth, *c)) {
            (Some(a), Some(b)) => math::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])),
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// Normalized area under the cumulative error curve up to `threshold`:
/// `mean_i max(0, 1 − e_i/threshold)`.
pub fn error_auc(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() || !(threshold > 0.0) {
        return 0.0;
    }
    errors.iter().map(|&e| if e.is_finite() { (1.0 - e / threshold).max(0.0) } else { 0.0 }).sum::<f64>() / errors.len() as f64
}
