//! Dual-softmax coarse matching over live candidates and windowed
//! expectation refinement on the fine grid.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::PruneMask;
use crate::encoder::{FeatureGrid, Scale};
use crate::error::{Error, Result};
use crate::geometry::{coarse_center, COARSE_STRIDE};
use crate::graph::{Axis, Graph, Var};
use crate::math;
use crate::tensor::Tensor;

/// Fine grid stride in pixels.
pub const FINE_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    /// Row in the A candidate set.
    pub index_a: usize,
    /// Row in the B candidate set.
    pub index_b: usize,
    pub cell_a: usize,
    pub cell_b: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatch {
    pub point_a: [f64; 2],
    pub point_b: [f64; 2],
    pub confidence: f64,
    /// Heatmap variance `var_x + var_y` in fine-cell units.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub coarse: Vec<CoarseMatch>,
    pub fine: Vec<FineMatch>,
    /// `[k_A×k_B]`
    pub confidence_matrix: Tensor,
    /// Coarse matches without a full refinement window.
    pub border_dropped: usize,
}

/// Dual-softmax confidence `softmax_row(S) ⊙ softmax_col(S)` with
/// `S = F_A·F_Bᵀ / (d·τ)`. Dead rows and columns are zero.
pub fn dual_softmax(
    g: &mut Graph,
    feat_a: Var,
    feat_b: Var,
    mask_a: &PruneMask,
    mask_b: &PruneMask,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::param("tau_m", "must be positive"));
    }
    let (ka, d) = g.value(feat_a).dims2();
    let kb = g.value(feat_b).rows();
    if mask_a.len() != ka || mask_b.len() != kb {
        return Err(Error::Dimension {
            op: "dual_softmax",
            left: vec![ka, kb],
            right: vec![mask_a.len(), mask_b.len()],
        });
    }
    if mask_a.count() == 0 || mask_b.count() == 0 {
        return Err(Error::EmptySelection("coarse_match"));
    }
    let bt = g.transpose(feat_b);
    let sim = g.matmul(feat_a, bt)?;
    let sim = g.scale(sim, 1.0 / (d as f64 * tau));
    let (la, lb) = (mask_a.to_bools(), mask_b.to_bools());
    let row = g.masked_softmax(sim, Axis::Rows, &la, &lb)?;
    let col = g.masked_softmax(sim, Axis::Cols, &la, &lb)?;
    g.mul(row, col)
}

/// Mutual argmax pairs with confidence `≥ theta`. Ties go to the lower
/// index; dead rows and columns never match.
pub fn mutual_nearest(conf: &Tensor, mask_a: &PruneMask, mask_b: &PruneMask, theta: f64) -> Vec<(usize, usize, f64)> {
    let (ka, kb) = conf.dims2();
    let argmax = |vals: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best: Option<(usize, f64)> = None;
        for (j, v) in vals {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        best
    };
    let col_best: Vec<Option<(usize, f64)>> = (0..kb)
        .map(|j| {
            if !mask_b.get(j) {
                return None;
            }
            argmax(&mut (0..ka).filter(|&i| mask_a.get(i)).map(|i| (i, conf.at(i, j))))
        })
        .collect();
    let mut out = Vec::new();
    for i in (0..ka).filter(|&i| mask_a.get(i)) {
        let Some((j, v)) = argmax(&mut (0..kb).filter(|&j| mask_b.get(j)).map(|j| (j, conf.at(i, j)))) else {
            continue;
        };
        if col_best[j].map(|(bi, _)| bi) == Some(i) && v >= theta {
            out.push((i, j, v));
        }
    }
    out
}

/// Coarse matches between two candidate sets. Rows of `feat_*` align with
/// `cells_*`.
#[allow(clippy::too_many_arguments)]
pub fn coarse_match(
    g: &mut Graph,
    feat_a: Var,
    cells_a: &[usize],
    mask_a: &PruneMask,
    feat_b: Var,
    cells_b: &[usize],
    mask_b: &PruneMask,
    tau: f64,
    theta: f64,
) -> Result<(Var, Vec<CoarseMatch>)> {
    if cells_a.len() != mask_a.len() || cells_b.len() != mask_b.len() {
        return Err(Error::Dimension {
            op: "coarse_match",
            left: vec![cells_a.len(), cells_b.len()],
            right: vec![mask_a.len(), mask_b.len()],
        });
    }
    let conf = dual_softmax(g, feat_a, feat_b, mask_a, mask_b, tau)?;
    let matches = mutual_nearest(g.value(conf), mask_a, mask_b, theta)
        .into_iter()
        .map(|(i, j, c)| CoarseMatch {
            index_a: i,
            index_b: j,
            cell_a: cells_a[i],
            cell_b: cells_b[j],
            confidence: c,
        })
        .collect();
    Ok((conf, matches))
}

/// Window offsets `(dx, dy)` in row-major order, `dx` varying fastest.
pub fn window_offsets(w: usize) -> Vec<[f64; 2]> {
    let r = (w / 2) as f64;
    (0..w * w).map(|i| [(i % w) as f64 - r, (i / w) as f64 - r]).collect()
}

/// Expectation and total variance of a heatmap over the window.
pub fn heatmap_moments(heat: &[f64], w: usize) -> ([f64; 2], f64) {
    let offs = window_offsets(w);
    let mut m = [0.0; 2];
    let mut m2 = [0.0; 2];
    for (p, o) in heat.iter().zip(&offs) {
        for a in 0..2 {
            m[a] += p * o[a];
            m2[a] += p * o[a] * o[a];
        }
    }
    (m, (m2[0] - m[0] * m[0]) + (m2[1] - m[1] * m[1]))
}

/// Fine index of a coarse cell's anchor.
pub fn fine_anchor(cell: usize, coarse_width: usize) -> (usize, usize) {
    let ratio = COARSE_STRIDE / FINE_STRIDE;
    let (r, c) = (cell / coarse_width, cell % coarse_width);
    (ratio * r + ratio / 2, ratio * c + ratio / 2)
}

/// Result of refining a batch of coarse pairs.
#[derive(Debug, Clone)]
pub struct Refinement {
    /// `[m×2]` expected `(dx, dy)` in fine cells relative to the B anchor.
    pub offsets: Var,
    /// Heatmap variance per refined pair.
    pub variance: Vec<f64>,
    /// Positions in the input pair list that were refined.
    pub kept: Vec<usize>,
    pub border_dropped: usize,
}

/// Correlates the fine feature at each A anchor with the `w×w` window
/// around the B anchor, takes a softmax over the window (scaled by
/// `1/√d_f`) and returns the expected offset. Pairs whose window leaves
/// the fine grid are dropped and counted.
pub fn fine_refine(
    g: &mut Graph,
    pairs: &[(usize, usize)],
    fine_a: &FeatureGrid,
    fine_b: &FeatureGrid,
    w: usize,
) -> Result<Refinement> {
    if fine_a.scale != Scale::Fine || fine_b.scale != Scale::Fine {
        return Err(Error::Scale("fine_refine expects fine grids"));
    }
    if w == 0 || w % 2 == 0 {
        return Err(Error::param("w", "window size must be odd"));
    }
    let ratio = COARSE_STRIDE / FINE_STRIDE;
    let (hf, wf) = (fine_b.height, fine_b.width);
    let wc = fine_a.width / ratio;
    let wcb = wf / ratio;
    let half = w / 2;
    let mut kept = Vec::new();
    let mut centers = Vec::new();
    let mut windows = Vec::new();
    for (n, &(ca, cb)) in pairs.iter().enumerate() {
        let (ra, cola) = fine_anchor(ca, wc);
        let (rb, colb) = fine_anchor(cb, wcb);
        if ra >= fine_a.height || cola >= fine_a.width {
            return Err(Error::InvalidIndex {
                op: "fine_refine",
                index: ca,
                len: fine_a.cells() / (ratio * ratio),
            });
        }
        if rb < half || colb < half || rb + half >= hf || colb + half >= wf {
            continue;
        }
        kept.push(n);
        for _ in 0..w * w {
            centers.push(ra * fine_a.width + cola);
        }
        for dy in 0..w {
            for dx in 0..w {
                windows.push((rb + dy - half) * wf + colb + dx - half);
            }
        }
    }
    let m = kept.len();
    let border_dropped = pairs.len() - m;
    if m == 0 {
        let offsets = g.input(Tensor::zeros(&[0, 2]));
        return Ok(Refinement {
            offsets,
            variance: Vec::new(),
            kept,
            border_dropped,
        });
    }
    let d = fine_a.channels;
    let ca = g.gather_rows(fine_a.values, &centers)?;
    let wb = g.gather_rows(fine_b.values, &windows)?;
    let prod = g.mul(ca, wb)?;
    let corr = g.sum_axis(prod, Axis::Cols);
    let corr = g.reshape(corr, &[m, w * w])?;
    let corr = g.scale(corr, 1.0 / math::sqrt(d as f64));
    let heat = g.softmax(corr, Axis::Rows);
    let offs = window_offsets(w);
    let grid = g.input(Tensor::from_parts(vec![w * w, 2], offs.iter().flatten().copied().collect()));
    let offsets = g.matmul(heat, grid)?;
    let hv = g.value(heat);
    let variance = (0..m).map(|i| heatmap_moments(hv.row(i), w).1).collect();
    Ok(Refinement {
        offsets,
        variance,
        kept,
        border_dropped,
    })
}

/// Pixel position of a refined B point.
pub fn refined_point(cell_b: usize, coarse_width: usize, offset: [f64; 2]) -> [f64; 2] {
    let c = coarse_center(cell_b, coarse_width);
    let s = FINE_STRIDE as f64;
    [c[0] + s * offset[0], c[1] + s * offset[1]]
}

/// Refines coarse matches into pixel correspondences.
pub fn refine_matches(
    g: &mut Graph,
    coarse: &[CoarseMatch],
    fine_a: &FeatureGrid,
    fine_b: &FeatureGrid,
    w: usize,
) -> Result<(Vec<FineMatch>, usize)> {
    let ratio = COARSE_STRIDE / FINE_STRIDE;
    let (wca, wcb) = (fine_a.width / ratio, fine_b.width / ratio);
    let pairs: Vec<(usize, usize)> = coarse.iter().map(|m| (m.cell_a, m.cell_b)).collect();
    let r = fine_refine(g, &pairs, fine_a, fine_b, w)?;
    let off = g.value(r.offsets);
    let fine = r
        .kept
        .iter()
        .enumerate()
        .map(|(row, &n)| {
            let cm = coarse[n];
            FineMatch {
                point_a: coarse_center(cm.cell_a, wca),
                point_b: refined_point(cm.cell_b, wcb, [off.at(row, 0), off.at(row, 1)]),
                confidence: cm.confidence,
                variance: r.variance[row],
            }
        })
        .collect();
    Ok((fine, r.border_dropped))
}
