//! Loss terms and their weighted total.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::tensor::Tensor;

/// Probability clamp for every log term.
pub const PROB_EPS: f64 = 1e-7;

/// Lower bound on the heatmap variance weighting the fine loss.
pub const VARIANCE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub sprune: f64,
    pub iprune: f64,
    pub coarse: f64,
    pub fine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sprune: 0.5,
            iprune: 0.3,
            coarse: 1.0,
            fine: 1.0,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, terms: [f64; 4]) -> f64 {
        self.sprune * terms[0] + self.iprune * terms[1] + self.coarse * terms[2] + self.fine * terms[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Focal {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub l_sprune: f64,
    pub l_iprune: f64,
    pub l_coarse: f64,
    pub l_fine: f64,
    pub total: f64,
    pub sprune_cells: usize,
    pub iprune_candidates: usize,
    pub coarse_positives: usize,
    pub fine_matches: usize,
}

fn labels_tensor(labels: &[bool]) -> Tensor {
    Tensor::from_parts(vec![labels.len()], labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect())
}

fn check_len(op: &'static str, g: &Graph, v: Var, n: usize) -> Result<()> {
    if g.value(v).len() != n {
        return Err(Error::Dimension {
            op,
            left: g.shape(v).to_vec(),
            right: vec![n],
        });
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `s` against `labels`.
pub fn binary_cross_entropy(g: &mut Graph, s: Var, labels: &[bool]) -> Result<Var> {
    let n = labels.len();
    check_len("binary_cross_entropy", g, s, n)?;
    if n == 0 {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let s = g.reshape(s, &[n])?;
    let s = g.clamp(s, PROB_EPS, 1.0 - PROB_EPS);
    let y = g.input(labels_tensor(labels));
    let ny = g.input(labels_tensor(&labels.iter().map(|l| !l).collect::<Vec<_>>()));
    let ls = g.ln(s);
    let one_minus = g.rsub_scalar(1.0, s);
    let l1s = g.ln(one_minus);
    let a = g.mul(ls, y)?;
    let b = g.mul(l1s, ny)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll);
    Ok(g.scale(m, -1.0))
}

/// Self-pruning loss: per-side mean cross-entropy, summed over sides.
pub fn self_prune_loss(g: &mut Graph, s_a: Var, labels_a: &[bool], s_b: Var, labels_b: &[bool]) -> Result<Var> {
    let la = binary_cross_entropy(g, s_a, labels_a)?;
    let lb = binary_cross_entropy(g, s_b, labels_b)?;
    g.add(la, lb)
}

/// Mean focal loss `−α(1−p_t)^γ ln p_t` of two-channel probabilities
/// (channel 1 is the positive class).
pub fn focal_loss(g: &mut Graph, p: Var, labels: &[bool], focal: Focal) -> Result<Var> {
    let n = labels.len();
    let (rows, cols) = g.value(p).dims2();
    if rows != n || cols != 2 {
        return Err(Error::Dimension {
            op: "focal_loss",
            left: g.shape(p).to_vec(),
            right: vec![n, 2],
        });
    }
    if n == 0 {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let onehot = labels.iter().flat_map(|&l| if l { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
    let onehot = g.input(Tensor::from_parts(vec![n, 2], onehot));
    let sel = g.mul(p, onehot)?;
    let pt = g.sum_axis(sel, Axis::Cols);
    focal_terms(g, pt, focal)
}

/// Mean of `−α(1−p)^γ ln p` over the entries of `p`.
fn focal_terms(g: &mut Graph, p: Var, focal: Focal) -> Result<Var> {
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let lp = g.ln(p);
    let weighted = if focal.gamma == 0.0 {
        lp
    } else {
        let q = g.rsub_scalar(1.0, p);
        let w = g.powf(q, focal.gamma);
        g.mul(w, lp)?
    };
    let m = g.mean(weighted);
    Ok(g.scale(m, -focal.alpha))
}

/// Interactive-pruning loss: per-side mean focal loss, summed over sides.
pub fn interactive_prune_loss(
    g: &mut Graph,
    p_a: Var,
    labels_a: &[bool],
    p_b: Var,
    labels_b: &[bool],
    focal: Focal,
) -> Result<Var> {
    let la = focal_loss(g, p_a, labels_a, focal)?;
    let lb = focal_loss(g, p_b, labels_b, focal)?;
    g.add(la, lb)
}

/// Focal negative log-likelihood of the confidence at ground-truth
/// positives. Returns the term and the positive count; zero positives give
/// a constant 0.
pub fn coarse_matching_loss(g: &mut Graph, conf: Var, gt: &Tensor, focal: Focal) -> Result<(Var, usize)> {
    if g.shape(conf) != gt.shape.as_slice() {
        return Err(Error::Dimension {
            op: "coarse_matching_loss",
            left: g.shape(conf).to_vec(),
            right: gt.shape.clone(),
        });
    }
    let (ka, kb) = gt.dims2();
    let positives: Vec<usize> = (0..ka * kb).filter(|&i| gt.data[i] == 1.0).collect();
    if positives.is_empty() {
        return Ok((g.input(Tensor::scalar(0.0)), 0));
    }
    let flat = g.reshape(conf, &[ka * kb, 1])?;
    let pos = g.gather_rows(flat, &positives)?;
    Ok((focal_terms(g, pos, focal)?, positives.len()))
}

/// `mean_i ‖Δ_i − Δgt_i‖² / max(σ²_i, floor)` with σ² treated as a
/// constant.
pub fn fine_loss(g: &mut Graph, offsets: Var, gt: &[[f64; 2]], variance: &[f64], floor: f64) -> Result<Var> {
    let m = gt.len();
    if g.shape(offsets) != [m, 2] || variance.len() != m {
        return Err(Error::Dimension {
            op: "fine_loss",
            left: g.shape(offsets).to_vec(),
            right: vec![m, 2, variance.len()],
        });
    }
    if m == 0 {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let target = g.input(Tensor::from_parts(vec![m, 2], gt.iter().flatten().copied().collect()));
    let diff = g.sub(offsets, target)?;
    let sq = g.mul(diff, diff)?;
    let per = g.sum_axis(sq, Axis::Cols);
    let inv = g.input(Tensor::from_parts(vec![m], variance.iter().map(|v| 1.0 / v.max(floor)).collect()));
    let w = g.mul_rows(per, inv)?;
    Ok(g.mean(w))
}

/// The four loss terms of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub sprune: Var,
    pub iprune: Var,
    pub coarse: Var,
    pub fine: Var,
}

pub fn total_loss(g: &mut Graph, terms: LossTerms, weights: LossWeights) -> Result<(Var, LossReport)> {
    let parts = [
        (terms.sprune, weights.sprune),
        (terms.iprune, weights.iprune),
        (terms.coarse, weights.coarse),
        (terms.fine, weights.fine),
    ];
    let mut total: Option<Var> = None;
    for (v, w) in parts {
        check_len("total_loss", g, v, 1)?;
        let s = g.scale(v, w);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("four terms");
    let report = LossReport {
        l_sprune: g.scalar(terms.sprune),
        l_iprune: g.scalar(terms.iprune),
        l_coarse: g.scalar(terms.coarse),
        l_fine: g.scalar(terms.fine),
        total: g.scalar(total),
        ..LossReport::default()
    };
    Ok((total, report))
}
