//! Self-pruning (learned score + ratio top-k) and differentiable
//! interactive candidate selection (DICS).

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{MaskVar, PruneMask};
use crate::encoder::{FeatureGrid, Scale};
use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::math;
use crate::nn::{Bound, LayerNorm, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Mode {
    Train,
    Eval,
}

/// Candidates surviving self-pruning.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    /// `[k×d]`, already modulated by the candidate scores.
    pub features: Var,
    /// Original coarse-cell index of each row.
    pub grid_indices: Vec<usize>,
    pub mask: PruneMask,
    pub side: Side,
    /// `[k]` scores of the selected cells.
    pub scores: Var,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.grid_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_indices.is_empty()
    }
}

/// Output of one DICS application.
#[derive(Debug, Clone)]
pub struct KeepDecision {
    /// `[k×2]`; channel 0 is drop, channel 1 is keep.
    pub keep_prob: Var,
    /// `[k]` hard keep indicator (straight-through in train mode).
    pub hard_keep: Var,
    pub updated_mask: MaskVar,
    /// Whether the all-pruned guard had to force-keep a candidate.
    pub forced: bool,
}

/// `Sigmoid(MLP(F_c))` with a two-layer MLP down to one channel.
#[derive(Debug, Clone)]
pub struct SelfPruneHead {
    l1: Linear,
    l2: Linear,
}

impl SelfPruneHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize) -> Self {
        let hidden = (dim / 2).max(1);
        Self {
            l1: Linear::new(store, rng, "self_prune.l1", dim, hidden, true),
            l2: Linear::new(store, rng, "self_prune.l2", hidden, 1, true),
        }
    }

    /// Per-cell informativeness score in `[0,1]`, shape `[cells]`.
    pub fn score(&self, g: &mut Graph, p: &Bound, coarse: &FeatureGrid) -> Result<Var> {
        if coarse.scale != Scale::Coarse {
            return Err(Error::Scale("self-pruning scores the coarse grid"));
        }
        let h = self.l1.forward(g, p, coarse.values)?;
        let h = g.relu(h);
        let logit = self.l2.forward(g, p, h)?;
        let s = g.sigmoid(logit);
        g.reshape(s, &[coarse.cells()])
    }
}

/// `round(cells·α)` with halves rounded up, clamped to `[1, cells]`.
pub fn selection_count(cells: usize, alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param("alpha", "must lie in (0, 1]"));
    }
    // α is usually a decimal like 0.7 with no exact binary form, so a product
    // that is a half in decimal can land just below it; absorb that slack
    let x = cells as f64 * alpha;
    let k = math::floor(x + 0.5 + 1e-9 * x.max(1.0)) as usize;
    Ok(k.clamp(1, cells.max(1)))
}

/// Cell order by descending score, ties to the lower index.
pub fn ranked_cells(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Keeps the `round(cells·α)` highest-scoring cells. Selected features are
/// multiplied by their score so the scoring head receives gradient from the
/// matching losses.
pub fn topk_select(
    g: &mut Graph,
    coarse: &FeatureGrid,
    scores: Var,
    alpha: f64,
    side: Side,
) -> Result<CandidateSet> {
    let cells = coarse.cells();
    if g.value(scores).len() != cells {
        return Err(Error::Dimension {
            op: "topk_select",
            left: vec![cells],
            right: g.shape(scores).to_vec(),
        });
    }
    let k = selection_count(cells, alpha)?;
    let mut idx = ranked_cells(g.data(scores));
    idx.truncate(k);
    let feats = g.gather_rows(coarse.values, &idx)?;
    let sel_scores = g.gather_rows(scores, &idx)?;
    let features = g.mul_rows(feats, sel_scores)?;
    let sel_scores = g.reshape(sel_scores, &[k])?;
    Ok(CandidateSet {
        features,
        grid_indices: idx,
        mask: PruneMask::ones(k),
        side,
        scores: sel_scores,
    })
}

/// `Softmax(MLP(Norm(F)))` producing `[k×2]` drop/keep probabilities.
/// Initial logit bias toward "keep". The output layer starts at zero, so a
/// fresh head keeps each candidate with probability σ(3) ≈ 0.95. A random
/// init drops about half the candidates at every step before the head has
/// learned anything, which leaves the coarse loss without positives.
pub const DICS_KEEP_BIAS: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct DicsHead {
    norm: LayerNorm,
    l1: Linear,
    l2: Linear,
}

impl DicsHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        let hidden = (dim / 2).max(1);
        let l2 = Linear::new(store, rng, &alloc::format!("{name}.l2"), hidden, 2, true);
        store.get_mut(l2.weight).data.fill(0.0);
        if let Some(b) = l2.bias {
            store.get_mut(b).data[1] = DICS_KEEP_BIAS;
        }
        Self {
            norm: LayerNorm::new(store, &alloc::format!("{name}.norm"), dim),
            l1: Linear::new(store, rng, &alloc::format!("{name}.l1"), dim, hidden, true),
            l2,
        }
    }

    pub fn keep_probability(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        if g.value(features).rows() == 0 {
            return Err(Error::EmptySelection("dics_keep_probability"));
        }
        let x = self.norm.forward(g, p, features)?;
        let h = self.l1.forward(g, p, x)?;
        let h = g.relu(h);
        let logits = self.l2.forward(g, p, h)?;
        Ok(g.softmax(logits, Axis::Rows))
    }
}

/// One hard draw per row: the soft relaxation (train mode only) and the
/// hard keep indicator.
fn sample<R: Rng>(
    g: &mut Graph,
    p: Var,
    temperature: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Option<Var>, Vec<f64>)> {
    let (k, c) = g.value(p).dims2();
    if c != 2 {
        return Err(Error::Dimension {
            op: "gumbel_softmax_sample",
            left: g.shape(p).to_vec(),
            right: vec![k, 2],
        });
    }
    match mode {
        Mode::Eval => {
            let pd = g.data(p);
            let hard = (0..k)
                .map(|i| if pd[2 * i + 1] >= pd[2 * i] { 1.0 } else { 0.0 })
                .collect();
            Ok((None, hard))
        }
        Mode::Train => {
            if !(temperature > 0.0) {
                return Err(Error::param("gumbel_tau", "must be positive in train mode"));
            }
            let noise: Vec<f64> = (0..2 * k)
                .map(|_| {
                    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    -math::ln(-math::ln(u))
                })
                .collect();
            // Zero-probability channels can never win the hard draw.
            let pd = g.data(p);
            let hard = (0..k)
                .map(|i| {
                    let drop = math::ln(pd[2 * i]) + noise[2 * i];
                    let keep = math::ln(pd[2 * i + 1]) + noise[2 * i + 1];
                    if keep > drop {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let pc = g.clamp(p, 1e-12, 1.0);
            let logp = g.ln(pc);
            let noise = g.input(Tensor::from_parts(vec![k, 2], noise));
            let z = g.add(logp, noise)?;
            let z = g.scale(z, 1.0 / temperature);
            let soft = g.softmax(z, Axis::Rows);
            let keep_soft = g.slice_cols(soft, 1, 1)?;
            let keep_soft = g.reshape(keep_soft, &[k])?;
            Ok((Some(keep_soft), hard))
        }
    }
}

fn hard_var(g: &mut Graph, soft: Option<Var>, hard: Vec<f64>) -> Result<Var> {
    let n = hard.len();
    let t = Tensor::from_parts(vec![n], hard);
    match soft {
        Some(s) => g.straight_through(s, t),
        None => Ok(g.input(t)),
    }
}

/// Keep indicator `P ∈ {0,1}^k` from drop/keep probabilities.
///
/// Train mode adds Gumbel noise to `ln p`, takes the hard argmax and routes
/// the gradient through the tempered soft sample. Eval mode is the
/// deterministic `p_keep ≥ p_drop`.
pub fn gumbel_softmax_sample<R: Rng>(
    g: &mut Graph,
    p: Var,
    temperature: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let (soft, hard) = sample(g, p, temperature, mode, rng)?;
    hard_var(g, soft, hard)
}

/// `M ← P ⊙ M`
pub fn update_mask(g: &mut Graph, keep: Var, prior: &MaskVar) -> Result<MaskVar> {
    if g.value(keep).len() != prior.mask.len() {
        return Err(Error::Dimension {
            op: "update_mask",
            left: g.shape(keep).to_vec(),
            right: vec![prior.mask.len()],
        });
    }
    let keep = g.reshape(keep, &[prior.mask.len()])?;
    let prior_var = g.reshape(prior.var, &[prior.mask.len()])?;
    let m = g.mul(keep, prior_var)?;
    MaskVar::from_var(g, m)
}

/// Full DICS step: keep probability, hard sample, mask update, and the
/// all-pruned guard that force-keeps the live candidate with the highest
/// keep probability.
#[allow(clippy::too_many_arguments)]
pub fn dics<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    head: &DicsHead,
    features: Var,
    prior: &MaskVar,
    temperature: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<KeepDecision> {
    let keep_prob = head.keep_probability(g, p, features)?;
    let (soft, mut hard) = sample(g, keep_prob, temperature, mode, rng)?;
    let live = prior.mask.to_bools();
    let survives = hard.iter().zip(&live).any(|(&h, &l)| h == 1.0 && l);
    let mut forced = false;
    if !survives {
        let pd = g.data(keep_prob);
        let best = (0..live.len())
            .filter(|&i| live[i])
            .max_by(|&a, &b| pd[2 * a + 1].total_cmp(&pd[2 * b + 1]).then(b.cmp(&a)));
        if let Some(best) = best {
            hard[best] = 1.0;
            forced = true;
        }
    }
    let hard_keep = hard_var(g, soft, hard)?;
    let updated_mask = update_mask(g, hard_keep, prior)?;
    Ok(KeepDecision {
        keep_prob,
        hard_keep,
        updated_mask,
        forced,
    })
}
