//! End-to-end matcher: encoder, self-pruning, `N_c` self/cross blocks with
//! interactive pruning, coarse matching, fine refinement, losses, training
//! and evaluation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self_cross_block, self_cross_block_unmasked, MaskVar, PruneMask, PruningVariant, SelfCrossBlock};
use crate::encoder::{positional_encoding, Encoder, EncoderDims, FeatureGrid};
use crate::error::{Error, Result};
use crate::geometry::{
    apply_homography, coarse_center, covisible_labels, depth_validity, gt_cell_pairs, gt_coarse_assignment, warp_points, CovisMode,
    PairSample,
};
use crate::graph::{Graph, Var};
use crate::flops::{count_flops, Workload};
use crate::homography::{error_auc, fit_homography, max_corner_error};
use crate::math;
use crate::losses::{
    coarse_matching_loss, fine_loss, interactive_prune_loss, self_prune_loss, total_loss, Focal, LossReport, LossTerms, LossWeights,
    VARIANCE_FLOOR,
};
use crate::matching::{coarse_match, fine_refine, refine_matches, MatchSet, FINE_STRIDE};
use crate::nn::{Bound, ParamStore};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::pruning::{dics, topk_select, DicsHead, Mode, SelfPruneHead, Side};
use crate::synthetic::{Dataset, SceneConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Supervise {
    /// Interactive-pruning loss on the final DICS step only.
    Last,
    /// Mean over every DICS step.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum IPruneLabels {
    /// Co-visibility of each candidate.
    Covisible,
    /// Depth validity of each candidate's cell.
    DepthValidity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PipelineConfig {
    pub alpha: f64,
    pub n_blocks: usize,
    pub pruning_variant: PruningVariant,
    /// 1-based index of the first block followed by DICS; larger than
    /// `n_blocks` disables interactive pruning.
    pub dics_from_block: usize,
    pub supervise: Supervise,
    pub discard_after_prune: bool,
    pub covis_mode: CovisMode,
    pub iprune_labels: IPruneLabels,
    pub d_c: usize,
    pub d_f: usize,
    pub heads: usize,
    pub tau_m: f64,
    pub theta_c: f64,
    pub w: usize,
    pub gumbel_tau: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub fine_sample_ratio: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weight_sprune: f64,
    pub weight_iprune: f64,
    pub weight_coarse: f64,
    pub weight_fine: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            n_blocks: 4,
            pruning_variant: PruningVariant::Implicit,
            dics_from_block: 1,
            supervise: Supervise::Last,
            discard_after_prune: false,
            covis_mode: CovisMode::Bbox,
            iprune_labels: IPruneLabels::Covisible,
            d_c: 64,
            d_f: 32,
            heads: 1,
            tau_m: 0.1,
            theta_c: 0.2,
            w: 5,
            gumbel_tau: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            fine_sample_ratio: 0.3,
            lr: 1e-3,
            batch_size: 1,
            steps: 2000,
            seed: 0,
            weight_sprune: 0.5,
            weight_iprune: 0.3,
            weight_coarse: 1.0,
            weight_fine: 1.0,
        }
    }
}

impl PipelineConfig {
    /// No self-pruning and no interactive pruning.
    pub fn baseline() -> Self {
        Self {
            alpha: 1.0,
            dics_from_block: usize::MAX,
            ..Self::default()
        }
    }

    pub fn dics_enabled(&self) -> bool {
        self.dics_from_block <= self.n_blocks
    }

    /// Whether DICS runs after 1-based block `b`.
    pub fn dics_after(&self, b: usize) -> bool {
        b >= self.dics_from_block && b <= self.n_blocks
    }

    pub fn focal(&self) -> Focal {
        Focal {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            sprune: self.weight_sprune,
            iprune: self.weight_iprune,
            coarse: self.weight_coarse,
            fine: self.weight_fine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason| Err(Error::param(name, reason));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", "must lie in (0, 1]");
        }
        if self.n_blocks == 0 {
            return bad("n_blocks", "must be positive");
        }
        if self.dics_from_block == 0 {
            return bad("dics_from_block", "blocks are numbered from 1");
        }
        if self.d_c == 0 || self.d_c % 4 != 0 || self.d_f == 0 {
            return bad("d_c", "d_c must be a positive multiple of 4 and d_f positive");
        }
        if self.heads == 0 || self.d_c % self.heads != 0 {
            return bad("heads", "must divide d_c");
        }
        if !(self.tau_m > 0.0) {
            return bad("tau_m", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.theta_c) {
            return bad("theta_c", "must lie in [0, 1]");
        }
        if self.w == 0 || self.w % 2 == 0 {
            return bad("w", "must be odd");
        }
        if !(self.gumbel_tau > 0.0) {
            return bad("gumbel_tau", "must be positive");
        }
        if !(self.fine_sample_ratio > 0.0 && self.fine_sample_ratio <= 1.0) {
            return bad("fine_sample_ratio", "must lie in (0, 1]");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr", "learning rate must be positive and batch_size at least 1");
        }
        if !(self.focal_gamma >= 0.0 && self.focal_alpha > 0.0) {
            return bad("focal", "gamma must be non-negative and alpha positive");
        }
        Ok(())
    }
}

/// All trainable modules. Parameter order does not depend on any pruning
/// switch, so one checkpoint serves every ablation with the same dims.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub self_prune: SelfPruneHead,
    pub blocks: Vec<SelfCrossBlock>,
    /// One keep head applied after every pruning block. Under
    /// `supervise = last` per-block heads before the last one get no
    /// supervision and drift toward dropping everything.
    pub dics: DicsHead,
}

impl Model {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, rng, EncoderDims::new(cfg.d_c, cfg.d_f));
        let self_prune = SelfPruneHead::new(store, rng, cfg.d_c);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            blocks.push(SelfCrossBlock::new(store, rng, &alloc::format!("block{b}"), cfg.d_c, cfg.heads)?);
        }
        let dics = DicsHead::new(store, rng, "dics", cfg.d_c);
        Ok(Self {
            encoder,
            self_prune,
            blocks,
            dics,
        })
    }

    /// Fresh parameters from `cfg.seed`.
    pub fn init(cfg: &PipelineConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Self::new(&mut store, &mut rng, cfg)?;
        Ok((model, store))
    }
}

/// Candidate bookkeeping for one side at one point of the block stack.
#[derive(Debug, Clone)]
pub struct SideState {
    pub features: Var,
    /// Coarse cell of each current row.
    pub cells: Vec<usize>,
    /// Position of each current row in the initial candidate set.
    pub origin: Vec<usize>,
    pub mask: MaskVar,
}

impl SideState {
    /// Live flags over the initial candidate set.
    fn live_in_origin(&self, k: usize) -> Vec<bool> {
        let mut out = vec![false; k];
        for (row, &o) in self.origin.iter().enumerate() {
            out[o] = self.mask.mask.get(row);
        }
        out
    }
}

/// What one block saw and decided.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Live candidates entering the block's attention, per side.
    pub live_in: [usize; 2],
    /// Rows (live or masked) entering the block, per side.
    pub rows_in: [usize; 2],
    /// Masks after the block (and its DICS step) over the initial
    /// candidate set.
    pub mask_a: Vec<bool>,
    pub mask_b: Vec<bool>,
    /// DICS keep probabilities and the cells of their rows.
    pub dics: Option<DicsTrace>,
}

#[derive(Debug, Clone)]
pub struct DicsTrace {
    pub keep_prob_a: Var,
    pub keep_prob_b: Var,
    pub cells_a: Vec<usize>,
    pub cells_b: Vec<usize>,
    pub forced: [bool; 2],
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Self-pruning scores; `None` when α = 1 skips self-pruning.
    pub scores_a: Option<Var>,
    pub scores_b: Option<Var>,
    /// Coarse encoder output before positional encoding.
    pub coarse_a: FeatureGrid,
    pub coarse_b: FeatureGrid,
    pub coarse_height: usize,
    pub coarse_width: usize,
    /// Initial candidate count per side.
    pub k: [usize; 2],
    /// Cells kept by self-pruning, per side.
    pub selected_a: Vec<usize>,
    pub selected_b: Vec<usize>,
    pub blocks: Vec<BlockTrace>,
    pub final_a: SideState,
    pub final_b: SideState,
    pub confidence: Var,
    pub coarse: Vec<crate::matching::CoarseMatch>,
    pub fine_a: FeatureGrid,
    pub fine_b: FeatureGrid,
}

impl ForwardOutput {
    pub fn forced_keeps(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| b.dics.as_ref())
            .map(|d| d.forced.iter().filter(|&&f| f).count())
            .sum()
    }
}

/// Keeps only the live rows. Features are multiplied by the mask first
/// so a straight-through gradient still reaches the keep decision.
fn compact(g: &mut Graph, s: SideState) -> Result<SideState> {
    let keep = s.mask.mask.kept();
    if keep.len() == s.cells.len() && !g.requires_grad(s.mask.var) {
        return Ok(s);
    }
    let gated = g.mul_rows(s.features, s.mask.var)?;
    let features = g.gather_rows(gated, &keep)?;
    let cells = keep.iter().map(|&i| s.cells[i]).collect();
    let origin = keep.iter().map(|&i| s.origin[i]).collect();
    let mask = MaskVar::constant(g, PruneMask::ones(keep.len()));
    Ok(SideState {
        features,
        cells,
        origin,
        mask,
    })
}

fn trivial_mask(g: &Graph, m: &MaskVar) -> bool {
    m.mask.count() == m.mask.len() && !g.requires_grad(m.var)
}

/// Runs the matcher up to coarse matches. Train mode samples DICS
/// decisions from `rng`; eval mode is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn forward<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    cfg: &PipelineConfig,
    image_a: &Tensor,
    image_b: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput> {
    forward_observed(g, p, model, cfg, image_a, image_b, mode, rng, &mut |_| {})
}

/// Pipeline stages, reported to an observer as each one starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    SelfPrune,
    Block(usize),
    Dics(usize),
    Matching,
    Refinement,
    Done,
}

/// [`forward`] that calls `observe` at every stage boundary.
#[allow(clippy::too_many_arguments)]
pub fn forward_observed<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    cfg: &PipelineConfig,
    image_a: &Tensor,
    image_b: &Tensor,
    mode: Mode,
    rng: &mut R,
    observe: &mut dyn FnMut(Stage),
) -> Result<ForwardOutput> {
    cfg.validate()?;
    if model.blocks.len() != cfg.n_blocks || model.encoder.dims.d_coarse != cfg.d_c || model.encoder.dims.d_fine != cfg.d_f {
        return Err(Error::param("model", "does not match the config dimensions"));
    }
    let (h, w) = match image_a.shape.as_slice() {
        [h, w] => (*h, *w),
        s => return Err(Error::InputShape(alloc::format!("image must be [H, W], got {s:?}"))),
    };
    if image_b.shape != image_a.shape {
        return Err(Error::InputShape(alloc::format!("image shapes differ: {:?} vs {:?}", image_a.shape, image_b.shape)));
    }
    observe(Stage::Encoder);
    let ia = g.input(image_a.clone());
    let ib = g.input(image_b.clone());
    let (coarse_a, fine_a) = model.encoder.encode(g, p, ia, h, w)?;
    let (coarse_b, fine_b) = model.encoder.encode(g, p, ib, h, w)?;
    observe(Stage::SelfPrune);
    let pe_a = positional_encoding(g, coarse_a)?;
    let pe_b = positional_encoding(g, coarse_b)?;
    let (scores_a, scores_b, fa, cells_a, fb, cells_b) = if cfg.alpha >= 1.0 {
        // self-pruning off: every cell in grid order, no score modulation
        let all = (0..coarse_a.cells()).collect::<Vec<_>>();
        (None, None, pe_a.values, all.clone(), pe_b.values, all)
    } else {
        let sa = model.self_prune.score(g, p, &coarse_a)?;
        let sb = model.self_prune.score(g, p, &coarse_b)?;
        let ca = topk_select(g, &pe_a, sa, cfg.alpha, Side::A)?;
        let cb = topk_select(g, &pe_b, sb, cfg.alpha, Side::B)?;
        (Some(sa), Some(sb), ca.features, ca.grid_indices, cb.features, cb.grid_indices)
    };
    let k = [cells_a.len(), cells_b.len()];
    let (selected_a, selected_b) = (cells_a.clone(), cells_b.clone());
    let mut sa = SideState {
        features: fa,
        origin: (0..k[0]).collect(),
        mask: MaskVar::constant(g, PruneMask::ones(k[0])),
        cells: cells_a,
    };
    let mut sb = SideState {
        features: fb,
        origin: (0..k[1]).collect(),
        mask: MaskVar::constant(g, PruneMask::ones(k[1])),
        cells: cells_b,
    };
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for (b, block) in model.blocks.iter().enumerate() {
        observe(Stage::Block(b));
        let live_in = [sa.mask.mask.count(), sb.mask.mask.count()];
        let rows_in = [sa.cells.len(), sb.cells.len()];
        let (na, nb) = if trivial_mask(g, &sa.mask) && trivial_mask(g, &sb.mask) {
            self_cross_block_unmasked(g, p, block, sa.features, sb.features)?
        } else {
            self_cross_block(g, p, block, sa.features, sb.features, &sa.mask, &sb.mask, cfg.pruning_variant)?
        };
        sa.features = na;
        sb.features = nb;
        let mut trace = None;
        if cfg.dics_after(b + 1) {
            observe(Stage::Dics(b));
            let head = &model.dics;
            let da = dics(g, p, head, sa.features, &sa.mask, cfg.gumbel_tau, mode, rng)?;
            let db = dics(g, p, head, sb.features, &sb.mask, cfg.gumbel_tau, mode, rng)?;
            trace = Some(DicsTrace {
                keep_prob_a: da.keep_prob,
                keep_prob_b: db.keep_prob,
                cells_a: sa.cells.clone(),
                cells_b: sb.cells.clone(),
                forced: [da.forced, db.forced],
            });
            sa.mask = da.updated_mask;
            sb.mask = db.updated_mask;
            if cfg.discard_after_prune {
                sa = compact(g, sa)?;
                sb = compact(g, sb)?;
            }
        }
        blocks.push(BlockTrace {
            live_in,
            rows_in,
            mask_a: sa.live_in_origin(k[0]),
            mask_b: sb.live_in_origin(k[1]),
            dics: trace,
        });
    }
    observe(Stage::Matching);
    let (confidence, coarse) = coarse_match(
        g,
        sa.features,
        &sa.cells,
        &sa.mask.mask,
        sb.features,
        &sb.cells,
        &sb.mask.mask,
        cfg.tau_m,
        cfg.theta_c,
    )?;
    Ok(ForwardOutput {
        scores_a,
        scores_b,
        coarse_a,
        coarse_b,
        coarse_height: coarse_a.height,
        coarse_width: coarse_a.width,
        k,
        selected_a,
        selected_b,
        blocks,
        final_a: sa,
        final_b: sb,
        confidence,
        coarse,
        fine_a,
        fine_b,
    })
}

/// Coarse matches refined to pixel correspondences.
pub fn match_set(g: &mut Graph, out: &ForwardOutput, cfg: &PipelineConfig) -> Result<MatchSet> {
    let (fine, border_dropped) = refine_matches(g, &out.coarse, &out.fine_a, &out.fine_b, cfg.w)?;
    Ok(MatchSet {
        coarse: out.coarse.clone(),
        fine,
        confidence_matrix: g.value(out.confidence).clone(),
        border_dropped,
    })
}

/// Deterministic inference on one image pair.
pub fn predict(model: &Model, params: &ParamStore, cfg: &PipelineConfig, image_a: &Tensor, image_b: &Tensor) -> Result<(MatchSet, ForwardOutput)> {
    predict_observed(model, params, cfg, image_a, image_b, &mut |_| {})
}

/// [`predict`] with stage notifications, ending with [`Stage::Done`].
pub fn predict_observed(
    model: &Model,
    params: &ParamStore,
    cfg: &PipelineConfig,
    image_a: &Tensor,
    image_b: &Tensor,
    observe: &mut dyn FnMut(Stage),
) -> Result<(MatchSet, ForwardOutput)> {
    let mut g = Graph::inference();
    let p = params.bind(&mut g);
    // eval mode never draws from the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_observed(&mut g, &p, model, cfg, image_a, image_b, Mode::Eval, &mut rng, observe)?;
    observe(Stage::Refinement);
    let ms = match_set(&mut g, &out, cfg)?;
    observe(Stage::Done);
    Ok((ms, out))
}

fn labels_for(cells: &[usize], full: &[bool]) -> Vec<bool> {
    cells.iter().map(|&c| full[c]).collect()
}

/// Sub-pixel target for a ground-truth pair: the warped A anchor relative
/// to the B anchor, in fine cells.
fn fine_target(sample: &PairSample, cell_a: usize, cell_b: usize, wc: usize) -> Result<Option<[f64; 2]>> {
    let pa = coarse_center(cell_a, wc);
    let wp = warp_points(&[pa], &sample.depth_a, &sample.pose_ab, &sample.intrinsics_a, &sample.intrinsics_b)?[0];
    if !wp.visible {
        return Ok(None);
    }
    let pb = coarse_center(cell_b, wc);
    let s = FINE_STRIDE as f64;
    Ok(Some([(wp.point[0] - pb[0]) / s, (wp.point[1] - pb[1]) / s]))
}

/// Forward pass plus every loss term on one sample.
pub fn sample_loss<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    cfg: &PipelineConfig,
    sample: &PairSample,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, LossReport, ForwardOutput)> {
    let out = forward(g, p, model, cfg, &sample.image_a, &sample.image_b, mode, rng)?;
    let focal = cfg.focal();

    let valid_a = depth_validity(&sample.depth_a)?;
    let valid_b = depth_validity(&sample.depth_b)?;
    // α = 1 skips scoring at inference; the head is still trained
    let scores_a = match out.scores_a {
        Some(s) => s,
        None => model.self_prune.score(g, p, &out.coarse_a)?,
    };
    let scores_b = match out.scores_b {
        Some(s) => s,
        None => model.self_prune.score(g, p, &out.coarse_b)?,
    };
    let l_s = self_prune_loss(g, scores_a, &valid_a, scores_b, &valid_b)?;

    let steps: Vec<&DicsTrace> = out.blocks.iter().filter_map(|b| b.dics.as_ref()).collect();
    let supervised: Vec<&DicsTrace> = match cfg.supervise {
        Supervise::Last => steps.last().copied().into_iter().collect(),
        Supervise::All => steps,
    };
    let mut iprune_candidates = 0;
    let l_i = if supervised.is_empty() {
        g.input(Tensor::scalar(0.0))
    } else {
        let mut acc: Option<Var> = None;
        for t in &supervised {
            let (la, lb) = match cfg.iprune_labels {
                IPruneLabels::Covisible => covisible_labels(sample, &t.cells_a, &t.cells_b, cfg.covis_mode)?,
                IPruneLabels::DepthValidity => (labels_for(&t.cells_a, &valid_a), labels_for(&t.cells_b, &valid_b)),
            };
            iprune_candidates += la.len() + lb.len();
            let l = interactive_prune_loss(g, t.keep_prob_a, &la, t.keep_prob_b, &lb, focal)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        let sum = acc.expect("non-empty");
        g.scale(sum, 1.0 / supervised.len() as f64)
    };

    // Positives on pruned rows stay in the target. Their confidence is zero,
    // so each one costs the clamped constant; zeroing them instead makes
    // pruning every true match a zero-loss optimum.
    let gt = gt_coarse_assignment(sample, &out.final_a.cells, &out.final_b.cells)?;
    let (l_c, coarse_positives) = coarse_matching_loss(g, out.confidence, &gt, focal)?;

    // fine supervision on a seeded subset of the ground-truth pairs that
    // survived self-pruning
    let mut in_a = vec![false; out.coarse_a.cells()];
    let mut in_b = vec![false; out.coarse_b.cells()];
    out.selected_a.iter().for_each(|&c| in_a[c] = true);
    out.selected_b.iter().for_each(|&c| in_b[c] = true);
    let mut pairs: Vec<(usize, usize)> = gt_cell_pairs(sample)?.into_iter().filter(|&(a, b)| in_a[a] && in_b[b]).collect();
    let n_fine = (math::ceil(pairs.len() as f64 * cfg.fine_sample_ratio) as usize).min(pairs.len());
    if n_fine < pairs.len() {
        pairs.shuffle(rng);
        pairs.truncate(n_fine);
        pairs.sort_unstable();
    }
    let refinement = fine_refine(g, &pairs, &out.fine_a, &out.fine_b, cfg.w)?;
    let wc = out.coarse_width;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut variance = Vec::new();
    for (row, &n) in refinement.kept.iter().enumerate() {
        let (ca, cb) = pairs[n];
        if let Some(t) = fine_target(sample, ca, cb, wc)? {
            let half = (cfg.w / 2) as f64;
            if t[0].abs() <= half && t[1].abs() <= half {
                rows.push(row);
                targets.push(t);
                variance.push(refinement.variance[row]);
            }
        }
    }
    let l_f = if rows.is_empty() {
        g.input(Tensor::scalar(0.0))
    } else {
        let off = g.gather_rows(refinement.offsets, &rows)?;
        fine_loss(g, off, &targets, &variance, VARIANCE_FLOOR)?
    };

    let (total, mut report) = total_loss(
        g,
        LossTerms {
            sprune: l_s,
            iprune: l_i,
            coarse: l_c,
            fine: l_f,
        },
        cfg.weights(),
    )?;
    report.sprune_cells = valid_a.len() + valid_b.len();
    report.iprune_candidates = iprune_candidates;
    report.coarse_positives = coarse_positives;
    report.fine_matches = targets.len();
    Ok((total, report, out))
}

/// Gradient-descent driver over a synthetic stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: PipelineConfig,
    pub scene: SceneConfig,
    pub model: Model,
    pub params: ParamStore,
    optimizer: RmsProp,
    rng: ChaCha8Rng,
    step: usize,
}

/// One optimizer step's averaged losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: LossReport,
    pub forced_keeps: usize,
}

impl Trainer {
    pub fn new(config: PipelineConfig, scene: SceneConfig) -> Result<Self> {
        scene.validate()?;
        let (model, params) = Model::init(&config)?;
        Self::from_params(config, scene, model, params)
    }

    pub fn from_params(config: PipelineConfig, scene: SceneConfig, model: Model, params: ParamStore) -> Result<Self> {
        let optimizer = RmsProp::new(
            RmsPropConfig {
                lr: config.lr,
                ..RmsPropConfig::default()
            },
            &params,
        )?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_d1c5),
            config,
            scene,
            model,
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Training pair `i` of step `s` uses scene seed `scene.seed + s·B + i`.
    pub fn sample_for(&self, step: usize, i: usize) -> Result<PairSample> {
        let ds = Dataset::new(self.scene, usize::MAX)?;
        ds.get(step * self.config.batch_size + i)
    }

    /// Loss of the current parameters on step `step`'s batch, eval-mode
    /// masks, no update.
    pub fn evaluate_loss(&self, step: usize) -> Result<LossReport> {
        let mut acc = LossReport::default();
        let b = self.config.batch_size;
        for i in 0..b {
            let sample = self.sample_for(step, i)?;
            let mut g = Graph::inference();
            let p = self.params.bind(&mut g);
            let mut rng = ChaCha8Rng::seed_from_u64(step as u64);
            let (_, r, _) = sample_loss(&mut g, &p, &self.model, &self.config, &sample, Mode::Eval, &mut rng)?;
            accumulate(&mut acc, &r, b);
        }
        Ok(acc)
    }

    /// One update on a fresh batch.
    pub fn step(&mut self) -> Result<StepReport> {
        let b = self.config.batch_size;
        let mut acc = LossReport::default();
        let mut grads: Option<Vec<Vec<f64>>> = None;
        let mut forced = 0;
        for i in 0..b {
            let sample = self.sample_for(self.step, i)?;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let (total, r, out) = sample_loss(&mut g, &p, &self.model, &self.config, &sample, Mode::Train, &mut self.rng)?;
            if !r.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            forced += out.forced_keeps();
            g.backward(total)?;
            let gr = self.params.grads(&g, &p);
            match grads.as_mut() {
                None => grads = Some(gr),
                Some(acc_g) => {
                    for (a, x) in acc_g.iter_mut().zip(&gr) {
                        for (ai, xi) in a.iter_mut().zip(x) {
                            *ai += xi;
                        }
                    }
                }
            }
            accumulate(&mut acc, &r, b);
        }
        let mut grads = grads.expect("batch_size >= 1");
        if b > 1 {
            grads.iter_mut().flatten().for_each(|v| *v /= b as f64);
        }
        self.optimizer.step(&mut self.params, &grads)?;
        let report = StepReport {
            step: self.step,
            loss: acc,
            forced_keeps: forced,
        };
        self.step += 1;
        Ok(report)
    }
}

fn accumulate(acc: &mut LossReport, r: &LossReport, b: usize) {
    let s = 1.0 / b as f64;
    acc.l_sprune += r.l_sprune * s;
    acc.l_iprune += r.l_iprune * s;
    acc.l_coarse += r.l_coarse * s;
    acc.l_fine += r.l_fine * s;
    acc.total += r.total * s;
    acc.sprune_cells += r.sprune_cells;
    acc.iprune_candidates += r.iprune_candidates;
    acc.coarse_positives += r.coarse_positives;
    acc.fine_matches += r.fine_matches;
}

/// Per-pair evaluation record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PairMetrics {
    /// Max corner error; infinite when fewer than four matches survive or
    /// the sample has no homography.
    pub corner_error: f64,
    pub coarse_matches: usize,
    pub fine_matches: usize,
    /// Coarse matches whose A and B cells coincide.
    pub identity_matches: usize,
    /// Fine matches within 3 px of the true correspondence.
    pub precise_matches: usize,
    /// Fine matches with a ground-truth correspondence.
    pub checked_matches: usize,
    pub live_per_block: Vec<[usize; 2]>,
    pub final_live: [usize; 2],
    pub forced_keeps: usize,
    /// Executed FLOPs of the whole pass and of its self/cross blocks.
    pub flops: u64,
    pub sc_flops: u64,
}

/// Runs inference on one sample and scores it against the ground truth.
pub fn evaluate_pair(model: &Model, params: &ParamStore, cfg: &PipelineConfig, sample: &PairSample) -> Result<PairMetrics> {
    let (ms, out) = predict(model, params, cfg, &sample.image_a, &sample.image_b)?;
    let (h, w) = (sample.height(), sample.width());
    let cost = count_flops(cfg, &Workload::from_forward(&out, h, w), params.count());
    let src: Vec<[f64; 2]> = ms.fine.iter().map(|m| m.point_a).collect();
    let dst: Vec<[f64; 2]> = ms.fine.iter().map(|m| m.point_b).collect();
    let corner_error = match (&sample.homography, fit_homography(&src, &dst)) {
        (Some(truth), Ok(est)) => max_corner_error(&est, truth, h, w),
        _ => f64::INFINITY,
    };
    let truth_pts: Vec<Option<[f64; 2]>> = match &sample.homography {
        Some(hm) => src.iter().map(|p| apply_homography(hm, *p)).collect(),
        None => warp_points(&src, &sample.depth_a, &sample.pose_ab, &sample.intrinsics_a, &sample.intrinsics_b)?
            .iter()
            .map(|wp| wp.visible.then_some(wp.point))
            .collect(),
    };
    let mut precise = 0;
    let mut checked = 0;
    for (m, t) in ms.fine.iter().zip(&truth_pts) {
        if let Some(t) = t {
            checked += 1;
            let (dx, dy) = (m.point_b[0] - t[0], m.point_b[1] - t[1]);
            let e = math::sqrt(dx * dx + dy * dy);
            if e <= 3.0 {
                precise += 1;
            }
        }
    }
    Ok(PairMetrics {
        corner_error,
        coarse_matches: ms.coarse.len(),
        fine_matches: ms.fine.len(),
        identity_matches: ms.coarse.iter().filter(|m| m.cell_a == m.cell_b).count(),
        precise_matches: precise,
        checked_matches: checked,
        live_per_block: out.blocks.iter().map(|b| b.live_in).collect(),
        final_live: [out.final_a.mask.mask.count(), out.final_b.mask.mask.count()],
        forced_keeps: out.forced_keeps(),
        flops: cost.total,
        sc_flops: cost.sc_total(),
    })
}

/// Aggregate metrics over evaluated pairs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct EvalSummary {
    pub pairs: usize,
    pub auc_3: f64,
    pub auc_5: f64,
    pub auc_10: f64,
    pub precision_3px: f64,
    pub identity_fraction: f64,
    pub mean_coarse_matches: f64,
    pub mean_fine_matches: f64,
    pub mean_live_per_block: Vec<f64>,
    pub mean_final_live: f64,
    pub failures: usize,
    pub mean_flops: f64,
    pub mean_sc_flops: f64,
}

pub fn summarize(metrics: &[PairMetrics]) -> EvalSummary {
    let n = metrics.len().max(1) as f64;
    let errors: Vec<f64> = metrics.iter().map(|m| m.corner_error).collect();
    let coarse: usize = metrics.iter().map(|m| m.coarse_matches).sum();
    let ident: usize = metrics.iter().map(|m| m.identity_matches).sum();
    let checked: usize = metrics.iter().map(|m| m.checked_matches).sum();
    let precise: usize = metrics.iter().map(|m| m.precise_matches).sum();
    let blocks = metrics.iter().map(|m| m.live_per_block.len()).max().unwrap_or(0);
    let mean_live_per_block = (0..blocks)
        .map(|b| {
            metrics
                .iter()
                .filter_map(|m| m.live_per_block.get(b))
                .map(|l| (l[0] + l[1]) as f64 / 2.0)
                .sum::<f64>()
                / n
        })
        .collect();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    EvalSummary {
        pairs: metrics.len(),
        auc_3: error_auc(&errors, 3.0),
        auc_5: error_auc(&errors, 5.0),
        auc_10: error_auc(&errors, 10.0),
        precision_3px: ratio(precise, checked),
        identity_fraction: ratio(ident, coarse),
        mean_coarse_matches: coarse as f64 / n,
        mean_fine_matches: metrics.iter().map(|m| m.fine_matches).sum::<usize>() as f64 / n,
        mean_live_per_block,
        mean_final_live: metrics.iter().map(|m| (m.final_live[0] + m.final_live[1]) as f64 / 2.0).sum::<f64>() / n,
        mean_flops: metrics.iter().map(|m| m.flops as f64).sum::<f64>() / n,
        mean_sc_flops: metrics.iter().map(|m| m.sc_flops as f64).sum::<f64>() / n,
        failures: errors.iter().filter(|e| !e.is_finite()).count(),
    }
}
