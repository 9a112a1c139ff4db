//! Closed-form FLOP accounting.
//!
//! Counting rules: a multiply-add is 2 FLOPs; every elementwise activation,
//! mask multiply, normalization step and softmax step costs 1 per element.
//! Gathers, scatters and concatenations move data and cost nothing.

use alloc::vec::Vec;

use crate::attention::PruningVariant;
use crate::encoder::EncoderDims;
use crate::error::Result;
use crate::math;
use crate::pipeline::{ForwardOutput, PipelineConfig};
use crate::pruning::selection_count;

/// LayerNorm per element: mean, centre, square, variance, scale, affine (2).
const LAYER_NORM_PER_ELEM: u64 = 7;
/// Softmax per element: max-subtract, exp, sum, divide.
const SOFTMAX_PER_ELEM: u64 = 4;

/// Candidate counts seen by one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockLoad {
    /// Feature rows carried per side (live and masked).
    pub rows: [usize; 2],
    /// Live candidates per side.
    pub live: [usize; 2],
    /// Whether the block runs its masked form.
    pub masked: bool,
    /// Whether a DICS head follows the block.
    pub dics: bool,
}

/// Everything the counter needs about one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Workload {
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<BlockLoad>,
    /// Rows entering dual-softmax per side.
    pub matching_rows: [usize; 2],
    /// Coarse matches sent to refinement.
    pub matches: usize,
}

impl Workload {
    /// Nominal load: self-pruning keeps `round(cells·α)` per side, DICS
    /// keeps `keep_fraction` of the live set after each step it runs, and
    /// `matches` coarse matches are refined.
    pub fn nominal(cfg: &PipelineConfig, height: usize, width: usize, keep_fraction: f64, matches: usize) -> Result<Self> {
        let cells = (height / 8) * (width / 8);
        let k = if cfg.alpha >= 1.0 { cells } else { selection_count(cells, cfg.alpha)? };
        let mut live = k;
        let mut rows = k;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 1..=cfg.n_blocks {
            blocks.push(BlockLoad {
                rows: [rows; 2],
                live: [live; 2],
                masked: live < rows,
                dics: cfg.dics_after(b),
            });
            if cfg.dics_after(b) {
                live = (math::round(live as f64 * keep_fraction) as usize).clamp(1, live);
                if cfg.discard_after_prune {
                    rows = live;
                }
            }
        }
        let matches = matches.min(live);
        Ok(Self {
            height,
            width,
            blocks,
            matching_rows: [rows; 2],
            matches,
        })
    }

    /// Load actually executed by a traced forward pass.
    pub fn from_forward(out: &ForwardOutput, height: usize, width: usize) -> Self {
        let blocks = out
            .blocks
            .iter()
            .map(|b| BlockLoad {
                rows: b.rows_in,
                live: b.live_in,
                masked: b.live_in != b.rows_in,
                dics: b.dics.is_some(),
            })
            .collect();
        Self {
            height,
            width,
            blocks,
            matching_rows: [out.final_a.cells.len(), out.final_b.cells.len()],
            matches: out.coarse.len(),
        }
    }
}

/// Per-stage FLOPs of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostReport {
    pub encoder: u64,
    pub self_prune: u64,
    pub positional: u64,
    /// Self/cross attention per block.
    pub sc_blocks: Vec<u64>,
    /// Mask multiplies of the implicit variant.
    pub masking: u64,
    pub dics: u64,
    pub matching: u64,
    pub refinement: u64,
    pub total: u64,
    pub parameters: u64,
    pub peak_live: Vec<usize>,
}

impl CostReport {
    pub fn sc_total(&self) -> u64 {
        self.sc_blocks.iter().sum()
    }

    fn stages_sum(&self) -> u64 {
        self.encoder + self.self_prune + self.positional + self.sc_total() + self.masking + self.dics + self.matching + self.refinement
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

fn linear(n: usize, d_in: usize, d_out: usize, bias: bool) -> u64 {
    u(n) * u(d_out) * (2 * u(d_in) + u64::from(bias))
}

fn conv(h_out: usize, w_out: usize, c_in: usize, c_out: usize, k: usize) -> u64 {
    u(h_out * w_out) * u(c_out) * (2 * u(k * k * c_in) + 1)
}

/// Normalized linear attention with `n_q` queries over `n_k` keys, split
/// into `heads` heads of width `d/heads`. Feature maps included.
pub fn linear_attention_flops(n_q: usize, n_k: usize, d: usize, heads: usize) -> u64 {
    let (nq, nk, d) = (u(n_q), u(n_k), u(d));
    let hd = d / u(heads.max(1));
    let phi = 2 * (nq + nk) * d;
    let kv = 2 * nk * hd * hd * u(heads.max(1));
    let ksum = nk * d;
    let num = 2 * nq * hd * hd * u(heads.max(1));
    let den = 2 * nq * d;
    let div = nq * d;
    phi + kv + ksum + num + den + div
}

/// One attention sublayer with its projections, feed-forward, norms and
/// residual.
pub fn attention_layer_flops(n_q: usize, n_k: usize, d: usize, heads: usize) -> u64 {
    let proj = linear(n_q, d, d, false) + 2 * linear(n_k, d, d, false);
    let merge = linear(n_q, d, d, false);
    let norms = 2 * u(n_q * d) * LAYER_NORM_PER_ELEM;
    let mlp = linear(n_q, 2 * d, 2 * d, false) + u(n_q * 2 * d) + linear(n_q, 2 * d, d, false);
    let residual = u(n_q * d);
    proj + linear_attention_flops(n_q, n_k, d, heads) + merge + norms + mlp + residual
}

/// Self then cross attention on both sides, `n` query rows and `n` key
/// rows per side.
pub fn sc_block_flops(n: [usize; 2], d: usize, heads: usize) -> u64 {
    let [a, b] = n;
    attention_layer_flops(a, a, d, heads)
        + attention_layer_flops(b, b, d, heads)
        + attention_layer_flops(a, b, d, heads)
        + attention_layer_flops(b, a, d, heads)
}

/// Elementwise mask products one implicit block adds on top of the
/// full-size computation.
fn implicit_mask_flops(rows: [usize; 2], d: usize) -> u64 {
    let [a, b] = rows;
    // per layer: masked φ(K) and V (keys), masked output and message (queries)
    let layer = |nq: usize, nk: usize| u(2 * nk * d + 2 * nq * d);
    layer(a, a) + layer(b, b) + layer(a, b) + layer(b, a)
}

pub fn encoder_flops(dims: EncoderDims, height: usize, width: usize) -> u64 {
    let (h2, w2) = (height / 2, width / 2);
    let (h4, w4) = (height / 4, width / 4);
    let (h8, w8) = (height / 8, width / 8);
    let convs = conv(h2, w2, 1, dims.stem, 3)
        + conv(h4, w4, dims.stem, dims.mid, 3)
        + conv(h8, w8, dims.mid, dims.d_coarse, 3)
        + conv(h8, w8, dims.d_coarse, dims.d_coarse, 3);
    let relus = u(h2 * w2 * dims.stem + h4 * w4 * dims.mid + h8 * w8 * dims.d_coarse);
    let laterals = linear(h2 * w2, dims.stem, dims.d_fine, true) + linear(h8 * w8, dims.d_coarse, dims.d_fine, false);
    let merge = u(h2 * w2 * dims.d_fine);
    convs + relus + laterals + merge
}

fn mlp_head_flops(n: usize, d: usize, out: usize) -> u64 {
    let hidden = (d / 2).max(1);
    linear(n, d, hidden, true) + u(n * hidden) + linear(n, hidden, out, true)
}

/// FLOPs of the configured pipeline under `load`.
pub fn count_flops(cfg: &PipelineConfig, load: &Workload, parameters: usize) -> CostReport {
    let d = cfg.d_c;
    let cells = (load.height / 8) * (load.width / 8);
    let dims = EncoderDims::new(cfg.d_c, cfg.d_f);
    let encoder = 2 * encoder_flops(dims, load.height, load.width);
    let (self_prune, positional) = if cfg.alpha >= 1.0 {
        (0, 2 * u(cells * d))
    } else {
        let k = load.blocks.first().map_or(cells, |b| b.rows[0]);
        // score MLP and sigmoid on every cell, modulation of the kept rows
        (2 * (mlp_head_flops(cells, d, 1) + u(cells) + u(k * d)), 2 * u(cells * d))
    };
    let mut sc_blocks = Vec::with_capacity(load.blocks.len());
    let mut masking = 0;
    let mut dics = 0;
    let mut peak_live = Vec::with_capacity(load.blocks.len());
    for b in &load.blocks {
        peak_live.push(b.live[0].max(b.live[1]));
        let n = match (b.masked, cfg.pruning_variant) {
            (true, PruningVariant::Direct) => b.live,
            _ => b.rows,
        };
        sc_blocks.push(sc_block_flops(n, d, cfg.heads));
        if b.masked && cfg.pruning_variant == PruningVariant::Implicit {
            masking += implicit_mask_flops(b.rows, d);
        }
        if b.dics {
            for &r in &b.rows {
                // norm, MLP, 2-way softmax, argmax and the mask AND
                dics += u(r * d) * LAYER_NORM_PER_ELEM + mlp_head_flops(r, d, 2) + u(2 * r) * SOFTMAX_PER_ELEM + 2 * u(r);
            }
        }
    }
    let [ra, rb] = load.matching_rows;
    let sim = u(ra * rb) * (2 * u(d) + 1);
    // row and column softmax, their product, mutual check and threshold
    let matching = sim + 2 * u(ra * rb) * SOFTMAX_PER_ELEM + u(ra * rb) + 3 * u(ra * rb);
    let ww = u(cfg.w * cfg.w);
    // correlation, scaling, softmax, first and second moments
    let refinement = u(load.matches) * (ww * 2 * u(cfg.d_f) + ww + ww * SOFTMAX_PER_ELEM + ww * 8);
    let mut r = CostReport {
        encoder,
        self_prune,
        positional,
        sc_blocks,
        masking,
        dics,
        matching,
        refinement,
        total: 0,
        parameters: u(parameters),
        peak_live,
    };
    r.total = r.stages_sum();
    r
}
