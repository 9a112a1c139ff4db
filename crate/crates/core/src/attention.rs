//! Attention kernels and the masked self/cross transformer block.
//!
//! All kernels take `Q, K, V` as `[N×d]` graph values. The linear kernels
//! use `φ(x) = elu(x) + 1` and normalize every query row by
//! `φ(q)·Σ_j φ(k_j)`, summing over kept keys only in the masked variants,
//! so that implicit masking and direct compaction agree on kept rows.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::nn::{Bound, LayerNorm, Linear, ParamStore};
use crate::tensor::Tensor;

/// A binary keep mask over `N` candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    values: Tensor,
}

impl PruneMask {
    pub fn ones(n: usize) -> Self {
        Self {
            values: Tensor::full(&[n], 1.0),
        }
    }

    pub fn from_bools(keep: &[bool]) -> Self {
        let data = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Self {
            values: Tensor::from_parts(alloc::vec![keep.len()], data),
        }
    }

    /// Fails unless every entry is exactly 0 or 1.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::param("mask", alloc::format!("entry {v} is not 0 or 1")));
        }
        Ok(Self {
            values: Tensor::from_parts(alloc::vec![values.len()], values.to_vec()),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, i: usize) -> bool {
        self.values.data[i] == 1.0
    }

    pub fn count(&self) -> usize {
        self.values.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.get(i)).collect()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// `self ≤ other` entrywise.
    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.len() == other.len() && (0..self.len()).all(|i| !self.get(i) || other.get(i))
    }
}

/// A mask living in a graph. The value is binary; its gradient (if any)
/// comes from a straight-through estimator upstream.
#[derive(Debug, Clone)]
pub struct MaskVar {
    pub var: Var,
    pub mask: PruneMask,
}

impl MaskVar {
    pub fn constant(g: &mut Graph, mask: PruneMask) -> Self {
        let var = g.input(mask.values.clone());
        Self { var, mask }
    }

    pub fn from_var(g: &Graph, var: Var) -> Result<Self> {
        let mask = PruneMask::from_values(g.data(var))?;
        Ok(Self { var, mask })
    }
}

fn check_qkv(g: &Graph, op: &'static str, q: Var, k: Var, v: Var) -> Result<(usize, usize)> {
    let (nq, dq) = g.value(q).dims2();
    let (nk, dk) = g.value(k).dims2();
    let (nv, _) = g.value(v).dims2();
    if dq != dk {
        return Err(Error::Dimension {
            op,
            left: g.shape(q).to_vec(),
            right: g.shape(k).to_vec(),
        });
    }
    if nk != nv {
        return Err(Error::Dimension {
            op,
            left: g.shape(k).to_vec(),
            right: g.shape(v).to_vec(),
        });
    }
    Ok((nq, nk))
}

/// `softmax(QKᵀ) V`
pub fn vanilla_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv(g, "vanilla_attention", q, k, v)?;
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let w = g.softmax(logits, Axis::Rows);
    g.matmul(w, v)
}

/// `φ(Q)(φ(K)ᵀV)` normalized row-wise by `φ(Q)(φ(K)ᵀ𝟙)`.
pub fn linear_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv(g, "linear_attention", q, k, v)?;
    let fq = g.elu_plus_one(q);
    let fk = g.elu_plus_one(k);
    normalized_kernel(g, fq, fk, v)
}

fn normalized_kernel(g: &mut Graph, fq: Var, fk: Var, v: Var) -> Result<Var> {
    let fkt = g.transpose(fk);
    let kv = g.matmul(fkt, v)?; // d×d_v
    let num = g.matmul(fq, kv)?;
    let ksum = g.sum_axis(fk, Axis::Rows); // 1×d
    let ksum = g.transpose(ksum); // d×1
    let den = g.matmul(fq, ksum)?;
    g.div_rows(num, den)
}

/// Linear attention with pruned keys zeroed out of both the aggregate and
/// the normalizer, and pruned query rows set to zero. Output stays `[N×d]`.
pub fn implicit_pruning_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    m_q: &MaskVar,
    m_kv: &MaskVar,
) -> Result<Var> {
    let (nq, nk) = check_qkv(g, "implicit_pruning_attention", q, k, v)?;
    if m_q.mask.len() != nq || m_kv.mask.len() != nk {
        return Err(Error::Dimension {
            op: "implicit_pruning_attention",
            left: alloc::vec![nq, nk],
            right: alloc::vec![m_q.mask.len(), m_kv.mask.len()],
        });
    }
    if m_kv.mask.count() == 0 {
        return Err(Error::DegenerateMask("implicit_pruning_attention"));
    }
    let fq = g.elu_plus_one(q);
    let fk = g.elu_plus_one(k);
    let fk = g.mul_rows(fk, m_kv.var)?;
    let vm = g.mul_rows(v, m_kv.var)?;
    let out = normalized_kernel(g, fq, fk, vm)?;
    g.mul_rows(out, m_q.var)
}

/// Linear attention on the kept rows only. Returns the compacted output
/// and the kept query indices for [`scatter_back`].
pub fn direct_pruning_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    m_q: &PruneMask,
    m_kv: &PruneMask,
) -> Result<(Var, Vec<usize>)> {
    let (nq, nk) = check_qkv(g, "direct_pruning_attention", q, k, v)?;
    if m_q.len() != nq || m_kv.len() != nk {
        return Err(Error::Dimension {
            op: "direct_pruning_attention",
            left: alloc::vec![nq, nk],
            right: alloc::vec![m_q.len(), m_kv.len()],
        });
    }
    let qi = m_q.kept();
    let ki = m_kv.kept();
    if qi.is_empty() || ki.is_empty() {
        return Err(Error::EmptySelection("direct_pruning_attention"));
    }
    let qs = g.gather_rows(q, &qi)?;
    let ks = g.gather_rows(k, &ki)?;
    let vs = g.gather_rows(v, &ki)?;
    let out = linear_attention(g, qs, ks, vs)?;
    Ok((out, qi))
}

/// Writes compacted rows back to their original positions over `carry`.
pub fn scatter_back(g: &mut Graph, compact: Var, indices: &[usize], carry: Var) -> Result<Var> {
    if indices.is_empty() {
        return Err(Error::EmptySelection("scatter_back"));
    }
    g.scatter_rows(compact, indices, carry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PruningVariant {
    Implicit,
    Direct,
}

/// Which kernel a layer runs. `Unmasked` is the plain linear-attention
/// baseline block.
#[derive(Debug, Clone, Copy)]
enum Kernel<'a> {
    Unmasked,
    Implicit(&'a MaskVar, &'a MaskVar),
}

/// One attention sublayer: projections, merge, norm, and the two-layer
/// feed-forward on `[x, message]`.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub dim: usize,
    pub heads: usize,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    merge: Linear,
    norm1: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    norm2: LayerNorm,
}

impl AttentionLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::param("heads", "must divide the feature dimension"));
        }
        let n = |s: &str| alloc::format!("{name}.{s}");
        Ok(Self {
            dim,
            heads,
            q_proj: Linear::new(store, rng, &n("q"), dim, dim, false),
            k_proj: Linear::new(store, rng, &n("k"), dim, dim, false),
            v_proj: Linear::new(store, rng, &n("v"), dim, dim, false),
            merge: Linear::new(store, rng, &n("merge"), dim, dim, false),
            norm1: LayerNorm::new(store, &n("norm1"), dim),
            mlp1: Linear::new(store, rng, &n("mlp1"), 2 * dim, 2 * dim, false),
            mlp2: Linear::new(store, rng, &n("mlp2"), 2 * dim, dim, false),
            norm2: LayerNorm::new(store, &n("norm2"), dim),
        })
    }

    fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, kernel: Kernel<'_>) -> Result<Var> {
        let run = |g: &mut Graph, q, k, v| match kernel {
            Kernel::Unmasked => linear_attention(g, q, k, v),
            Kernel::Implicit(mq, mkv) => implicit_pruning_attention(g, q, k, v, mq, mkv),
        };
        if self.heads == 1 {
            return run(g, q, k, v);
        }
        let hd = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            outs.push(run(g, qh, kh, vh)?);
        }
        g.concat_cols(&outs)
    }

    /// The residual-branch message for queries `x` attending to `src`.
    fn message(&self, g: &mut Graph, p: &Bound, x: Var, src: Var, kernel: Kernel<'_>) -> Result<Var> {
        let q = self.q_proj.forward(g, p, x)?;
        let k = self.k_proj.forward(g, p, src)?;
        let v = self.v_proj.forward(g, p, src)?;
        let att = self.attend(g, q, k, v, kernel)?;
        let m = self.merge.forward(g, p, att)?;
        let m = self.norm1.forward(g, p, m)?;
        let cat = g.concat_cols(&[x, m])?;
        let h = self.mlp1.forward(g, p, cat)?;
        let h = g.relu(h);
        let m = self.mlp2.forward(g, p, h)?;
        self.norm2.forward(g, p, m)
    }

    pub fn forward_unmasked(&self, g: &mut Graph, p: &Bound, x: Var, src: Var) -> Result<Var> {
        let m = self.message(g, p, x, src, Kernel::Unmasked)?;
        g.add(x, m)
    }

    /// Implicit pruning: every slot is kept, pruned queries receive a zero
    /// message and so carry their features forward unchanged.
    pub fn forward_implicit(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        src: Var,
        m_x: &MaskVar,
        m_src: &MaskVar,
    ) -> Result<Var> {
        let m = self.message(g, p, x, src, Kernel::Implicit(m_x, m_src))?;
        let m = g.mul_rows(m, m_x.var)?;
        g.add(x, m)
    }

    /// Direct pruning: the layer runs on compacted kept rows and the result
    /// is scattered back over `x`.
    pub fn forward_direct(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        src: Var,
        m_x: &PruneMask,
        m_src: &PruneMask,
    ) -> Result<Var> {
        let qi = m_x.kept();
        let ki = m_src.kept();
        if qi.is_empty() || ki.is_empty() {
            return Err(Error::EmptySelection("direct_pruning_attention"));
        }
        let xs = g.gather_rows(x, &qi)?;
        let ss = g.gather_rows(src, &ki)?;
        let m = self.message(g, p, xs, ss, Kernel::Unmasked)?;
        let y = g.add(xs, m)?;
        scatter_back(g, y, &qi, x)
    }
}

/// Self-attention followed by cross-attention, shared across both images.
/// Both sides of each sublayer read the features from before that sublayer.
#[derive(Debug, Clone)]
pub struct SelfCrossBlock {
    pub self_attn: AttentionLayer,
    pub cross_attn: AttentionLayer,
}

impl SelfCrossBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionLayer::new(store, rng, &alloc::format!("{name}.self"), dim, heads)?,
            cross_attn: AttentionLayer::new(store, rng, &alloc::format!("{name}.cross"), dim, heads)?,
        })
    }
}

fn check_pair(g: &Graph, f_a: Var, f_b: Var) -> Result<()> {
    if g.value(f_a).cols() != g.value(f_b).cols() {
        return Err(Error::Dimension {
            op: "self_cross_block",
            left: g.shape(f_a).to_vec(),
            right: g.shape(f_b).to_vec(),
        });
    }
    Ok(())
}

/// Masked self/cross block. `variant` picks implicit masking or direct
/// compaction with scatter-back.
#[allow(clippy::too_many_arguments)]
pub fn self_cross_block(
    g: &mut Graph,
    p: &Bound,
    block: &SelfCrossBlock,
    f_a: Var,
    f_b: Var,
    m_a: &MaskVar,
    m_b: &MaskVar,
    variant: PruningVariant,
) -> Result<(Var, Var)> {
    check_pair(g, f_a, f_b)?;
    match variant {
        PruningVariant::Implicit => {
            let sa = block.self_attn.forward_implicit(g, p, f_a, f_a, m_a, m_a)?;
            let sb = block.self_attn.forward_implicit(g, p, f_b, f_b, m_b, m_b)?;
            let ca = block.cross_attn.forward_implicit(g, p, sa, sb, m_a, m_b)?;
            let cb = block.cross_attn.forward_implicit(g, p, sb, sa, m_b, m_a)?;
            Ok((ca, cb))
        }
        PruningVariant::Direct => {
            let (ma, mb) = (&m_a.mask, &m_b.mask);
            let sa = block.self_attn.forward_direct(g, p, f_a, f_a, ma, ma)?;
            let sb = block.self_attn.forward_direct(g, p, f_b, f_b, mb, mb)?;
            let ca = block.cross_attn.forward_direct(g, p, sa, sb, ma, mb)?;
            let cb = block.cross_attn.forward_direct(g, p, sb, sa, mb, ma)?;
            Ok((ca, cb))
        }
    }
}

/// The unpruned baseline block.
pub fn self_cross_block_unmasked(
    g: &mut Graph,
    p: &Bound,
    block: &SelfCrossBlock,
    f_a: Var,
    f_b: Var,
) -> Result<(Var, Var)> {
    check_pair(g, f_a, f_b)?;
    let sa = block.self_attn.forward_unmasked(g, p, f_a, f_a)?;
    let sb = block.self_attn.forward_unmasked(g, p, f_b, f_b)?;
    let ca = block.cross_attn.forward_unmasked(g, p, sa, sb)?;
    let cb = block.cross_attn.forward_unmasked(g, p, sb, sa)?;
    Ok((ca, cb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::math;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(&[r, c], data).unwrap()
    }

    fn phi(x: f64) -> f64 {
        if x > 0.0 {
            x + 1.0
        } else {
            math::exp(x)
        }
    }

    /// Double-loop softmax attention.
    fn vanilla_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (n, d) = q.dims2();
        let (m, dv) = v.dims2();
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let s: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|t| q.at(i, t) * k.at(j, t)).sum())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| math::exp(x - mx)).collect();
            let z: f64 = e.iter().sum();
            for j in 0..m {
                for t in 0..dv {
                    out[i * dv + t] += e[j] / z * v.at(j, t);
                }
            }
        }
        out
    }

    /// Quadratic-form linear attention: builds the full N×N kernel matrix.
    fn linear_oracle(q: &Tensor, k: &Tensor, v: &Tensor, keep: Option<&[bool]>) -> Vec<f64> {
        let (n, d) = q.dims2();
        let (m, dv) = v.dims2();
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let a: Vec<f64> = (0..m)
                .map(|j| {
                    if keep.is_some_and(|kp| !kp[j]) {
                        0.0
                    } else {
                        (0..d).map(|t| phi(q.at(i, t)) * phi(k.at(j, t))).sum()
                    }
                })
                .collect();
            let z: f64 = a.iter().sum();
            for j in 0..m {
                for t in 0..dv {
                    out[i * dv + t] += a[j] / z * v.at(j, t);
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn vanilla_single_key_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.input(rand_t(&mut rng, 1, 3));
        let k = g.input(rand_t(&mut rng, 1, 3));
        let v = g.input(rand_t(&mut rng, 1, 2));
        let out = vanilla_attention(&mut g, q, k, v).unwrap();
        assert!(close(g.data(out), g.data(v), 1e-15));
    }

    #[test]
    fn vanilla_saturates_to_argmax_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kt = Tensor::identity(4);
        let qt = Tensor::new(&[4, 4], kt.data.iter().map(|v| v * 60.0).collect()).unwrap();
        let vt = rand_t(&mut rng, 4, 3);
        let mut g = Graph::new();
        let (q, k, v) = (g.input(qt), g.input(kt), g.input(vt.clone()));
        let out = vanilla_attention(&mut g, q, k, v).unwrap();
        // argmax selection of row i is V[i]
        // off-argmax weights are e^-60 ≈ 8.8e-27 each
        assert!(close(g.data(out), &vt.data, 1e-20));
    }

    #[test]
    fn vanilla_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (qt, kt, vt) = (rand_t(&mut rng, 5, 4), rand_t(&mut rng, 5, 4), rand_t(&mut rng, 5, 4));
        let mut g = Graph::new();
        let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
        let out = vanilla_attention(&mut g, q, k, v).unwrap();
        assert!(close(g.data(out), &vanilla_oracle(&qt, &kt, &vt), 1e-10));
    }

    #[test]
    fn linear_single_key_returns_value_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let q = g.input(rand_t(&mut rng, 1, 3));
        let k = g.input(rand_t(&mut rng, 1, 3));
        let v = g.input(rand_t(&mut rng, 1, 3));
        let out = linear_attention(&mut g, q, k, v).unwrap();
        assert!(close(g.data(out), g.data(v), 1e-15));
    }

    #[test]
    fn linear_identical_keys_give_value_mean() {
        // With identical keys every weight φ(q)·φ(k) is the same, so each
        // output row is the plain mean of V.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let krow = rand_t(&mut rng, 1, 3);
        let kt = Tensor::new(&[6, 3], krow.data.repeat(6)).unwrap();
        let vt = rand_t(&mut rng, 6, 3);
        let mut g = Graph::new();
        let q = g.input(rand_t(&mut rng, 6, 3));
        let (k, v) = (g.input(kt), g.input(vt.clone()));
        let out = linear_attention(&mut g, q, k, v).unwrap();
        let mean: Vec<f64> = (0..3).map(|t| (0..6).map(|j| vt.at(j, t)).sum::<f64>() / 6.0).collect();
        for i in 0..6 {
            assert!(close(g.value(out).row(i), &mean, 1e-12));
        }
    }

    #[test]
    fn linear_matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (qt, kt, vt) = (rand_t(&mut rng, 6, 3), rand_t(&mut rng, 6, 3), rand_t(&mut rng, 6, 3));
        let mut g = Graph::new();
        let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
        let out = linear_attention(&mut g, q, k, v).unwrap();
        assert!(close(g.data(out), &linear_oracle(&qt, &kt, &vt, None), 1e-10));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(&[3, 4]));
        let k = g.input(Tensor::zeros(&[3, 5]));
        let v = g.input(Tensor::zeros(&[3, 4]));
        assert!(matches!(linear_attention(&mut g, q, k, v), Err(Error::Dimension { .. })));
        assert!(matches!(vanilla_attention(&mut g, q, k, v), Err(Error::Dimension { .. })));
        let k = g.input(Tensor::zeros(&[2, 4]));
        assert!(matches!(linear_attention(&mut g, q, k, v), Err(Error::Dimension { .. })));
    }

    #[test]
    fn implicit_with_identity_masks_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let q = g.input(rand_t(&mut rng, 7, 4));
        let k = g.input(rand_t(&mut rng, 7, 4));
        let v = g.input(rand_t(&mut rng, 7, 4));
        let ones = MaskVar::constant(&mut g, PruneMask::ones(7));
        let a = implicit_pruning_attention(&mut g, q, k, v, &ones, &ones).unwrap();
        let b = linear_attention(&mut g, q, k, v).unwrap();
        assert!(close(g.data(a), g.data(b), 1e-12));
    }

    #[test]
    fn implicit_single_surviving_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vt = rand_t(&mut rng, 5, 3);
        let mut g = Graph::new();
        let q = g.input(rand_t(&mut rng, 5, 3));
        let k = g.input(rand_t(&mut rng, 5, 3));
        let v = g.input(vt.clone());
        let mq = MaskVar::constant(&mut g, PruneMask::from_bools(&[true, false, true, true, false]));
        let mkv = MaskVar::constant(&mut g, PruneMask::from_bools(&[false, false, true, false, false]));
        let out = implicit_pruning_attention(&mut g, q, k, v, &mq, &mkv).unwrap();
        let o = g.value(out).clone();
        for i in 0..5 {
            if mq.mask.get(i) {
                assert!(close(o.row(i), vt.row(2), 1e-12));
            } else {
                assert!(o.row(i).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn implicit_kept_rows_match_oracle_and_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(2..12);
            let (qt, kt, vt) = (rand_t(&mut rng, n, 3), rand_t(&mut rng, n, 3), rand_t(&mut rng, n, 3));
            let mut kq: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            let mut kk: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            kq[0] = true;
            kk[n - 1] = true;
            let mut g = Graph::new();
            let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
            let mq = MaskVar::constant(&mut g, PruneMask::from_bools(&kq));
            let mkv = MaskVar::constant(&mut g, PruneMask::from_bools(&kk));
            let imp = implicit_pruning_attention(&mut g, q, k, v, &mq, &mkv).unwrap();
            let oracle = linear_oracle(&qt, &kt, &vt, Some(&kk));
            let (dir, idx) = direct_pruning_attention(&mut g, q, k, v, &mq.mask, &mkv.mask).unwrap();
            for (row, &i) in idx.iter().enumerate() {
                assert!(close(g.value(imp).row(i), &oracle[i * 3..i * 3 + 3], 1e-10));
                assert!(close(g.value(imp).row(i), g.value(dir).row(row), 1e-10));
            }
        }
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 2]));
        let ones = MaskVar::constant(&mut g, PruneMask::ones(3));
        let zeros = MaskVar::constant(&mut g, PruneMask::from_bools(&[false; 3]));
        assert_eq!(
            implicit_pruning_attention(&mut g, x, x, x, &ones, &zeros).unwrap_err(),
            Error::DegenerateMask("implicit_pruning_attention")
        );
        assert!(matches!(
            direct_pruning_attention(&mut g, x, x, x, &zeros.mask, &ones.mask),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn direct_with_identity_masks_is_linear_after_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let q = g.input(rand_t(&mut rng, 6, 4));
        let k = g.input(rand_t(&mut rng, 6, 4));
        let v = g.input(rand_t(&mut rng, 6, 4));
        let ones = PruneMask::ones(6);
        let (c, idx) = direct_pruning_attention(&mut g, q, k, v, &ones, &ones).unwrap();
        let carry = g.input(Tensor::zeros(&[6, 4]));
        let full = scatter_back(&mut g, c, &idx, carry).unwrap();
        let lin = linear_attention(&mut g, q, k, v).unwrap();
        assert!(close(g.data(full), g.data(lin), 1e-12));
    }

    #[test]
    fn scatter_single_row_leaves_others() {
        let mut g = Graph::new();
        let carry_t = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let carry = g.input(carry_t);
        let c = g.input(Tensor::new(&[1, 2], vec![9.0, 9.0]).unwrap());
        let out = scatter_back(&mut g, c, &[1], carry).unwrap();
        assert_eq!(g.data(out), &[1.0, 2.0, 9.0, 9.0, 5.0, 6.0]);
        let empty = g.input(Tensor::zeros(&[0, 2]));
        assert!(scatter_back(&mut g, empty, &[], carry).is_err());
    }

    #[test]
    fn gather_then_scatter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let mut keep: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            keep[rng.gen_range(0..n)] = true;
            let t = rand_t(&mut rng, n, 3);
            let mut g = Graph::new();
            let x = g.input(t.clone());
            let idx = PruneMask::from_bools(&keep).kept();
            let c = g.gather_rows(x, &idx).unwrap();
            let back = scatter_back(&mut g, c, &idx, x).unwrap();
            assert_eq!(g.data(back), &t.data[..]);
        }
    }

    #[test]
    fn kernel_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ins = [rand_t(&mut rng, 5, 3), rand_t(&mut rng, 5, 3), rand_t(&mut rng, 5, 3)];
        let r = grad_check(
            |g, v| {
                let o = linear_attention(g, v[0], v[1], v[2])?;
                Ok(g.sum(o))
            },
            &ins,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        let r = grad_check(
            |g, v| {
                let o = vanilla_attention(g, v[0], v[1], v[2])?;
                let o2 = g.mul(o, o)?;
                Ok(g.sum(o2))
            },
            &ins,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    fn block_fixture(dim: usize, heads: usize) -> (ParamStore, SelfCrossBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b = SelfCrossBlock::new(&mut store, &mut rng, "b", dim, heads).unwrap();
        (store, b)
    }

    #[test]
    fn block_identity_masks_equal_unmasked_block() {
        let (store, block) = block_fixture(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let a = g.input(rand_t(&mut rng, 5, 8));
        let b = g.input(rand_t(&mut rng, 6, 8));
        let ma = MaskVar::constant(&mut g, PruneMask::ones(5));
        let mb = MaskVar::constant(&mut g, PruneMask::ones(6));
        let (ia, ib) = self_cross_block(&mut g, &p, &block, a, b, &ma, &mb, PruningVariant::Implicit).unwrap();
        let (ua, ub) = self_cross_block_unmasked(&mut g, &p, &block, a, b).unwrap();
        assert!(close(g.data(ia), g.data(ua), 1e-12));
        assert!(close(g.data(ib), g.data(ub), 1e-12));
    }

    #[test]
    fn block_with_zero_params_is_identity() {
        let (mut store, block) = block_fixture(8, 1);
        store.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let a = g.input(rand_t(&mut rng, 4, 8));
        let b = g.input(rand_t(&mut rng, 4, 8));
        let ma = MaskVar::constant(&mut g, PruneMask::from_bools(&[true, false, true, true]));
        let mb = MaskVar::constant(&mut g, PruneMask::ones(4));
        for variant in [PruningVariant::Implicit, PruningVariant::Direct] {
            let (oa, ob) = self_cross_block(&mut g, &p, &block, a, b, &ma, &mb, variant).unwrap();
            assert_eq!(g.data(oa), g.data(a));
            assert_eq!(g.data(ob), g.data(b));
        }
    }

    #[test]
    fn block_variants_agree_on_kept_rows() {
        let (store, block) = block_fixture(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let (na, nb) = (rng.gen_range(2..9), rng.gen_range(2..9));
            let mut ka: Vec<bool> = (0..na).map(|_| rng.gen_bool(0.5)).collect();
            let mut kb: Vec<bool> = (0..nb).map(|_| rng.gen_bool(0.5)).collect();
            ka[0] = true;
            kb[0] = true;
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let a = g.input(rand_t(&mut rng, na, 8));
            let b = g.input(rand_t(&mut rng, nb, 8));
            let ma = MaskVar::constant(&mut g, PruneMask::from_bools(&ka));
            let mb = MaskVar::constant(&mut g, PruneMask::from_bools(&kb));
            let (ia, ib) = self_cross_block(&mut g, &p, &block, a, b, &ma, &mb, PruningVariant::Implicit).unwrap();
            let (da, db) = self_cross_block(&mut g, &p, &block, a, b, &ma, &mb, PruningVariant::Direct).unwrap();
            // kept rows agree; pruned rows carry the input forward in both
            assert!(close(g.data(ia), g.data(da), 1e-8));
            assert!(close(g.data(ib), g.data(db), 1e-8));
            for i in (0..na).filter(|&i| !ka[i]) {
                assert_eq!(g.value(ia).row(i), g.value(a).row(i));
            }
        }
    }
}
