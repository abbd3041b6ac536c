//! Convolutional attention unit, the temporal-shift aware graph layer, the
//! prediction head and the training loss.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::graph::Relation;
use crate::params::{conv_kernel, xavier, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Query/key kernels of width 3 and a width-1 value kernel, all `C -> C`.
#[derive(Clone, Debug)]
pub struct CauParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
}

impl CauParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) -> Self {
        CauParams {
            q: store.add(format!("{prefix}.q"), conv_kernel(3, c, c, rng)),
            k: store.add(format!("{prefix}.k"), conv_kernel(3, c, c, rng)),
            v: store.add(format!("{prefix}.v"), conv_kernel(1, c, c, rng)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ItaLayerParams {
    pub inter: CauParams,
    pub intra: CauParams,
    /// `[T]`
    pub mu: ParamId,
    /// `[1 × C × 1]`
    pub l_s: ParamId,
    /// `[1 × C × 1]`
    pub l_d: ParamId,
    /// One additive logit per relation type.
    pub rel_w: ParamId,
}

impl ItaLayerParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        layer: usize,
        c: usize,
        t_max: usize,
        share_cau: bool,
        rng: &mut R,
    ) -> Self {
        let inter = CauParams::new(store, &format!("layer{layer}.inter"), c, rng);
        let intra = if share_cau {
            inter.clone()
        } else {
            CauParams::new(store, &format!("layer{layer}.intra"), c, rng)
        };
        ItaLayerParams {
            inter,
            intra,
            mu: store.add(format!("layer{layer}.mu"), xavier(&[t_max], t_max, 1, rng)),
            l_s: store.add(format!("layer{layer}.l_s"), conv_kernel(1, c, 1, rng)),
            l_d: store.add(format!("layer{layer}.l_d"), conv_kernel(1, c, 1, rng)),
            rel_w: store.add(format!("layer{layer}.rel_w"), Tensor::zeros(&[Relation::COUNT])),
        }
    }
}

/// Linear-projection self-attention used by the ablation without the ITA layer.
#[derive(Clone, Debug)]
pub struct PlainAttnParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
}

impl PlainAttnParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, layer: usize, c: usize, rng: &mut R) -> Self {
        PlainAttnParams {
            q: store.add(format!("layer{layer}.attn.q"), xavier(&[c, c], c, c, rng)),
            k: store.add(format!("layer{layer}.attn.k"), xavier(&[c, c], c, c, rng)),
            v: store.add(format!("layer{layer}.attn.v"), xavier(&[c, c], c, c, rng)),
        }
    }
}

#[derive(Clone, Debug)]
pub enum LayerKind {
    Ita(ItaLayerParams),
    Plain(PlainAttnParams),
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `[1 × C × 1]`
    pub l_p: ParamId,
    /// `[T × T']`
    pub w_p: ParamId,
    /// `[T']`
    pub b_p: ParamId,
}

impl HeadParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        c: usize,
        t_max: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Self {
        HeadParams {
            l_p: store.add("head.l_p", conv_kernel(1, c, 1, rng)),
            w_p: store.add("head.w_p", xavier(&[t_max, horizon], t_max, horizon, rng)),
            b_p: store.add("head.b_p", Tensor::zeros(&[horizon])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CauOutput {
    /// `[T × C]`
    pub out: Var,
    /// Post-softmax `[T × T]` weights; row = query time.
    pub attention: Var,
}

/// `softmax(Q Kᵀ / sqrt(C) + M) V`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Arc<Tensor>) -> Result<CauOutput> {
    let c = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    let attention = tape.softmax_masked(logits, Some(Arc::clone(mask)))?;
    let out = tape.matmul(attention, v)?;
    Ok(CauOutput { out, attention })
}

/// Attention of `h_u`'s queries over `h_v`'s keys and values (edge `v -> u`).
pub fn cau(
    tape: &mut Tape,
    bound: &Bound,
    p: &CauParams,
    mask: &Arc<Tensor>,
    h_u: Var,
    h_v: Var,
) -> Result<CauOutput> {
    let q = tape.conv1d_causal(h_u, bound.var(p.q))?;
    let k = tape.conv1d_causal(h_v, bound.var(p.k))?;
    let v = tape.conv1d_causal(h_v, bound.var(p.v))?;
    attend(tape, q, k, v, mask)
}

fn rel_logit(tape: &mut Tape, bound: &Bound, p: &ItaLayerParams, rel: Relation) -> Result<Var> {
    Ok(tape.select(bound.var(p.rel_w), rel.index())?)
}

fn score_from_parts(
    tape: &mut Tape,
    bound: &Bound,
    p: &ItaLayerParams,
    src_part: Var,
    dst_part: Var,
    rel: Relation,
) -> Result<Var> {
    let pre = tape.add(src_part, dst_part)?;
    let act = tape.tanh(pre);
    let t_len = tape.shape(act)[0];
    let act = tape.reshape(act, &[t_len])?;
    let weighted = tape.hadamard(act, bound.var(p.mu))?;
    let g = tape.sum(weighted);
    let r = rel_logit(tape, bound, p, rel)?;
    Ok(tape.add(g, r)?)
}

/// Aggregation logit `g(u, v) = μᵀ tanh(L_s ⋆ H_u + L_d ⋆ H_v) + w_rel`.
pub fn aggregation_weight(
    tape: &mut Tape,
    bound: &Bound,
    p: &ItaLayerParams,
    h_u: Var,
    h_v: Var,
    rel: Relation,
) -> Result<Var> {
    let s = tape.conv1d_causal(h_u, bound.var(p.l_s))?;
    let d = tape.conv1d_causal(h_v, bound.var(p.l_d))?;
    score_from_parts(tape, bound, p, s, d, rel)
}

/// Softmax over neighbor logits, returned as one scalar per neighbor.
fn neighbor_softmax(tape: &mut Tape, logits: &[Var]) -> Result<Vec<Var>> {
    let cols = logits.iter().map(|&g| tape.reshape(g, &[1])).collect::<std::result::Result<Vec<_>, _>>()?;
    let row = tape.concat_lastdim(&cols)?;
    let row = tape.reshape(row, &[1, logits.len()])?;
    let alpha = tape.softmax_masked(row, None)?;
    (0..logits.len()).map(|i| Ok(tape.select(alpha, i)?)).collect()
}

/// One attention matrix seen during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    /// Local index of the query node.
    pub dst: usize,
    /// Local index of the key/value node (equal to `dst` for the self term).
    pub src: usize,
    pub intra: bool,
    pub attention: Var,
    /// Aggregation weight α of this edge; `None` for the self term.
    pub alpha: Option<Var>,
}

/// Per-node projections reused across every edge a node takes part in.
struct Cache {
    q_inter: Vec<Option<Var>>,
    k_inter: Vec<Option<Var>>,
    v_inter: Vec<Option<Var>>,
    s: Vec<Option<Var>>,
    d: Vec<Option<Var>>,
}

fn cached(slot: &mut Option<Var>, tape: &mut Tape, h: Var, kernel: Var) -> Result<Var> {
    if let Some(v) = *slot {
        return Ok(v);
    }
    let v = tape.conv1d_causal(h, kernel)?;
    *slot = Some(v);
    Ok(v)
}

/// Runs one graph layer for the `active` nodes.
///
/// `h[i]` must be present for every active node and each of its in-neighbors.
/// Inactive nodes map to `None` in the result.
pub(crate) fn layer_forward(
    tape: &mut Tape,
    bound: &Bound,
    kind: &LayerKind,
    layer: usize,
    mask: &Arc<Tensor>,
    adjacency: &[Vec<(usize, Relation)>],
    h: &[Option<Var>],
    active: &[bool],
    mut record: Option<&mut Vec<AttentionRecord>>,
) -> Result<Vec<Option<Var>>> {
    let n = h.len();
    let mut out = vec![None; n];
    match kind {
        LayerKind::Ita(p) => {
            let mut cache = Cache {
                q_inter: vec![None; n],
                k_inter: vec![None; n],
                v_inter: vec![None; n],
                s: vec![None; n],
                d: vec![None; n],
            };
            for u in (0..n).filter(|&u| active[u]) {
                let h_u = h[u].expect("active node without representation");
                let intra = cau(tape, bound, &p.intra, mask, h_u, h_u)?;
                if let Some(rec) = record.as_deref_mut() {
                    rec.push(AttentionRecord {
                        layer,
                        dst: u,
                        src: u,
                        intra: true,
                        attention: intra.attention,
                        alpha: None,
                    });
                }
                let nbrs = &adjacency[u];
                if nbrs.is_empty() {
                    out[u] = Some(intra.out);
                    continue;
                }
                let q = cached(&mut cache.q_inter[u], tape, h_u, bound.var(p.inter.q))?;
                let s = cached(&mut cache.s[u], tape, h_u, bound.var(p.l_s))?;
                let mut logits = Vec::with_capacity(nbrs.len());
                let mut messages = Vec::with_capacity(nbrs.len());
                for &(v, rel) in nbrs {
                    let h_v = h[v].expect("neighbor without representation");
                    let d = cached(&mut cache.d[v], tape, h_v, bound.var(p.l_d))?;
                    logits.push(score_from_parts(tape, bound, p, s, d, rel)?);
                    let k = cached(&mut cache.k_inter[v], tape, h_v, bound.var(p.inter.k))?;
                    let vv = cached(&mut cache.v_inter[v], tape, h_v, bound.var(p.inter.v))?;
                    messages.push(attend(tape, q, k, vv, mask)?);
                }
                let alpha = neighbor_softmax(tape, &logits)?;
                let mut acc = intra.out;
                for ((msg, &a), &(v, _)) in messages.iter().zip(&alpha).zip(nbrs) {
                    let weighted = tape.scale_by(a, msg.out)?;
                    acc = tape.add(acc, weighted)?;
                    if let Some(rec) = record.as_deref_mut() {
                        rec.push(AttentionRecord {
                            layer,
                            dst: u,
                            src: v,
                            intra: false,
                            attention: msg.attention,
                            alpha: Some(a),
                        });
                    }
                }
                out[u] = Some(acc);
            }
        }
        LayerKind::Plain(p) => {
            for u in (0..n).filter(|&u| active[u]) {
                let h_u = h[u].expect("active node without representation");
                let q = tape.matmul(h_u, bound.var(p.q))?;
                let k = tape.matmul(h_u, bound.var(p.k))?;
                let v = tape.matmul(h_u, bound.var(p.v))?;
                let own = attend(tape, q, k, v, mask)?;
                if let Some(rec) = record.as_deref_mut() {
                    rec.push(AttentionRecord {
                        layer,
                        dst: u,
                        src: u,
                        intra: true,
                        attention: own.attention,
                        alpha: None,
                    });
                }
                let nbrs = &adjacency[u];
                if nbrs.is_empty() {
                    out[u] = Some(own.out);
                    continue;
                }
                let mut pooled = h[nbrs[0].0].expect("neighbor without representation");
                for &(v, _) in &nbrs[1..] {
                    pooled = tape.add(pooled, h[v].expect("neighbor without representation"))?;
                }
                let pooled = tape.scale(pooled, 1.0 / nbrs.len() as f64);
                out[u] = Some(tape.add(own.out, pooled)?);
            }
        }
    }
    Ok(out)
}

/// Applies an ITA-GCN layer to every node of a local graph.
pub fn ita_gcn_layer(
    tape: &mut Tape,
    bound: &Bound,
    p: &ItaLayerParams,
    mask: &Arc<Tensor>,
    adjacency: &[Vec<(usize, Relation)>],
    h: &[Var],
) -> Result<Vec<Var>> {
    let kind = LayerKind::Ita(p.clone());
    let h: Vec<Option<Var>> = h.iter().copied().map(Some).collect();
    let active = vec![true; h.len()];
    let out = layer_forward(tape, bound, &kind, 0, mask, adjacency, &h, &active, None)?;
    Ok(out.into_iter().map(|v| v.expect("all nodes active")).collect())
}

/// `ReLU((L_P ⋆ (H_L + E)) W_P + b_P)`, shape `[T']`.
pub fn predict_head(tape: &mut Tape, bound: &Bound, p: &HeadParams, h_last: Var, e: Var) -> Result<Var> {
    let x = tape.add(h_last, e)?;
    let col = tape.conv1d_causal(x, bound.var(p.l_p))?;
    let t_len = tape.shape(col)[0];
    let row = tape.reshape(col, &[1, t_len])?;
    let y = tape.matmul(row, bound.var(p.w_p))?;
    let horizon = tape.shape(y)[1];
    let y = tape.reshape(y, &[horizon])?;
    let y = tape.add_row_bias(y, bound.var(p.b_p))?;
    Ok(tape.relu(y))
}

/// Sum of squared errors divided by `denom`.
pub fn scaled_sq_error(tape: &mut Tape, pred: Var, truth: Var, denom: f64) -> Result<Var> {
    let diff = tape.sub(pred, truth)?;
    let sq = tape.hadamard(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / denom))
}

/// Mean squared error over every cell.
pub fn mse_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let n = tape.value(pred).len().max(1) as f64;
    scaled_sq_error(tape, pred, truth, n)
}
