//! Post-softmax attention matrices of a trained model, for plotting.

use crate::dataset::Dataset;
use crate::error::{GaiaError, Result};
use crate::graph::extract_ego_at;
use crate::model::{EgoInputs, GaiaModel};
use crate::tensor::{Tape, Tensor};
use crate::train::{ego_seed, TrainConfig};

#[derive(Clone, Debug)]
pub struct EdgeAttention {
    /// `[T × T]`, row = query time of the destination node.
    pub matrix: Tensor,
    /// Aggregation weight of the edge; `None` for the self term.
    pub alpha: Option<f64>,
    /// Temporal embedding of the destination `[T × C]`, the input of its
    /// first-layer self attention.
    pub embedding: Tensor,
}

/// Attention of the CAU on edge `src -> dst` at `layer` (1-based), or of the
/// self term of `dst` when `intra` is set (`src` is then ignored).
pub fn edge_attention(
    model: &GaiaModel,
    cfg: &TrainConfig,
    data: &Dataset,
    src: &str,
    dst: &str,
    layer: usize,
    intra: bool,
) -> Result<EdgeAttention> {
    let g = &data.graph;
    let depth = model.config().layers;
    if layer == 0 || layer > depth {
        return Err(GaiaError::Config(format!("layer must be in 1..={depth}, got {layer}")));
    }
    let d = g.require(dst)?;
    let s = if intra {
        d
    } else {
        let s = g.require(src)?;
        if !g.in_neighbors(d).iter().any(|&(v, _)| v == s) {
            return Err(GaiaError::UnknownEdge(src.into(), dst.into()));
        }
        s
    };
    if model.config().ablation.no_graph && !intra {
        return Err(GaiaError::Config("model was trained without neighbors".into()));
    }
    let seed = ego_seed(cfg.seed, d);
    let mut ego = extract_ego_at(g, d, depth, cfg.max_neighbors, seed)?;
    if !ego.adjacency[0].iter().any(|&(v, _)| ego.nodes[v] == s) {
        // the edge was sampled out; widen the sample so it is present
        ego = extract_ego_at(g, d, depth, usize::MAX, seed)?;
    }
    let local = if intra {
        0
    } else {
        ego.adjacency[0]
            .iter()
            .map(|&(v, _)| v)
            .find(|&v| ego.nodes[v] == s)
            .expect("edge present in the full neighborhood")
    };
    let inputs = EgoInputs::new(&ego, cfg.normalization);
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let out = model.forward(&mut tape, &bound, &inputs, true)?;
    let rec = out
        .attention
        .iter()
        .find(|r| r.layer == layer && r.dst == 0 && r.intra == intra && (intra || r.src == local))
        .ok_or_else(|| GaiaError::Config(format!("no attention recorded for layer {layer}")))?;
    Ok(EdgeAttention {
        matrix: tape.value(rec.attention).clone(),
        alpha: rec.alpha.map(|a| tape.value(a).item()),
        embedding: tape.value(out.embedding).clone(),
    })
}

/// Pearson correlation of rows `i` and `j` of `x`; zero when either row is constant.
pub fn row_correlation(x: &Tensor, i: usize, j: usize) -> f64 {
    let (a, b) = (x.row(i), x.row(j));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
