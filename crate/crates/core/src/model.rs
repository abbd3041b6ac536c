//! The full forecasting network assembled from the encoder, the graph layers
//! and the prediction head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Normalization;
use crate::encoder::{
    fusion_forward, tel_forward, FflParams, Fusion, NodeVars, PlainFusionParams, TelParams,
};
use crate::error::{GaiaError, Result};
use crate::graph::{EgoSubgraph, Relation};
use crate::ita::{
    layer_forward, predict_head, AttentionRecord, HeadParams, ItaLayerParams, LayerKind, PlainAttnParams,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Replace the graph layers with linear self-attention plus mean-pooled neighbors.
    pub no_ita: bool,
    /// Replace feature fusion with one shared projection.
    pub no_ffl: bool,
    /// Replace the kernel group with a single width-4 capture/denoise pair.
    pub no_tel: bool,
    /// Drop all neighbors; each node only attends to itself.
    pub no_graph: bool,
}

impl Ablation {
    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut a = Ablation::default();
        for name in names {
            match name.as_ref() {
                "no_ita" => a.no_ita = true,
                "no_ffl" => a.no_ffl = true,
                "no_tel" => a.no_tel = true,
                "no_graph" => a.no_graph = true,
                other => return Err(GaiaError::Config(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(a)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_ita {
            v.push("no_ita");
        }
        if self.no_ffl {
            v.push("no_ffl");
        }
        if self.no_tel {
            v.push("no_tel");
        }
        if self.no_graph {
            v.push("no_graph");
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_max: usize,
    pub horizon: usize,
    pub channels: usize,
    pub kernel_groups: usize,
    pub layers: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub ablation: Ablation,
    pub share_cau: bool,
}

/// Kernel width of the single temporal kernel in the `no_tel` ablation.
pub const SINGLE_KERNEL_WIDTH: usize = 4;

#[derive(Clone, Debug)]
pub struct GaiaModel {
    cfg: ModelConfig,
    store: ParamStore,
    fusion: Fusion,
    tel: TelParams,
    layers: Vec<LayerKind>,
    head: HeadParams,
    mask: Arc<Tensor>,
}

/// Normalized, padded inputs of one node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInputs {
    /// `[T × 1]`
    pub gmv: Tensor,
    /// `[T × D_T]`
    pub temporal: Tensor,
    /// `[1 × D_S]`
    pub static_feats: Tensor,
}

/// Model-ready view of an ego-subgraph.
#[derive(Clone, Debug)]
pub struct EgoInputs {
    pub nodes: Vec<NodeInputs>,
    pub hop: Vec<usize>,
    pub adjacency: Vec<Vec<(usize, Relation)>>,
}

impl EgoInputs {
    pub fn new(ego: &EgoSubgraph, norm: Normalization) -> Self {
        let t = ego.t_max;
        let nodes = (0..ego.len())
            .map(|i| {
                let gmv = ego.padded_gmv[i].iter().map(|&v| norm.apply(v)).collect();
                let tf: Vec<f64> = ego.padded_temporal[i].iter().map(|&v| norm.apply(v)).collect();
                let d_t = tf.len() / t.max(1);
                let sf: Vec<f64> = ego.static_feats[i].iter().map(|&v| norm.apply(v)).collect();
                NodeInputs {
                    gmv: Tensor::new(&[t, 1], gmv).expect("padded gmv"),
                    temporal: Tensor::new(&[t, d_t], tf).expect("padded temporal"),
                    static_feats: Tensor::new(&[1, sf.len()], sf).expect("static"),
                }
            })
            .collect();
        EgoInputs { nodes, hop: ego.hop.clone(), adjacency: ego.adjacency.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Center prediction `[T']` in normalized units.
    pub pred: Var,
    /// Center temporal embedding `[T × C]`.
    pub embedding: Var,
    pub attention: Vec<AttentionRecord>,
}

impl GaiaModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.channels == 0 || cfg.horizon == 0 || cfg.t_max == 0 || cfg.layers == 0 {
            return Err(GaiaError::Config("channels, horizon, t_max and layers must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let fusion = if cfg.ablation.no_ffl {
            Fusion::Plain(PlainFusionParams::new(&mut store, c, cfg.d_t, cfg.d_s, &mut rng))
        } else {
            Fusion::Ffl(FflParams::new(&mut store, c, cfg.t_max, cfg.d_t, cfg.d_s, &mut rng))
        };
        let tel = if cfg.ablation.no_tel {
            TelParams::new_single(&mut store, c, SINGLE_KERNEL_WIDTH, &mut rng)
        } else {
            TelParams::new_group(&mut store, c, cfg.kernel_groups, cfg.t_max, &mut rng)?
        };
        let layers = (1..=cfg.layers)
            .map(|l| {
                if cfg.ablation.no_ita {
                    LayerKind::Plain(PlainAttnParams::new(&mut store, l, c, &mut rng))
                } else {
                    LayerKind::Ita(ItaLayerParams::new(&mut store, l, c, cfg.t_max, cfg.share_cau, &mut rng))
                }
            })
            .collect();
        let head = HeadParams::new(&mut store, c, cfg.t_max, cfg.horizon, &mut rng);
        let mask = Arc::new(Tensor::causal_mask(cfg.t_max));
        Ok(GaiaModel { cfg, store, fusion, tel, layers, head, mask })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn tel(&self) -> &TelParams {
        &self.tel
    }

    pub fn layers(&self) -> &[LayerKind] {
        &self.layers
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    pub fn mask(&self) -> &Arc<Tensor> {
        &self.mask
    }

    /// Total scalar weights.
    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Feature fusion then temporal embedding for one node: `E`, `[T × C]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: &NodeInputs) -> Result<Var> {
        let vars = NodeVars {
            gmv: tape.constant(x.gmv.clone()),
            temporal: tape.constant(x.temporal.clone()),
            static_feats: tape.constant(x.static_feats.clone()),
        };
        let s = fusion_forward(tape, bound, &self.fusion, &vars)?;
        tel_forward(tape, bound, &self.tel, s)
    }

    /// Forward pass for the center (local node 0) of an ego-subgraph.
    ///
    /// Layer `l` is only evaluated for nodes within `L - l` hops of the center,
    /// which is all the center's output depends on.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ego: &EgoInputs,
        record_attention: bool,
    ) -> Result<ForwardOutput> {
        let depth = self.layers.len();
        let use_graph = !self.cfg.ablation.no_graph;
        let n = if use_graph { ego.nodes.len() } else { 1 };
        let empty = vec![Vec::new(); n];
        let adjacency = if use_graph { &ego.adjacency[..n] } else { &empty[..] };
        let hop = |i: usize| if use_graph { ego.hop[i] } else { 0 };

        let mut h: Vec<Option<Var>> = Vec::with_capacity(n);
        for i in 0..n {
            h.push(if hop(i) <= depth { Some(self.encode(tape, bound, &ego.nodes[i])?) } else { None });
        }
        let embedding = h[0].expect("center embedding");
        let mut records = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let active: Vec<bool> = (0..n).map(|i| hop(i) + l < depth).collect();
            h = layer_forward(
                tape,
                bound,
                layer,
                l + 1,
                &self.mask,
                adjacency,
                &h,
                &active,
                record_attention.then_some(&mut records),
            )?;
        }
        let last = h[0].expect("center representation");
        let pred = predict_head(tape, bound, &self.head, last, embedding)?;
        Ok(ForwardOutput { pred, embedding, attention: records })
    }

    /// Center prediction in normalized units, without recording gradients.
    pub fn predict(&self, ego: &EgoInputs) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, ego, false)?;
        Ok(tape.value(out.pred).data().to_vec())
    }
}
