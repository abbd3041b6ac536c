//! The e-seller graph: per-node GMV series and features, typed edges, JSONL
//! persistence and ego-subgraph extraction.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GaiaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    /// Stored as supplier -> retailer.
    #[serde(rename = "supply")]
    SupplyChain,
    /// Stored once, expanded in both directions.
    #[serde(rename = "owner")]
    SameOwner,
}

impl Relation {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            Relation::SupplyChain => 0,
            Relation::SameOwner => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SellerNode {
    pub id: String,
    /// Monthly GMV, oldest first; its length is the observed history.
    pub gmv: Vec<f64>,
    /// One row of `D_T` values per observed month.
    pub temporal_feats: Vec<Vec<f64>>,
    pub static_feats: Vec<f64>,
}

impl SellerNode {
    pub fn observed_len(&self) -> usize {
        self.gmv.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub relation: Relation,
}

#[derive(Clone, Debug)]
pub struct ESellerGraph {
    nodes: Vec<SellerNode>,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
    in_adj: Vec<Vec<(usize, Relation)>>,
    t_max: usize,
    d_t: usize,
    d_s: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Meta { t_max: usize },
    Node { id: String, gmv: Vec<f64>, tf: Vec<Vec<f64>>, sf: Vec<f64> },
    Edge { src: String, dst: String, rel: Relation },
}

impl ESellerGraph {
    /// Validates and indexes a graph. `t_max` defaults to the longest history.
    pub fn new(nodes: Vec<SellerNode>, edges: Vec<Edge>, t_max: Option<usize>) -> Result<Self> {
        let longest = nodes.iter().map(SellerNode::observed_len).max().unwrap_or(0);
        let t_max = t_max.unwrap_or(longest);
        let d_t = nodes.first().and_then(|n| n.temporal_feats.first()).map_or(0, Vec::len);
        let d_s = nodes.first().map_or(0, |n| n.static_feats.len());

        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(GaiaError::InvalidGraph(format!("duplicate node id `{}`", n.id)));
            }
            let len = n.observed_len();
            if len == 0 || len > t_max {
                return Err(GaiaError::InvalidGraph(format!(
                    "node `{}` has {len} observed months, expected 1..={t_max}",
                    n.id
                )));
            }
            if let Some((pos, &value)) =
                n.gmv.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
            {
                return Err(GaiaError::NegativeGmv { id: n.id.clone(), pos, value });
            }
            if n.temporal_feats.len() != len || n.temporal_feats.iter().any(|r| r.len() != d_t) {
                return Err(GaiaError::InvalidGraph(format!(
                    "node `{}` temporal features must be {len}x{d_t}",
                    n.id
                )));
            }
            if n.static_feats.len() != d_s {
                return Err(GaiaError::InvalidGraph(format!(
                    "node `{}` has {} static features, expected {d_s}",
                    n.id,
                    n.static_feats.len()
                )));
            }
        }

        let mut in_adj = vec![Vec::new(); nodes.len()];
        for e in &edges {
            let src = *index.get(&e.src).ok_or_else(|| GaiaError::DanglingEdge(e.src.clone()))?;
            let dst = *index.get(&e.dst).ok_or_else(|| GaiaError::DanglingEdge(e.dst.clone()))?;
            if src == dst {
                return Err(GaiaError::InvalidGraph(format!("self-loop on `{}`", e.src)));
            }
            in_adj[dst].push((src, e.relation));
            if e.relation == Relation::SameOwner {
                in_adj[src].push((dst, e.relation));
            }
        }

        Ok(ESellerGraph { nodes, index, edges, in_adj, t_max, d_t, d_s })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| GaiaError::io(path, e))?;
        Self::read_jsonl(BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| GaiaError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w).map_err(|e| GaiaError::io(path, e))?;
        w.flush().map_err(|e| GaiaError::io(path, e))
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut t_max = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| GaiaError::Parse { line: line_no, msg: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| GaiaError::Parse { line: line_no, msg: e.to_string() })?;
            match rec {
                Record::Meta { t_max: t } => t_max = Some(t),
                Record::Node { id, gmv, tf, sf } => {
                    nodes.push(SellerNode { id, gmv, temporal_feats: tf, static_feats: sf })
                }
                Record::Edge { src, dst, rel } => edges.push(Edge { src, dst, relation: rel }),
            }
        }
        Self::new(nodes, edges, t_max)
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut line = |rec: &Record| -> std::io::Result<()> {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")
        };
        line(&Record::Meta { t_max: self.t_max })?;
        for n in &self.nodes {
            line(&Record::Node {
                id: n.id.clone(),
                gmv: n.gmv.clone(),
                tf: n.temporal_feats.clone(),
                sf: n.static_feats.clone(),
            })?;
        }
        for e in &self.edges {
            line(&Record::Edge { src: e.src.clone(), dst: e.dst.clone(), rel: e.relation })?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SellerNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &SellerNode {
        &self.nodes[idx]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| GaiaError::UnknownNode(id.to_string()))
    }

    /// In-neighbors of `idx` with their relation tags.
    pub fn in_neighbors(&self, idx: usize) -> &[(usize, Relation)] {
        &self.in_adj[idx]
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }
}

/// A node's series right-aligned into a fixed window.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub gmv: Vec<f64>,
    /// Row-major `[t_max × D_T]`.
    pub temporal: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Right-aligns a node's history so the latest month sits at `t_max - 1`;
/// earlier positions are zero and masked out. Values are copied verbatim.
pub fn pad_and_mask(node: &SellerNode, t_max: usize) -> Result<Padded> {
    let len = node.observed_len();
    if len > t_max {
        return Err(GaiaError::SeriesTooLong { len, t_max });
    }
    let d_t = node.temporal_feats.first().map_or(0, Vec::len);
    let offset = t_max - len;
    let mut gmv = vec![0.0; t_max];
    let mut temporal = vec![0.0; t_max * d_t];
    let mut mask = vec![false; t_max];
    for (i, (&z, row)) in node.gmv.iter().zip(&node.temporal_feats).enumerate() {
        let t = offset + i;
        gmv[t] = z;
        temporal[t * d_t..(t + 1) * d_t].copy_from_slice(row);
        mask[t] = true;
    }
    Ok(Padded { gmv, temporal, mask })
}

/// A center node with its sampled in-neighborhood. Local index 0 is the center.
#[derive(Clone, Debug)]
pub struct EgoSubgraph {
    pub center: usize,
    /// Local index -> global node index.
    pub nodes: Vec<usize>,
    /// BFS distance from the center.
    pub hop: Vec<usize>,
    /// Local in-neighbors per local node. Nodes on the outer ring have none.
    pub adjacency: Vec<Vec<(usize, Relation)>>,
    pub t_max: usize,
    pub padded_gmv: Vec<Vec<f64>>,
    pub padded_temporal: Vec<Vec<f64>>,
    pub static_feats: Vec<Vec<f64>>,
    pub valid_mask: Vec<Vec<bool>>,
    pub target: Option<Vec<f64>>,
}

impl EgoSubgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The center alone, without neighbors.
    pub fn single(g: &ESellerGraph, center: usize) -> Result<Self> {
        Self::assemble(g, center, vec![center], vec![0], vec![Vec::new()])
    }

    fn assemble(
        g: &ESellerGraph,
        center: usize,
        nodes: Vec<usize>,
        hop: Vec<usize>,
        adjacency: Vec<Vec<(usize, Relation)>>,
    ) -> Result<Self> {
        let t_max = g.t_max();
        let mut padded_gmv = Vec::with_capacity(nodes.len());
        let mut padded_temporal = Vec::with_capacity(nodes.len());
        let mut static_feats = Vec::with_capacity(nodes.len());
        let mut valid_mask = Vec::with_capacity(nodes.len());
        for &n in &nodes {
            let p = pad_and_mask(g.node(n), t_max)?;
            padded_gmv.push(p.gmv);
            padded_temporal.push(p.temporal);
            valid_mask.push(p.mask);
            static_feats.push(g.node(n).static_feats.clone());
        }
        Ok(EgoSubgraph {
            center,
            nodes,
            hop,
            adjacency,
            t_max,
            padded_gmv,
            padded_temporal,
            static_feats,
            valid_mask,
            target: None,
        })
    }
}

/// Breadth-first in-neighborhood of `center` up to `hops`, keeping at most
/// `max_neighbors` in-neighbors per expanded node (seeded uniform sample).
pub fn extract_ego(
    g: &ESellerGraph,
    center: &str,
    hops: usize,
    max_neighbors: usize,
    seed: u64,
) -> Result<EgoSubgraph> {
    let idx = g.require(center)?;
    extract_ego_at(g, idx, hops, max_neighbors, seed)
}

pub fn extract_ego_at(
    g: &ESellerGraph,
    center: usize,
    hops: usize,
    max_neighbors: usize,
    seed: u64,
) -> Result<EgoSubgraph> {
    if hops == 0 {
        return Err(GaiaError::Config("ego extraction needs hops >= 1".into()));
    }
    if center >= g.len() {
        return Err(GaiaError::UnknownNode(format!("#{center}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut nodes = vec![center];
    let mut hop = vec![0];
    let mut adjacency: Vec<Vec<(usize, Relation)>> = vec![Vec::new()];
    local.insert(center, 0);
    let mut queue = VecDeque::from([0usize]);

    while let Some(u) = queue.pop_front() {
        if hop[u] >= hops {
            continue;
        }
        let all = g.in_neighbors(nodes[u]);
        let picked: Vec<(usize, Relation)> = if all.len() > max_neighbors {
            let mut ix = rand::seq::index::sample(&mut rng, all.len(), max_neighbors).into_vec();
            ix.sort_unstable();
            ix.into_iter().map(|i| all[i]).collect()
        } else {
            all.to_vec()
        };
        for (v, rel) in picked {
            let lv = *local.entry(v).or_insert_with(|| {
                nodes.push(v);
                hop.push(hop[u] + 1);
                adjacency.push(Vec::new());
                queue.push_back(nodes.len() - 1);
                nodes.len() - 1
            });
            adjacency[u].push((lv, rel));
        }
    }
    EgoSubgraph::assemble(g, center, nodes, hop, adjacency)
}
