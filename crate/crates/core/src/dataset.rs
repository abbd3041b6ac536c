//! Graph plus held-out targets, and the value transform applied before the model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GaiaError, Result};
use crate::graph::ESellerGraph;

pub const GRAPH_FILE: &str = "graph.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

/// Transform applied to GMV, features and targets before they reach the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Signed `ln(1 + |x|)`.
    #[default]
    Log1p,
    None,
}

impl Normalization {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Normalization::Log1p => x.signum() * x.abs().ln_1p(),
            Normalization::None => x,
        }
    }

    pub fn invert(self, y: f64) -> f64 {
        match self {
            Normalization::Log1p => y.signum() * y.abs().exp_m1(),
            Normalization::None => y,
        }
    }
}

/// One line of the truth sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    /// GMV of the months following the observed window.
    pub targets: Vec<f64>,
    /// `"retailer"` or `"supplier"`.
    pub role: String,
    /// Months by which this node leads its retailer (suppliers only).
    pub lag: usize,
    pub season_phase: f64,
    pub observed_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supplies: Option<String>,
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GaiaError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GaiaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| GaiaError::Parse { line: i + 1, msg: e.to_string() })?,
        );
    }
    Ok(out)
}

pub fn write_truth(path: impl AsRef<Path>, records: &[TruthRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| GaiaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| GaiaError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| GaiaError::io(path, e))?;
    }
    w.flush().map_err(|e| GaiaError::io(path, e))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: ESellerGraph,
    /// Targets by node index.
    pub targets: Vec<Option<Vec<f64>>>,
    pub horizon: usize,
}

impl Dataset {
    pub fn new(graph: ESellerGraph, truth: &[TruthRecord]) -> Result<Self> {
        let mut targets = vec![None; graph.len()];
        let mut horizon = None;
        for r in truth {
            let idx = graph.require(&r.id)?;
            match horizon {
                None => horizon = Some(r.targets.len()),
                Some(h) if h != r.targets.len() => {
                    return Err(GaiaError::InvalidGraph(format!(
                        "node `{}` has {} targets, expected {h}",
                        r.id,
                        r.targets.len()
                    )))
                }
                _ => {}
            }
            targets[idx] = Some(r.targets.clone());
        }
        Ok(Dataset { graph, targets, horizon: horizon.unwrap_or(0) })
    }

    /// Reads `graph.jsonl` and `truth.jsonl` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let graph = ESellerGraph::load(dir.join(GRAPH_FILE))?;
        let truth = read_truth(dir.join(TRUTH_FILE))?;
        Self::new(graph, &truth)
    }

    pub fn target(&self, idx: usize) -> Result<&[f64]> {
        self.targets[idx]
            .as_deref()
            .ok_or_else(|| GaiaError::UnknownNode(format!("no target for `{}`", self.graph.node(idx).id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log1p_round_trip() {
        let n = Normalization::Log1p;
        for &x in &[0.0, 1e-9, 0.5, 1.0, 123.456, 5e4, 3.2e6, -7.5] {
            let back = n.invert(n.apply(x));
            assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0), "{x} -> {back}");
        }
        assert_eq!(n.apply(0.0), 0.0);
        assert_eq!(Normalization::None.apply(3.5), 3.5);
    }
}
