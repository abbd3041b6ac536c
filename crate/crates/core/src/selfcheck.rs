//! Finite-difference checks of the tape against a full model forward pass.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Normalization;
use crate::error::{GaiaError, Result};
use crate::graph::{extract_ego, ESellerGraph, Edge, Relation, SellerNode};
use crate::ita::mse_loss;
use crate::model::{Ablation, EgoInputs, GaiaModel, ModelConfig};
use crate::params::Bound;
use crate::tensor::{check_gradients, GradCheckReport, Tape, Tensor, TensorError, Var};

fn tensor_err(e: GaiaError) -> TensorError {
    match e {
        GaiaError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// Step and tolerance of the model-level check.
pub const MODEL_STEP: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-4;

/// Four sellers, two hops: `a -> c` (supply), `b <-> c` (owner), `d -> a` (supply).
pub fn tiny_graph(seed: u64, t_max: usize) -> Result<ESellerGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lens = [t_max, t_max.saturating_sub(3).max(1), t_max, 2.min(t_max)];
    let nodes = ["c", "a", "b", "d"]
        .iter()
        .zip(lens)
        .map(|(id, len)| SellerNode {
            id: id.to_string(),
            gmv: (0..len).map(|_| rng.gen_range(10.0..500.0)).collect(),
            temporal_feats: (0..len).map(|_| (0..3).map(|_| rng.gen_range(0.0..5.0)).collect()).collect(),
            static_feats: (0..2).map(|_| rng.gen_range(0.0..1.0)).collect(),
        })
        .collect();
    let edge = |s: &str, d: &str, relation| Edge { src: s.into(), dst: d.into(), relation };
    let edges = vec![
        edge("a", "c", Relation::SupplyChain),
        edge("b", "c", Relation::SameOwner),
        edge("d", "a", Relation::SupplyChain),
    ];
    ESellerGraph::new(nodes, edges, Some(t_max))
}

/// Configuration of the model-level check: `T=8, C=4, K=2, L=2, T'=2`.
pub fn tiny_config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        t_max: 8,
        horizon: 2,
        channels: 4,
        kernel_groups: 2,
        layers: 2,
        d_t: 3,
        d_s: 2,
        ablation,
        share_cau: false,
    }
}

/// Gradient check of the MSE loss of a freshly initialized model with respect
/// to every parameter.
pub fn model_gradient_check(seed: u64, ablation: Ablation) -> Result<GradCheckReport> {
    let cfg = tiny_config(ablation);
    let g = tiny_graph(seed, cfg.t_max)?;
    let ego = extract_ego(&g, "c", cfg.layers, 8, seed)?;
    let inputs = EgoInputs::new(&ego, Normalization::Log1p);
    let model = GaiaModel::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    // targets above the initial output keep the head's ReLU active
    let target = Tensor::vector((0..cfg.horizon).map(|_| rng.gen_range(1.0..3.0)).collect());
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
        let bound = Bound::from_vars(vars.to_vec());
        let out = model.forward(tape, &bound, &inputs, false).map_err(tensor_err)?;
        let y = tape.constant(target.clone());
        mse_loss(tape, out.pred, y).map_err(tensor_err)
    };
    Ok(check_gradients(f, model.params().tensors(), MODEL_STEP, MODEL_TOL)?)
}

/// Gradient checks of individual tape operations, by name.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut rng);
    let mask = Arc::new(Tensor::causal_mask(4));
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;
    let cases: Vec<(&'static str, Op, Vec<Tensor>)> = vec![
        (
            "matmul",
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            }),
            vec![rand(&[3, 4]), rand(&[4, 2])],
        ),
        (
            "conv1d_causal",
            Box::new(|t, v| {
                let y = t.conv1d_causal(v[0], v[1])?;
                let y = t.hadamard(y, y)?;
                Ok(t.sum(y))
            }),
            vec![rand(&[6, 3]), rand(&[3, 3, 2])],
        ),
        (
            "softmax_masked",
            Box::new(move |t, v| {
                let y = t.softmax_masked(v[0], Some(mask.clone()))?;
                let y = t.matmul(y, v[1])?;
                let y = t.hadamard(y, y)?;
                Ok(t.sum(y))
            }),
            vec![rand(&[4, 4]), rand(&[4, 2])],
        ),
        (
            "gate",
            Box::new(|t, v| {
                let a = t.sigmoid(v[0]);
                let b = t.tanh(v[1]);
                let y = t.hadamard(a, b)?;
                let y = t.concat_lastdim(&[y, v[0]])?;
                let y = t.add_row_bias(y, v[2])?;
                let y = t.hadamard(y, y)?;
                Ok(t.sum(y))
            }),
            vec![rand(&[3, 2]), rand(&[3, 2]), rand(&[4])],
        ),
    ];
    cases.into_iter().map(|(name, f, params)| Ok((name, check_gradients(f, &params, 1e-5, 1e-6)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_passes() {
        let r = model_gradient_check(0, Ablation::default()).unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_err());
        assert!(r.checked() > 10 * r.skipped());
    }

    #[test]
    fn tiny_ego_spans_two_hops() {
        let g = tiny_graph(0, 8).unwrap();
        let ego = extract_ego(&g, "c", 2, 8, 0).unwrap();
        assert_eq!(ego.len(), 4);
        assert_eq!(*ego.hop.iter().max().unwrap(), 2);
    }

    #[test]
    fn operations_pass() {
        for (name, r) in op_gradient_checks(1).unwrap() {
            assert!(r.passed, "{name}: {}", r.max_rel_err());
        }
    }
}
