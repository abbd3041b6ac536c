mod common;

use std::sync::Arc;

use gaia::graph::pad_and_mask;
use gaia::model::NodeInputs;
use gaia::tensor::check_gradients;
use gaia::{
    extract_ego_at, ESellerGraph, Edge, EgoInputs, GaiaModel, Normalization, Relation, SellerNode, Tape,
    Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn rand_inputs(rng: &mut ChaCha8Rng, model: &GaiaModel) -> NodeInputs {
    let c = model.config();
    NodeInputs {
        gmv: rand_tensor(rng, &[c.t_max, 1], 3.0),
        temporal: rand_tensor(rng, &[c.t_max, c.d_t], 1.0),
        static_feats: rand_tensor(rng, &[1, c.d_s], 1.0),
    }
}

/// Keeps the output ReLU open so input changes stay visible in the prediction.
fn open_head(model: &mut GaiaModel) {
    let b_p = model.head().b_p;
    for v in model.params_mut().get_mut(b_p).data_mut() {
        *v = 1e5;
    }
}

/// Center with `k` direct in-neighbors of random relation.
fn star(rng: &mut ChaCha8Rng, model: &GaiaModel, k: usize) -> EgoInputs {
    let nodes = (0..=k).map(|_| rand_inputs(rng, model)).collect();
    let mut adjacency = vec![Vec::new(); k + 1];
    for v in 1..=k {
        let rel = if rng.gen_bool(0.5) { Relation::SupplyChain } else { Relation::SameOwner };
        adjacency[0].push((v, rel));
    }
    let hop = std::iter::once(0).chain(std::iter::repeat_n(1, k)).collect();
    EgoInputs { nodes, hop, adjacency }
}

fn causal_mask_with_holes(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut m = Tensor::causal_mask(n);
    for i in 0..n {
        for j in 0..i {
            if rng.gen_bool(0.3) {
                m.data_mut()[i * n + j] = f64::NEG_INFINITY;
            }
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn composite_gradients_match_finite_differences(seed in any::<u64>(), t in 2usize..6, c in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[t, c], 1.0);
        let k = rand_tensor(&mut rng, &[w, c, c], 1.0);
        let bias = rand_tensor(&mut rng, &[c], 1.0);
        let mask = Arc::new(causal_mask_with_holes(&mut rng, t));
        let report = check_gradients(
            |tape, v| {
                let y = tape.conv1d_causal(v[0], v[1])?;
                let y = tape.add_row_bias(y, v[2])?;
                let xt = tape.transpose(v[0])?;
                let logits = tape.matmul(y, xt)?;
                let a = tape.softmax_masked(logits, Some(mask.clone()))?;
                let z = tape.matmul(a, v[0])?;
                let z = tape.tanh(z);
                let g = tape.sigmoid(y);
                let p = tape.hadamard(z, g)?;
                Ok(tape.sum(p))
            },
            &[x, k, bias],
            1e-5,
            1e-5,
        )
        .unwrap();
        prop_assert!(report.max_rel_err() < 1e-5, "{}", report.max_rel_err());
    }

    #[test]
    fn masked_softmax_rows_are_distributions(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = causal_mask_with_holes(&mut rng, n);
        let mut tape = Tape::new();
        let logits = tape.constant(rand_tensor(&mut rng, &[n, n], 30.0));
        let p = tape.softmax_masked(logits, Some(Arc::new(mask.clone()))).unwrap();
        let p = tape.value(p);
        for i in 0..n {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, &p) in row.iter().enumerate() {
                if mask.at(i, j) == f64::NEG_INFINITY {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn conv_output_ignores_the_future(seed in any::<u64>(), t in 2usize..16, c in 1usize..4, w in 1usize..6, cut in 0usize..16) {
        let cut = cut % t;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[t, c], 1.0);
        let k = rand_tensor(&mut rng, &[w, c, c], 1.0);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[cut * c..] {
            *v += rng.gen_range(1.0..5.0);
        }
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(x), tape.constant(k.clone()));
            let y = tape.conv1d_causal(xv, kv).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(x), run(x2));
        prop_assert_eq!(&a.data()[..cut * c], &b.data()[..cut * c]);
    }

    #[test]
    fn gated_embedding_is_bounded_by_capture(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::rand_model(&mut rng, seed);
        let cfg = model.config().clone();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let s = tape.constant(rand_tensor(&mut rng, &[cfg.t_max, cfg.channels], 3.0));
        let e = gaia::encoder::tel_forward(&mut tape, &bound, model.tel(), s).unwrap();
        let caps: Vec<_> = model
            .tel()
            .capture
            .iter()
            .map(|&k| tape.conv1d_causal(s, bound.var(k)).unwrap())
            .collect();
        let cap = tape.concat_lastdim(&caps).unwrap();
        let (e, cap) = (tape.value(e), tape.value(cap));
        for (&ev, &cv) in e.data().iter().zip(cap.data()) {
            prop_assert!(ev >= 0.0 && ev <= cv.max(0.0));
        }
    }

    #[test]
    fn neighbor_order_does_not_matter(seed in any::<u64>(), k in 1usize..5, rot in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::rand_model(&mut rng, seed);
        let ego = star(&mut rng, &model, k);
        // local order 1..=k rotated, edges remapped accordingly
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k + 1).collect();
        let mut nodes = vec![ego.nodes[0].clone()];
        nodes.extend(perm.iter().map(|&p| ego.nodes[p].clone()));
        let new_of = |old: usize| perm.iter().position(|&p| p == old).unwrap() + 1;
        let mut adj: Vec<(usize, Relation)> = ego.adjacency[0].iter().map(|&(v, r)| (new_of(v), r)).collect();
        adj.reverse();
        let mut adjacency = vec![Vec::new(); k + 1];
        adjacency[0] = adj;
        let permuted = EgoInputs { nodes, hop: ego.hop.clone(), adjacency };
        let (a, b) = (model.predict(&ego).unwrap(), model.predict(&permuted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn aggregation_weights_sum_to_one(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::rand_model(&mut rng, seed);
        let ego = star(&mut rng, &model, k);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let out = model.forward(&mut tape, &bound, &ego, true).unwrap();
        let total: f64 = out
            .attention
            .iter()
            .filter(|r| r.layer == 1 && r.dst == 0)
            .filter_map(|r| r.alpha)
            .map(|a| tape.value(a).item())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn information_travels_at_most_one_hop_per_layer(seed in any::<u64>(), layers in 1usize..4, far in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = common::rand_model(&mut rng, seed);
        if model.config().layers != layers {
            let mut cfg = model.config().clone();
            cfg.layers = layers;
            model = GaiaModel::new(cfg, seed).unwrap();
        }
        open_head(&mut model);
        // chain 0 <- 1 <- 2 <- 3 <- 4
        let nodes: Vec<_> = (0..5).map(|_| rand_inputs(&mut rng, &model)).collect();
        let adjacency = (0..5)
            .map(|i| if i < 4 { vec![(i + 1, Relation::SupplyChain)] } else { Vec::new() })
            .collect();
        let ego = EgoInputs { nodes, hop: (0..5).collect(), adjacency };
        let mut changed = ego.clone();
        for v in changed.nodes[far].gmv.data_mut() {
            *v += 1.0;
        }
        let encode = |x: &NodeInputs| {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, false);
            let e = model.encode(&mut tape, &bound, x).unwrap();
            tape.value(e).clone()
        };
        // a gate closed at every position hides the change at its source
        prop_assume!(encode(&ego.nodes[far]) != encode(&changed.nodes[far]));
        let (a, b) = (model.predict(&ego).unwrap(), model.predict(&changed).unwrap());
        prop_assert_eq!(a != b, far <= layers, "far {} layers {}", far, layers);
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>(), k in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::rand_model(&mut rng, seed);
        let ego = star(&mut rng, &model, k);
        let truth = rand_tensor(&mut rng, &[model.config().horizon], 1.0);
        let grads = || {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let out = model.forward(&mut tape, &bound, &ego, false).unwrap();
            let y = tape.constant(truth.clone());
            let loss = gaia::ita::mse_loss(&mut tape, out.pred, y).unwrap();
            let g = tape.backward(loss).unwrap();
            bound.vars().iter().map(|&v| g.get(v).unwrap().data().to_vec()).collect::<Vec<_>>()
        };
        prop_assert_eq!(grads(), grads());
    }

    #[test]
    fn padding_keeps_exactly_the_history(seed in any::<u64>(), len in 1usize..30, extra in 0usize..10, d_t in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let node = SellerNode {
            id: "n".into(),
            gmv: (0..len).map(|_| rng.gen_range(0.0..1e4)).collect(),
            temporal_feats: (0..len).map(|_| (0..d_t).map(|_| rng.gen()).collect()).collect(),
            static_feats: vec![],
        };
        let t_max = len + extra;
        let p = pad_and_mask(&node, t_max).unwrap();
        prop_assert_eq!(p.mask.iter().filter(|&&m| m).count(), len);
        prop_assert!(p.mask[extra..].iter().all(|&m| m));
        prop_assert_eq!(&p.gmv[extra..], &node.gmv[..]);
        prop_assert!(p.gmv[..extra].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ego_stays_within_hops(seed in any::<u64>(), n in 1usize..25, hops in 1usize..4, cap in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: Vec<SellerNode> = (0..n)
            .map(|i| SellerNode {
                id: format!("n{i}"),
                gmv: vec![1.0; rng.gen_range(1..6)],
                temporal_feats: vec![],
                static_feats: vec![],
            })
            .map(|mut s| { s.temporal_feats = vec![vec![]; s.gmv.len()]; s })
            .collect();
        let mut edges = Vec::new();
        for _ in 0..rng.gen_range(0..3 * n) {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a != b {
                let relation = if rng.gen_bool(0.5) { Relation::SupplyChain } else { Relation::SameOwner };
                edges.push(Edge { src: format!("n{a}"), dst: format!("n{b}"), relation });
            }
        }
        let Ok(g) = ESellerGraph::new(nodes, edges, Some(8)) else {
            // duplicate edges are rejected; nothing to check
            return Ok(());
        };
        let center = rng.gen_range(0..n);
        let ego = extract_ego_at(&g, center, hops, cap, seed).unwrap();
        prop_assert_eq!(ego.nodes[0], center);
        for (local, adj) in ego.adjacency.iter().enumerate() {
            prop_assert!(ego.hop[local] <= hops);
            prop_assert!(adj.len() <= cap);
            if ego.hop[local] == hops {
                prop_assert!(adj.is_empty());
            }
            for &(src, rel) in adj {
                prop_assert!(ego.hop[src] <= ego.hop[local] + 1);
                let real = g.in_neighbors(ego.nodes[local]).contains(&(ego.nodes[src], rel));
                prop_assert!(real);
            }
        }
    }

    #[test]
    fn normalization_round_trips(x in -1e9f64..1e9) {
        for norm in [Normalization::Log1p, Normalization::None] {
            let back = norm.invert(norm.apply(x));
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0), "{x} -> {back}");
        }
    }
}
