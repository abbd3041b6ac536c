//! Loop-based reference implementations, written against plain `Vec`s and
//! independent of the tape, plus random-instance drivers comparing them with
//! the library. Shared by the oracle tests and the acceptance suite.

#![allow(dead_code)]

use std::sync::Arc;

use gaia::encoder::{ffl_forward, tel_forward, Fusion, NodeVars};
use gaia::ita::{ita_gcn_layer, predict_head, LayerKind};
use gaia::model::Ablation;
use gaia::train::{metrics, Adam};
use gaia::{GaiaModel, ModelConfig, ParamId, Relation, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

pub fn mat_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m)
}

/// `out[t][o] = Σ_j Σ_i x[t - (w-1) + j][i] · k[j][i][o]`, zero outside the series.
pub fn ref_conv(x: &Mat, kernel: &Tensor) -> Mat {
    let (w, c_in, c_out) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let kd = kernel.data();
    let t_len = x.len();
    let mut out = vec![vec![0.0; c_out]; t_len];
    for t in 0..t_len {
        for o in 0..c_out {
            let mut acc = 0.0;
            for j in 0..w {
                let src = t as isize - (w as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                for i in 0..c_in {
                    acc += x[src as usize][i] * kd[(j * c_in + i) * c_out + o];
                }
            }
            out[t][o] = acc;
        }
    }
    out
}

pub fn ref_matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            out[i][j] = (0..k).map(|p| a[i][p] * b[p][j]).sum();
        }
    }
    out
}

/// Causal attention `softmax(QKᵀ/√C + M) V` with explicit loops over the open cells.
pub fn ref_attention(q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let t_len = q.len();
    let c = q[0].len() as f64;
    let mut att = vec![vec![0.0; t_len]; t_len];
    for i in 0..t_len {
        let logits: Vec<f64> =
            (0..=i).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / c.sqrt()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for j in 0..=i {
            att[i][j] = (logits[j] - max).exp() / z;
        }
    }
    let out = ref_matmul(&att, v);
    (out, att)
}

pub fn ref_cau(model: &GaiaModel, q: ParamId, k: ParamId, v: ParamId, h_u: &Mat, h_v: &Mat) -> Mat {
    let p = model.params();
    let qm = ref_conv(h_u, p.get(q));
    let km = ref_conv(h_v, p.get(k));
    let vm = ref_conv(h_v, p.get(v));
    ref_attention(&qm, &km, &vm).0
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

pub fn rand_model(rng: &mut ChaCha8Rng, seed: u64) -> GaiaModel {
    let groups = rng.gen_range(1..=3);
    let channels = groups * rng.gen_range(1..=3);
    let cfg = ModelConfig {
        t_max: rng.gen_range((1 << groups)..=10),
        horizon: rng.gen_range(1..=3),
        channels,
        kernel_groups: groups,
        layers: 2,
        d_t: rng.gen_range(1..=4),
        d_s: rng.gen_range(1..=3),
        ablation: Ablation::default(),
        share_cau: false,
    };
    let mut model = GaiaModel::new(cfg, seed).unwrap();
    // biases start at zero; randomize every weight so each path is exercised
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    model
}

/// Worst discrepancy of the feature fusion layer over `instances` random cases.
pub fn ffl_oracle(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let model = rand_model(&mut rng, seed);
        let cfg = model.config().clone();
        let Fusion::Ffl(fp) = model.fusion() else { unreachable!() };
        let p = model.params();
        let (t_len, c) = (cfg.t_max, cfg.channels);
        let gmv: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.0..12.0)).collect();
        let tf = rand_mat(&mut rng, t_len, cfg.d_t, 3.0);
        let sf: Vec<f64> = (0..cfg.d_s).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let w_i = p.get(fp.w_i).data();
        let b_i = p.get(fp.b_i).data();
        let w_t = to_mat(p.get(fp.w_t));
        let b_t = to_mat(p.get(fp.b_t));
        let w_s = to_mat(p.get(fp.w_s));
        let b_s = p.get(fp.b_s).data();
        let w_f = to_mat(p.get(fp.w_f));
        let b_f = to_mat(p.get(fp.b_f));
        let fs: Vec<f64> =
            (0..c).map(|o| b_s[o] + (0..cfg.d_s).map(|d| sf[d] * w_s[d][o]).sum::<f64>()).collect();
        let mut reference = vec![vec![0.0; c]; t_len];
        for t in 0..t_len {
            let mut cat = Vec::with_capacity(3 * c);
            cat.extend((0..c).map(|o| gmv[t] * w_i[o] + b_i[o]));
            cat.extend((0..c).map(|o| b_t[t][o] + (0..cfg.d_t).map(|d| tf[t][d] * w_t[d][o]).sum::<f64>()));
            cat.extend_from_slice(&fs);
            for o in 0..c {
                reference[t][o] = b_f[t][o] + (0..3 * c).map(|i| cat[i] * w_f[i][o]).sum::<f64>();
            }
        }

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let x = NodeVars {
            gmv: tape.constant(Tensor::new(&[t_len, 1], gmv).unwrap()),
            temporal: tape.constant(mat_tensor(&tf)),
            static_feats: tape.constant(Tensor::new(&[1, cfg.d_s], sf).unwrap()),
        };
        let s = ffl_forward(&mut tape, &bound, fp, &x).unwrap();
        worst = worst.max(rel_diff(&to_mat(tape.value(s)), &reference));
    }
    worst
}

/// Difference scaled by the reference magnitude (at least 1).
pub fn rel_diff(a: &Mat, reference: &Mat) -> f64 {
    let scale = reference.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    max_abs_diff(a, reference) / scale
}

pub fn tel_oracle(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let model = rand_model(&mut rng, seed);
        let cfg = model.config();
        let p = model.params();
        let s = rand_mat(&mut rng, cfg.t_max, cfg.channels, 2.0);
        let tel = model.tel();
        let mut capture: Mat = vec![Vec::new(); cfg.t_max];
        let mut denoise: Mat = vec![Vec::new(); cfg.t_max];
        for (&kc, &kd) in tel.capture.iter().zip(&tel.denoise) {
            let (a, b) = (ref_conv(&s, p.get(kc)), ref_conv(&s, p.get(kd)));
            for t in 0..cfg.t_max {
                capture[t].extend_from_slice(&a[t]);
                denoise[t].extend_from_slice(&b[t]);
            }
        }
        let reference: Mat = capture
            .iter()
            .zip(&denoise)
            .map(|(c, d)| c.iter().zip(d).map(|(x, y)| x.max(0.0) / (1.0 + (-y).exp())).collect())
            .collect();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let sv = tape.constant(mat_tensor(&s));
        let e = tel_forward(&mut tape, &bound, tel, sv).unwrap();
        worst = worst.max(rel_diff(&to_mat(tape.value(e)), &reference));
    }
    worst
}

/// Fixed 4-node local graph: 1 <- 0 (supply), 2 <-> 0 (owner), 3 -> 1 (supply).
pub fn four_node_adjacency() -> Vec<Vec<(usize, Relation)>> {
    vec![
        vec![(1, Relation::SupplyChain), (2, Relation::SameOwner)],
        vec![(3, Relation::SupplyChain)],
        vec![(0, Relation::SameOwner)],
        vec![],
    ]
}

/// Two stacked graph layers on the 4-node graph, library vs reference.
pub fn layer_oracle(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let adjacency = four_node_adjacency();
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let model = rand_model(&mut rng, seed);
        let cfg = model.config().clone();
        let p = model.params();
        let mut h: Vec<Mat> = (0..4).map(|_| rand_mat(&mut rng, cfg.t_max, cfg.channels, 1.0)).collect();

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let mut hv: Vec<_> = h.iter().map(|m| tape.constant(mat_tensor(m))).collect();
        let mask = Arc::new(Tensor::causal_mask(cfg.t_max));
        for layer in model.layers() {
            let LayerKind::Ita(lp) = layer else { unreachable!() };
            hv = ita_gcn_layer(&mut tape, &bound, lp, &mask, &adjacency, &hv).unwrap();

            let mu = p.get(lp.mu).data();
            let (l_s, l_d) = (p.get(lp.l_s).data(), p.get(lp.l_d).data());
            let rel_w = p.get(lp.rel_w).data();
            let proj = |m: &Mat, w: &[f64]| -> Vec<f64> {
                m.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
            };
            let next: Vec<Mat> = (0..4)
                .map(|u| {
                    let mut acc = ref_cau(&model, lp.intra.q, lp.intra.k, lp.intra.v, &h[u], &h[u]);
                    let nbrs = &adjacency[u];
                    let g: Vec<f64> = nbrs
                        .iter()
                        .map(|&(v, rel)| {
                            let (a, b) = (proj(&h[u], l_s), proj(&h[v], l_d));
                            (0..cfg.t_max).map(|t| mu[t] * (a[t] + b[t]).tanh()).sum::<f64>()
                                + rel_w[rel.index()]
                        })
                        .collect();
                    let z: f64 = g.iter().map(|x| x.exp()).sum();
                    for (&(v, _), gv) in nbrs.iter().zip(&g) {
                        let alpha = gv.exp() / z;
                        let msg = ref_cau(&model, lp.inter.q, lp.inter.k, lp.inter.v, &h[u], &h[v]);
                        for (ra, rm) in acc.iter_mut().zip(&msg) {
                            for (x, y) in ra.iter_mut().zip(rm) {
                                *x += alpha * y;
                            }
                        }
                    }
                    acc
                })
                .collect();
            h = next;
        }
        for (v, reference) in hv.iter().zip(&h) {
            worst = worst.max(rel_diff(&to_mat(tape.value(*v)), reference));
        }
    }
    worst
}

pub fn head_oracle(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let model = rand_model(&mut rng, seed);
        let cfg = model.config().clone();
        let p = model.params();
        let hp = model.head();
        let h_last = rand_mat(&mut rng, cfg.t_max, cfg.channels, 1.0);
        let e = rand_mat(&mut rng, cfg.t_max, cfg.channels, 1.0);
        let l_p = p.get(hp.l_p).data();
        let w_p = to_mat(p.get(hp.w_p));
        let b_p = p.get(hp.b_p).data();
        let col: Vec<f64> = (0..cfg.t_max)
            .map(|t| (0..cfg.channels).map(|c| (h_last[t][c] + e[t][c]) * l_p[c]).sum())
            .collect();
        let reference: Vec<f64> = (0..cfg.horizon)
            .map(|j| (b_p[j] + (0..cfg.t_max).map(|t| col[t] * w_p[t][j]).sum::<f64>()).max(0.0))
            .collect();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let (hv, ev) = (tape.constant(mat_tensor(&h_last)), tape.constant(mat_tensor(&e)));
        let y = predict_head(&mut tape, &bound, hp, hv, ev).unwrap();
        worst = worst.max(rel_diff(&vec![tape.value(y).data().to_vec()], &vec![reference]));
    }
    worst
}

pub fn metrics_oracle(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.gen_range(1..60);
        let truth: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.1) { rng.gen_range(0.0..1.0) } else { rng.gen_range(0.0..1e5) })
            .collect();
        let pred: Vec<f64> =
            truth.iter().map(|y| y * rng.gen_range(0.5..1.5) + rng.gen_range(-5.0..5.0)).collect();
        let (mut abs, mut sq, mut pct, mut kept) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let e = pred[i] - truth[i];
            abs += e.abs();
            sq += e * e;
            if truth[i] >= 1.0 {
                pct += e.abs() / truth[i];
                kept += 1.0;
            }
        }
        let m = metrics(&pred, &truth).unwrap();
        let mape = if kept > 0.0 { pct / kept } else { f64::NAN };
        let pairs = [(m.mae, abs / n as f64), (m.rmse, (sq / n as f64).sqrt())];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
        if mape.is_nan() {
            if !m.mape.is_nan() {
                worst = f64::INFINITY;
            }
        } else {
            worst = worst.max((m.mape - mape).abs());
        }
    }
    worst
}

pub fn adam_oracle(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let len = rng.gen_range(1..20);
        let (lr, b1, b2, eps) =
            (rng.gen_range(1e-5..1e-1), rng.gen_range(0.5..0.99), rng.gen_range(0.9..0.9999), 1e-8);
        let mut p = vec![Tensor::vector((0..len).map(|_| rng.gen_range(-2.0..2.0)).collect())];
        let mut adam = Adam::new(&p, lr, b1, b2, eps);
        let mut rp: Vec<f64> = p[0].data().to_vec();
        let (mut m, mut v) = (vec![0.0; len], vec![0.0; len]);
        for step in 1..=rng.gen_range(1..6) {
            let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
            adam.update(&mut p, &[Tensor::vector(g.clone())]);
            for i in 0..len {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powf(step as f64));
                let vh = v[i] / (1.0 - b2.powf(step as f64));
                rp[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        for (a, b) in p[0].data().iter().zip(&rp) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
