//! Minibatch Adam training on ego-subgraphs, evaluation and persistence.

mod adam;
pub mod baselines;
mod checkpoint;
mod config;
mod metrics;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use baselines::Baseline;
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::TrainConfig;
pub use metrics::{metrics, Evaluation, Metrics, MAPE_FLOOR};

use crate::dataset::{Dataset, Normalization};
use crate::error::{GaiaError, Result};
use crate::graph::extract_ego_at;
use crate::ita::mse_loss;
use crate::model::{EgoInputs, GaiaModel};
use crate::params::ParamStore;
use crate::synth::Splits;
use crate::tensor::{Tape, Tensor};

/// Seed of the neighbor sample drawn for `node`.
pub fn ego_seed(seed: u64, node: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ node as u64
}

/// Model inputs for the ego-subgraph centered on `node`.
pub fn ego_inputs(data: &Dataset, cfg: &TrainConfig, node: usize) -> Result<EgoInputs> {
    let ego = extract_ego_at(&data.graph, node, cfg.layers, cfg.max_neighbors, ego_seed(cfg.seed, node))?;
    Ok(EgoInputs::new(&ego, cfg.normalization))
}

fn normalized_target(data: &Dataset, norm: Normalization, node: usize) -> Result<Tensor> {
    let y = data.target(node)?;
    Ok(Tensor::vector(y.iter().map(|&v| norm.apply(v)).collect()))
}

/// Per-month forecasts in original units, in the order of `nodes`.
pub fn predict_nodes(
    model: &GaiaModel,
    cfg: &TrainConfig,
    data: &Dataset,
    nodes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    nodes
        .par_iter()
        .map(|&i| {
            let pred = model.predict(&ego_inputs(data, cfg, i)?)?;
            Ok(pred.into_iter().map(|v| cfg.normalization.invert(v)).collect())
        })
        .collect()
}

pub fn evaluate(model: &GaiaModel, cfg: &TrainConfig, data: &Dataset, nodes: &[usize]) -> Result<Evaluation> {
    if nodes.is_empty() {
        return Err(GaiaError::EmptyNodeSet);
    }
    let preds = predict_nodes(model, cfg, data, nodes)?;
    Evaluation::from_predictions(data, nodes, &preds)
}

/// Evaluation of a graph-free baseline and the number of nodes that fell back
/// to `last_value`.
pub fn evaluate_baseline(b: Baseline, data: &Dataset, nodes: &[usize]) -> Result<(Evaluation, usize)> {
    let forecasts: Vec<_> =
        nodes.iter().map(|&i| b.forecast(&data.graph.node(i).gmv, data.horizon)).collect();
    let fell_back = forecasts.iter().filter(|f| f.fell_back).count();
    let preds: Vec<Vec<f64>> = forecasts.into_iter().map(|f| f.values).collect();
    Ok((Evaluation::from_predictions(data, nodes, &preds)?, fell_back))
}

/// Mean normalized-space MSE over `nodes` at the current parameters.
pub fn mean_loss(model: &GaiaModel, cfg: &TrainConfig, data: &Dataset, nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(GaiaError::EmptyNodeSet);
    }
    let losses: Vec<f64> = nodes
        .par_iter()
        .map(|&i| {
            let pred = model.predict(&ego_inputs(data, cfg, i)?)?;
            let y = normalized_target(data, cfg.normalization, i)?;
            let n = pred.len() as f64;
            Ok(pred.iter().zip(y.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub seconds: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_mae,val_rmse,val_mape,seconds";

/// CSV epoch log. With `timing == false` the seconds column is written as 0.
pub fn write_epoch_log<W: Write>(w: &mut W, log: &[EpochRecord], timing: bool) -> std::io::Result<()> {
    writeln!(w, "{EPOCH_LOG_HEADER}")?;
    for r in log {
        let secs = if timing { r.seconds } else { 0.0 };
        writeln!(w, "{},{},{},{},{},{}", r.epoch, r.train_loss, r.val_mae, r.val_rmse, r.val_mape, secs)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when validation ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: GaiaModel,
    adam: Adam,
    epoch: usize,
    step: usize,
}

impl Trainer {
    /// Fresh model for `data`. With `init_head_bias` the head bias starts at the
    /// mean normalized target of `train_nodes`.
    pub fn new(data: &Dataset, cfg: TrainConfig, train_nodes: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let g = &data.graph;
        if g.t_max() != cfg.t_max {
            return Err(GaiaError::Config(format!(
                "config t_max {} but the graph holds {} months",
                cfg.t_max,
                g.t_max()
            )));
        }
        if data.horizon != cfg.horizon {
            return Err(GaiaError::Config(format!(
                "config horizon {} but targets cover {} months",
                cfg.horizon, data.horizon
            )));
        }
        let mut model = GaiaModel::new(cfg.model_config(g.d_t(), g.d_s())?, cfg.seed)?;
        if cfg.init_head_bias && !train_nodes.is_empty() {
            let mut mean = vec![0.0; cfg.horizon];
            for &i in train_nodes {
                for (m, v) in mean.iter_mut().zip(normalized_target(data, cfg.normalization, i)?.data()) {
                    *m += v;
                }
            }
            let b_p = model.head().b_p;
            let n = train_nodes.len() as f64;
            for (dst, m) in model.params_mut().get_mut(b_p).data_mut().iter_mut().zip(mean) {
                *dst = m / n;
            }
        }
        let adam = Adam::new(model.params().tensors(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
        log::info!(
            "model with {} parameters, ablation {:?}",
            model.param_count(),
            model.config().ablation.names()
        );
        Ok(Trainer { cfg, model, adam, epoch: 0, step: 0 })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let adam = match &ck.adam {
            Some(a) => a.clone(),
            None => Adam::new(
                model.params().tensors(),
                ck.train.learning_rate,
                ck.train.beta1,
                ck.train.beta2,
                ck.train.eps,
            ),
        };
        Ok(Trainer { cfg: ck.train.clone(), step: adam.step as usize, model, adam, epoch: ck.epoch })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &GaiaModel {
        &self.model
    }

    pub fn into_model(self) -> GaiaModel {
        self.model
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train: self.cfg.clone(),
            model: self.model.config().clone(),
            params: self.model.params().clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch,
        }
    }

    fn node_gradient(&self, data: &Dataset, node: usize) -> Result<(f64, Vec<Tensor>)> {
        let ego = ego_inputs(data, &self.cfg, node)?;
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape, true);
        let out = self.model.forward(&mut tape, &bound, &ego, false)?;
        let y = tape.constant(normalized_target(data, self.cfg.normalization, node)?);
        let loss = mse_loss(&mut tape, out.pred, y)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let grads = bound
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("every parameter receives a gradient"))
            .collect();
        Ok((value, grads))
    }

    /// One pass over `train_nodes` in a seeded order. Returns the mean
    /// per-sample loss seen during the pass.
    pub fn train_epoch(&mut self, data: &Dataset, train_nodes: &[usize]) -> Result<f64> {
        if train_nodes.is_empty() {
            return Err(GaiaError::EmptySplit("train"));
        }
        let mut order = train_nodes.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            self.step += 1;
            let results: Vec<(f64, Vec<Tensor>)> =
                batch.par_iter().map(|&i| self.node_gradient(data, i)).collect::<Result<_>>()?;
            let mut sum: Vec<Tensor> =
                self.model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut batch_loss = 0.0;
            for (loss, grads) in &results {
                batch_loss += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let finite = sum.iter().all(Tensor::is_finite);
            if !batch_loss.is_finite() || !finite {
                return Err(GaiaError::Divergence {
                    epoch: self.epoch + 1,
                    step: self.step,
                    loss: batch_loss * scale,
                });
            }
            for t in &mut sum {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            self.adam.update(self.model.params_mut().tensors_mut(), &sum);
            total += batch_loss;
        }
        self.epoch += 1;
        Ok(total / order.len() as f64)
    }

    /// Trains until `cfg.epochs` or early stopping, then keeps the parameters
    /// with the best validation MAE.
    pub fn fit(
        &mut self,
        data: &Dataset,
        splits: &Splits,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        let mut log = Vec::new();
        let mut best: Option<(f64, usize, ParamStore)> = None;
        let mut since_best = 0;
        let mut stopped_early = false;
        while self.epoch < self.cfg.epochs {
            let start = Instant::now();
            let train_loss = self.train_epoch(data, &splits.train)?;
            let (val_mae, val_rmse, val_mape) = if splits.val.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                let e = evaluate(&self.model, &self.cfg, data, &splits.val)?;
                (e.total.mae, e.total.rmse, e.total.mape)
            };
            let rec = EpochRecord {
                epoch: self.epoch,
                train_loss,
                val_mae,
                val_rmse,
                val_mape,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {} train_loss {:.6} val_mae {:.3} val_mape {:.4}",
                rec.epoch,
                rec.train_loss,
                rec.val_mae,
                rec.val_mape
            );
            on_epoch(&rec);
            log.push(rec);
            if !splits.val.is_empty() {
                if best.as_ref().map_or(true, |(b, _, _)| val_mae < *b) {
                    best = Some((val_mae, self.epoch, self.model.params().clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if self.cfg.early_stop_patience > 0 && since_best >= self.cfg.early_stop_patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        let best_epoch = best.map(|(_, epoch, params)| {
            *self.model.params_mut() = params;
            epoch
        });
        Ok(TrainReport { log, best_epoch, stopped_early })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ESellerGraph, SellerNode};
    use crate::synth::{generate, split, SynthSpec};
    use crate::TruthRecord;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            channels: 4,
            kernel_groups: 2,
            t_max: 8,
            horizon: 2,
            batch_size: 4,
            learning_rate: 1e-2,
            epochs: 3,
            ..TrainConfig::default()
        }
    }

    fn small_data(n: usize, seed: u64) -> Dataset {
        let out = generate(&SynthSpec {
            n_sellers: n,
            t_max: 8,
            horizon: 2,
            min_observed: 3,
            deficiency_dist: None,
            new_shop_fraction: 1.0,
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        Dataset::new(out.graph, &out.truth).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = small_data(12, 1);
        let nodes: Vec<usize> = (0..12).collect();
        let mut t = Trainer::new(&data, TrainConfig { learning_rate: 0.0, ..small_cfg() }, &nodes).unwrap();
        let before = t.model().params().clone();
        for _ in 0..2 {
            t.train_epoch(&data, &nodes).unwrap();
        }
        assert_eq!(t.model().params(), &before);
    }

    #[test]
    fn same_seed_same_curve() {
        let data = small_data(16, 2);
        let splits = split(&data.graph, [0.75, 0.25, 0.0], 0).unwrap();
        let run = || {
            let mut t = Trainer::new(&data, small_cfg(), &splits.train).unwrap();
            let r = t.fit(&data, &splits, |_| {}).unwrap();
            (r.log.iter().map(|e| (e.train_loss, e.val_mae)).collect::<Vec<_>>(), t.model().params().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let data = small_data(4, 0);
        let cfg = TrainConfig { horizon: 3, ..small_cfg() };
        assert!(matches!(Trainer::new(&data, cfg, &[0]), Err(GaiaError::Config(_))));
    }

    #[test]
    fn divergence_names_the_step() {
        let node = SellerNode {
            id: "a".into(),
            gmv: vec![1.0; 8],
            temporal_feats: vec![vec![1.0]; 8],
            static_feats: vec![1.0],
        };
        let g = ESellerGraph::new(vec![node], vec![], Some(8)).unwrap();
        let truth = [TruthRecord {
            id: "a".into(),
            targets: vec![f64::INFINITY, 1.0],
            role: "retailer".into(),
            lag: 0,
            season_phase: 0.0,
            observed_len: 8,
            supplies: None,
        }];
        let data = Dataset::new(g, &truth).unwrap();
        let cfg = TrainConfig { init_head_bias: false, ..small_cfg() };
        let mut t = Trainer::new(&data, cfg, &[0]).unwrap();
        let err = t.train_epoch(&data, &[0]).unwrap_err();
        assert!(matches!(err, GaiaError::Divergence { epoch: 1, step: 1, .. }), "{err}");
    }

    #[test]
    fn epoch_log_format() {
        let rec = EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_mae: 2.0,
            val_rmse: 3.0,
            val_mape: 0.25,
            seconds: 1.5,
        };
        let mut out = Vec::new();
        write_epoch_log(&mut out, &[rec], false).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,train_loss,val_mae,val_rmse,val_mape,seconds\n1,0.5,2,3,0.25,0\n"
        );
    }
}
