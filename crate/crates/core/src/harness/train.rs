//! The optimization loop: regenerate weights, forward, loss, backward and an
//! SGD step, once per minibatch.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::archspec::TrainConfig;
use crate::autodiff::{Sgd, Tape};
use crate::error::{Error, Result};
use crate::rng;
use crate::weightgen::FlopReport;

use super::data::Dataset;
use super::model::{eval_threads, Model, ParamKind};

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    /// Optimization steps completed.
    pub step: usize,
    /// 1-based epoch just finished.
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    /// `None` without an eval set.
    pub eval_error_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
    pub params_total: usize,
    pub params_theta: usize,
    pub params_overhead: usize,
    pub flops_forward: u64,
    pub flops_weightgen: u64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Parameter and FLOP counts that stay fixed over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunCounts {
    pub total: usize,
    pub theta: usize,
    pub overhead: usize,
    pub flops_forward: u64,
    pub flops_weightgen: u64,
}

impl RunCounts {
    pub fn of(model: &Model, batch_size: usize) -> Self {
        let total = model.census();
        let theta = model.theta_count();
        let (fwd, gen) = match model.generator() {
            Some(g) => {
                let r = FlopReport::from_plan(&model.net, &g.plan, batch_size);
                (r.forward_per_image, r.generation)
            }
            None => (model.net.forward_macs(), 0),
        };
        RunCounts {
            total,
            theta,
            overhead: total - theta - model.bias_count(),
            flops_forward: fwd,
            flops_weightgen: gen,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// Loss of every step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    pub fn final_eval_error(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.eval_error_at_1)
    }
}

/// Trains `model` in place for `epochs` epochs. `on_epoch` sees every
/// record as soon as it is produced.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    epochs: usize,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let counts = RunCounts::of(model, cfg.batch_size);
    let input_shape = model.net.input_shape().to_vec();
    let decay: Vec<bool> = model
        .params_mut()
        .iter()
        .map(|(k, _)| *k != ParamKind::Combiner || cfg.decay_combiner)
        .collect();
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
    let threads = eval_threads();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut out = TrainOutcome {
        records: Vec::with_capacity(epochs),
        step_losses: Vec::new(),
    };
    for epoch in 1..=epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(idx, &input_shape);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let loss = model.loss(&mut tape, &bound, x, &labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: out.step_losses.len(),
                    loss: value,
                });
            }
            let grads = tape.backward(loss)?;
            let mut params = model.params_mut();
            for ((_, t), &v) in params.iter_mut().zip(&bound.params) {
                t.zero_grad();
                grads.accumulate_into(v, t);
            }
            let mut tensors: Vec<&mut _> = params.into_iter().map(|(_, t)| t).collect();
            sgd.step(&mut tensors, &decay);
            out.step_losses.push(value);
            epoch_loss += value;
            steps += 1;
        }
        let eval_error_at_1 = match eval {
            Some(e) if !e.is_empty() => Some(model.materialize()?.evaluate(e, threads).error_at_1),
            _ => None,
        };
        let record = MetricsRecord {
            step: out.step_losses.len(),
            epoch,
            train_loss: epoch_loss / steps as f64,
            eval_error_at_1,
            wall_time_ms: cfg.wall_time.then(|| start.elapsed().as_millis() as u64),
            params_total: counts.total,
            params_theta: counts.theta,
            params_overhead: counts.overhead,
            flops_forward: counts.flops_forward,
            flops_weightgen: counts.flops_weightgen,
        };
        on_epoch(&record)?;
        out.records.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{Activation, BudgetSpec, DataConfig, LayerSpec, NetworkSpec};
    use crate::harness::data::blobs;
    use crate::paramstore::{GroupMapping, Provenance};
    use crate::weightgen::Generator;

    fn net() -> NetworkSpec {
        NetworkSpec::new(
            vec![
                LayerSpec::dense("h1", 16, 8),
                LayerSpec::dense("h2", 16, 16),
                LayerSpec::dense("out", 4, 16).with_activation(Activation::None),
            ],
            vec![8],
            4,
        )
        .unwrap()
    }

    fn data() -> (Dataset, Dataset) {
        let cfg = DataConfig {
            train_size: 256,
            eval_size: 64,
            spread: 1.5,
            ..DataConfig::default()
        };
        blobs(&cfg, 8, 4)
    }

    fn tcfg(lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            batch_size: 32,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn shared(net: &NetworkSpec, mapping: &GroupMapping, total: usize, seed: u64) -> Model {
        let mut b = BudgetSpec::new(total);
        b.combiner = crate::archspec::Combiner::Emb;
        Model::shared(net.clone(), Generator::from_mapping(net, mapping, &b, seed).unwrap())
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let net = net();
        let (train_set, _) = data();
        let mut m = shared(&net, &GroupMapping::single(&net), 150, 1);
        let before: Vec<Vec<f64>> = m.param_info().iter().map(|(_, _, t)| t.data().to_vec()).collect();
        train(&mut m, &train_set, None, &tcfg(0.0), 1, |_| Ok(())).unwrap();
        let after: Vec<Vec<f64>> = m.param_info().iter().map(|(_, _, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn exact_regime_trajectory_matches_plain() {
        let net = net();
        let (train_set, eval_set) = data();
        let mut a = shared(
            &net,
            &GroupMapping::one_per_layer(&net, Provenance::Manual),
            net.total_weights(),
            7,
        );
        let mut b = Model::plain(net.clone(), 7);
        let ra = train(&mut a, &train_set, Some(&eval_set), &tcfg(0.05), 3, |_| Ok(())).unwrap();
        let rb = train(&mut b, &train_set, Some(&eval_set), &tcfg(0.05), 3, |_| Ok(())).unwrap();
        assert_eq!(ra.step_losses, rb.step_losses);
        assert_eq!(
            ra.records.iter().map(|r| r.eval_error_at_1).collect::<Vec<_>>(),
            rb.records.iter().map(|r| r.eval_error_at_1).collect::<Vec<_>>()
        );
    }

    #[test]
    fn low_budget_training_reduces_loss() {
        let net = net();
        let (train_set, eval_set) = data();
        let mut m = shared(&net, &GroupMapping::single(&net), net.total_weights() / 4, 0);
        let r = train(&mut m, &train_set, Some(&eval_set), &tcfg(0.05), 5, |_| Ok(())).unwrap();
        let first = r.step_losses[0];
        assert!(r.final_train_loss().unwrap() < first, "{:?}", r.final_train_loss());
        let rec = &r.records[4];
        assert_eq!(rec.params_total, m.census());
        assert_eq!(rec.params_theta, net.total_weights() / 4);
        assert_eq!(rec.params_total, rec.params_theta + rec.params_overhead + m.bias_count());
        assert!(rec.wall_time_ms.is_none());
        assert!(!rec.to_json_line().contains("wall_time"));
    }

    #[test]
    fn runs_are_reproducible() {
        let net = net();
        let (train_set, eval_set) = data();
        let run = || {
            let mut m = shared(&net, &GroupMapping::single(&net), 200, 2);
            let r = train(&mut m, &train_set, Some(&eval_set), &tcfg(0.05), 2, |_| Ok(())).unwrap();
            r.records.iter().map(MetricsRecord::to_json_line).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_reports_step() {
        let net = net();
        let (train_set, _) = data();
        let mut m = Model::plain(net.clone(), 0);
        let err = train(&mut m, &train_set, None, &tcfg(1e6), 3, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Divergence { step, .. } if step > 0), "{err}");
    }
}
