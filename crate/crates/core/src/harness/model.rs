//! Networks whose weights are generated from shared parameters, the plain
//! baseline with one weight tensor per layer, and frozen inference.

use crate::archspec::{Activation, LayerKind, NetworkSpec};
use crate::autodiff::kernels::{self, ConvGeometry};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::weightgen::{GenerationKind, Generator, ParamRole};

use super::data::Dataset;

/// How a trainable tensor is treated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// θ or plain layer weights.
    Weight,
    Bias,
    /// Combiner coefficients, embeddings, projections and masks.
    Combiner,
}

#[derive(Debug, Clone)]
pub enum Weights {
    Shared(Box<Generator>),
    Plain(Vec<Tensor>),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub net: NetworkSpec,
    pub weights: Weights,
    pub biases: Vec<Option<Tensor>>,
}

/// One step's tape handles.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub weights: Vec<Var>,
    pub biases: Vec<Option<Var>>,
    /// Every trainable tensor, in [`Model::params_mut`] order.
    pub params: Vec<Var>,
    pub kinds: Vec<GenerationKind>,
}

fn zero_biases(net: &NetworkSpec) -> Vec<Option<Tensor>> {
    net.layers()
        .iter()
        .map(|l| l.has_bias.then(|| Tensor::zeros(&[l.bias_count()])))
        .collect()
}

fn layer_err(net: &NetworkSpec, i: usize, e: Error) -> Error {
    Error::Layer {
        layer: net.layers()[i].id.clone(),
        reason: e.to_string(),
    }
}

impl Model {
    pub fn shared(net: NetworkSpec, generator: Generator) -> Self {
        let biases = zero_biases(&net);
        Model {
            net,
            weights: Weights::Shared(Box::new(generator)),
            biases,
        }
    }

    /// One independent weight tensor per layer, drawn layer by layer from
    /// the same stream and scale the shared model uses for θ.
    pub fn plain(net: NetworkSpec, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, crate::rng::THETA);
        let weights = net
            .layers()
            .iter()
            .map(|l| {
                let data = crate::weightgen::he_normal(&mut rng, l.weight_count(), l.fan_in());
                Tensor::new(l.weight_shape.clone(), data).expect("sized")
            })
            .collect();
        let biases = zero_biases(&net);
        Model {
            net,
            weights: Weights::Plain(weights),
            biases,
        }
    }

    pub fn generator(&self) -> Option<&Generator> {
        match &self.weights {
            Weights::Shared(g) => Some(g),
            Weights::Plain(_) => None,
        }
    }

    /// Names, kinds and sizes of all trainable tensors.
    pub fn param_info(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out: Vec<(String, ParamKind, &Tensor)> = match &self.weights {
            Weights::Shared(g) => g
                .params()
                .into_iter()
                .map(|(name, role, t)| (name, kind_of(role), t))
                .collect(),
            Weights::Plain(ws) => ws
                .iter()
                .zip(self.net.layers())
                .map(|(w, l)| (format!("weight.{}", l.id), ParamKind::Weight, w))
                .collect(),
        };
        for (b, l) in self.biases.iter().zip(self.net.layers()) {
            if let Some(b) = b {
                out.push((format!("bias.{}", l.id), ParamKind::Bias, b));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Tensor)> {
        let mut out: Vec<(ParamKind, &mut Tensor)> = match &mut self.weights {
            Weights::Shared(g) => g
                .params_mut()
                .into_iter()
                .map(|(role, t)| (kind_of(role), t))
                .collect(),
            Weights::Plain(ws) => ws.iter_mut().map(|w| (ParamKind::Weight, w)).collect(),
        };
        out.extend(self.biases.iter_mut().flatten().map(|b| (ParamKind::Bias, b)));
        out
    }

    /// Trainable scalars.
    pub fn census(&self) -> usize {
        self.param_info().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// `|θ|` for a shared model, `Σ|w_i|` for a plain one.
    pub fn theta_count(&self) -> usize {
        match &self.weights {
            Weights::Shared(g) => g.plan.theta_total(),
            Weights::Plain(_) => self.net.total_weights(),
        }
    }

    pub fn bias_count(&self) -> usize {
        self.biases.iter().flatten().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape and generates this step's weights.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let layers = self.net.layers();
        let (weights, kinds, mut params) = match &self.weights {
            Weights::Shared(g) => {
                let bound = g.bind(tape);
                let mut ws = Vec::with_capacity(layers.len());
                let mut kinds = Vec::with_capacity(layers.len());
                for (i, l) in layers.iter().enumerate() {
                    let w = g
                        .generate(tape, &bound, i, &l.weight_shape)
                        .map_err(|e| layer_err(&self.net, i, e))?;
                    ws.push(w.var);
                    kinds.push(w.kind);
                }
                (ws, kinds, bound.all)
            }
            Weights::Plain(ws) => {
                let vars: Vec<Var> = ws.iter().map(|w| tape.param(w)).collect();
                (vars.clone(), vec![GenerationKind::Identity; ws.len()], vars)
            }
        };
        let biases: Vec<Option<Var>> =
            self.biases.iter().map(|b| b.as_ref().map(|b| tape.param(b))).collect();
        params.extend(biases.iter().flatten());
        Ok(BoundModel {
            weights,
            biases,
            params,
            kinds,
        })
    }

    /// Logits for a `[B, input_shape…]` batch.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<Var> {
        let batch = tape.shape(x)[0];
        let n = self.net.layers().len();
        let mut h = x;
        for (i, l) in self.net.layers().iter().enumerate() {
            let step = |tape: &mut Tape, h: Var| -> Result<Var> {
                let w = bound.weights[i];
                let mut h = match l.kind {
                    LayerKind::Dense => {
                        let flat = if tape.shape(h).len() == 2 {
                            h
                        } else {
                            tape.reshape(h, &[batch, l.weight_shape[1]])?
                        };
                        let wt = tape.transpose(w)?;
                        tape.matmul(flat, wt)?
                    }
                    LayerKind::Conv2d => tape.conv2d(h, w, l.stride, l.padding)?,
                };
                if let Some(b) = bound.biases[i] {
                    h = tape.add_bias(h, b)?;
                }
                Ok(match l.activation {
                    Activation::Relu => tape.relu(h),
                    // Folded into the loss on the output layer.
                    Activation::Softmax if i + 1 < n => tape.softmax(h),
                    _ => h,
                })
            };
            h = step(tape, h).map_err(|e| layer_err(&self.net, i, e))?;
        }
        if tape.shape(h).len() != 2 {
            h = tape.reshape(h, &[batch, self.net.num_classes()])?;
        }
        Ok(h)
    }

    /// Mean cross-entropy of a batch.
    pub fn loss(&self, tape: &mut Tape, bound: &BoundModel, x: Tensor, labels: &[usize]) -> Result<Var> {
        let x = tape.constant(x);
        let logits = self.forward(tape, bound, x)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    /// Generates every layer's weights once.
    pub fn materialize(&self) -> Result<FrozenNetwork> {
        let weights = match &self.weights {
            Weights::Plain(ws) => ws.iter().map(Tensor::detached).collect(),
            Weights::Shared(_) => {
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape)?;
                bound.weights.iter().map(|&w| tape.value(w).detached()).collect()
            }
        };
        Ok(FrozenNetwork {
            net: self.net.clone(),
            weights,
            biases: self.biases.iter().map(|b| b.as_ref().map(Tensor::detached)).collect(),
        })
    }
}

fn kind_of(role: ParamRole) -> ParamKind {
    if role.is_combiner() {
        ParamKind::Combiner
    } else {
        ParamKind::Weight
    }
}

/// Fixed per-layer weights; inference runs without a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNetwork {
    pub net: NetworkSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Option<Tensor>>,
}

/// Eval threads: `NPAS_THREADS` if set, else the available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("NPAS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub logits: Vec<f64>,
    pub error_at_1: f64,
    /// Mean cross-entropy.
    pub loss: f64,
}

impl FrozenNetwork {
    /// Logits for `batch` flat samples, single-threaded. The kernel sequence
    /// matches [`Model::forward`].
    pub fn logits(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let n = self.net.layers().len();
        let mut h = x.to_vec();
        let mut shape = self.net.input_shape().to_vec();
        for (i, (l, w)) in self.net.layers().iter().zip(&self.weights).enumerate() {
            let (mut out, inner) = match l.kind {
                LayerKind::Dense => {
                    let (o, k) = (l.weight_shape[0], l.weight_shape[1]);
                    let wt = kernels::transpose(w.data(), o, k);
                    shape = vec![o];
                    (kernels::matmul(&h, &wt, batch, k, o), 1)
                }
                LayerKind::Conv2d => {
                    let geo = ConvGeometry {
                        batch,
                        in_channels: shape[0],
                        height: shape[1],
                        width: shape[2],
                        filters: l.weight_shape[0],
                        kh: l.weight_shape[2],
                        kw: l.weight_shape[3],
                        stride: l.stride,
                        padding: l.padding,
                    };
                    let (oh, ow) = geo.out_hw();
                    shape = vec![geo.filters, oh, ow];
                    (kernels::conv2d(&h, w.data(), &geo), oh * ow)
                }
            };
            if let Some(b) = &self.biases[i] {
                out = kernels::add_bias(&out, b.data(), inner);
            }
            h = match l.activation {
                Activation::Relu => kernels::relu(&out),
                Activation::Softmax if i + 1 < n => kernels::softmax_rows(&out, *shape.last().unwrap()),
                _ => out,
            };
        }
        h
    }

    /// Logits with samples sharded into contiguous blocks across `threads`.
    /// Rows are independent, so the result does not depend on `threads`.
    pub fn logits_parallel(&self, x: &[f64], batch: usize, threads: usize) -> Vec<f64> {
        let len = self.net.input_len();
        let threads = threads.clamp(1, batch.max(1));
        if threads == 1 {
            return self.logits(x, batch);
        }
        let per = batch.div_ceil(threads);
        let parts: Vec<Vec<f64>> = std::thread::scope(|s| {
            let handles: Vec<_> = x
                .chunks(per * len)
                .map(|chunk| s.spawn(move || self.logits(chunk, chunk.len() / len)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval thread")).collect()
        });
        parts.concat()
    }

    pub fn evaluate(&self, data: &Dataset, threads: usize) -> EvalResult {
        let c = self.net.num_classes();
        let logits = self.logits_parallel(&data.features, data.len(), threads);
        let mut wrong = 0usize;
        let mut loss = 0.0;
        for (row, &label) in logits.chunks(c).zip(&data.labels) {
            if kernels::argmax(row) != label {
                wrong += 1;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[label];
        }
        let n = data.len().max(1) as f64;
        EvalResult {
            logits,
            error_at_1: wrong as f64 / n,
            loss: loss / n,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }
}
