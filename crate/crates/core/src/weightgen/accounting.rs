//! Parameter and FLOP accounting derived from a [`GenerationPlan`] alone, so
//! it can be checked against the tensors a [`super::Generator`] allocates.

use serde::Serialize;

use super::{GenerationCase, GenerationKind, GenerationPlan, TemplateSource};
use crate::archspec::{BudgetSpec, NetworkSpec, Upsampler};
use crate::error::Result;
use crate::paramstore::GroupMapping;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OverheadReport {
    /// WAvg coefficients, `Σ K̃_i`.
    pub wavg: usize,
    /// Emb layer embeddings, `E` per Emb layer.
    pub emb_layers: usize,
    /// Emb projections, `Σ_j (E·K̃_j + K̃_j)`.
    pub emb_groups: usize,
    /// Upsampling masks, `Σ_j (n_j − 1)·window`.
    pub masks: usize,
    /// Sum of the above.
    pub total: usize,
    pub layer_biases: Vec<(String, usize)>,
    pub biases: usize,
}

impl OverheadReport {
    pub fn from_plan(net: &NetworkSpec, plan: &GenerationPlan) -> Self {
        let e = plan.emb_dim;
        let mut r = OverheadReport {
            wavg: 0,
            emb_layers: 0,
            emb_groups: 0,
            masks: 0,
            total: 0,
            layer_biases: net
                .layers()
                .iter()
                .map(|l| (l.id.clone(), l.bias_count()))
                .collect(),
            biases: net.total_biases(),
        };
        for l in &plan.layers {
            match l.kind() {
                GenerationKind::WAvg => r.wavg += l.template_count(),
                GenerationKind::Emb => r.emb_layers += e,
                _ => {}
            }
        }
        r.emb_groups = plan.emb_rows.iter().map(|&k| e * k + k).sum();
        r.masks = plan.mask_pool.iter().map(|&n| n * plan.mask_window).sum();
        r.total = r.wavg + r.emb_layers + r.emb_groups + r.masks;
        r
    }
}

/// Trainable parameters added by weight generation, with biases listed
/// separately.
pub fn overhead_param_count(
    net: &NetworkSpec,
    mapping: &GroupMapping,
    budget: &BudgetSpec,
) -> Result<OverheadReport> {
    let plan = GenerationPlan::new(net, mapping, budget)?;
    Ok(OverheadReport::from_plan(net, &plan))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFlops {
    pub layer_id: String,
    pub kind: GenerationKind,
    /// Multiply-adds spent generating the weights.
    pub generation: u64,
    /// Multiply-adds of the layer's forward pass for one input.
    pub forward: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub generation: u64,
    pub forward_per_image: u64,
    pub batch_size: usize,
    /// `generation / forward_per_image`.
    pub ratio_per_image: f64,
    /// Generation amortized over one batch: `ratio_per_image / batch`.
    pub ratio_per_batch: f64,
}

impl FlopReport {
    pub fn from_plan(net: &NetworkSpec, plan: &GenerationPlan, batch_size: usize) -> Self {
        let e = plan.emb_dim as u64;
        let layers: Vec<LayerFlops> = plan
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let w = l.weight_count as u64;
                let theta = plan.group_sizes[l.group] as u64;
                let generation = match &l.case {
                    GenerationCase::Identity => 0,
                    GenerationCase::Downsample { templates, kind, .. } => {
                        let k = templates.count() as u64;
                        let resize = match templates {
                            TemplateSource::ResizedChunks { chunk_len, .. }
                                if *chunk_len != l.weight_count =>
                            {
                                k * 2 * w
                            }
                            _ => 0,
                        };
                        resize
                            + match kind {
                                GenerationKind::WAvg | GenerationKind::Avg => k * w,
                                GenerationKind::Emb => k * w + 2 * k * e,
                                _ => 0,
                            }
                    }
                    GenerationCase::Upsample { method, .. } => match method {
                        Upsampler::Repeat => 0,
                        Upsampler::Inter => 2 * w,
                        Upsampler::Mask => w - theta,
                    },
                };
                LayerFlops {
                    layer_id: plan.layer_ids[i].clone(),
                    kind: l.kind(),
                    generation,
                    forward: net.layer_macs(i),
                }
            })
            .collect();
        let generation: u64 = layers.iter().map(|l| l.generation).sum();
        let forward = net.forward_macs();
        let ratio_per_image = generation as f64 / forward as f64;
        FlopReport {
            layers,
            generation,
            forward_per_image: forward,
            batch_size,
            ratio_per_image,
            ratio_per_batch: ratio_per_image / batch_size as f64,
        }
    }
}

/// Weight-generation cost against the forward pass.
pub fn weightgen_flops(
    net: &NetworkSpec,
    mapping: &GroupMapping,
    budget: &BudgetSpec,
    batch_size: usize,
) -> Result<FlopReport> {
    let plan = GenerationPlan::new(net, mapping, budget)?;
    Ok(FlopReport::from_plan(net, &plan, batch_size))
}
