//! Differentiable generation of every layer's weights from its group's
//! parameters.
//!
//! Three cases, decided per layer by comparing `|w_i|` with `|θ_j|`:
//!
//! * equal: θ_j is reshaped and used as-is;
//! * fewer weights than parameters: round-robin templates of θ_j are combined
//!   (WAvg, Emb, RR or Avg);
//! * more weights than parameters: θ_j is upsampled (Repeat, Inter or Mask).
//!
//! A [`GenerationPlan`] is the static part of that decision and drives the
//! budget and FLOP accounting; a [`Generator`] adds the trainable tensors.

mod accounting;
pub mod ops;
mod state;

use std::fmt;

use serde::Serialize;

use crate::archspec::{largest_layer_weights, BudgetSpec, Combiner, NetworkSpec, Upsampler};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::paramstore::{allocate_groups, GroupMapping, ParameterGroup, TemplateView};

pub use accounting::{
    overhead_param_count, weightgen_flops, FlopReport, LayerFlops, OverheadReport,
};
pub use state::{he_normal, CombinerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationKind {
    Identity,
    /// Downsampling with a single template, used without combination.
    Direct,
    WAvg,
    Emb,
    Rr,
    Avg,
    Repeat,
    Inter,
    Mask,
}

impl fmt::Display for GenerationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializes");
        f.write_str(s.as_str().expect("string variant"))
    }
}

/// Where a downsampled layer's templates come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TemplateSource {
    /// Round-robin windows of θ_j.
    Views(Vec<TemplateView>),
    /// `count` equal chunks of θ, each linearly resized to the layer size
    /// (preliminary mapping model).
    ResizedChunks { chunk_len: usize, count: usize },
}

impl TemplateSource {
    pub fn count(&self) -> usize {
        match self {
            TemplateSource::Views(v) => v.len(),
            TemplateSource::ResizedChunks { count, .. } => *count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenerationCase {
    Identity,
    Downsample {
        templates: TemplateSource,
        kind: GenerationKind,
        /// This layer's query index within its group (RR selection).
        call_index: usize,
    },
    Upsample {
        method: Upsampler,
        tiles: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub group: usize,
    pub weight_count: usize,
    pub case: GenerationCase,
}

impl LayerPlan {
    pub fn kind(&self) -> GenerationKind {
        match &self.case {
            GenerationCase::Identity => GenerationKind::Identity,
            GenerationCase::Downsample { kind, .. } => *kind,
            GenerationCase::Upsample { method, .. } => match method {
                Upsampler::Repeat => GenerationKind::Repeat,
                Upsampler::Inter => GenerationKind::Inter,
                Upsampler::Mask => GenerationKind::Mask,
            },
        }
    }

    /// `K̃_i` for downsampled layers, 0 otherwise.
    pub fn template_count(&self) -> usize {
        match &self.case {
            GenerationCase::Downsample { templates, .. } => templates.count(),
            _ => 0,
        }
    }

    /// `n_i` for upsampled layers, 0 otherwise.
    pub fn tiles(&self) -> usize {
        match &self.case {
            GenerationCase::Upsample { tiles, .. } => *tiles,
            _ => 0,
        }
    }
}

/// Static weight-generation layout for one network, mapping and budget.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationPlan {
    pub layer_ids: Vec<String>,
    pub group_sizes: Vec<usize>,
    pub group_members: Vec<Vec<usize>>,
    pub layers: Vec<LayerPlan>,
    /// Rows of each group's Emb projection (`max K̃` over its Emb layers, or 0).
    pub emb_rows: Vec<usize>,
    /// Masks in each group's pool (`max n_i − 1` over its Mask layers, or 0).
    pub mask_pool: Vec<usize>,
    pub emb_dim: usize,
    pub emb_softmax: bool,
    pub mask_window: usize,
}

fn downsample_kind(combiner: Combiner, k: usize) -> GenerationKind {
    if k == 1 {
        // RR over one template is the same selection; keep its label.
        return match combiner {
            Combiner::Rr => GenerationKind::Rr,
            _ => GenerationKind::Direct,
        };
    }
    match combiner {
        Combiner::WAvg => GenerationKind::WAvg,
        Combiner::Emb => GenerationKind::Emb,
        Combiner::Rr => GenerationKind::Rr,
        Combiner::Avg => GenerationKind::Avg,
    }
}

impl GenerationPlan {
    /// Plan for the full model: group sizes from the budget, templates taken
    /// round-robin per group in declaration order.
    pub fn new(net: &NetworkSpec, mapping: &GroupMapping, budget: &BudgetSpec) -> Result<Self> {
        budget.validate()?;
        let mut groups = allocate_groups(net, mapping, budget.total_params)?;
        let mut calls = vec![0usize; groups.len()];
        let mut layers = Vec::with_capacity(net.layers().len());
        for (i, layer) in net.layers().iter().enumerate() {
            let g = mapping.group_of(i);
            let size = groups[g].size();
            let weight_count = layer.weight_count();
            let case = match weight_count.cmp(&size) {
                std::cmp::Ordering::Equal => GenerationCase::Identity,
                std::cmp::Ordering::Less => {
                    let views = groups[g].take_templates(i, weight_count, budget.max_templates)?;
                    let kind = downsample_kind(budget.combiner, views.len());
                    let call_index = calls[g];
                    calls[g] += 1;
                    GenerationCase::Downsample {
                        templates: TemplateSource::Views(views),
                        kind,
                        call_index,
                    }
                }
                std::cmp::Ordering::Greater => GenerationCase::Upsample {
                    method: budget.upsampler,
                    tiles: ops::tile_count(size, weight_count),
                },
            };
            layers.push(LayerPlan {
                group: g,
                weight_count,
                case,
            });
        }
        Ok(Self::assemble(
            net,
            groups.iter().map(|g| (g.size(), g.members.clone())).collect(),
            layers,
            budget.emb_dim,
            budget.emb_softmax,
            budget.mask_window,
        ))
    }

    /// Single-group plan used to learn layer representations: `|θ|` equals the
    /// largest layer, and every layer combines `k_prime` resized chunks.
    pub fn preliminary(
        net: &NetworkSpec,
        k_prime: usize,
        combiner: Combiner,
        emb_dim: usize,
        emb_softmax: bool,
    ) -> Result<Self> {
        if k_prime < 2 {
            return Err(Error::arg("preliminary", "K' must be >= 2"));
        }
        if !matches!(combiner, Combiner::WAvg | Combiner::Emb) {
            return Err(Error::arg("preliminary", "combiner must be wavg or emb"));
        }
        let size = largest_layer_weights(net);
        let chunk_len = size / k_prime;
        if chunk_len == 0 {
            return Err(Error::arg(
                "preliminary",
                format!("{size} parameters cannot form {k_prime} templates"),
            ));
        }
        let layers = net
            .layers()
            .iter()
            .enumerate()
            .map(|(call_index, l)| LayerPlan {
                group: 0,
                weight_count: l.weight_count(),
                case: GenerationCase::Downsample {
                    templates: TemplateSource::ResizedChunks {
                        chunk_len,
                        count: k_prime,
                    },
                    kind: downsample_kind(combiner, k_prime),
                    call_index,
                },
            })
            .collect();
        let members = (0..net.layers().len()).collect();
        Ok(Self::assemble(
            net,
            vec![(size, members)],
            layers,
            emb_dim,
            emb_softmax,
            1,
        ))
    }

    fn assemble(
        net: &NetworkSpec,
        groups: Vec<(usize, Vec<usize>)>,
        layers: Vec<LayerPlan>,
        emb_dim: usize,
        emb_softmax: bool,
        mask_window: usize,
    ) -> Self {
        let p = groups.len();
        let mut emb_rows = vec![0; p];
        let mut mask_pool = vec![0; p];
        for l in &layers {
            match l.kind() {
                GenerationKind::Emb => {
                    emb_rows[l.group] = emb_rows[l.group].max(l.template_count())
                }
                GenerationKind::Mask => mask_pool[l.group] = mask_pool[l.group].max(l.tiles() - 1),
                _ => {}
            }
        }
        let (group_sizes, group_members) = groups.into_iter().unzip();
        GenerationPlan {
            layer_ids: net.layers().iter().map(|l| l.id.clone()).collect(),
            group_sizes,
            group_members,
            layers,
            emb_rows,
            mask_pool,
            emb_dim,
            emb_softmax,
            mask_window,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn theta_total(&self) -> usize {
        self.group_sizes.iter().sum()
    }
}

/// What a trainable tensor is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Theta { group: usize },
    Alpha { layer: usize },
    Phi { layer: usize },
    ProjW { group: usize },
    ProjB { group: usize },
    Mask { group: usize, tile: usize },
}

impl ParamRole {
    /// θ is decayed; combiner coefficients and masks are not by default.
    pub fn is_combiner(self) -> bool {
        !matches!(self, ParamRole::Theta { .. })
    }
}

/// One layer's generated weights for the current step.
#[derive(Debug, Clone, Copy)]
pub struct GeneratedWeights {
    pub layer: usize,
    pub var: Var,
    pub kind: GenerationKind,
}

/// Tape handles of every generator tensor for one step.
#[derive(Debug, Clone)]
pub struct BoundGenerator {
    theta: Vec<Var>,
    alpha: Vec<Option<Var>>,
    phi: Vec<Option<Var>>,
    proj_w: Vec<Option<Var>>,
    proj_b: Vec<Option<Var>>,
    masks: Vec<Vec<Var>>,
    /// All handles in [`Generator::params`] order.
    pub all: Vec<Var>,
}

/// Plan plus trainable tensors.
#[derive(Debug, Clone)]
pub struct Generator {
    pub plan: GenerationPlan,
    pub groups: Vec<ParameterGroup>,
    pub state: CombinerState,
}

impl Generator {
    /// Seeded θ and combiner state; see [`CombinerState::init`].
    pub fn new(net: &NetworkSpec, plan: GenerationPlan, seed: u64) -> Self {
        let groups = state::init_groups(net, &plan, seed);
        let state = CombinerState::init(&plan, seed);
        Generator {
            plan,
            groups,
            state,
        }
    }

    pub fn from_mapping(
        net: &NetworkSpec,
        mapping: &GroupMapping,
        budget: &BudgetSpec,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self::new(net, GenerationPlan::new(net, mapping, budget)?, seed))
    }

    /// Trainable tensors with their names and roles, in a fixed order.
    pub fn params(&self) -> Vec<(String, ParamRole, &Tensor)> {
        let ids = &self.plan.layer_ids;
        let mut out = Vec::new();
        for g in &self.groups {
            out.push((format!("theta.{}", g.id), ParamRole::Theta { group: g.id }, &g.theta));
        }
        let s = &self.state;
        for (i, a) in s.alpha.iter().enumerate() {
            if let Some(a) = a {
                out.push((format!("alpha.{}", ids[i]), ParamRole::Alpha { layer: i }, a));
            }
        }
        for (i, p) in s.phi.iter().enumerate() {
            if let Some(p) = p {
                out.push((format!("phi.{}", ids[i]), ParamRole::Phi { layer: i }, p));
            }
        }
        for (j, (w, b)) in s.proj_w.iter().zip(&s.proj_b).enumerate() {
            if let (Some(w), Some(b)) = (w, b) {
                out.push((format!("emb_w.{j}"), ParamRole::ProjW { group: j }, w));
                out.push((format!("emb_b.{j}"), ParamRole::ProjB { group: j }, b));
            }
        }
        for (j, pool) in s.masks.iter().enumerate() {
            for (t, m) in pool.iter().enumerate() {
                out.push((
                    format!("mask.{j}.{}", t + 1),
                    ParamRole::Mask { group: j, tile: t + 1 },
                    m,
                ));
            }
        }
        out
    }

    /// Mutable tensors in [`Generator::params`] order.
    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        let mut out = Vec::new();
        for g in &mut self.groups {
            out.push((ParamRole::Theta { group: g.id }, &mut g.theta));
        }
        let s = &mut self.state;
        for (i, a) in s.alpha.iter_mut().enumerate() {
            if let Some(a) = a {
                out.push((ParamRole::Alpha { layer: i }, a));
            }
        }
        for (i, p) in s.phi.iter_mut().enumerate() {
            if let Some(p) = p {
                out.push((ParamRole::Phi { layer: i }, p));
            }
        }
        for (j, (w, b)) in s.proj_w.iter_mut().zip(s.proj_b.iter_mut()).enumerate() {
            if let (Some(w), Some(b)) = (w, b) {
                out.push((ParamRole::ProjW { group: j }, w));
                out.push((ParamRole::ProjB { group: j }, b));
            }
        }
        for (j, pool) in s.masks.iter_mut().enumerate() {
            for (t, m) in pool.iter_mut().enumerate() {
                out.push((ParamRole::Mask { group: j, tile: t + 1 }, m));
            }
        }
        out
    }

    /// Number of trainable scalars held by the generator.
    pub fn census(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundGenerator {
        let theta: Vec<Var> = self.groups.iter().map(|g| tape.param(&g.theta)).collect();
        let s = &self.state;
        let mut opt = |v: &Vec<Option<Tensor>>| -> Vec<Option<Var>> {
            v.iter().map(|t| t.as_ref().map(|t| tape.param(t))).collect()
        };
        let alpha = opt(&s.alpha);
        let phi = opt(&s.phi);
        // W and b interleave per group to follow `params` order.
        let mut proj_w = Vec::new();
        let mut proj_b = Vec::new();
        for (w, b) in s.proj_w.iter().zip(&s.proj_b) {
            match (w, b) {
                (Some(w), Some(b)) => {
                    proj_w.push(Some(tape.param(w)));
                    proj_b.push(Some(tape.param(b)));
                }
                _ => {
                    proj_w.push(None);
                    proj_b.push(None);
                }
            }
        }
        let masks: Vec<Vec<Var>> = s
            .masks
            .iter()
            .map(|pool| pool.iter().map(|m| tape.param(m)).collect())
            .collect();
        let mut all = theta.clone();
        all.extend(alpha.iter().flatten());
        all.extend(phi.iter().flatten());
        for (w, b) in proj_w.iter().zip(&proj_b) {
            if let (Some(w), Some(b)) = (w, b) {
                all.push(*w);
                all.push(*b);
            }
        }
        all.extend(masks.iter().flatten());
        BoundGenerator {
            theta,
            alpha,
            phi,
            proj_w,
            proj_b,
            masks,
            all,
        }
    }

    fn templates(
        &self,
        tape: &mut Tape,
        theta: Var,
        source: &TemplateSource,
        weight_count: usize,
    ) -> Result<Vec<Var>> {
        match source {
            TemplateSource::Views(views) => views
                .iter()
                .map(|v| tape.gather_modular(theta, v.start, v.len))
                .collect(),
            &TemplateSource::ResizedChunks { chunk_len, count } => (0..count)
                .map(|k| {
                    let chunk = tape.gather_modular(theta, k * chunk_len, chunk_len)?;
                    if chunk_len == weight_count {
                        Ok(chunk)
                    } else {
                        tape.linear_resize_1d(chunk, weight_count)
                    }
                })
                .collect(),
        }
    }

    /// Generates layer `layer`'s weights, shaped `shape`, on the tape.
    pub fn generate(
        &self,
        tape: &mut Tape,
        bound: &BoundGenerator,
        layer: usize,
        shape: &[usize],
    ) -> Result<GeneratedWeights> {
        let plan = &self.plan.layers[layer];
        let g = plan.group;
        let theta = bound.theta[g];
        let target = plan.weight_count;
        let kind = plan.kind();
        let flat = match &plan.case {
            GenerationCase::Identity => theta,
            GenerationCase::Downsample {
                templates,
                call_index,
                ..
            } => {
                let ts = self.templates(tape, theta, templates, target)?;
                match kind {
                    GenerationKind::Direct => ts[0],
                    GenerationKind::Rr => ops::combine_rr(&ts, *call_index)?,
                    GenerationKind::Avg => ops::combine_avg(tape, &ts)?,
                    GenerationKind::WAvg => {
                        let alpha = bound.alpha[layer].expect("alpha bound for WAvg layer");
                        ops::combine_wavg(tape, &ts, alpha)?
                    }
                    GenerationKind::Emb => ops::combine_emb(
                        tape,
                        &ts,
                        bound.phi[layer].expect("phi bound for Emb layer"),
                        bound.proj_w[g].expect("projection bound"),
                        bound.proj_b[g].expect("projection bound"),
                        self.plan.emb_softmax,
                    )?,
                    other => unreachable!("{other} is not a downsampling kind"),
                }
            }
            GenerationCase::Upsample { method, .. } => match method {
                Upsampler::Repeat => ops::upsample_repeat(tape, theta, target)?,
                Upsampler::Inter => ops::upsample_inter(tape, theta, target)?,
                Upsampler::Mask => ops::upsample_mask(tape, theta, target, &bound.masks[g])?,
            },
        };
        let var = tape.reshape(flat, shape)?;
        Ok(GeneratedWeights { layer, var, kind })
    }
}

#[cfg(test)]
mod tests;
