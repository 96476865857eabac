//! Static budget and FLOP report for a configuration and mapping.

use std::fmt::Write as _;

use serde::Serialize;

use crate::archspec::{classify_regime, BudgetSpec, NetworkSpec, Regime};
use crate::error::Result;
use crate::paramstore::GroupMapping;
use crate::weightgen::{FlopReport, GenerationKind, GenerationPlan, Generator, OverheadReport};

pub const REPORT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub id: usize,
    pub size: usize,
    pub layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub id: String,
    pub group: usize,
    pub weights: usize,
    pub generation: GenerationKind,
    /// `K̃_i`, 0 unless downsampled.
    pub templates: usize,
    /// `n_i`, 0 unless upsampled.
    pub tiles: usize,
    pub flops_forward: u64,
    pub flops_generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    pub regime: Regime,
    pub total_weights: usize,
    pub budget: usize,
    pub mapping: String,
    pub groups: Vec<GroupReport>,
    pub layers: Vec<LayerReport>,
    pub overhead: OverheadReport,
    /// Trainable scalars the generator and biases allocate.
    pub census: usize,
    pub flops_forward_per_image: u64,
    pub flops_generation: u64,
    pub ratio_per_image: f64,
    pub batch_size: usize,
    pub ratio_per_batch: f64,
    pub notes: Vec<String>,
}

const NOTES: [&str; 2] = [
    "biases are per-layer, unshared and outside the budget",
    "templates wrap around the end of each group, so no parameter goes unused",
];

impl PlanReport {
    pub fn new(net: &NetworkSpec, mapping: &GroupMapping, budget: &BudgetSpec) -> Result<Self> {
        let plan = GenerationPlan::new(net, mapping, budget)?;
        let overhead = OverheadReport::from_plan(net, &plan);
        let flops = FlopReport::from_plan(net, &plan, REPORT_BATCH);
        let census = Generator::new(net, plan.clone(), 0).census() + net.total_biases();
        let layers = plan
            .layers
            .iter()
            .zip(&flops.layers)
            .map(|(l, f)| LayerReport {
                id: f.layer_id.clone(),
                group: l.group,
                weights: l.weight_count,
                generation: l.kind(),
                templates: l.template_count(),
                tiles: l.tiles(),
                flops_forward: f.forward,
                flops_generation: f.generation,
            })
            .collect();
        let groups = plan
            .group_sizes
            .iter()
            .zip(&plan.group_members)
            .enumerate()
            .map(|(id, (&size, members))| GroupReport {
                id,
                size,
                layers: members.iter().map(|&i| plan.layer_ids[i].clone()).collect(),
            })
            .collect();
        Ok(PlanReport {
            regime: classify_regime(net, budget),
            total_weights: net.total_weights(),
            budget: budget.total_params,
            mapping: mapping.provenance().to_string(),
            groups,
            layers,
            overhead,
            census,
            flops_forward_per_image: flops.forward_per_image,
            flops_generation: flops.generation,
            ratio_per_image: flops.ratio_per_image,
            batch_size: flops.batch_size,
            ratio_per_batch: flops.ratio_per_batch,
            notes: NOTES.map(String::from).to_vec(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "regime        {}", self.regime);
        let _ = writeln!(w, "weights       {}", self.total_weights);
        let _ = writeln!(w, "budget        {}", self.budget);
        let _ = writeln!(w, "mapping       {}", self.mapping);
        let _ = writeln!(w, "census        {}", self.census);
        let o = &self.overhead;
        let _ = writeln!(
            w,
            "overhead      {} (wavg {}, emb {} + {}, masks {}), biases {}",
            o.total, o.wavg, o.emb_layers, o.emb_groups, o.masks, o.biases
        );
        let _ = writeln!(w);
        let _ = writeln!(w, "{:<6} {:>10}  layers", "group", "size");
        for g in &self.groups {
            let _ = writeln!(w, "{:<6} {:>10}  {}", g.id, g.size, g.layers.join(" "));
        }
        let _ = writeln!(w);
        let _ = writeln!(
            w,
            "{:<12} {:>5} {:>9} {:<9} {:>3} {:>3} {:>12} {:>12}",
            "layer", "group", "weights", "gen", "K~", "n", "fwd macs", "gen macs"
        );
        for l in &self.layers {
            let _ = writeln!(
                w,
                "{:<12} {:>5} {:>9} {:<9} {:>3} {:>3} {:>12} {:>12}",
                l.id,
                l.group,
                l.weights,
                l.generation.to_string(),
                l.templates,
                l.tiles,
                l.flops_forward,
                l.flops_generation
            );
        }
        let _ = writeln!(w);
        let _ = writeln!(
            w,
            "generation/forward  {:.6}% per image, {:.6}% per batch of {}",
            100.0 * self.ratio_per_image,
            100.0 * self.ratio_per_batch,
            self.batch_size
        );
        for n in &self.notes {
            let _ = writeln!(w, "note: {n}");
        }
        s
    }
}
