//! Learning the layer→group mapping.
//!
//! A small single-group model (budget = the largest layer) is trained for a
//! fraction of the configured epochs; each layer's learned template
//! coefficients (α for WAvg, φ for Emb) then serve as its representation, and
//! k-means over those representations yields the groups.

pub mod kmeans;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::archspec::{Combiner, ExperimentConfig, MappingMode, NetworkSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::model::Model;
use crate::harness::train::{train, TrainOutcome};
use crate::paramstore::{GroupMapping, Provenance};
use crate::rng;
use crate::weightgen::{GenerationPlan, Generator};

pub use kmeans::{kmeans, KMeans};

#[derive(Debug, Clone, PartialEq)]
pub struct PreliminaryConfig {
    /// `K'`, templates per layer.
    pub templates: usize,
    pub epochs_fraction: f64,
    pub combiner: Combiner,
    pub emb_dim: usize,
    pub emb_softmax: bool,
}

impl PreliminaryConfig {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        PreliminaryConfig {
            templates: cfg.mapping.prelim_templates,
            epochs_fraction: cfg.mapping.epochs_fraction,
            combiner: cfg.mapping.prelim_combiner(cfg.budget.combiner),
            emb_dim: cfg.budget.emb_dim,
            emb_softmax: cfg.budget.emb_softmax,
        }
    }

    /// `⌈fraction · epochs⌉`.
    pub fn epochs(&self, configured: usize) -> usize {
        ((self.epochs_fraction * configured as f64).ceil() as usize).max(1)
    }
}

/// The single-group preliminary model.
pub fn build_preliminary(net: &NetworkSpec, prelim: &PreliminaryConfig, seed: u64) -> Result<Model> {
    let plan = GenerationPlan::preliminary(
        net,
        prelim.templates,
        prelim.combiner,
        prelim.emb_dim,
        prelim.emb_softmax,
    )?;
    Ok(Model::shared(net.clone(), Generator::new(net, plan, seed)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRepresentation {
    pub layer_id: String,
    pub vector: Vec<f64>,
}

/// Current α (WAvg) or φ (Emb) of every layer.
pub fn representations(model: &Model) -> Result<Vec<LayerRepresentation>> {
    let g = model
        .generator()
        .ok_or_else(|| Error::arg("representations", "model has no shared parameters"))?;
    g.plan
        .layer_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let v = g.state.alpha[i].as_ref().or(g.state.phi[i].as_ref()).ok_or_else(|| {
                Error::arg("representations", format!("layer '{id}' learns no coefficients"))
            })?;
            Ok(LayerRepresentation {
                layer_id: id.clone(),
                vector: v.data().to_vec(),
            })
        })
        .collect()
}

/// Trains the preliminary model for `epochs` epochs and reads off the
/// representations.
pub fn run_preliminary(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(Vec<LayerRepresentation>, TrainOutcome)> {
    let outcome = train(model, data, None, cfg, epochs, |_| Ok(()))?;
    Ok((representations(model)?, outcome))
}

/// Renumbers groups in order of first appearance.
fn relabel(assignment: &[usize]) -> (Vec<usize>, usize) {
    let mut map = Vec::<(usize, usize)>::new();
    let out = assignment
        .iter()
        .map(|&g| match map.iter().find(|(from, _)| *from == g) {
            Some(&(_, to)) => to,
            None => {
                map.push((g, map.len()));
                map.len() - 1
            }
        })
        .collect();
    (out, map.len())
}

/// k-means over the representations; groups are numbered by first layer.
pub fn derive_mapping(
    net: &NetworkSpec,
    reps: &[LayerRepresentation],
    groups: usize,
    seed: u64,
    restarts: usize,
    normalize: bool,
) -> Result<GroupMapping> {
    let points: Vec<Vec<f64>> = reps
        .iter()
        .map(|r| {
            let mut v = r.vector.clone();
            if normalize {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    v.iter_mut().for_each(|x| *x /= n);
                }
            }
            v
        })
        .collect();
    let km = kmeans(&points, groups, seed, restarts)?;
    let (assignment, used) = relabel(&km.assignment);
    GroupMapping::new(net, assignment, used, Provenance::Auto)
}

/// Seeded uniform assignment with every group nonempty.
pub fn random_mapping(net: &NetworkSpec, groups: usize, seed: u64) -> Result<GroupMapping> {
    let layers = net.layers().len();
    if groups == 0 || groups > layers {
        return Err(Error::arg(
            "random_mapping",
            format!("cannot spread {layers} layers over {groups} nonempty groups"),
        ));
    }
    let mut rng = rng::stream(seed, rng::RANDOM_MAPPING);
    const RETRIES: usize = 1000;
    for _ in 0..RETRIES {
        let a: Vec<usize> = (0..layers).map(|_| rng.random_range(0..groups)).collect();
        if (0..groups).all(|g| a.contains(&g)) {
            return GroupMapping::new(net, a, groups, Provenance::Random);
        }
    }
    // Rejection keeps failing only when P is close to L: seat one layer per
    // group, then draw the rest.
    let mut order: Vec<usize> = (0..layers).collect();
    order.shuffle(&mut rng);
    let mut a = vec![0; layers];
    for (slot, &layer) in order.iter().enumerate() {
        a[layer] = if slot < groups { slot } else { rng.random_range(0..groups) };
    }
    GroupMapping::new(net, a, groups, Provenance::Random)
}

/// Reads a mapping file, keeping its provenance.
pub fn load_mapping(net: &NetworkSpec, path: &Path) -> Result<GroupMapping> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GroupMapping::parse(&text, net)
}

/// Reads a mapping file and marks it manual.
pub fn manual_mapping(net: &NetworkSpec, path: &Path) -> Result<GroupMapping> {
    let m = load_mapping(net, path)?;
    GroupMapping::new(net, m.assignment().to_vec(), m.num_groups(), Provenance::Manual)
}

/// Single, random or manual mapping, the comparison points for learned ones.
pub fn baseline_mapping(
    net: &NetworkSpec,
    mode: MappingMode,
    groups: usize,
    seed: u64,
    file: Option<&Path>,
) -> Result<GroupMapping> {
    match mode {
        MappingMode::Single => Ok(GroupMapping::single(net)),
        MappingMode::Random => random_mapping(net, groups, seed),
        MappingMode::Manual => {
            let path = file.ok_or_else(|| Error::Config("manual mapping needs a file".into()))?;
            manual_mapping(net, path)
        }
        MappingMode::Auto => Err(Error::arg("baseline_mapping", "auto mapping is learned, not a baseline")),
    }
}

/// `layer_id,v0,v1,…` with a header row.
pub fn representations_csv(reps: &[LayerRepresentation]) -> String {
    let dim = reps.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("layer_id");
    for k in 0..dim {
        write!(out, ",v{k}").expect("string write");
    }
    out.push('\n');
    for r in reps {
        out.push_str(&r.layer_id);
        for x in &r.vector {
            write!(out, ",{x:?}").expect("string write");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct MapOutcome {
    pub mapping: GroupMapping,
    pub representations: Vec<LayerRepresentation>,
    pub preliminary_epochs: usize,
    pub preliminary_budget: usize,
    pub preliminary: TrainOutcome,
}

/// Build, train and cluster: the whole automatic mapping pipeline.
pub fn search_mapping(cfg: &ExperimentConfig, data: &Dataset) -> Result<MapOutcome> {
    let net = &cfg.network;
    let prelim = PreliminaryConfig::from_config(cfg);
    let mut model = build_preliminary(net, &prelim, cfg.train.seed)?;
    let budget = model.theta_count();
    let epochs = prelim.epochs(cfg.train.epochs);
    let (reps, outcome) = run_preliminary(&mut model, data, &cfg.train, epochs)?;
    let groups = cfg.budget.num_groups.min(net.layers().len());
    let mapping = derive_mapping(
        net,
        &reps,
        groups,
        cfg.train.seed,
        cfg.mapping.restarts,
        cfg.mapping.normalize_reps,
    )?;
    Ok(MapOutcome {
        mapping,
        representations: reps,
        preliminary_epochs: epochs,
        preliminary_budget: budget,
        preliminary: outcome,
    })
}
