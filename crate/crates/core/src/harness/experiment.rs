//! Whole runs as the command line drives them: mapping resolution,
//! training with on-disk artifacts, checkpoints, materialization, sweeps.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::archspec::{classify_regime, ExperimentConfig, MappingMode};
use crate::error::{Error, Result};
use crate::groupsearch::{self, derive_mapping, representations_csv, MapOutcome};
use crate::paramstore::GroupMapping;
use crate::weightgen::{Generator, OverheadReport};

use super::checkpoint::{Archive, ArchiveKind};
use super::data::{load_dataset, Dataset};
use super::model::{eval_threads, EvalResult, FrozenNetwork, Model};
use super::train::{train, TrainOutcome};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MAPPING_FILE: &str = "mapping.txt";
pub const REPRESENTATIONS_FILE: &str = "representations.csv";

/// Where the layer→group mapping comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MappingChoice {
    Auto,
    Single,
    Random,
    File(PathBuf),
}

impl FromStr for MappingChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => MappingChoice::Auto,
            "single" => MappingChoice::Single,
            "random" => MappingChoice::Random,
            "" => return Err(Error::Config("empty mapping choice".into())),
            path => MappingChoice::File(PathBuf::from(path)),
        })
    }
}

impl MappingChoice {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        match cfg.mapping.mode {
            MappingMode::Auto => MappingChoice::Auto,
            MappingMode::Single => MappingChoice::Single,
            MappingMode::Random => MappingChoice::Random,
            MappingMode::Manual => {
                MappingChoice::File(cfg.resolve_path(cfg.mapping.file.as_deref().expect("validated")))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedMapping {
    pub mapping: GroupMapping,
    /// Present when the mapping was learned.
    pub search: Option<MapOutcome>,
}

pub fn resolve_mapping(cfg: &ExperimentConfig, choice: &MappingChoice, data: &Dataset) -> Result<ResolvedMapping> {
    let net = &cfg.network;
    let groups = cfg.budget.num_groups;
    let seed = cfg.train.seed;
    let mapping = match choice {
        MappingChoice::Auto => {
            let outcome = groupsearch::search_mapping(cfg, data)?;
            return Ok(ResolvedMapping {
                mapping: outcome.mapping.clone(),
                search: Some(outcome),
            });
        }
        MappingChoice::Single => GroupMapping::single(net),
        MappingChoice::Random => groupsearch::random_mapping(net, groups, seed)?,
        MappingChoice::File(p) => groupsearch::load_mapping(net, p)?,
    };
    Ok(ResolvedMapping { mapping, search: None })
}

pub fn build_model(cfg: &ExperimentConfig, mapping: &GroupMapping) -> Result<Model> {
    let g = Generator::from_mapping(&cfg.network, mapping, &cfg.budget, cfg.train.seed)?;
    Ok(Model::shared(cfg.network.clone(), g))
}

/// Checks the allocated census against the accounting formulas.
pub fn check_census(model: &Model) -> Result<usize> {
    let census = model.census();
    if let Some(g) = model.generator() {
        let expected = g.plan.theta_total()
            + OverheadReport::from_plan(&model.net, &g.plan).total
            + model.bias_count();
        if census != expected {
            return Err(Error::Contract(format!(
                "allocated {census} trainable parameters, accounting predicts {expected}"
            )));
        }
    }
    Ok(census)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mapping: GroupMapping,
    pub census: usize,
    pub outcome: TrainOutcome,
    pub out_dir: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains from scratch, writing the mapping, per-epoch metrics and a final
/// checkpoint into `out_dir`. `on_start` receives the census before training.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    choice: &MappingChoice,
    out_dir: &Path,
    on_start: impl FnOnce(usize),
) -> Result<RunSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train_set, eval_set) = load_dataset(&cfg.data, &cfg.base_dir, &cfg.network)?;
    let resolved = resolve_mapping(cfg, choice, &train_set)?;
    if let Some(s) = &resolved.search {
        write(&out_dir.join(REPRESENTATIONS_FILE), representations_csv(&s.representations))?;
    }
    write(&out_dir.join(MAPPING_FILE), resolved.mapping.serialize())?;
    let mut model = build_model(cfg, &resolved.mapping)?;
    let census = check_census(&model)?;
    on_start(census);

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let outcome = train(
        &mut model,
        &train_set,
        Some(&eval_set),
        &cfg.train,
        cfg.train.epochs,
        |r| {
            writeln!(metrics, "{}", r.to_json_line())
                .and_then(|_| metrics.flush())
                .map_err(|e| Error::io(&metrics_path, e))
        },
    )?;
    checkpoint_archive(cfg, &resolved.mapping, &model).save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(RunSummary {
        mapping: resolved.mapping,
        census,
        outcome,
        out_dir: out_dir.to_path_buf(),
    })
}

fn config_meta(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let base = fs::canonicalize(&cfg.base_dir).unwrap_or_else(|_| cfg.base_dir.clone());
    vec![
        ("config".into(), cfg.to_toml()),
        ("base_dir".into(), base.to_string_lossy().into_owned()),
    ]
}

fn config_from(archive: &Archive) -> Result<ExperimentConfig> {
    let text = archive
        .meta("config")
        .ok_or_else(|| Error::Checkpoint("archive has no config".into()))?;
    ExperimentConfig::parse(text, archive.meta("base_dir").unwrap_or("."))
}

/// Every trainable tensor by name, with the config and mapping to rebuild
/// the model.
pub fn checkpoint_archive(cfg: &ExperimentConfig, mapping: &GroupMapping, model: &Model) -> Archive {
    let mut a = Archive::new(ArchiveKind::Checkpoint, model.census() as u64);
    a.meta = config_meta(cfg);
    a.meta.push(("mapping".into(), mapping.serialize()));
    a.arrays = model
        .param_info()
        .into_iter()
        .map(|(name, _, t)| (name, t.detached()))
        .collect();
    a
}

pub fn restore_checkpoint(archive: &Archive) -> Result<(ExperimentConfig, Model)> {
    if archive.kind != ArchiveKind::Checkpoint {
        return Err(Error::Checkpoint("expected a training checkpoint".into()));
    }
    let cfg = config_from(archive)?;
    let mapping_text = archive
        .meta("mapping")
        .ok_or_else(|| Error::Checkpoint("checkpoint has no mapping".into()))?;
    let mapping = GroupMapping::parse(mapping_text, &cfg.network)?;
    let mut model = build_model(&cfg, &mapping)?;
    let names: Vec<String> = model.param_info().into_iter().map(|(n, _, _)| n).collect();
    if names.len() != archive.arrays.len() || model.census() as u64 != archive.census {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} arrays / {} scalars, model needs {} / {}",
            archive.arrays.len(),
            archive.census,
            names.len(),
            model.census()
        )));
    }
    for (name, (_, t)) in names.iter().zip(model.params_mut()) {
        let src = archive
            .array(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))?;
        if src.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "array '{name}' has shape {:?}, model needs {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok((cfg, model))
}

/// Per-layer weights and biases after one final generation pass.
pub fn materialized_archive(cfg: &ExperimentConfig, frozen: &FrozenNetwork) -> Archive {
    let scalars = frozen.weight_count() + frozen.biases.iter().flatten().map(|b| b.len()).sum::<usize>();
    let mut a = Archive::new(ArchiveKind::Materialized, scalars as u64);
    a.meta = config_meta(cfg);
    for (l, w) in frozen.net.layers().iter().zip(&frozen.weights) {
        a.arrays.push((format!("weight.{}", l.id), w.clone()));
    }
    for (l, b) in frozen.net.layers().iter().zip(&frozen.biases) {
        if let Some(b) = b {
            a.arrays.push((format!("bias.{}", l.id), b.clone()));
        }
    }
    a
}

/// The frozen network held by either archive kind.
pub fn frozen_from_archive(archive: &Archive) -> Result<(ExperimentConfig, FrozenNetwork)> {
    match archive.kind {
        ArchiveKind::Checkpoint => {
            let (cfg, model) = restore_checkpoint(archive)?;
            let frozen = model.materialize()?;
            Ok((cfg, frozen))
        }
        ArchiveKind::Materialized => {
            let cfg = config_from(archive)?;
            let net = cfg.network.clone();
            let get = |name: String, shape: &[usize]| -> Result<_> {
                let t = archive
                    .array(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))?;
                if t.shape() != shape {
                    return Err(Error::Checkpoint(format!("array '{name}' has shape {:?}", t.shape())));
                }
                Ok(t.clone())
            };
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for l in net.layers() {
                weights.push(get(format!("weight.{}", l.id), &l.weight_shape)?);
                biases.push(if l.has_bias {
                    Some(get(format!("bias.{}", l.id), &[l.bias_count()])?)
                } else {
                    None
                });
            }
            Ok((cfg, FrozenNetwork { net, weights, biases }))
        }
    }
}

/// Evaluates a checkpoint or materialized archive on its config's eval set.
pub fn evaluate_archive(archive: &Archive) -> Result<EvalResult> {
    let (cfg, frozen) = frozen_from_archive(archive)?;
    let (_, eval_set) = load_dataset(&cfg.data, &cfg.base_dir, &cfg.network)?;
    Ok(frozen.evaluate(&eval_set, eval_threads()))
}

/// Reads a checkpoint and writes its materialized weights to `out`.
pub fn materialize_file(checkpoint: &Path, out: &Path) -> Result<Archive> {
    let archive = Archive::load(checkpoint)?;
    let (cfg, model) = restore_checkpoint(&archive)?;
    let frozen = model.materialize()?;
    let m = materialized_archive(&cfg, &frozen);
    m.save(out)?;
    Ok(m)
}

/// Which budget setting a sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Groups(Vec<usize>),
    Templates(Vec<usize>),
}

/// One training run per axis value under `out_dir/<axis>-<value>/`, plus a
/// results table (`sweep.csv`).
pub fn sweep(cfg: &ExperimentConfig, choice: &MappingChoice, axis: &SweepAxis, out_dir: &Path) -> Result<String> {
    let (key, values) = match axis {
        SweepAxis::Groups(v) => ("groups", v),
        SweepAxis::Templates(v) => ("templates", v),
    };
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    // Representations do not depend on P, so an automatic mapping is
    // searched once and re-clustered per value.
    let search = match choice {
        MappingChoice::Auto => {
            let (train_set, _) = load_dataset(&cfg.data, &cfg.base_dir, &cfg.network)?;
            Some(groupsearch::search_mapping(cfg, &train_set)?)
        }
        _ => None,
    };
    let mut csv = format!("{key},regime,census,theta,overhead,final_train_loss,final_eval_error\n");
    for &v in values {
        let mut run_cfg = cfg.clone();
        match axis {
            SweepAxis::Groups(_) => run_cfg.budget.num_groups = v,
            SweepAxis::Templates(_) => run_cfg.budget.max_templates = v,
        }
        run_cfg.budget.validate()?;
        let dir = out_dir.join(format!("{key}-{v}"));
        let run_choice = match &search {
            Some(s) => {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let m = derive_mapping(
                    &cfg.network,
                    &s.representations,
                    run_cfg.budget.num_groups.min(cfg.network.layers().len()),
                    cfg.train.seed,
                    cfg.mapping.restarts,
                    cfg.mapping.normalize_reps,
                )?;
                let path = dir.join("learned-mapping.txt");
                write(&path, m.serialize())?;
                MappingChoice::File(path)
            }
            None => choice.clone(),
        };
        let run = run_experiment(&run_cfg, &run_choice, &dir, |_| {})?;
        let rec = run.outcome.records.last().expect("epochs >= 1");
        let fmt_opt = |x: Option<f64>| x.map_or(String::new(), |x| format!("{x}"));
        writeln!(
            csv,
            "{v},{},{},{},{},{},{}",
            classify_regime(&run_cfg.network, &run_cfg.budget),
            rec.params_total,
            rec.params_theta,
            rec.params_overhead,
            rec.train_loss,
            fmt_opt(rec.eval_error_at_1)
        )
        .expect("string write");
    }
    write(&out_dir.join("sweep.csv"), &csv)?;
    Ok(csv)
}
