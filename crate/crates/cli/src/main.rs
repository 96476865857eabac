use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use npas::archspec::{ExperimentConfig, MappingMode};
use npas::error::{Error, Result};
use npas::groupsearch::{self, representations_csv};
use npas::harness::checkpoint::Archive;
use npas::harness::data::load_dataset;
use npas::harness::experiment::{
    self, evaluate_archive, materialize_file, run_experiment, MappingChoice, SweepAxis,
};
use npas::harness::report::PlanReport;
use npas::paramstore::GroupMapping;

#[derive(Parser)]
#[command(name = "npas", version, about = "Parameter allocation search for layered networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// auto, single, random, manual (config's mapping.file) or a mapping file.
    #[arg(long)]
    mapping: Option<String>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cluster unit-normalized layer representations.
    #[arg(long)]
    normalize_reps: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the budget, mapping and FLOP plan.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        json: bool,
    },
    /// Learn a layer-to-group mapping.
    Map {
        #[command(flatten)]
        common: Common,
        /// Mapping file to write.
        #[arg(short, long)]
        output: PathBuf,
        /// Directory for the representations dump; defaults next to the mapping.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write metrics, mapping and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint or materialized archive.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Precompute every layer's weights from a checkpoint.
    Materialize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Plan report as JSON, from a config or a checkpoint's stored mapping.
    Report {
        #[arg(short, long, required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        mapping: Option<String>,
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
    },
    /// One run per number of groups or templates; prints a CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required_unless_present = "templates", conflicts_with = "templates")]
        groups: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        templates: Vec<usize>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if c.normalize_reps {
        cfg.mapping.normalize_reps = true;
    }
    Ok(cfg)
}

fn mapping_choice(cfg: &ExperimentConfig, flag: Option<&str>) -> Result<MappingChoice> {
    match flag {
        None => Ok(MappingChoice::from_config(cfg)),
        Some("manual") => {
            let file = cfg
                .mapping
                .file
                .as_deref()
                .ok_or_else(|| Error::Config("--mapping manual needs mapping.file in the config".into()))?;
            Ok(MappingChoice::File(cfg.resolve_path(file)))
        }
        Some(s) => s.parse(),
    }
}

/// A mapping for static reports, which cannot run the search.
fn plan_mapping(cfg: &ExperimentConfig, choice: &MappingChoice) -> Result<GroupMapping> {
    match choice {
        MappingChoice::Auto => match (&cfg.mapping.mode, &cfg.mapping.file) {
            (MappingMode::Auto, Some(f)) if cfg.resolve_path(f).exists() => {
                groupsearch::load_mapping(&cfg.network, &cfg.resolve_path(f))
            }
            _ => {
                eprintln!("note: automatic mappings are learned by `npas map`; planning with a single group");
                Ok(GroupMapping::single(&cfg.network))
            }
        },
        MappingChoice::Single => Ok(GroupMapping::single(&cfg.network)),
        MappingChoice::Random => {
            groupsearch::random_mapping(&cfg.network, cfg.budget.num_groups, cfg.train.seed)
        }
        MappingChoice::File(p) => groupsearch::load_mapping(&cfg.network, p),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan { common, json } => {
            let cfg = load_config(&common)?;
            let choice = mapping_choice(&cfg, common.mapping.as_deref())?;
            let mapping = plan_mapping(&cfg, &choice)?;
            let r = PlanReport::new(&cfg.network, &mapping, &cfg.budget)?;
            if json {
                println!("{}", r.to_json());
            } else {
                print!("{}", r.to_table());
            }
        }
        Command::Map { common, output, out } => {
            let cfg = load_config(&common)?;
            let (train, _) = load_dataset(&cfg.data, &cfg.base_dir, &cfg.network)?;
            let m = groupsearch::search_mapping(&cfg, &train)?;
            write(&output, m.mapping.serialize())?;
            let reps = match out {
                Some(dir) => dir.join(experiment::REPRESENTATIONS_FILE),
                None => output.with_extension("representations.csv"),
            };
            write(&reps, representations_csv(&m.representations))?;
            println!(
                "preliminary budget {} over {} epochs, final train loss {:.6}",
                m.preliminary_budget,
                m.preliminary_epochs,
                m.preliminary.final_train_loss().unwrap_or(f64::NAN)
            );
            println!("{} groups written to {}", m.mapping.num_groups(), output.display());
        }
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let choice = mapping_choice(&cfg, common.mapping.as_deref())?;
            let run = run_experiment(&cfg, &choice, &out, |census| {
                println!("census {census} trainable parameters");
            })?;
            let last = run.outcome.records.last().expect("epochs >= 1");
            println!("{}", last.to_json_line());
            println!("artifacts in {}", out.display());
        }
        Command::Eval { checkpoint } => {
            let archive = Archive::load(&checkpoint)?;
            let r = evaluate_archive(&archive)?;
            let v = serde_json::json!({
                "kind": format!("{:?}", archive.kind).to_lowercase(),
                "error_at_1": r.error_at_1,
                "loss": r.loss,
            });
            println!("{v}");
        }
        Command::Materialize { checkpoint, output } => {
            let a = materialize_file(&checkpoint, &output)?;
            println!("{} weights and biases written to {}", a.census, output.display());
        }
        Command::Report { config, mapping, checkpoint } => {
            let (cfg, m) = match (config, checkpoint) {
                (_, Some(ckpt)) => {
                    let archive = Archive::load(&ckpt)?;
                    let (cfg, _) = experiment::restore_checkpoint(&archive)?;
                    let text = archive.meta("mapping").expect("restored checkpoints carry a mapping");
                    let m = GroupMapping::parse(text, &cfg.network)?;
                    (cfg, m)
                }
                (Some(path), None) => {
                    let cfg = ExperimentConfig::load(&path)?;
                    let choice = mapping_choice(&cfg, mapping.as_deref())?;
                    let m = plan_mapping(&cfg, &choice)?;
                    (cfg, m)
                }
                (None, None) => unreachable!("clap requires one"),
            };
            println!("{}", PlanReport::new(&cfg.network, &m, &cfg.budget)?.to_json());
        }
        Command::Sweep { common, groups, templates, out } => {
            let cfg = load_config(&common)?;
            let choice = mapping_choice(&cfg, common.mapping.as_deref())?;
            let axis = if groups.is_empty() {
                SweepAxis::Templates(templates)
            } else {
                SweepAxis::Groups(groups)
            };
            print!("{}", experiment::sweep(&cfg, &choice, &axis, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
