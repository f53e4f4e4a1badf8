//! The `vaedg` command line: data generation, single runs, the full
//! leave-one-domain-out protocol, ablation presets, report rendering, and the
//! self-check suite.
//!
//! Global flags: `--seed`, `--config` (flat TOML), `--out-dir` (also taken
//! from `VAEDG_ARTIFACT_ROOT`). Without `--config` the desk-scale preset is
//! used.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, AblationPreset, Algorithm, ExperimentConfig};
use crate::data::manifest::{export_datasets, load_manifest_dir};
use crate::data::synth::generate_synthetic_domains;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::harness::{load_record, run_protocol, RunRecord, SelectionCriterion};
use crate::report::{
    aggregate, diff_column, parse_rows_csv, records_to_rows, render, MissingCells, RenderFormat,
};

#[derive(Parser, Debug)]
#[command(name = "vaedg", version, about = "Domain-generalization experiments with a variational autoencoder")]
struct Cli {
    /// Run seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat TOML config file; unknown keys are errors.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact root for records, checkpoints, and exports.
    #[arg(long, global = true, env = "VAEDG_ARTIFACT_ROOT", default_value = "vaedg-artifacts")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Algorithm to train (vae_dg, erm, fishr, swad, drgen, vae_dg_swad).
    #[arg(long)]
    algorithm: Option<String>,
    /// Held-out target domain id.
    #[arg(long)]
    target: Option<usize>,
    /// Override the training step budget.
    #[arg(long)]
    steps: Option<u64>,
    /// Load domains from a directory of `domain*.csv` manifests instead of
    /// generating synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic multi-domain data and export manifests + images.
    GenerateData {
        #[arg(long, default_value_t = 4)]
        num_domains: usize,
        #[arg(long, default_value_t = 150)]
        per_domain: usize,
        /// Photometric shift strength (0 disables domain shift).
        #[arg(long, default_value_t = 1.0)]
        shift_strength: f64,
        /// Drop a class from a domain, as `domain:class` (repeatable).
        #[arg(long)]
        mask: Vec<String>,
    },
    /// Train one (algorithm, target, seed) cell and record it.
    Run(RunArgs),
    /// Run the full leave-one-domain-out grid (targets x seeds).
    Protocol {
        #[command(flatten)]
        run: RunArgs,
        /// Algorithms to run, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "vae_dg,erm")]
        algorithms: Vec<String>,
        /// Seeds of the repeated trials.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Parallel cells (each cell stays single-threaded).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run an ablation preset over the protocol grid.
    Ablate {
        /// Preset name; see `--list`.
        #[arg(long, required_unless_present = "list")]
        preset: Option<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
        /// List available presets and exit.
        #[arg(long)]
        list: bool,
    },
    /// Aggregate recorded runs into a table.
    Report {
        /// Directory holding record JSON files (defaults to
        /// `<out-dir>/records`).
        #[arg(long)]
        records: Option<PathBuf>,
        /// Aggregate a results CSV instead of record files.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: String,
        /// Add a Diff. column against this row, as
        /// `algorithm[:variant[:criterion]]`.
        #[arg(long)]
        reference: Option<String>,
        /// Keep rows with missing seeds instead of rejecting the grid.
        #[arg(long)]
        allow_missing: bool,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle/invariant self-check suite.
    Verify,
}

/// Entry point used by the binary and by tests. Returns the process exit
/// code; errors print to stderr.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn base_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match cli_config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn load_domains(config: &ExperimentConfig, data: &Option<PathBuf>) -> Result<Vec<DomainDataset>> {
    match data {
        Some(dir) => load_manifest_dir(dir, config.image_side),
        None => crate::harness::synthetic_domains_for(config),
    }
}

fn apply_run_args(config: &mut ExperimentConfig, run: &RunArgs) -> Result<()> {
    if let Some(alg) = &run.algorithm {
        config.algorithm = Algorithm::from_str(alg)?;
        config.learning_rate = config.algorithm.default_learning_rate();
    }
    if let Some(target) = run.target {
        config.target_domain = target;
    }
    if let Some(steps) = run.steps {
        config.steps = steps;
    }
    Ok(())
}

fn summarize_records(records: &[RunRecord]) -> Result<String> {
    let rows = records_to_rows(records);
    let table = aggregate(&rows, MissingCells::UseAvailable)?;
    render(&table, RenderFormat::Markdown)
}

fn execute(cli: Cli) -> Result<()> {
    let out_dir = cli.out_dir.clone();
    match cli.command {
        Command::GenerateData {
            num_domains,
            per_domain,
            shift_strength,
            mask,
        } => {
            let mut config = base_config(&cli.config, cli.seed)?;
            config.num_domains = num_domains;
            config.per_domain_count = per_domain;
            config.shift_strength = shift_strength;
            let mut spec = config.shift_spec();
            for m in &mask {
                let (d, c) = m.split_once(':').ok_or_else(|| {
                    Error::Config(format!("mask '{m}' should look like 'domain:class'"))
                })?;
                let pair = (
                    d.parse().map_err(|_| Error::Config(format!("bad mask domain '{d}'")))?,
                    c.parse().map_err(|_| Error::Config(format!("bad mask class '{c}'")))?,
                );
                spec.masked.push(pair);
            }
            let datasets =
                generate_synthetic_domains(&spec, num_domains, per_domain, config.data_seed)?;
            let data_dir = out_dir.join("data");
            let manifests = export_datasets(&datasets, &data_dir)?;
            println!("wrote {} domains under {}", datasets.len(), data_dir.display());
            for (d, m) in datasets.iter().zip(&manifests) {
                println!(
                    "  domain {} ({}): {} examples, class counts {:?} -> {}",
                    d.domain_id,
                    d.name,
                    d.len(),
                    d.class_counts,
                    m.display()
                );
            }
            Ok(())
        }
        Command::Run(run) => {
            let mut config = base_config(&cli.config, cli.seed)?;
            apply_run_args(&mut config, &run)?;
            config.validate()?;
            let datasets = load_domains(&config, &run.data)?;
            let split = crate::harness::make_split(
                &datasets,
                config.target_domain,
                config.val_fraction,
                config.seed,
            )?;
            let record = crate::harness::train(&config, &datasets, &split, Some(&out_dir))?;
            println!(
                "cell {}: validation-selected step {} (target accuracy {:.4}), \
                 oracle step {} (target accuracy {:.4})",
                config.cell_name(),
                record.selected_validation.step,
                record.final_target_accuracy_validation,
                record.selected_oracle.step,
                record.final_target_accuracy_oracle,
            );
            if let Some(s) = &record.swad {
                println!(
                    "  averaged weights over [{}, {}]: target accuracy {:.4}",
                    s.start_step, s.end_step, s.target_accuracy
                );
            }
            println!("record: {}", crate::harness::record_path(&out_dir, &config).display());
            Ok(())
        }
        Command::Protocol {
            run,
            algorithms,
            seeds,
            jobs,
        } => {
            let mut base = base_config(&cli.config, cli.seed)?;
            apply_run_args(&mut base, &run)?;
            let datasets = load_domains(&base, &run.data)?;
            let jobs = jobs.unwrap_or_else(default_jobs);
            let mut all_records = Vec::new();
            for alg in &algorithms {
                let mut config = base.clone();
                config.algorithm = Algorithm::from_str(alg)?;
                config.learning_rate = config.algorithm.default_learning_rate();
                config.validate()?;
                let records = run_protocol(&config, &datasets, &seeds, Some(&out_dir), jobs)?;
                println!(
                    "{}: {} cells ({} targets x {} seeds)",
                    config.algorithm,
                    records.len(),
                    datasets.len(),
                    seeds.len()
                );
                all_records.extend(records);
            }
            println!("{}", summarize_records(&all_records)?);
            Ok(())
        }
        Command::Ablate {
            preset,
            seeds,
            jobs,
            run,
            list,
        } => {
            if list {
                for p in AblationPreset::all() {
                    println!("{}", p.name());
                }
                return Ok(());
            }
            let preset = AblationPreset::from_str(&preset.expect("required unless --list"))?;
            let mut base = base_config(&cli.config, cli.seed)?;
            apply_run_args(&mut base, &run)?;
            let config = preset.apply(&base);
            config.validate()?;
            let datasets = load_domains(&config, &run.data)?;
            let jobs = jobs.unwrap_or_else(default_jobs);
            let records = run_protocol(&config, &datasets, &seeds, Some(&out_dir), jobs)?;
            println!(
                "preset {} ({} cells), config digest {}",
                preset.name(),
                records.len(),
                config.digest()
            );
            println!("{}", summarize_records(&records)?);
            Ok(())
        }
        Command::Report {
            records,
            csv,
            format,
            reference,
            allow_missing,
            out,
        } => {
            let rows = match csv {
                Some(path) => parse_rows_csv(&std::fs::read_to_string(path)?)?,
                None => {
                    let dir = records.unwrap_or_else(|| out_dir.join("records"));
                    let mut records = Vec::new();
                    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                        .map_err(|e| Error::Report(format!("{}: {e}", dir.display())))?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
                        .collect();
                    paths.sort();
                    for p in paths {
                        records.push(load_record(&p)?);
                    }
                    if records.is_empty() {
                        return Err(Error::Report(format!(
                            "no record files under {}",
                            dir.display()
                        )));
                    }
                    records_to_rows(&records)
                }
            };
            let policy = if allow_missing {
                MissingCells::UseAvailable
            } else {
                MissingCells::Reject
            };
            let mut table = aggregate(&rows, policy)?;
            if let Some(r) = reference {
                let mut parts = r.splitn(3, ':');
                let algorithm = parts.next().unwrap().to_string();
                let variant = parts.next().unwrap_or("main").to_string();
                let criterion = match parts.next() {
                    Some(c) => SelectionCriterion::from_short_name(c)?,
                    None => SelectionCriterion::TrainingDomainValidation,
                };
                table = diff_column(&table, (&algorithm, &variant, criterion))?;
            }
            let text = render(&table, RenderFormat::from_str(&format)?)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Verify => {
            let seed = cli.seed.unwrap_or(0);
            let checks = crate::verify::run_all(seed);
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {:<22} {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                if !c.pass {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::invalid(format!("{failed} checks failed")));
            }
            Ok(())
        }
    }
}

fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Record directory path helper shared with tests.
pub fn records_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("records")
}
