//! Command-line entry point: dataset generation, training, evaluation,
//! gradient verification, complexity benchmarking, attention export and
//! experiment sweeps.
//!
//! Every run directory is self-describing: the resolved config, seed,
//! report and checkpoint are enough to reproduce the run bit for bit.
//! Exit codes: 0 ok, 2 config error, 3 numerical divergence.

mod attn_dump;

use clap::{Args, Parser, Subcommand};
use gea_core::config::{ConfigError, RunConfig};
use gea_core::graph::{save_jsonl, GraphError};
use gea_core::params::ParamStore;
use gea_core::posenc::PeKind;
use gea_core::sweep;
use gea_core::train::{self, TrainError};
use gea_core::util::write_atomic;
use gea_core::verify;
use rand::SeedableRng;
use std::path::PathBuf;
use std::process::ExitCode;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "gea", version, about = "Graph external attention workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key overrides, e.g. --set train.base_lr=0.01
    #[arg(long = "set", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    /// Seed override (shorthand for --set seed=N).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, ConfigError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        RunConfig::load(&self.config, &overrides)
    }
}

fn parse_override(raw: &str) -> Result<(String, String), String> {
    match raw.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected key=value, got {raw:?}")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSONL splits plus meta.json.
    Generate {
        #[command(subcommand)]
        dataset: GenerateCommand,
    },
    /// Train a model and write report + best checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the finite-difference gradient suite over ops, layers and the
    /// full model.
    Gradcheck {
        /// Append a deliberately corrupted backward that must fail.
        #[arg(long)]
        with_corrupted_fixture: bool,
    },
    /// Export external- and self-attention scores for some graphs.
    AttnDump {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// How many graphs from the split to export.
        #[arg(long, default_value_t = 4)]
        graphs: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Measure forward-cost scaling and fit growth exponents.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = gea_core::bench::DEFAULT_SIZES)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a multi-seed experiment sweep.
    Sweep {
        #[command(subcommand)]
        kind: SweepCommand,
    },
}

#[derive(Subcommand)]
enum GenerateCommand {
    /// Binary-tree key-matching benchmark graphs.
    Tree {
        #[arg(long, default_value_t = 3)]
        r: usize,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train/valid/test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        split: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stochastic-block-model cluster graphs.
    Sbm {
        #[arg(long, default_value_t = 20)]
        nodes_per_cluster: usize,
        #[arg(long, default_value_t = 6)]
        clusters: usize,
        #[arg(long, default_value_t = 0.55)]
        p_in: f64,
        #[arg(long, default_value_t = 0.25)]
        p_out: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        split: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SweepCommand {
    /// Vary the external attention head count.
    Heads {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        heads: Vec<usize>,
        #[command(flatten)]
        common: SweepCommon,
    },
    /// Vary the positional encoding.
    Pe {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        common: SweepCommon,
    },
    /// The four-configuration external-unit ablation.
    Ablation {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        common: SweepCommon,
    },
}

#[derive(Args, Clone)]
struct SweepCommon {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = sweep::PROTOCOL_SEEDS)]
    seeds: Vec<u64>,
    /// Parallel training jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Errors mapped onto process exit codes.
pub enum CliError {
    Config(String),
    Diverged(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Diverged(m) | CliError::Other(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::InvalidParams(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(inner) => CliError::Config(inner.to_string()),
            TrainError::Graph(GraphError::InvalidParams(m)) => {
                CliError::Config(format!("invalid generator parameters: {m}"))
            }
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { dataset } => generate(dataset),
        Command::Train { config, out } => train_cmd(config, out),
        Command::Eval {
            config,
            checkpoint,
            split,
        } => eval_cmd(config, checkpoint, &split),
        Command::Gradcheck {
            with_corrupted_fixture,
        } => gradcheck_cmd(with_corrupted_fixture),
        Command::AttnDump {
            config,
            checkpoint,
            out,
            graphs,
            split,
        } => attn_dump::run(config.load()?, &checkpoint, &out, graphs, &split),
        Command::Bench { out, sizes, seed } => bench_cmd(&out, &sizes, seed),
        Command::Sweep { kind } => sweep_cmd(kind),
    }
}

fn split_array(split: &[f64]) -> [f64; 3] {
    [split[0], split[1], split[2]]
}

fn generate(cmd: GenerateCommand) -> Result<(), CliError> {
    let (split, out) = match cmd {
        GenerateCommand::Tree {
            r,
            count,
            seed,
            split,
            out,
        } => (
            gea_core::graph::generate_tree_neighbour_match(r, count, seed, split_array(&split))?,
            out,
        ),
        GenerateCommand::Sbm {
            nodes_per_cluster,
            clusters,
            p_in,
            p_out,
            seed,
            count,
            split,
            out,
        } => (
            gea_core::graph::generate_sbm_cluster(
                nodes_per_cluster,
                clusters,
                p_in,
                p_out,
                seed,
                count,
                split_array(&split),
            )?,
            out,
        ),
    };
    save_jsonl(&split, &out)?;
    println!(
        "wrote {} train / {} valid / {} test graphs to {}",
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(config_args: ConfigArgs, out: PathBuf) -> Result<(), CliError> {
    let config = config_args.load()?;
    std::fs::create_dir_all(&out)?;
    write_atomic(
        &out.join("config.resolved.json"),
        config.to_pretty_json().as_bytes(),
    )?;
    let outcome = train::train(&config)?;
    outcome
        .best_params
        .save(&out.join("checkpoint.json"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(
        &out.join("report.json"),
        &serde_json::to_vec_pretty(&outcome.report)?,
    )?;
    let last = outcome.report.curves.last();
    println!(
        "trained {} epochs; last val {:.4}; test {:.4}; report in {}",
        outcome.report.curves.len(),
        last.map_or(f64::NAN, |c| c.val_metric),
        outcome.report.test_metric,
        out.display()
    );
    Ok(())
}

/// Rebuilds the model skeleton for a config and loads checkpoint values.
pub(crate) fn rebuild_model(
    config: &RunConfig,
    checkpoint: &std::path::Path,
) -> Result<
    (
        gea_core::model::GEAETModel,
        ParamStore,
        gea_core::graph::DatasetSplit,
        gea_core::graph::DatasetInfo,
    ),
    CliError,
> {
    let split = config.data.build(config.seed)?;
    let info = gea_core::graph::DatasetInfo::from_split(&split)
        .map_err(|e| CliError::Other(e.to_string()))?;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let model = gea_core::model::GEAETModel::build(
        config.model.clone(),
        info.clone(),
        &mut store,
        &mut rng,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let loaded = ParamStore::load(checkpoint).map_err(|e| CliError::Other(e.to_string()))?;
    store
        .load_values_from(&loaded)
        .map_err(|e| CliError::Config(format!("checkpoint does not fit the model: {e}")))?;
    Ok((model, store, split, info))
}

fn eval_cmd(
    config_args: ConfigArgs,
    checkpoint: PathBuf,
    split_name: &str,
) -> Result<(), CliError> {
    let config = config_args.load()?;
    let (model, store, split, info) = rebuild_model(&config, &checkpoint)?;
    let graphs = match split_name {
        "train" => &split.train,
        "valid" => &split.valid,
        "test" => &split.test,
        other => return Err(CliError::Config(format!("unknown split {other:?}"))),
    };
    let metric = train::evaluate_graphs(&model, &store, graphs, &info, config.train.batch_size)?;
    let value = metric.unwrap_or(f64::NAN);
    println!(
        "{}",
        serde_json::json!({ "split": split_name, "graphs": graphs.len(), "metric": value })
    );
    Ok(())
}

fn gradcheck_cmd(with_corrupted_fixture: bool) -> Result<(), CliError> {
    let checks = verify::gradcheck_suite(with_corrupted_fixture)
        .map_err(|e| CliError::Other(e.to_string()))?;
    let mut all_ok = true;
    for check in &checks {
        let status = if check.passed() { "PASS" } else { "FAIL" };
        println!("{:<44} {:>12.3e}  {}", check.name, check.max_rel_err, status);
        all_ok &= check.passed();
    }
    println!(
        "{} components, tolerance {:.0e}",
        checks.len(),
        verify::GRAD_TOL
    );
    if all_ok {
        Ok(())
    } else {
        let failed: Vec<&str> = checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::Other(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn bench_cmd(out: &std::path::Path, sizes: &[usize], seed: u64) -> Result<(), CliError> {
    let report = gea_core::bench::run_bench(sizes, seed)?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("bench.json"), &serde_json::to_vec_pretty(&report)?)?;
    print!("{}", report.render());
    Ok(())
}

fn sweep_cmd(kind: SweepCommand) -> Result<(), CliError> {
    let (table, common) = match kind {
        SweepCommand::Heads {
            config,
            heads,
            common,
        } => {
            let base = config.load()?;
            (
                sweep::sweep_heads(&base, &heads, &common.seeds, common.jobs)?,
                common,
            )
        }
        SweepCommand::Pe { config, common } => {
            let base = config.load()?;
            (
                sweep::sweep_pe(
                    &base,
                    &[PeKind::None, PeKind::Lappe, PeKind::Rwpe],
                    &common.seeds,
                    common.jobs,
                )?,
                common,
            )
        }
        SweepCommand::Ablation { config, common } => {
            let base = config.load()?;
            (
                sweep::sweep_ablation(&base, &common.seeds, common.jobs)?,
                common,
            )
        }
    };
    std::fs::create_dir_all(&common.out)?;
    let file = common.out.join(format!("sweep_{}.json", table.kind));
    write_atomic(&file, &serde_json::to_vec_pretty(&table)?)?;
    print!("{}", table.render());
    println!("table written to {}", file.display());
    Ok(())
}
