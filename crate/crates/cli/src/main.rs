//! `nstlab`: command-line front end for the semi-supervised lab.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nst_core::bench::{
    embed_features, grid_search, parse_config, plot_curves, prepare_split, run_sweep, write_embedding_csv, write_grid,
    write_history_csv, write_sweep, DatasetSpec, LabConfig,
};
use nst_core::datagen::{save_dataset_csv, ClassMode};
use nst_core::nnmodel::MlpParams;
use nst_core::trainer::{train, Method, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "nstlab",
    version,
    about = "Nullspace tuning and semi-supervised baselines on synthetic data"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: the config's `output`, else `results`].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the dataset seed; for `train` also the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and grid searches.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured dataset to `dataset.csv`.
    GenData,
    /// Train one model; writes `history.csv` and `model.ntpm`.
    Train {
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        n_labeled: Option<usize>,
    },
    /// Run a (method × n_labeled × seed) sweep; writes `raw.csv`, `aggregate.csv`, `errors.log`.
    Sweep,
    /// Vary one hyperparameter; writes `grid_raw.csv`, `grid_aggregate.csv`, `selected.txt`, `errors.log`.
    GridSearch,
    /// Render learning curves from an aggregate CSV to `curves.svg`.
    Plot {
        /// Aggregate CSV [default: `<out>/aggregate.csv`].
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Project hidden-layer activations to 2D; writes `embedding.csv`.
    Embed {
        /// Parameter file [default: `<out>/model.ntpm`].
        #[arg(long)]
        model: Option<PathBuf>,
        /// Hidden layer index, 1 = first hidden layer.
        #[arg(long, default_value_t = 1)]
        layer: usize,
    },
}

/// Pieces of a config file shared by every subcommand.
struct Setup {
    config: Option<LabConfig>,
    dataset: DatasetSpec,
    equivalence: ClassMode,
    train: TrainConfig,
    n_labeled: Option<usize>,
    out: PathBuf,
}

impl Setup {
    fn load(global: &Global) -> Result<Self> {
        let config = match &global.config {
            Some(path) => Some(parse_config(path).with_context(|| format!("reading {}", path.display()))?),
            None => None,
        };
        let (mut dataset, equivalence, train, n_labeled, output) = match &config {
            Some(LabConfig::Sweep(s)) => (
                s.dataset.clone(),
                s.equivalence,
                s.train.clone(),
                s.n_labeled.first().copied(),
                Some(s.output.clone()),
            ),
            Some(LabConfig::Grid(g)) => (
                g.dataset.clone(),
                g.equivalence,
                TrainConfig {
                    method: g.method,
                    ..g.train.clone()
                },
                Some(g.n_labeled),
                Some(g.output.clone()),
            ),
            None => (
                DatasetSpec::default(),
                ClassMode::PerLabel,
                TrainConfig::default(),
                None,
                None,
            ),
        };
        if let Some(seed) = global.seed {
            dataset.seed = seed;
        }
        let out = global
            .out
            .clone()
            .or(output)
            .unwrap_or_else(|| PathBuf::from("results"));
        Ok(Self {
            config,
            dataset,
            equivalence,
            train,
            n_labeled,
            out,
        })
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut setup = Setup::load(&cli.global)?;
    let jobs = cli.global.jobs.max(1);
    match cli.command {
        Command::GenData => {
            let data = setup.dataset.materialize()?;
            let path = setup.out_dir()?.join("dataset.csv");
            save_dataset_csv(&data, &path)?;
            println!(
                "wrote {} ({} examples, {} classes)",
                path.display(),
                data.len(),
                data.classes()
            );
        }
        Command::Train { method, n_labeled } => {
            if let Some(m) = method {
                setup.train.method = m;
            }
            if let Some(seed) = cli.global.seed {
                setup.train.seed = seed;
            }
            let n_labeled = n_labeled.or(setup.n_labeled).unwrap_or(8);
            let data = setup.dataset.materialize()?;
            let split = prepare_split(&data, &setup.dataset, setup.equivalence, n_labeled, setup.train.seed)?;
            let result = train(&setup.train, &split)?;
            let dir = setup.out_dir()?;
            write_history_csv(&result.history, dir.join("history.csv"))?;
            result.params.save(dir.join("model.ntpm"))?;
            println!(
                "{} n_labeled={n_labeled} seed={}: test error {:.4}",
                setup.train.method, setup.train.seed, result.final_test_error
            );
        }
        Command::Sweep => {
            let Some(LabConfig::Sweep(mut spec)) = setup.config.clone() else {
                bail!("sweep needs --config with a [sweep] table");
            };
            spec.dataset = setup.dataset.clone();
            let outcome = run_sweep(&spec, jobs)?;
            let dir = setup.out_dir()?;
            write_sweep(&outcome, dir)?;
            for a in &outcome.aggregate {
                println!(
                    "{:<14} n_labeled={:<4} error {:.4} ± {:.4} ({} seeds)",
                    a.method.to_string(),
                    a.n_labeled,
                    a.mean_error,
                    a.std_error,
                    a.n_seeds
                );
            }
            report_failures(&outcome.failures, dir);
        }
        Command::GridSearch => {
            let Some(LabConfig::Grid(mut spec)) = setup.config.clone() else {
                bail!("grid-search needs --config with a [grid] table");
            };
            spec.dataset = setup.dataset.clone();
            let outcome = grid_search(&spec, jobs)?;
            let dir = setup.out_dir()?;
            write_grid(&outcome, dir)?;
            for p in &outcome.points {
                println!(
                    "{}={:<8} error {:.4} ± {:.4}",
                    outcome.param.name(),
                    p.value,
                    p.aggregate.mean_error,
                    p.aggregate.std_error
                );
            }
            println!("selected {}={}", outcome.param.name(), outcome.selected);
            report_failures(&outcome.failures, dir);
        }
        Command::Plot { input } => {
            let input = input.unwrap_or_else(|| setup.out.join("aggregate.csv"));
            let path = setup.out_dir()?.join("curves.svg");
            plot_curves(&input, &path).with_context(|| format!("plotting {}", input.display()))?;
            println!("wrote {}", path.display());
        }
        Command::Embed { model, layer } => {
            let model = model.unwrap_or_else(|| setup.out.join("model.ntpm"));
            let params = MlpParams::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let data = setup.dataset.materialize()?;
            let coords = embed_features(&params, layer, data.features())?;
            let path = setup.out_dir()?.join("embedding.csv");
            write_embedding_csv(&coords, data.labels(), &path)?;
            println!("wrote {} ({} points from layer {layer})", path.display(), data.len());
        }
    }
    Ok(())
}

fn report_failures(failures: &[String], dir: &Path) {
    if !failures.is_empty() {
        eprintln!(
            "{} runs failed; see {}",
            failures.len(),
            dir.join("errors.log").display()
        );
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
