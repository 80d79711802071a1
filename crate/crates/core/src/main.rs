//! Command-line interface: dataset generation, training, prediction,
//! evaluation, experiment orchestration, and importance-factor selection.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use feccm::cascade::CascadeModel;
use feccm::error::{Error, Result};
use feccm::harness::{evaluate, run_experiment, synth_to_files, SyntheticConfig};
use feccm::tasks::{load_dataset, Label, TaskSpec};
use feccm::training::{
    default_pi_grid, select_pi_target_specific, train_ccm, train_feccm, BetaPolicy, FeedbackConfig,
    FeedbackMode, Instantiation, LayerKinds,
};

#[derive(Parser)]
#[command(
    name = "feccm",
    about = "Multi-task cascaded classification with feedback",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainOpts {
    /// Random seed for training and data handling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum number of outer feedback iterations.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// Feedback mode.
    #[arg(long, default_value = "exact", value_parser = parse_mode)]
    mode: FeedbackMode,
    /// Importance factors: unified | onegoal:<k> | grid.
    #[arg(long, default_value = "unified")]
    pi: String,
    /// Surrogate sparsity policy: grid | a fixed nonnegative number.
    #[arg(long, default_value = "grid", value_parser = parse_beta)]
    beta: BetaPolicy,
    /// Target task for onegoal/grid importance factors.
    #[arg(long, default_value_t = 1)]
    target: usize,
}

fn parse_mode(s: &str) -> std::result::Result<FeedbackMode, String> {
    match s {
        "exact" => Ok(FeedbackMode::Exact),
        "surrogate" => Ok(FeedbackMode::Surrogate),
        _ => Err("mode must be 'exact' or 'surrogate'".into()),
    }
}

fn parse_beta(s: &str) -> std::result::Result<BetaPolicy, String> {
    if s == "grid" {
        return Ok(BetaPolicy::HoldOutGrid);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| "beta must be 'grid' or a number".to_string())?;
    if v < 0.0 {
        return Err("beta must be nonnegative".into());
    }
    Ok(BetaPolicy::Fixed(v))
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset pair.
    Synth {
        /// Generator config document (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
        /// Where to write the task specs consumed by later commands.
        #[arg(long)]
        out_specs: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write it to a file.
    Train {
        /// Method: ccm | feccm (flat baselines have no saved model form).
        #[arg(long, default_value = "feccm")]
        method: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional trace CSV output for the training iterations.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Predict labels for a dataset with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        /// Output CSV of per-sample per-task predictions.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on a labeled dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        /// Output report (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full experiment from a config document into a report directory.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select target-specific importance factors by cross validation.
    XvalPi {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        #[command(flatten)]
        opts: TrainOpts,
    },
}

fn load_specs(path: &PathBuf) -> Result<Vec<TaskSpec>> {
    let text = fs::read_to_string(path)?;
    let specs: Vec<TaskSpec> =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad specs file: {e}")))?;
    Ok(specs)
}

fn config_from_opts(opts: &TrainOpts) -> Result<FeedbackConfig> {
    let instantiation = if opts.pi == "unified" {
        Instantiation::Unified
    } else if let Some(k) = opts.pi.strip_prefix("onegoal:") {
        let k: usize = k
            .parse()
            .map_err(|_| Error::Config("onegoal task must be an integer".into()))?;
        Instantiation::OneGoal(k)
    } else if opts.pi == "grid" {
        Instantiation::TargetSpecific
    } else {
        return Err(Error::Config(format!(
            "unknown pi instantiation '{}'",
            opts.pi
        )));
    };
    Ok(FeedbackConfig {
        max_outer_iters: opts.iters,
        feedback_mode: opts.mode,
        instantiation,
        beta_policy: opts.beta,
        seed: opts.seed,
        ..FeedbackConfig::default()
    })
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            config,
            out_train,
            out_test,
            out_specs,
            seed,
        } => {
            let text = fs::read_to_string(&config)?;
            let mut cfg: SyntheticConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad generator config: {e}")))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            synth_to_files(&cfg, &out_train, &out_test, &out_specs)?;
            println!("wrote {} and {}", out_train.display(), out_test.display());
        }
        Command::Train {
            method,
            train,
            specs,
            out,
            trace,
            opts,
        } => {
            let specs = load_specs(&specs)?;
            let data = load_dataset(&train, &specs)?;
            let kinds = LayerKinds::default_for(&data.specs);
            let mut config = config_from_opts(&opts)?;
            if config.instantiation == Instantiation::TargetSpecific {
                let grid = default_pi_grid(&data, opts.target)?;
                let pi = select_pi_target_specific(&data, opts.target, &grid, 3, &kinds, &config)?;
                println!("selected pi: {pi:?}");
                config.pi = Some(pi);
            }
            let model = match method.as_str() {
                "ccm" => {
                    let model = train_ccm(&data, None, &kinds, &config)?;
                    if trace.is_some() {
                        return Err(Error::Config("ccm training has no iteration trace".into()));
                    }
                    model
                }
                "feccm" => {
                    let (model, t) = train_feccm(&data, None, &kinds, &config)?;
                    if let Some(path) = trace {
                        let task_ids: Vec<usize> = data.specs.iter().map(|s| s.task_id).collect();
                        let mut buf = Vec::new();
                        t.write_csv(&mut buf, &task_ids)?;
                        fs::write(path, buf)?;
                    }
                    model
                }
                other => return Err(Error::Config(format!("unknown training method '{other}'"))),
            };
            model.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Predict {
            model,
            data,
            specs,
            out,
        } => {
            let specs = load_specs(&specs)?;
            let data = load_dataset(&data, &specs)?;
            let model = CascadeModel::load(&model)?;
            let mut csv = String::from("sample_id,task_id,prediction\n");
            for sample in &data.samples {
                let preds = model.predict(sample)?;
                for (tid, (_, label)) in preds {
                    let cell = match label {
                        Label::Class(c) => c.to_string(),
                        Label::Value(v) => serde_json::to_string(&v)?,
                    };
                    csv.push_str(&format!("{},{},{}\n", sample.sample_id, tid, cell));
                }
            }
            fs::write(&out, csv)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            model,
            data,
            specs,
            out,
            seed,
        } => {
            let specs = load_specs(&specs)?;
            let data = load_dataset(&data, &specs)?;
            let model = CascadeModel::load(&model)?;
            let report = evaluate(&model, &data, "model", seed)?;
            fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!("wrote {}", out.display());
        }
        Command::Experiment { config, out } => {
            let dir = run_experiment(&config, &out)?;
            println!("wrote report directory {}", dir.display());
        }
        Command::XvalPi {
            train,
            specs,
            folds,
            opts,
        } => {
            let specs = load_specs(&specs)?;
            let data = load_dataset(&train, &specs)?;
            let kinds = LayerKinds::default_for(&data.specs);
            let mut config = config_from_opts(&opts)?;
            config.instantiation = Instantiation::TargetSpecific;
            let grid = default_pi_grid(&data, opts.target)?;
            let pi = select_pi_target_specific(&data, opts.target, &grid, folds, &kinds, &config)?;
            println!("{}", serde_json::to_string(&pi)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
