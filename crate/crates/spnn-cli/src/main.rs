//! `spnn` — reproducible experiment runs for learned metriplectic
//! integrators: dataset generation, training, evaluation and comparison.
//!
//! Every command is a pure function of its flags, seeds and input files;
//! rerunning with the same arguments reproduces the output files
//! bit-exactly. Each output directory receives a `resolved_config.toml`
//! recording every parameter the run used.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use spnn_core::dataset::{self, NoiseScope, Split};
use spnn_core::error::Error;
use spnn_core::net::Checkpoint;
use spnn_core::train::{
    self, evaluate, system_operators, Mode, MetricsReport, TrainingConfig,
};
use spnn_core::{oldroyd, pendulum};

/// Environment variable holding the default root for output directories.
const OUTPUT_ROOT_ENV: &str = "SPNN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "spnn",
    version,
    about = "Structure-preserving neural integrators: generate, train, evaluate, compare"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth trajectory dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset's training split.
    Train(TrainArgs),
    /// Roll a trained model out over a dataset and report MSE tables.
    Evaluate(EvaluateArgs),
    /// Evaluate several checkpoints and emit per-trajectory MSE
    /// distributions for box plots.
    Compare(CompareArgs),
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    /// System to simulate: pendulum | couette.
    #[arg(long)]
    system: String,
    /// Master seed; all trajectory/split/noise streams derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: <root>/dataset-<system>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fraction of trajectories labeled train.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Relative measurement-noise level (0 = clean).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Which split receives noise: train | all.
    #[arg(long, default_value = "train")]
    noise_scope: String,
    /// Trajectories (pendulum only).
    #[arg(long)]
    n_trajectories: Option<usize>,
    /// Vertical elements (couette only).
    #[arg(long)]
    n_elements: Option<usize>,
    /// Dumbbells per node (couette only).
    #[arg(long)]
    dumbbells_per_node: Option<usize>,
    /// Recorded steps per trajectory.
    #[arg(long)]
    n_steps: Option<usize>,
    /// Recorded time increment.
    #[arg(long)]
    dt: Option<f64>,
    /// Sign convention of the recorded stress slot (couette only).
    #[arg(long)]
    stress_sign: Option<f64>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory (default: <root>/train-<system>-<mode>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// spnn | unconstrained | blackbox.
    #[arg(long, default_value = "spnn")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs (default: per-system full scale).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    /// Comma-separated decay epochs, e.g. 600,1200.
    #[arg(long, value_delimiter = ',')]
    milestones: Option<Vec<usize>>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    /// Experimental: self-feeding training inputs instead of teacher
    /// forcing.
    #[arg(long, default_value_t = false)]
    self_feeding: bool,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory (default: <root>/evaluate-<mode>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extend rollouts past the training horizon (>= 1; metrics always use
    /// the standard window).
    #[arg(long, default_value_t = 1.0)]
    horizon_factor: f64,
}

#[derive(Args, Serialize)]
struct CompareArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory (default: <root>/compare).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoints to compare.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// 2 for configuration/usage problems, 3 for numeric failures and bad data.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::InvalidConfig(_)
            | Error::MissingManifestKey(_)
            | Error::VersionMismatch { .. }
            | Error::Dimension { .. }
            | Error::InvalidTimeStep { .. },
        ) => 2,
        _ => 3,
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_out(explicit: &Option<PathBuf>, default_name: String) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| output_root().join(default_name))
}

fn write_resolved_config<T: Serialize>(dir: &Path, config: &T) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(config)?;
    std::fs::write(dir.join("resolved_config.toml"), text)?;
    Ok(())
}

fn parse_noise_scope(s: &str) -> Result<NoiseScope, Error> {
    match s {
        "train" => Ok(NoiseScope::Train),
        "all" => Ok(NoiseScope::All),
        other => Err(Error::InvalidConfig(format!(
            "unknown noise scope `{other}` (expected train | all)"
        ))),
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let scope = parse_noise_scope(&args.noise_scope)?;
    if args.noise < 0.0 {
        return Err(Error::InvalidConfig("noise level must be >= 0".into()).into());
    }
    let out = resolve_out(
        &args.out,
        format!("dataset-{}-seed{}", args.system, args.seed),
    );
    let ds = match args.system.as_str() {
        "pendulum" => {
            let mut params = pendulum::PendulumParams::default();
            if let Some(v) = args.n_trajectories {
                params.n_trajectories = v;
            }
            if let Some(v) = args.n_steps {
                params.n_steps = v;
            }
            if let Some(v) = args.dt {
                params.dt = v;
            }
            pendulum::generate_dataset(&params, args.seed)?
        }
        "couette" => {
            let mut params = oldroyd::CouetteParams::default();
            if let Some(v) = args.n_elements {
                params.n_elements = v;
            }
            if let Some(v) = args.dumbbells_per_node {
                params.dumbbells_per_node = v;
            }
            if let Some(v) = args.n_steps {
                params.n_steps = v;
            }
            if let Some(v) = args.dt {
                params.dt = v;
            }
            if let Some(v) = args.stress_sign {
                params.stress_sign = v;
            }
            oldroyd::generate_dataset(&params, args.seed)?
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown system `{other}` (expected pendulum | couette)"
            ))
            .into());
        }
    };
    let ds = dataset::split(ds, args.train_fraction, args.seed);
    let ds = dataset::add_noise(ds, args.noise, args.seed, scope);
    dataset::save(&ds, &out)?;
    write_resolved_config(&out, &args)?;
    let n_train = ds.indices_of(Split::Train).len();
    let n_test = ds.indices_of(Split::Test).len();
    println!(
        "wrote {} trajectories ({} train / {} test) x {} snapshots x {} variables to {}",
        ds.trajectories.len(),
        n_train,
        n_test,
        ds.manifest.n_snapshots,
        ds.manifest.state_dim,
        out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let data = dataset::load(&args.dataset)?;
    let mode = Mode::from_str(&args.mode)?;
    let system = data.manifest.generator.clone();
    let mut config = TrainingConfig::defaults_for(&system, mode, args.seed)?;
    if let Some(v) = args.epochs {
        config.n_epochs = v;
    }
    if let Some(v) = args.base_lr {
        config.base_lr = v;
    }
    if let Some(v) = &args.milestones {
        config.milestones = v.clone();
    }
    if let Some(v) = args.gamma {
        config.gamma = v;
    }
    if let Some(v) = args.lambda_d {
        config.lambda_d = v;
    }
    if let Some(v) = args.lambda_r {
        config.lambda_r = v;
    }
    if let Some(v) = args.hidden_layers {
        config.hidden_layers = v;
    }
    if let Some(v) = args.hidden_width {
        config.hidden_width = Some(v);
    }
    config.self_feeding = args.self_feeding;

    let out = resolve_out(
        &args.out,
        format!("train-{}-{}-seed{}", system, mode, args.seed),
    );
    std::fs::create_dir_all(&out)?;
    let outcome = train::train(&config, &data)?;
    outcome.checkpoint.save(&out.join("checkpoint.spnn"))?;
    train::write_history_columns(&outcome.history, &out.join("history.txt"))?;
    write_resolved_config(&out, &config)?;
    let last = outcome.history.last().expect("n_epochs >= 1");
    println!(
        "trained {} epochs ({} mode) on {}; final losses: data {:.3e}, degeneracy {:.3e}; wrote {}",
        config.n_epochs,
        mode,
        args.dataset.display(),
        last.loss_data,
        last.loss_degen,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let data = dataset::load(&args.dataset)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let out = resolve_out(
        &args.out,
        format!("evaluate-{}-seed{}", ckpt.meta.mode, ckpt.meta.seed),
    );
    std::fs::create_dir_all(out.join("plots"))?;
    let evaluation = evaluate(&ckpt, &data, args.horizon_factor)?;
    train::write_report(&evaluation.report, &out.join("report.toml"))?;
    train::write_mse_distribution(&evaluation.report, Split::Train, &out.join("mse_train.txt"))?;
    train::write_mse_distribution(&evaluation.report, Split::Test, &out.join("mse_test.txt"))?;

    let names = data.manifest.layout.component_names();
    let pendulum_params: Option<pendulum::PendulumParams> =
        if data.manifest.generator == "pendulum" {
            Some(toml::Value::Table(data.manifest.params.clone()).try_into()?)
        } else {
            None
        };
    for (idx, rollout) in evaluation.rollouts.iter().enumerate() {
        let Some(rollout) = rollout else { continue };
        let gt = &data.trajectories[idx];
        let split = match gt.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        train::write_trajectory_columns(
            gt,
            &rollout.states,
            &names,
            data.dt(),
            &out.join(format!("plots/traj_{split}_{idx:03}.txt")),
        )?;
        if let Some(params) = &pendulum_params {
            train::write_thermo_columns(
                gt,
                &rollout.states,
                params,
                data.dt(),
                &out.join(format!("plots/thermo_{split}_{idx:03}.txt")),
            )?;
        }
    }
    write_resolved_config(&out, &args)?;
    print_report_summary(&evaluation.report);
    println!("wrote {}", out.display());
    Ok(())
}

fn print_report_summary(report: &MetricsReport) {
    println!(
        "{:<10} {:>13} {:>13} {:>13} {:>13}",
        "variable", "data train", "data test", "degen train", "degen test"
    );
    for v in &report.variables {
        let degen = |x: Option<f64>| {
            x.map(|v| format!("{v:>13.3e}"))
                .unwrap_or_else(|| format!("{:>13}", "-"))
        };
        println!(
            "{:<10} {:>13.3e} {:>13.3e} {} {}",
            v.name,
            v.mse_data_train,
            v.mse_data_test,
            degen(v.mse_degen_train),
            degen(v.mse_degen_test)
        );
    }
    if let Some(ee) = &report.energy_entropy {
        println!(
            "energy MSE train {:.3e} / test {:.3e}; entropy MSE train {:.3e} / test {:.3e}",
            ee.mse_energy_train, ee.mse_energy_test, ee.mse_entropy_train, ee.mse_entropy_test
        );
    }
    let diverged: Vec<_> = report
        .per_trajectory
        .iter()
        .filter_map(|t| t.diverged_at.map(|s| (t.index, s)))
        .collect();
    if !diverged.is_empty() {
        println!("diverged rollouts (excluded): {diverged:?}");
    }
}

fn cmd_compare(args: CompareArgs) -> anyhow::Result<()> {
    let data = dataset::load(&args.dataset)?;
    let out = resolve_out(&args.out, "compare".to_string());
    std::fs::create_dir_all(&out)?;
    // verify the operator pair once per system named by the checkpoints
    for path in &args.checkpoints {
        let ckpt = Checkpoint::load(path)?;
        if Mode::from_str(&ckpt.meta.mode)?.uses_operators() {
            system_operators(&ckpt.meta.system)?;
        }
    }
    println!(
        "{:<40} {:>13} {:>13}",
        "checkpoint", "median train", "median test"
    );
    for path in &args.checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let evaluation = evaluate(&ckpt, &data, 1.0)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "checkpoint".to_string());
        let label = format!("{}-{}-seed{}", stem, ckpt.meta.mode, ckpt.meta.seed);
        train::write_mse_distribution(
            &evaluation.report,
            Split::Train,
            &out.join(format!("{label}_train.txt")),
        )?;
        train::write_mse_distribution(
            &evaluation.report,
            Split::Test,
            &out.join(format!("{label}_test.txt")),
        )?;
        let median = |split: Split| {
            let mut values: Vec<f64> = evaluation
                .report
                .per_trajectory
                .iter()
                .filter(|t| t.split == split && t.diverged_at.is_none())
                .map(|t| t.mse_data_mean)
                .collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if values.is_empty() {
                f64::NAN
            } else {
                values[values.len() / 2]
            }
        };
        println!(
            "{:<40} {:>13.3e} {:>13.3e}",
            label,
            median(Split::Train),
            median(Split::Test)
        );
    }
    write_resolved_config(&out, &args)?;
    println!("wrote {}", out.display());
    Ok(())
}
