//! The `stgnn` command line.
//!
//! ```text
//! stgnn [--config run.toml] [--seed S] [--out DIR] [--jobs J] <command> [flags]
//! ```
//!
//! Settings are resolved in three layers, later ones winning: built-in
//! defaults, the `--config` TOML file, then command-line flags. `--seed`
//! overrides every seed in the file (flock, training and sweep). Unknown
//! keys anywhere in the file are rejected.
//!
//! Every command writes `manifest.toml` into `--out` before it starts
//! working. The manifest records the command line, the fully resolved
//! configuration and the artifacts the command will produce, which is all
//! that is needed to replay the run.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric
//! divergence, 4 I/O error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flocking::{
    closed_loop_rollout, generate_dataset, ExpertPolicy, FlockConfig, ModelPolicy, Policy,
    RolloutMode, SplitCounts,
};
use crate::graph::{GsoKind, ShiftOperator};
use crate::seed;
use crate::spacetime::{SpaceTimeSignal, TimeShiftOperator};
use crate::stability::{
    filter_deviation_experiment, gnn_relative_cost_experiment, StabilityReport, SweepConfig,
};
use crate::stgf::{
    estimate_c_l, filter_norm, frequency_response, FilterTaps, FrequencyPoint, LambdaRange,
};
use crate::stgnn::{Model, ModelConfig};
use crate::training::{
    train_epochs, validation_cost, Dataset, DatasetSplits, GraphMode, TrainConfig, TrainerState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const MANIFEST_FORMAT: &str = "stgnn-run/1";

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. }
        | Error::NonFinitePrediction { .. }
        | Error::EigenConvergence { .. } => EXIT_DIVERGENCE,
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "stgnn",
    version,
    about = "Space-time graph neural networks and edge-drop stability experiments"
)]
pub struct Cli {
    /// Run configuration (TOML). Flags override values from the file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; replaces every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for trials and examples; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert flocking episodes.
    Generate(GenerateArgs),
    /// Train a network on a generated dataset.
    Train(TrainArgs),
    /// Roll a policy out in closed loop on dataset episodes.
    Rollout(RolloutArgs),
    /// Edge-drop stability sweep.
    Sweep(SweepArgs),
    /// Integral-Lipschitz constant, norm and frequency response of filters.
    Spectra(SpectraArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of agents N.
    #[arg(long)]
    pub agents: Option<usize>,
    /// Steps per episode.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Training episodes.
    #[arg(long)]
    pub train: Option<usize>,
    /// Validation episodes.
    #[arg(long)]
    pub validation: Option<usize>,
    /// Test episodes.
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Total epochs (including any already completed when resuming).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam step size.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Per-example averaged operator or the live operator sequence.
    #[arg(long, value_enum)]
    pub graph_mode: Option<GraphModeArg>,
    /// Graph shift operator built from each communication graph.
    #[arg(long, value_enum)]
    pub gso: Option<GsoArg>,
    /// Continue from the trainer state in `--out` if there is one.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory; required for every policy except `expert`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "fixed")]
    pub mode: RolloutModeArg,
    /// Sampling probability for `--mode perturbed`.
    #[arg(long, default_value_t = 1.0)]
    pub probability: f64,
    /// Graph shift operator built from each communication graph.
    #[arg(long, value_enum)]
    pub gso: Option<GsoArg>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Trained model; switches the sweep to the network experiment.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset whose flock configuration (and, at matching size, test
    /// split) the network sweep uses.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Filter taps file for the filter experiment.
    #[arg(long)]
    pub taps: Option<PathBuf>,
    /// Comma-separated sampling probabilities.
    #[arg(long, value_delimiter = ',')]
    pub probabilities: Option<Vec<f64>>,
    /// Comma-separated network sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Trials per (size, probability) point.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Graph shift operator built from each communication graph.
    #[arg(long, value_enum)]
    pub gso: Option<GsoArg>,
}

#[derive(Debug, Args)]
pub struct SpectraArgs {
    /// Filter taps file: order on the first line, then one coefficient per line.
    #[arg(long)]
    pub taps: Option<PathBuf>,
    /// Trained model; reports every filter of every layer.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Lower end of the eigenvalue range.
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_min: Option<f64>,
    /// Upper end of the eigenvalue range.
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_max: Option<f64>,
    /// Initial number of frequency samples on [0, 2π).
    #[arg(long)]
    pub omega_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GraphModeArg {
    Average,
    TimeVarying,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GsoArg {
    Adjacency,
    Laplacian,
}

impl From<GsoArg> for GsoKind {
    fn from(g: GsoArg) -> Self {
        match g {
            GsoArg::Adjacency => GsoKind::Adjacency,
            GsoArg::Laplacian => GsoKind::Laplacian,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RolloutModeArg {
    /// The episode's averaged operator for every step.
    Fixed,
    /// The live communication graphs.
    TimeVarying,
    /// Random edge sampling from the averaged operator at every step.
    Perturbed,
    /// The centralized expert controller.
    Expert,
}

/// Which experiment `sweep` runs without an explicit `--model`/`--taps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    #[default]
    Filter,
    Network,
}

/// Inputs of the sweep that are not part of [`SweepConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSetup {
    pub kind: SweepKind,
    /// Test episodes per size for the network sweep.
    pub episodes: usize,
    /// Operator used by both experiments.
    pub gso_kind: GsoKind,
    /// Filter taps when no taps file is given.
    pub filter_taps: Vec<f64>,
    /// Horizon of the random test signal for the filter sweep.
    pub filter_horizon: usize,
}

impl Default for SweepSetup {
    fn default() -> Self {
        Self {
            kind: SweepKind::Filter,
            episodes: 8,
            gso_kind: GsoKind::Laplacian,
            filter_taps: vec![0.1, -0.05, 0.02, -0.01],
            filter_horizon: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectraSetup {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub omega_samples: usize,
    /// Points per axis of the dumped response grid.
    pub grid_points: usize,
}

impl Default for SpectraSetup {
    fn default() -> Self {
        Self {
            lambda_min: -1.0,
            lambda_max: 1.0,
            omega_samples: 64,
            grid_points: 16,
        }
    }
}

/// Everything a run can be configured with. One file serves every command;
/// each command reads the sections it needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub flock: FlockConfig,
    pub counts: SplitCounts,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub sweep_setup: SweepSetup,
    pub spectra: SpectraSetup,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    fn set_seed(&mut self, seed: u64) {
        self.flock.seed = seed;
        self.train.seed = seed;
        self.sweep.seed = seed;
    }
}

/// What a run did and with which settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Errors are reported on stderr.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_CONFIG,
            };
        }
    };
    let command: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(&cli, command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli, command: Vec<String>) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let ctx = Context {
        out: cli.out.clone(),
        command,
        seed: cli.seed,
        jobs: cli.jobs,
    };
    pool.install(|| match &cli.command {
        Command::Generate(a) => cmd_generate(&ctx, config, a),
        Command::Train(a) => cmd_train(&ctx, config, a),
        Command::Rollout(a) => cmd_rollout(&ctx, config, a),
        Command::Sweep(a) => cmd_sweep(&ctx, config, a),
        Command::Spectra(a) => cmd_spectra(&ctx, config, a),
    })
}

struct Context {
    out: PathBuf,
    command: Vec<String>,
    seed: Option<u64>,
    jobs: usize,
}

impl Context {
    fn write_manifest(&self, config: &RunConfig, artifacts: &[&str]) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            seed: self.seed,
            jobs: self.jobs,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            config: config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(self.out.join("manifest.toml"), text)?;
        Ok(())
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.out.join(name), contents)?;
        Ok(())
    }
}

const FLOCK_FILE: &str = "flock.toml";

fn load_flock(dataset: &Path) -> Result<FlockConfig> {
    let path = dataset.join(FLOCK_FILE);
    toml::from_str(&std::fs::read_to_string(&path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_model(dir: &Path) -> Result<Model> {
    if !dir.join("model.toml").is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no model checkpoint in {}", dir.display()),
        )));
    }
    Model::load(dir)
}

fn cmd_generate(ctx: &Context, mut config: RunConfig, a: &GenerateArgs) -> Result<()> {
    if let Some(n) = a.agents {
        config.flock.agent_count = n;
    }
    if let Some(t) = a.horizon {
        config.flock.horizon = t;
    }
    if let Some(n) = a.train {
        config.counts.train = n;
    }
    if let Some(n) = a.validation {
        config.counts.validation = n;
    }
    if let Some(n) = a.test {
        config.counts.test = n;
    }
    config.flock.validate()?;
    ctx.write_manifest(&config, &["dataset/", "dataset/flock.toml", "episodes.csv"])?;

    let data = generate_dataset(&config.flock, config.counts)?;
    let dir = ctx.out.join("dataset");
    data.save(&dir)?;
    let flock = toml::to_string(&config.flock).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(FLOCK_FILE), flock)?;

    let mut csv = String::from("split,index,seed,initial_velocity_cost,final_velocity_cost\n");
    for set in data.splits() {
        for (i, ex) in set.examples.iter().enumerate() {
            let t = &ex.trajectory;
            let _ = writeln!(
                csv,
                "{},{},{},{:.12e},{:.12e}",
                set.split.name(),
                i,
                t.seed,
                t.velocity_cost_at(0),
                t.velocity_cost_at(t.horizon() - 1)
            );
        }
    }
    ctx.write("episodes.csv", &csv)
}

fn cmd_train(ctx: &Context, mut config: RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        config.train.adam.learning_rate = lr;
    }
    if let Some(m) = a.graph_mode {
        config.train.graph_mode = match m {
            GraphModeArg::Average => GraphMode::Average,
            GraphModeArg::TimeVarying => GraphMode::TimeVarying,
        };
    }
    if let Some(g) = a.gso {
        config.train.gso_kind = g.into();
    }
    config.model.validate()?;
    let flock = load_flock(&a.data)?;
    config.flock = flock.clone();
    ctx.write_manifest(&config, &["trainer/", "model/", "loss.csv"])?;

    let data = DatasetSplits::load(&a.data)?;
    let state_dir = ctx.out.join("trainer");
    let mut state = if a.resume && state_dir.join("trainer.toml").is_file() {
        TrainerState::load(&state_dir)?
    } else {
        let model = Model::init(config.model.clone(), config.train.seed)?;
        TrainerState::new(model, config.train.adam)
    };
    if state.model.config() != &config.model {
        return Err(Error::Config(
            "resumed model does not match the [model] section".into(),
        ));
    }
    state.save(&state_dir)?;
    while state.epoch < config.train.epochs {
        train_epochs(&mut state, &data, &flock, &config.train, 1)?;
        state.save(&state_dir)?;
        if let Some(row) = state.report.rows.last() {
            eprintln!(
                "epoch {:>3}  train mse {:.6e}  validation cost {:.6e}",
                row.epoch, row.train_mse, row.validation_cost
            );
        }
    }
    state.best_model().save(ctx.out.join("model"))?;
    ctx.write("loss.csv", &state.report.to_csv())
}

fn split_of(data: &DatasetSplits, split: SplitArg) -> &Dataset {
    match split {
        SplitArg::Train => &data.train,
        SplitArg::Validation => &data.validation,
        SplitArg::Test => &data.test,
    }
}

fn cmd_rollout(ctx: &Context, config: RunConfig, a: &RolloutArgs) -> Result<()> {
    let flock = load_flock(&a.data)?;
    let kind = a.gso.map_or(config.train.gso_kind, Into::into);
    if a.mode == RolloutModeArg::Perturbed && !(0.0..=1.0).contains(&a.probability) {
        return Err(Error::InvalidParameter(format!(
            "probability {} outside [0, 1]",
            a.probability
        )));
    }
    let model = match (a.mode, &a.model) {
        (RolloutModeArg::Expert, _) => None,
        (_, Some(dir)) => Some(load_model(dir)?),
        (_, None) => {
            return Err(Error::Config(
                "--model is required for this rollout mode".into(),
            ))
        }
    };
    let mut config = config;
    config.flock = flock.clone();
    ctx.write_manifest(&config, &["rollout.csv", "rollout_summary.csv"])?;

    let data = DatasetSplits::load(&a.data)?;
    let set = split_of(&data, a.split);
    let run_seed = ctx.seed.unwrap_or(config.train.seed);
    let expert = ExpertPolicy { cfg: &flock };
    let trajectories = set
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let nominal = ex.trajectory.average_gso(kind)?;
            let policy: &dyn Policy = match &model {
                Some(m) => &ModelPolicy { model: m },
                None => &expert,
            };
            let mode = match a.mode {
                RolloutModeArg::Fixed | RolloutModeArg::Expert => RolloutMode::FixedGraph(&nominal),
                RolloutModeArg::TimeVarying => RolloutMode::TimeVarying(kind),
                RolloutModeArg::Perturbed => RolloutMode::Perturbed {
                    nominal: &nominal,
                    probability: a.probability,
                    seed: seed::derive(run_seed, &[seed::stream::ROLLOUT, i as u64]),
                },
            };
            closed_loop_rollout(policy, &flock, &ex.initial_state(), mode)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_step = String::from("episode,t,velocity_cost\n");
    let mut summary =
        String::from("episode,initial_velocity_cost,final_velocity_cost,validation_cost\n");
    for (i, t) in trajectories.iter().enumerate() {
        for step in 0..t.horizon() {
            let _ = writeln!(per_step, "{i},{step},{:.12e}", t.velocity_cost_at(step));
        }
        let _ = writeln!(
            summary,
            "{i},{:.12e},{:.12e},{:.12e}",
            t.velocity_cost_at(0),
            t.velocity_cost_at(t.horizon() - 1),
            validation_cost(t)
        );
    }
    ctx.write("rollout.csv", &per_step)?;
    ctx.write("rollout_summary.csv", &summary)
}

fn cmd_sweep(ctx: &Context, mut config: RunConfig, a: &SweepArgs) -> Result<()> {
    if let Some(p) = &a.probabilities {
        config.sweep.probabilities = p.clone();
    }
    if let Some(s) = &a.sizes {
        config.sweep.sizes = s.clone();
    }
    if let Some(t) = a.trials {
        config.sweep.trials = t;
    }
    if let Some(g) = a.gso {
        config.sweep_setup.gso_kind = g.into();
    }
    if a.model.is_some() {
        config.sweep_setup.kind = SweepKind::Network;
    } else if a.taps.is_some() {
        config.sweep_setup.kind = SweepKind::Filter;
    }
    config.sweep.validate()?;
    if config.sweep.sizes.is_empty() {
        return Err(Error::Config("sweep needs at least one size".into()));
    }
    let kind = config.sweep_setup.gso_kind;

    let report_for: Box<dyn Fn(&RunConfig, usize) -> Result<StabilityReport> + '_> =
        match config.sweep_setup.kind {
            SweepKind::Network => {
                let dir = a
                    .model
                    .as_ref()
                    .ok_or_else(|| Error::Config("network sweep needs --model".into()))?;
                let model = load_model(dir)?;
                let base_flock = match &a.data {
                    Some(d) => load_flock(d)?,
                    None => config.flock.clone(),
                };
                let dataset = a.data.as_ref().map(DatasetSplits::load).transpose()?;
                config.flock = base_flock;
                Box::new(move |config: &RunConfig, n: usize| {
                    let test = match &dataset {
                        Some(d)
                            if d.test
                                .examples
                                .first()
                                .is_some_and(|e| e.input.nodes() == n) =>
                        {
                            d.test.clone()
                        }
                        _ => episodes_at_size(
                            &config.flock,
                            n,
                            config.sweep_setup.episodes,
                            config.sweep.seed,
                        )?,
                    };
                    gnn_relative_cost_experiment(&model, &test, &config.flock, kind, &config.sweep)
                })
            }
            SweepKind::Filter => {
                let taps = match &a.taps {
                    Some(path) => FilterTaps::load(path)?,
                    None => FilterTaps::new(config.sweep_setup.filter_taps.clone())?,
                };
                config.sweep_setup.filter_taps = taps.coefficients().to_vec();
                Box::new(move |config: &RunConfig, n: usize| {
                    let (s, x) = filter_problem(config, n)?;
                    let tso = TimeShiftOperator::circulant(x.horizon())?;
                    filter_deviation_experiment(&taps, &s, &x, &tso, &config.sweep)
                })
            }
        };

    let svgs: Vec<String> = config
        .sweep
        .sizes
        .iter()
        .map(|n| format!("sweep_N{n}.svg"))
        .collect();
    let mut artifacts = vec!["sweep_trials.csv", "sweep_summary.csv"];
    artifacts.extend(svgs.iter().map(String::as_str));
    ctx.write_manifest(&config, &artifacts)?;

    let mut trials = String::from("N,p,trial,measured,relative_cost,bound,seed\n");
    let mut summary = String::from("N,p,mean,std,bound,slope,intercept,r2\n");
    for (&n, svg) in config.sweep.sizes.iter().zip(&svgs) {
        let report = report_for(&config, n)?;
        trials.push_str(
            report
                .trials_csv()
                .split_once('\n')
                .map_or("", |(_, rows)| rows),
        );
        report.append_summary_rows(&mut summary);
        let what = match config.sweep_setup.kind {
            SweepKind::Filter => "filter output deviation",
            SweepKind::Network => "closed-loop relative cost",
        };
        ctx.write(svg, &report.svg(&format!("{what}, N = {n}")))?;
        let failed: usize = report.points.iter().map(|p| p.failed).sum();
        if failed > 0 {
            eprintln!("N = {n}: {failed} diverged rollouts excluded");
        }
    }
    ctx.write("sweep_trials.csv", &trials)?;
    ctx.write("sweep_summary.csv", &summary)
}

/// Fresh expert test episodes with `n` agents.
fn episodes_at_size(flock: &FlockConfig, n: usize, episodes: usize, root: u64) -> Result<Dataset> {
    let cfg = FlockConfig {
        agent_count: n,
        seed: seed::derive(root, &[seed::stream::DATASET, n as u64]),
        ..flock.clone()
    };
    let counts = SplitCounts {
        train: 0,
        validation: 0,
        test: episodes,
    };
    Ok(generate_dataset(&cfg, counts)?.test)
}

/// Communication graph of a random initial flock of `n` agents and a
/// uniform random single-feature signal on it.
fn filter_problem(config: &RunConfig, n: usize) -> Result<(ShiftOperator, SpaceTimeSignal)> {
    let flock = FlockConfig {
        agent_count: n,
        ..config.flock.clone()
    };
    let root = config.sweep.seed;
    let state = crate::flocking::sample_initial_state(
        &flock,
        &mut seed::rng(root, &[seed::stream::GRAPH, n as u64]),
    )?;
    let graph = crate::flocking::communication_graph(&state, flock.comm_radius);
    let s = ShiftOperator::from_graph(&graph, config.sweep_setup.gso_kind);
    let mut rng = seed::rng(root, &[seed::stream::SIGNAL, n as u64]);
    let horizon = config.sweep_setup.filter_horizon;
    let x = SpaceTimeSignal::from_fn(n, horizon, 1, |_, _, _| {
        rand::Rng::random_range(&mut rng, -1.0..1.0)
    });
    Ok((s, x))
}

fn cmd_spectra(ctx: &Context, mut config: RunConfig, a: &SpectraArgs) -> Result<()> {
    if let Some(v) = a.lambda_min {
        config.spectra.lambda_min = v;
    }
    if let Some(v) = a.lambda_max {
        config.spectra.lambda_max = v;
    }
    if let Some(v) = a.omega_samples {
        config.spectra.omega_samples = v;
    }
    let setup = &config.spectra;
    let range = LambdaRange::new(setup.lambda_min, setup.lambda_max)?;
    let filters: Vec<(usize, usize, usize, FilterTaps)> = match (&a.taps, &a.model) {
        (Some(path), None) => vec![(0, 0, 0, FilterTaps::load(path)?)],
        (None, Some(dir)) => {
            let model = load_model(dir)?;
            let mut out = Vec::new();
            for (l, layer) in model.layers().iter().enumerate() {
                for f in 0..layer.outputs() {
                    for g in 0..layer.inputs() {
                        out.push((l, f, g, layer.filter(f, g)));
                    }
                }
            }
            out
        }
        _ => {
            return Err(Error::Config(
                "spectra needs exactly one of --taps or --model".into(),
            ))
        }
    };
    ctx.write_manifest(&config, &["spectra_summary.csv", "spectra_grid.csv"])?;

    let points = setup.grid_points.max(2);
    let mut summary = String::from("layer,out,in,c_l,filter_norm,omega_samples,refinements\n");
    let mut grid = String::from("layer,out,in,lambda,omega,re,im,abs\n");
    for (l, f, g, h) in &filters {
        let est = estimate_c_l(h, range, setup.omega_samples)?;
        let norm = filter_norm(h, range, est.grid.omega_samples)?;
        let _ = writeln!(
            summary,
            "{l},{f},{g},{:.12e},{:.12e},{},{}",
            est.c_l, norm, est.grid.omega_samples, est.grid.refinements
        );
        // The dump holds the response along the diagonal λ_1 = … = λ_K,
        // which is the fixed-graph response of the filter.
        for i in 0..points {
            let lambda = range.lo + (range.hi - range.lo) * i as f64 / (points - 1) as f64;
            for j in 0..points {
                let omega = std::f64::consts::TAU * j as f64 / points as f64;
                let r =
                    frequency_response(h, &FrequencyPoint::new(vec![lambda; h.order()], omega))?;
                let _ = writeln!(
                    grid,
                    "{l},{f},{g},{lambda:.12e},{omega:.12e},{:.12e},{:.12e},{:.12e}",
                    r.re,
                    r.im,
                    r.norm()
                );
            }
        }
    }
    ctx.write("spectra_summary.csv", &summary)?;
    ctx.write("spectra_grid.csv", &grid)
}
