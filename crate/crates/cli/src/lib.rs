//! Command line front end: subcommands, run orchestration and error classes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rydberg_vmc::ed::{self, EdError, EdResult};
use rydberg_vmc::io::{Checkpoint, IoError, MetricsWriter, RunConfig};
use rydberg_vmc::lattice::{HamiltonianSpec, Observable};
use rydberg_vmc::vmc::{self, StepRecord, Trainer, VmcError};
use rydberg_vmc::wavefunction::{ModelError, Wavefunction};
use rydberg_vmc::{LatticeSpec, ModelConfig, ModelKind, PatchScheme};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "rydberg-vmc", version, about = "Neural-network VMC for Rydberg atom arrays")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to read (or to resume from, for `train`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Fixed-order execution; runs are always single threaded, so this only
    /// gets recorded.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize the model and write metrics and checkpoints.
    Train {
        /// Overrides the configured iteration budget.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Draw configurations and print them as 0/1 rows.
    Sample {
        /// Number of configurations.
        #[arg(long, short, default_value_t = 16)]
        n: usize,
    },
    /// Sampled energy estimate of a model.
    Energy {
        /// Number of samples (defaults to the configured batch size).
        #[arg(long, short)]
        n: Option<usize>,
    },
    /// Compare a model with exact diagonalization.
    EdCompare {
        /// Samples for the energy and magnetization estimates.
        #[arg(long, short)]
        n: Option<usize>,
        /// Train a fresh model for each detuning in this comma-separated list.
        #[arg(long, value_delimiter = ',')]
        delta_grid: Option<Vec<f64>>,
    },
    /// Sum of |Psi|^2 over every configuration.
    EnumerateCheck,
    /// Number of trainable parameters.
    CountParams(CountArgs),
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Model kind (rnn, patched_rnn, patched_tf, lptf) with default widths.
    #[arg(long)]
    pub kind: Option<String>,
    /// Patch size as ROWSxCOLS.
    #[arg(long)]
    pub patch: Option<String>,
    /// Sub-patch size as ROWSxCOLS (lptf).
    #[arg(long)]
    pub sub: Option<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Vmc(#[from] VmcError),
    #[error(transparent)]
    Ed(#[from] EdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training stopped at iteration {iteration}: {source} (last good state saved to {})", saved.display())]
    Training {
        iteration: usize,
        saved: PathBuf,
        source: VmcError,
    },
    #[error("{path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// Short machine-readable class printed with every error.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(e) => match e {
                IoError::Parse(_) | IoError::Config { .. } => "config",
                IoError::Checksum(_) => "checksum",
                IoError::Version { .. } => "version",
                IoError::Shape { .. } | IoError::Format(_) => "checkpoint",
                IoError::Model(_) => "model",
                IoError::Vmc(_) => "training",
                IoError::File { .. } => "io",
            },
            CliError::Vmc(_) | CliError::Training { .. } => "training",
            CliError::Ed(EdError::TooLarge { .. }) => "size-limit",
            CliError::Ed(_) => "oracle",
            CliError::Model(ModelError::TooLarge { .. }) => "size-limit",
            CliError::Model(_) => "model",
            CliError::Output { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            "usage" => 2,
            "config" => 3,
            "io" => 4,
            "checksum" | "version" | "checkpoint" => 5,
            "size-limit" => 6,
            "oracle" => 7,
            "training" => 8,
            _ => 9,
        }
    }
}

fn output_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output {
        path: path.to_path_buf(),
        source,
    }
}

/// Model and configuration selected by `--config` and `--checkpoint`.
struct Source {
    config: RunConfig,
    checkpoint: Option<Checkpoint>,
}

impl Source {
    fn model(&self) -> Result<Wavefunction<f64>, CliError> {
        let c = &self.config;
        match &self.checkpoint {
            Some(ck) => {
                let mut model = Wavefunction::zeros(c.model, &c.lattice)?;
                model.set_parameters(ck.parameters_for(&c.model, &c.lattice)?)?;
                Ok(model)
            }
            None => Ok(c.build_model()?),
        }
    }
}

fn load_source(cli: &Cli) -> Result<Source, CliError> {
    let checkpoint = cli.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = match (&cli.config, &checkpoint) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => return Err(CliError::Usage("either --config or --checkpoint is required".into())),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(dir) = &cli.out_dir {
        config.output.dir = dir.clone();
    }
    Ok(Source { config, checkpoint })
}

/// RNG for evaluation-only sampling, independent of the training stream.
pub fn evaluation_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Trains `trainer` for `iterations` more steps, appending to the metrics
/// table and saving checkpoints at the configured cadence and at the end.
/// On a numerical fault the last good state is saved before returning.
pub fn run_training(
    config: &RunConfig,
    trainer: &mut Trainer<f64>,
    iterations: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>, CliError> {
    let dir = &config.output.dir;
    fs::create_dir_all(dir).map_err(output_error(dir))?;
    let snapshot = dir.join("config.toml");
    fs::write(&snapshot, config.to_toml()).map_err(output_error(&snapshot))?;
    let metrics_path = config.output.metrics_path();
    if trainer.iteration == 0 && metrics_path.exists() {
        fs::remove_file(&metrics_path).map_err(output_error(&metrics_path))?;
    }
    let mut metrics = MetricsWriter::open(&metrics_path)?;
    let ck_path = config.output.checkpoint_path();
    let every = config.training.checkpoint_every;
    let result = vmc::train(trainer, iterations, |rec, t| -> Result<(), CliError> {
        metrics.write(rec).map_err(output_error(&metrics_path))?;
        if every > 0 && rec.iteration % every == 0 {
            Checkpoint::from_trainer(config, t).save(&ck_path)?;
        }
        on_step(rec);
        Ok(())
    });
    Checkpoint::from_trainer(config, trainer).save(&ck_path)?;
    result.map_err(|e| match e {
        CliError::Vmc(source) => CliError::Training {
            iteration: trainer.iteration,
            saved: ck_path.clone(),
            source,
        },
        other => other,
    })
}

/// Sampled and exact figures of merit of a model against the ground state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub delta: f64,
    pub ground_energy: f64,
    pub energy: vmc::EnergyEstimate,
    pub energy_gap: f64,
    pub exact_energy: f64,
    pub fidelity: f64,
    pub stagger_model: f64,
    pub stagger_model_err: f64,
    pub stagger_exact: f64,
}

impl Comparison {
    pub const HEADER: &'static str = "delta,e0,energy_mean,energy_stderr,energy_gap,exact_energy,fidelity,stagger_model,stagger_model_stderr,stagger_ed,stagger_delta";

    pub fn row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.delta,
            self.ground_energy,
            self.energy.mean,
            self.energy.std_error,
            self.energy_gap,
            self.exact_energy,
            self.fidelity,
            self.stagger_model,
            self.stagger_model_err,
            self.stagger_exact,
            self.stagger_model - self.stagger_exact
        )
    }
}

pub fn compare(
    model: &Wavefunction<f64>,
    ham: &HamiltonianSpec<f64>,
    exact: &EdResult,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Comparison, CliError> {
    let samples = model.sample(n_samples, rng)?;
    let eloc = vmc::local_energies_grouped(model, &samples.configs, ham, model.n_groups())?;
    let energy = vmc::energy_estimate(&eloc)?;
    let stagger = vmc::measure_observable(model, n_samples, Observable::StaggeredMagnetization, rng)?;
    Ok(Comparison {
        delta: ham.delta,
        ground_energy: exact.ground_energy,
        energy,
        energy_gap: (energy.mean - exact.ground_energy).abs(),
        exact_energy: ed::model_energy(model, ham)?,
        fidelity: ed::fidelity(model, exact)?,
        stagger_model: stagger.mean,
        stagger_model_err: stagger.std_error,
        stagger_exact: ed::ed_expectation(exact, model.lattice(), Observable::StaggeredMagnetization)?,
    })
}

fn parse_dims(text: &str, what: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--{what} expects ROWSxCOLS, got '{text}'"));
    let (r, c) = text.split_once('x').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn count_params(cli: &Cli, args: &CountArgs) -> Result<usize, CliError> {
    if let Some(kind) = &args.kind {
        let kind: ModelKind = kind.parse()?;
        let mut scheme = kind.default_scheme();
        if let Some(p) = &args.patch {
            let (r, c) = parse_dims(p, "patch")?;
            scheme = PatchScheme::with_sub(r, c, r, c);
        }
        if let Some(s) = &args.sub {
            let (r, c) = parse_dims(s, "sub")?;
            scheme.sub_rows = r;
            scheme.sub_cols = c;
        }
        let cfg = ModelConfig::new(kind).with_scheme(scheme);
        let lattice = LatticeSpec::new(scheme.patch_rows, scheme.patch_cols)?;
        return Ok(Wavefunction::<f64>::zeros(cfg, &lattice)?.count_parameters());
    }
    let source = load_source(cli)?;
    Ok(Wavefunction::<f64>::zeros(source.config.model, &source.config.lattice)?.count_parameters())
}

impl From<rydberg_vmc::lattice::LatticeError> for CliError {
    fn from(e: rydberg_vmc::lattice::LatticeError) -> Self {
        CliError::Model(e.into())
    }
}

/// Executes one command, writing its results to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    if let Some(flag) = cli.deterministic {
        log::info!("deterministic execution requested: {flag}");
    }
    let stdout = PathBuf::from("<stdout>");
    let emit = |out: &mut dyn Write, line: String| writeln!(out, "{line}").map_err(output_error(&stdout));
    match &cli.command {
        Command::CountParams(args) => emit(out, count_params(cli, args)?.to_string()),
        Command::Train { iterations } => {
            let mut source = load_source(cli)?;
            if let Some(n) = iterations {
                source.config.training.iterations = *n;
            }
            let config = &source.config;
            let mut trainer = match &source.checkpoint {
                Some(ck) => {
                    let mut t = ck.trainer()?;
                    t.model = source.model()?;
                    t.ham = config.hamiltonian();
                    t.config = config.training;
                    t
                }
                None => config.build_trainer()?,
            };
            let remaining = config.training.iterations.saturating_sub(trainer.iteration);
            let records = run_training(config, &mut trainer, remaining, |rec| {
                log::debug!("iteration {} energy {}", rec.iteration, rec.energy.mean)
            })?;
            match records.last() {
                Some(r) => emit(
                    out,
                    format!(
                        "iteration={} energy_mean={} energy_var={} energy_stderr={}",
                        r.iteration, r.energy.mean, r.energy.variance, r.energy.std_error
                    ),
                ),
                None => emit(out, format!("iteration={}", trainer.iteration)),
            }
        }
        Command::Sample { n } => {
            let source = load_source(cli)?;
            let model = source.model()?;
            let mut rng = evaluation_rng(source.config.training.seed);
            for c in model.sample(*n, &mut rng)?.configs {
                let row: String = c.bits().iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
                emit(out, row)?;
            }
            Ok(())
        }
        Command::Energy { n } => {
            let source = load_source(cli)?;
            let model = source.model()?;
            let ham = source.config.hamiltonian();
            let mut rng = evaluation_rng(source.config.training.seed);
            let n = n.unwrap_or(source.config.training.n_samples);
            let samples = model.sample(n, &mut rng)?;
            let eloc = vmc::local_energies_grouped(&model, &samples.configs, &ham, model.n_groups())?;
            let e = vmc::energy_estimate(&eloc)?;
            emit(
                out,
                format!(
                    "energy_mean={} energy_var={} energy_stderr={} n_samples={}",
                    e.mean, e.variance, e.std_error, e.n_samples
                ),
            )
        }
        Command::EdCompare { n, delta_grid } => {
            let source = load_source(cli)?;
            let n = n.unwrap_or(source.config.training.n_samples);
            match delta_grid {
                None => {
                    let model = source.model()?;
                    let ham = source.config.hamiltonian();
                    let exact = ed::ed_ground_state(&ham)?;
                    let mut rng = evaluation_rng(source.config.training.seed);
                    let c = compare(&model, &ham, &exact, n, &mut rng)?;
                    emit(out, Comparison::HEADER.into())?;
                    emit(out, c.row())
                }
                Some(grid) => {
                    if source.checkpoint.is_some() {
                        return Err(CliError::Usage("--delta-grid trains fresh models and takes no --checkpoint".into()));
                    }
                    emit(out, Comparison::HEADER.into())?;
                    for &delta in grid {
                        let mut config = source.config.clone();
                        config.delta = delta;
                        config.output.dir = source.config.output.dir.join(format!("delta_{delta}"));
                        let ham = config.hamiltonian();
                        let exact = ed::ed_ground_state(&ham)?;
                        let mut trainer = config.build_trainer()?;
                        run_training(&config, &mut trainer, config.training.iterations, |_| {})?;
                        let mut rng = evaluation_rng(config.training.seed);
                        emit(out, compare(&trainer.model, &ham, &exact, n, &mut rng)?.row())?;
                    }
                    Ok(())
                }
            }
        }
        Command::EnumerateCheck => {
            let model = load_source(cli)?.model()?;
            emit(out, ed::enumerate_normalization(&model)?.to_string())
        }
    }
}
