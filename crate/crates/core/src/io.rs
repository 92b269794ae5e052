//! Run configuration files, binary checkpoints and the metrics table.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{HamiltonianSpec, LatticeSpec, PatchScheme};
use crate::tensor::{AdamConfig, AdamState};
use crate::vmc::{StepRecord, TrainConfig, Trainer, VmcError};
use crate::wavefunction::{ModelConfig, ModelError, ModelKind, Wavefunction};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RVMCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "iteration,energy_mean,energy_var,energy_stderr,seconds,n_samples";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("parameter block '{name}': expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vmc(#[from] VmcError),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn file_error(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn config_error(field: &str, message: impl ToString) -> IoError {
    IoError::Config {
        field: field.into(),
        message: message.to_string(),
    }
}

/// Fully resolved settings of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lattice: LatticeSpec,
    pub omega: f64,
    pub delta: f64,
    pub rb: f64,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub metrics: String,
    pub checkpoint: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            metrics: "metrics.csv".into(),
            checkpoint: "checkpoint.bin".into(),
        }
    }
}

impl OutputConfig {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(&self.metrics)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(&self.checkpoint)
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    lattice: Option<RawLattice>,
    #[serde(default)]
    hamiltonian: RawHamiltonian,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    training: RawTraining,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLattice {
    rows: Option<usize>,
    cols: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHamiltonian {
    omega: Option<f64>,
    delta: Option<f64>,
    rb: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: Option<String>,
    d_hidden: Option<usize>,
    d_ff: Option<usize>,
    cells: Option<usize>,
    heads: Option<usize>,
    patch_rows: Option<usize>,
    patch_cols: Option<usize>,
    sub_rows: Option<usize>,
    sub_cols: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    iterations: Option<usize>,
    n_samples: Option<usize>,
    mini_batch: Option<usize>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parts: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    metrics: Option<String>,
    checkpoint: Option<String>,
}

fn or_default<T: std::fmt::Debug>(value: Option<T>, field: &str, default: T) -> T {
    value.unwrap_or_else(|| {
        log::info!("config: {field} not set, using {default:?}");
        default
    })
}

fn required<T>(value: Option<T>, field: &str) -> Result<T, IoError> {
    value.ok_or_else(|| config_error(field, "missing required field"))
}

/// Default blockade radius `7^(1/6)` lattice spacings.
pub fn default_rb() -> f64 {
    7f64.powf(1.0 / 6.0)
}

impl RunConfig {
    /// Parses and validates a TOML run description. Every default that
    /// gets applied is logged at info level.
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| IoError::Parse(e.to_string().trim_end().to_string()))?;
        let lat = required(raw.lattice, "lattice")?;
        let rows = required(lat.rows, "lattice.rows")?;
        let cols = required(lat.cols, "lattice.cols")?;
        let lattice = LatticeSpec::new(rows, cols).map_err(|e| config_error("lattice", e))?;

        let h = raw.hamiltonian;
        let omega = or_default(h.omega, "hamiltonian.omega", 1.0);
        let delta = or_default(h.delta, "hamiltonian.delta", 1.0);
        let rb = or_default(h.rb, "hamiltonian.rb", default_rb());
        for (name, v) in [("hamiltonian.omega", omega), ("hamiltonian.delta", delta), ("hamiltonian.rb", rb)] {
            if !v.is_finite() {
                return Err(config_error(name, "must be finite"));
            }
        }
        if rb < 0.0 {
            return Err(config_error("hamiltonian.rb", "must be non-negative"));
        }

        let m = raw.model;
        let kind: ModelKind = required(m.kind, "model.kind")?
            .parse()
            .map_err(|e: ModelError| config_error("model.kind", e))?;
        let def = ModelConfig::new(kind);
        let patch_rows = or_default(m.patch_rows, "model.patch_rows", def.scheme.patch_rows);
        let patch_cols = or_default(m.patch_cols, "model.patch_cols", def.scheme.patch_cols);
        let (sub_r, sub_c) = if kind == ModelKind::LargePatchedTransformer {
            (def.scheme.sub_rows, def.scheme.sub_cols)
        } else {
            (patch_rows, patch_cols)
        };
        let training = raw.training;
        let seed = or_default(training.seed, "training.seed", 0);
        let model = ModelConfig {
            kind,
            d_hidden: or_default(m.d_hidden, "model.d_hidden", def.d_hidden),
            d_ff: or_default(m.d_ff, "model.d_ff", def.d_ff),
            cells: or_default(m.cells, "model.cells", def.cells),
            heads: or_default(m.heads, "model.heads", def.heads),
            scheme: PatchScheme::with_sub(
                patch_rows,
                patch_cols,
                or_default(m.sub_rows, "model.sub_rows", sub_r),
                or_default(m.sub_cols, "model.sub_cols", sub_c),
            ),
            seed,
        };
        model.validate(&lattice).map_err(|e| config_error("model", e))?;

        let td = TrainConfig::default();
        let ad = AdamConfig::default();
        let training = TrainConfig {
            n_samples: or_default(training.n_samples, "training.n_samples", td.n_samples),
            mini_batch: or_default(training.mini_batch, "training.mini_batch", td.mini_batch),
            iterations: or_default(training.iterations, "training.iterations", td.iterations),
            adam: AdamConfig {
                lr: or_default(training.lr, "training.lr", ad.lr),
                beta1: or_default(training.beta1, "training.beta1", ad.beta1),
                beta2: or_default(training.beta2, "training.beta2", ad.beta2),
                eps: or_default(training.eps, "training.eps", ad.eps),
            },
            parts: training.parts,
            seed,
            checkpoint_every: or_default(training.checkpoint_every, "training.checkpoint_every", 0),
        };
        training.validate().map_err(|e| config_error("training", e))?;
        if let Some(parts) = training.parts {
            let groups = lattice.n_atoms() / model.scheme.patch_size();
            if !groups.is_multiple_of(parts) {
                return Err(config_error(
                    "training.parts",
                    format!("{parts} does not divide the {groups} patches"),
                ));
            }
        }

        let od = OutputConfig::default();
        let o = raw.output;
        let output = OutputConfig {
            dir: or_default(o.dir, "output.dir", od.dir),
            metrics: or_default(o.metrics, "output.metrics", od.metrics),
            checkpoint: or_default(o.checkpoint, "output.checkpoint", od.checkpoint),
        };
        Ok(Self {
            lattice,
            omega,
            delta,
            rb,
            model,
            training,
            output,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(file_error(path))?;
        Self::parse(&text).map_err(|e| match e {
            IoError::Parse(msg) => IoError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// TOML text with every field spelled out.
    pub fn to_toml(&self) -> String {
        let t = &self.training;
        let s = &self.model.scheme;
        let raw = RawConfig {
            lattice: Some(RawLattice {
                rows: Some(self.lattice.rows()),
                cols: Some(self.lattice.cols()),
            }),
            hamiltonian: RawHamiltonian {
                omega: Some(self.omega),
                delta: Some(self.delta),
                rb: Some(self.rb),
            },
            model: RawModel {
                kind: Some(self.model.kind.name().into()),
                d_hidden: Some(self.model.d_hidden),
                d_ff: Some(self.model.d_ff),
                cells: Some(self.model.cells),
                heads: Some(self.model.heads),
                patch_rows: Some(s.patch_rows),
                patch_cols: Some(s.patch_cols),
                sub_rows: Some(s.sub_rows),
                sub_cols: Some(s.sub_cols),
            },
            training: RawTraining {
                iterations: Some(t.iterations),
                n_samples: Some(t.n_samples),
                mini_batch: Some(t.mini_batch),
                lr: Some(t.adam.lr),
                beta1: Some(t.adam.beta1),
                beta2: Some(t.adam.beta2),
                eps: Some(t.adam.eps),
                parts: t.parts,
                seed: Some(t.seed),
                checkpoint_every: Some(t.checkpoint_every),
            },
            output: RawOutput {
                dir: Some(self.output.dir.clone()),
                metrics: Some(self.output.metrics.clone()),
                checkpoint: Some(self.output.checkpoint.clone()),
            },
        };
        toml::to_string(&raw).expect("plain tables serialize")
    }

    /// Replaces the seed for both initialization and sampling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn hamiltonian(&self) -> HamiltonianSpec<f64> {
        HamiltonianSpec::new(self.lattice, self.omega, self.delta, self.rb)
    }

    pub fn build_model(&self) -> Result<Wavefunction<f64>, IoError> {
        Ok(Wavefunction::new(self.model, &self.lattice)?)
    }

    pub fn build_trainer(&self) -> Result<Trainer<f64>, IoError> {
        Ok(Trainer::new(self.build_model()?, self.hamiltonian(), self.training)?)
    }
}

/// Everything needed to resume a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub blocks: Vec<(String, Array2<f64>)>,
    pub adam: AdamState<f64>,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn array(&mut self, a: &Array2<f64>) {
        for v in a.iter() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.buf.len() - self.pos < n {
            return Err(IoError::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, IoError> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| IoError::Format(format!("length {n} exceeds the file")))
    }
    fn bytes(&mut self) -> Result<&'a [u8], IoError> {
        let n = self.len()?;
        self.take(n)
    }
    fn array(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, IoError> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| IoError::Format("block size overflows".into()))?;
        let raw = self.take(n)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("sized"))
    }
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer<f64>) -> Self {
        let blocks = trainer
            .model
            .parameter_names()
            .iter()
            .cloned()
            .zip(trainer.model.parameters().iter().cloned())
            .collect();
        Self {
            config: config.clone(),
            iteration: trainer.iteration,
            blocks,
            adam: trainer.adam.clone(),
            rng_seed: trainer.rng.get_seed(),
            rng_stream: trainer.rng.get_stream(),
            rng_word_pos: trainer.rng.get_word_pos(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(self.config.to_toml().as_bytes());
        w.u64(self.iteration as u64);
        w.u32(self.blocks.len() as u32);
        for (name, a) in &self.blocks {
            w.bytes(name.as_bytes());
            w.u64(a.nrows() as u64);
            w.u64(a.ncols() as u64);
            w.array(a);
        }
        w.u64(self.adam.t);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            w.array(m);
            w.array(v);
        }
        w.0.extend_from_slice(&self.rng_seed);
        w.u64(self.rng_stream);
        w.0.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    /// Decodes a checkpoint; `origin` only labels errors.
    pub fn from_bytes(data: &[u8], origin: &Path) -> Result<Self, IoError> {
        if data.len() < CHECKPOINT_MAGIC.len() + 8 {
            return Err(IoError::Checksum(origin.to_path_buf()));
        }
        let (body, tail) = data.split_at(data.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(IoError::Checksum(origin.to_path_buf()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(IoError::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(IoError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let text = std::str::from_utf8(r.bytes()?).map_err(|e| IoError::Format(e.to_string()))?;
        let config = RunConfig::parse(text)?;
        let iteration = r.u64()? as usize;
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::new();
        for _ in 0..n_blocks {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| IoError::Format(e.to_string()))?;
            let rows = r.len()?;
            let cols = r.len()?;
            blocks.push((name, r.array(rows, cols)?));
        }
        let t = r.u64()?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, b) in &blocks {
            m.push(r.array(b.nrows(), b.ncols())?);
            v.push(r.array(b.nrows(), b.ncols())?);
        }
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if r.pos != body.len() {
            return Err(IoError::Format("trailing data".into()));
        }
        Ok(Self {
            config,
            iteration,
            blocks,
            adam: AdamState { m, v, t },
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(file_error(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(file_error(&tmp))?;
        fs::rename(&tmp, path).map_err(file_error(path))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let data = fs::read(path).map_err(file_error(path))?;
        Self::from_bytes(&data, path)
    }

    /// Parameters checked block by block against the layout of `model`.
    pub fn parameters_for(&self, model: &ModelConfig, lattice: &LatticeSpec) -> Result<Vec<Array2<f64>>, IoError> {
        let skeleton = Wavefunction::<f64>::zeros(*model, lattice)?;
        let names = skeleton.parameter_names();
        if names.len() != self.blocks.len() {
            return Err(IoError::Format(format!(
                "checkpoint has {} parameter blocks, the model needs {}",
                self.blocks.len(),
                names.len()
            )));
        }
        for ((name, p), (cname, c)) in names.iter().zip(skeleton.parameters()).zip(&self.blocks) {
            if name != cname {
                return Err(IoError::Format(format!("expected block '{name}', found '{cname}'")));
            }
            if p.dim() != c.dim() {
                return Err(IoError::Shape {
                    name: name.clone(),
                    expected: p.dim(),
                    found: c.dim(),
                });
            }
        }
        Ok(self.blocks.iter().map(|(_, a)| a.clone()).collect())
    }

    /// The stored model alone.
    pub fn model(&self) -> Result<Wavefunction<f64>, IoError> {
        let mut model = Wavefunction::zeros(self.config.model, &self.config.lattice)?;
        model.set_parameters(self.parameters_for(&self.config.model, &self.config.lattice)?)?;
        Ok(model)
    }

    /// A trainer that continues exactly where the checkpointed run stopped.
    pub fn trainer(&self) -> Result<Trainer<f64>, IoError> {
        let mut trainer = Trainer::new(self.model()?, self.config.hamiltonian(), self.config.training)?;
        trainer.adam = self.adam.clone();
        trainer.iteration = self.iteration;
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        trainer.rng = rng;
        Ok(trainer)
    }
}

/// Append-only CSV table with one row per training iteration.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates the file with its header, or appends to an existing table.
    pub fn open(path: &Path) -> Result<Self, IoError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(file_error(dir))?;
        }
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(file_error(path))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}").and_then(|_| out.flush()).map_err(file_error(path))?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, rec: &StepRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", metrics_row(rec))?;
        self.out.flush()
    }
}

pub fn metrics_row(rec: &StepRecord) -> String {
    format!(
        "{},{},{},{},{:.6},{}",
        rec.iteration, rec.energy.mean, rec.energy.variance, rec.energy.std_error, rec.seconds, rec.energy.n_samples
    )
}
