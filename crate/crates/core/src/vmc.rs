//! Variational Monte Carlo: local energies, batch energy statistics, the
//! score-function gradient and the training loop.

use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use thiserror::Error;

use crate::lattice::{HamiltonianSpec, LatticeError, Observable, SpinConfiguration};
use crate::scalar::Scalar;
use crate::tensor::{adam_update, AdamConfig, AdamState, Graph, TensorError};
use crate::wavefunction::{LogAmplitude, ModelError, Wavefunction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VmcError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("non-finite amplitude ratio for the flip of atom {flip}")]
    NonFiniteRatio { flip: usize },
    #[error("non-finite local energy at iteration {iteration} (sample {sample})")]
    NonFiniteEnergy { iteration: usize, sample: usize },
    #[error("no samples")]
    Empty,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

/// Mean, population variance and standard error of a batch of local energies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyEstimate {
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

pub fn energy_estimate(values: &[f64]) -> Result<EnergyEstimate, VmcError> {
    if values.is_empty() {
        return Err(VmcError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(EnergyEstimate {
        mean,
        variance,
        std_error: (variance / n).sqrt(),
        n_samples: values.len(),
    })
}

/// Log-amplitudes stored for every basis state, e.g. an exact ground state.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeTable<T> {
    log_amplitudes: Vec<T>,
    n_atoms: usize,
}

impl<T: Scalar> AmplitudeTable<T> {
    /// From amplitudes indexed by [`SpinConfiguration::to_index`].
    pub fn from_amplitudes(amplitudes: &[f64]) -> Self {
        Self {
            log_amplitudes: amplitudes.iter().map(|a| T::lit(a.ln())).collect(),
            n_atoms: amplitudes.len().trailing_zeros() as usize,
        }
    }
}

impl<T: Scalar> LogAmplitude<T> for AmplitudeTable<T> {
    fn log_amplitude(&self, config: &SpinConfiguration) -> Result<T, ModelError> {
        if config.len() != self.n_atoms {
            return Err(ModelError::SizeMismatch {
                expected: self.n_atoms,
                found: config.len(),
            });
        }
        Ok(self.log_amplitudes[config.to_index() as usize])
    }
}

fn combine<T: Scalar>(
    ham: &HamiltonianSpec<T>,
    config: &SpinConfiguration,
    log_psi: T,
    flips: impl Iterator<Item = T>,
) -> Result<T, VmcError> {
    let mut off = T::zero();
    for (a, l) in flips.enumerate() {
        let ratio = (l - log_psi).exp();
        if !ratio.is_finite() {
            return Err(VmcError::NonFiniteRatio { flip: a });
        }
        off += ratio;
    }
    Ok(ham.diagonal_energy(config)? - ham.omega * T::lit(0.5) * off)
}

/// `E_loc(s) = E_diag(s) - (omega / 2) sum_i Psi(flip_i s) / Psi(s)`,
/// evaluating every flipped configuration from scratch.
pub fn local_energy<T: Scalar>(
    amp: &impl LogAmplitude<T>,
    config: &SpinConfiguration,
    ham: &HamiltonianSpec<T>,
) -> Result<T, VmcError> {
    let log_psi = amp.log_amplitude(config)?;
    let flips = (0..config.len())
        .map(|a| amp.log_amplitude(&config.flipped(a)))
        .collect::<Result<Vec<T>, _>>()?;
    combine(ham, config, log_psi, flips.into_iter())
}

/// Local energies of a batch, reusing prefix states so that a flip inside
/// part `d` of `parts` only recomputes the sequence from that part on.
pub fn local_energies_grouped<T: Scalar>(
    model: &Wavefunction<T>,
    configs: &[SpinConfiguration],
    ham: &HamiltonianSpec<T>,
    parts: usize,
) -> Result<Vec<T>, VmcError> {
    let (log_psi, flips) = model.flip_log_amplitudes(configs, parts)?;
    configs
        .iter()
        .enumerate()
        .map(|(r, c)| combine(ham, c, log_psi[r], flips.row(r).iter().copied()))
        .collect()
}

/// Single-configuration form of [`local_energies_grouped`].
pub fn local_energy_grouped<T: Scalar>(
    model: &Wavefunction<T>,
    config: &SpinConfiguration,
    ham: &HamiltonianSpec<T>,
    parts: usize,
) -> Result<T, VmcError> {
    Ok(local_energies_grouped(model, std::slice::from_ref(config), ham, parts)?[0])
}

/// Gradient of `sum_s coeffs[s] * log Psi(s)` with respect to every
/// parameter block, recorded in mini-batches of `mini_batch` configurations
/// and accumulated in batch order.
pub fn surrogate_gradient<T: Scalar>(
    model: &Wavefunction<T>,
    configs: &[SpinConfiguration],
    coeffs: &[T],
    mini_batch: usize,
) -> Result<Vec<Array2<T>>, VmcError> {
    if configs.len() != coeffs.len() {
        return Err(VmcError::InvalidConfig(format!(
            "{} configurations but {} coefficients",
            configs.len(),
            coeffs.len()
        )));
    }
    if mini_batch == 0 {
        return Err(VmcError::InvalidConfig("mini-batch size must be positive".into()));
    }
    let mut total: Vec<Array2<T>> = model.parameters().iter().map(|p| Array2::zeros(p.dim())).collect();
    for (chunk, c) in configs.chunks(mini_batch).zip(coeffs.chunks(mini_batch)) {
        let mut g = Graph::new();
        let vars = model.record_parameters(&mut g);
        let log_psi = model.record_log_amplitudes(&mut g, &vars, chunk)?;
        let weights = g.constant(Array2::from_shape_vec((c.len(), 1), c.to_vec()).expect("column"));
        let weighted = g.mul(log_psi, weights)?;
        let loss = g.sum(weighted)?;
        g.backward(loss)?;
        for (acc, v) in total.iter_mut().zip(&vars) {
            if let Some(grad) = g.grad(*v) {
                *acc += grad;
            }
        }
    }
    Ok(total)
}

/// Energy gradient estimator `(2 / N_s) sum_s (E_loc(s) - <E>) d log Psi(s)`.
pub fn energy_gradient<T: Scalar>(
    model: &Wavefunction<T>,
    configs: &[SpinConfiguration],
    local_energies: &[T],
    mini_batch: usize,
) -> Result<(EnergyEstimate, Vec<Array2<T>>), VmcError> {
    let values: Vec<f64> = local_energies.iter().map(|e| e.as_f64()).collect();
    let estimate = energy_estimate(&values)?;
    let mean = T::lit(estimate.mean);
    let scale = T::lit(2.0 / configs.len() as f64);
    let coeffs: Vec<T> = local_energies.iter().map(|&e| (e - mean) * scale).collect();
    Ok((estimate, surrogate_gradient(model, configs, &coeffs, mini_batch)?))
}

/// Exact energy `sum_s p(s) E_loc(s)` and its gradient
/// `sum_s 2 p(s) (E_loc(s) - E) d log Psi(s)` by enumerating every basis state.
pub fn exact_energy_gradient<T: Scalar>(
    model: &Wavefunction<T>,
    ham: &HamiltonianSpec<T>,
) -> Result<(f64, Vec<Array2<T>>), VmcError> {
    let n = model.n_atoms();
    if n > crate::ed::MAX_ENUMERATION_ATOMS {
        return Err(ModelError::TooLarge {
            atoms: n,
            limit: crate::ed::MAX_ENUMERATION_ATOMS,
        }
        .into());
    }
    let configs: Vec<SpinConfiguration> = (0..1u64 << n).map(|k| SpinConfiguration::from_index(k, n)).collect();
    let probs: Vec<T> = model.log_probabilities_exhaustive()?.into_iter().map(|l| l.exp()).collect();
    let eloc = local_energies_grouped(model, &configs, ham, model.n_groups())?;
    let energy = probs.iter().zip(&eloc).map(|(&p, &e)| p * e).sum::<T>();
    let coeffs: Vec<T> = probs
        .iter()
        .zip(&eloc)
        .map(|(&p, &e)| T::lit(2.0) * p * (e - energy))
        .collect();
    Ok((energy.as_f64(), surrogate_gradient(model, &configs, &coeffs, configs.len())?))
}

/// Settings of the optimization loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub n_samples: usize,
    pub mini_batch: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Number of prefix parts for local energies; `None` uses one per patch.
    pub parts: Option<usize>,
    pub seed: u64,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_samples: 512,
            mini_batch: 256,
            iterations: 20_000,
            adam: AdamConfig::default(),
            parts: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), VmcError> {
        let bad = |m: String| Err(VmcError::InvalidConfig(m));
        if self.n_samples == 0 || self.mini_batch == 0 {
            return bad("n_samples and mini_batch must be positive".into());
        }
        if self.mini_batch > self.n_samples || !self.n_samples.is_multiple_of(self.mini_batch) {
            return bad(format!(
                "mini_batch {} must divide n_samples {}",
                self.mini_batch, self.n_samples
            ));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!(
                "adam needs lr > 0, betas in [0, 1) and eps > 0, got {a:?}"
            ));
        }
        if self.parts == Some(0) {
            return bad("parts must be positive".into());
        }
        Ok(())
    }
}

/// One row of the training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub energy: EnergyEstimate,
    /// Wall-clock duration of the step.
    pub seconds: f64,
}

/// Model, optimizer and sampler state of a training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Wavefunction<T>,
    pub ham: HamiltonianSpec<T>,
    pub config: TrainConfig,
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Wavefunction<T>, ham: HamiltonianSpec<T>, config: TrainConfig) -> Result<Self, VmcError> {
        config.validate()?;
        if ham.lattice != *model.lattice() {
            return Err(VmcError::InvalidConfig(
                "model and Hamiltonian are defined on different lattices".into(),
            ));
        }
        let parts = config.parts.unwrap_or(model.n_groups());
        if !model.n_groups().is_multiple_of(parts) {
            return Err(VmcError::InvalidConfig(format!(
                "{parts} parts do not divide the {} sequence groups",
                model.n_groups()
            )));
        }
        let adam = AdamState::new(model.parameters());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            ham,
            config,
            adam,
            rng,
            iteration: 0,
        })
    }

    pub fn parts(&self) -> usize {
        self.config.parts.unwrap_or(self.model.n_groups())
    }

    /// Draws a fresh batch from the model.
    pub fn sample(&mut self) -> Result<Vec<SpinConfiguration>, VmcError> {
        Ok(self.model.sample(self.config.n_samples, &mut self.rng)?.configs)
    }

    /// Samples, evaluates local energies, accumulates the gradient over
    /// mini-batches and applies one Adam update. On error the parameters
    /// and optimizer state are left untouched.
    pub fn step(&mut self) -> Result<StepRecord, VmcError> {
        let start = Instant::now();
        let configs = self.sample()?;
        let eloc = local_energies_grouped(&self.model, &configs, &self.ham, self.parts())?;
        if let Some(sample) = eloc.iter().position(|e| !e.is_finite()) {
            return Err(VmcError::NonFiniteEnergy {
                iteration: self.iteration,
                sample,
            });
        }
        let (energy, grads) = energy_gradient(&self.model, &configs, &eloc, self.config.mini_batch)?;
        adam_update(self.model.parameters_mut(), &grads, &mut self.adam, &self.config.adam)?;
        self.iteration += 1;
        Ok(StepRecord {
            iteration: self.iteration,
            energy,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Energy statistics of a fresh batch without updating the model.
    pub fn evaluate(&mut self, n_samples: usize) -> Result<EnergyEstimate, VmcError> {
        let samples = self.model.sample(n_samples, &mut self.rng)?;
        let eloc = local_energies_grouped(&self.model, &samples.configs, &self.ham, self.parts())?;
        energy_estimate(&eloc.iter().map(|e| e.as_f64()).collect::<Vec<_>>())
    }
}

/// Runs `iterations` training steps, handing every record to `on_step`
/// together with the trainer (for metrics and checkpoints). Stops at the
/// first error; the trainer then still holds the last good state.
pub fn train<T: Scalar, E: From<VmcError>>(
    trainer: &mut Trainer<T>,
    iterations: usize,
    mut on_step: impl FnMut(&StepRecord, &Trainer<T>) -> Result<(), E>,
) -> Result<Vec<StepRecord>, E> {
    let mut records = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let rec = trainer.step()?;
        on_step(&rec, trainer)?;
        records.push(rec);
    }
    Ok(records)
}

/// Sample mean and standard error of a diagonal observable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservableEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

pub fn measure_observable<T: Scalar, R: Rng + ?Sized>(
    model: &Wavefunction<T>,
    n_samples: usize,
    observable: Observable,
    rng: &mut R,
) -> Result<ObservableEstimate, VmcError> {
    let samples = model.sample(n_samples, rng)?;
    let values = samples
        .configs
        .iter()
        .map(|c| observable.evaluate(c, model.lattice()))
        .collect::<Result<Vec<f64>, _>>()?;
    let est = energy_estimate(&values)?;
    Ok(ObservableEstimate {
        mean: est.mean,
        std_error: est.std_error,
        n_samples,
    })
}
