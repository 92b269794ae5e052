//! Autoregressive wavefunctions: the plain and patched GRU networks, the
//! patched transformer and the large patched transformer.
//!
//! Every model factorizes `|Psi(s)|^2` into conditionals over a sequence of
//! *units* (patches, or sub-patches for the large transformer). The same
//! unit-by-unit state machine drives sampling, teacher-forced evaluation,
//! suffix re-evaluation from cached prefixes and exhaustive enumeration.

mod config;
pub mod layers;
mod params;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use thiserror::Error;

pub use config::{ModelConfig, ModelKind, MAX_OUTPUT_BITS};
pub use layers::KvCache;
pub use params::{CellIndex, GruIndex, HeadIndex, Layout, TransformerIndex};

use crate::lattice::{patch_order, LatticeError, LatticeSpec, SpinConfiguration};
use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::{Graph, TensorError, Var};
use params::Blueprint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("configuration has {found} atoms, model expects {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("non-finite conditional probability at unit {unit}")]
    NonFiniteConditional { unit: usize },
    #[error("cached prefix of chain {chain} does not match the configuration before group {group}")]
    StaleCache { chain: usize, group: usize },
    #[error("{atoms} atoms exceed the enumeration limit of {limit}")]
    TooLarge { atoms: usize, limit: usize },
    #[error("parameter '{name}' has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Largest lattice handled by [`Wavefunction::log_probabilities_exhaustive`].
pub const MAX_ENUMERATION_ATOMS: usize = 24;

/// Child rows materialized at once during enumeration.
const ENUMERATION_ROWS: usize = 1 << 14;

/// Rows evaluated at once when re-running suffixes for flipped configurations.
const SUFFIX_ROWS: usize = 4096;

/// Anything that assigns a log-amplitude to a configuration.
pub trait LogAmplitude<T> {
    fn log_amplitude(&self, config: &SpinConfiguration) -> Result<T, ModelError>;
}

/// Configurations drawn from a model with their log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples<T> {
    pub configs: Vec<SpinConfiguration>,
    pub log_probs: Vec<T>,
}

/// Network state for a batch of partially generated configurations.
#[derive(Debug, Clone)]
pub struct ChainState<T> {
    bits: Array2<u8>,
    unit: usize,
    /// What the output head reads: the GRU hidden state or the transformer
    /// output of the current position.
    hidden: Array2<T>,
    caches: Vec<KvCache<T>>,
}

impl<T: Scalar> ChainState<T> {
    pub fn rows(&self) -> usize {
        self.bits.nrows()
    }

    /// Units already decided.
    pub fn units_done(&self) -> usize {
        self.unit
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            bits: self.bits.select(Axis(0), idx),
            unit: self.unit,
            hidden: kernels::select_rows(&self.hidden, idx),
            caches: self.caches.iter().map(|c| c.select_rows(idx)).collect(),
        }
    }
}

/// Prefix states of a batch of configurations stored at evenly spaced group
/// boundaries, so that modified configurations can be re-evaluated from the
/// first changed group onward.
#[derive(Debug, Clone)]
pub struct SamplerCache<T> {
    stride: usize,
    snapshots: Vec<(ChainState<T>, Vec<T>)>,
    log_amplitudes: Vec<T>,
}

impl<T: Scalar> SamplerCache<T> {
    /// Groups between consecutive snapshots.
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn parts(&self) -> usize {
        self.snapshots.len()
    }

    /// Log-amplitudes of the cached configurations.
    pub fn log_amplitudes(&self) -> &[T] {
        &self.log_amplitudes
    }
}

#[derive(Debug, Clone)]
pub struct Wavefunction<T> {
    config: ModelConfig,
    lattice: LatticeSpec,
    names: Vec<String>,
    params: Vec<Array2<T>>,
    layout: Layout,
    /// Atoms of each sequence group (patch).
    groups: Vec<Vec<usize>>,
    /// Atoms of each output unit in sequence order.
    units: Vec<Vec<usize>>,
    units_per_group: usize,
    positional: Array2<T>,
}

impl<T: Scalar> Wavefunction<T> {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig, lattice: &LatticeSpec) -> Result<Self, ModelError> {
        Self::build(config, lattice, |bp| bp.initialize(config.d_hidden, config.seed))
    }

    /// Every parameter zero, which makes all conditionals uniform.
    pub fn zeros(config: ModelConfig, lattice: &LatticeSpec) -> Result<Self, ModelError> {
        Self::build(config, lattice, |bp| bp.zeros())
    }

    fn build(
        config: ModelConfig,
        lattice: &LatticeSpec,
        fill: impl FnOnce(&Blueprint) -> Vec<Array2<T>>,
    ) -> Result<Self, ModelError> {
        config.validate(lattice)?;
        let bp = Blueprint::new(&config);
        let params = fill(&bp);
        let s = config.scheme;
        let groups = patch_order(lattice, s.patch_rows, s.patch_cols)?;
        let (units, units_per_group) = if config.kind == ModelKind::LargePatchedTransformer {
            let sub = sub_units(&groups, s.patch_rows, s.patch_cols, s.sub_rows, s.sub_cols);
            let k = s.patch_size() / s.sub_size();
            (sub, k)
        } else {
            (groups.clone(), 1)
        };
        let positional = if config.kind.has_transformer() {
            kernels::positional_encoding(groups.len(), config.d_hidden)
        } else {
            Array2::zeros((0, config.d_hidden))
        };
        Ok(Self {
            config,
            lattice: *lattice,
            names: bp.names,
            params,
            layout: bp.layout,
            groups,
            units,
            units_per_group,
            positional,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn n_atoms(&self) -> usize {
        self.lattice.n_atoms()
    }

    /// Sequence length of the outer network (number of patches).
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Atoms of each patch in sequence order.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Array2<T>] {
        &self.params
    }

    /// Mutable access to the values; shapes must be preserved by the caller.
    pub fn parameters_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.params
    }

    /// Replaces every block, checking shapes.
    pub fn set_parameters(&mut self, params: Vec<Array2<T>>) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter blocks, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((new, old), name) in params.iter().zip(&self.params).zip(&self.names) {
            if new.dim() != old.dim() {
                return Err(ModelError::ParameterShape {
                    name: name.clone(),
                    expected: old.dim(),
                    found: new.dim(),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    fn check_size(&self, config: &SpinConfiguration) -> Result<(), ModelError> {
        if config.len() != self.n_atoms() {
            return Err(ModelError::SizeMismatch {
                expected: self.n_atoms(),
                found: config.len(),
            });
        }
        Ok(())
    }

    fn gather(bits: &Array2<u8>, atoms: &[usize]) -> Array2<T> {
        Array2::from_shape_fn((bits.nrows(), atoms.len()), |(r, k)| {
            if bits[[r, atoms[k]]] == 1 {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    fn unit_index(bits: &Array2<u8>, row: usize, atoms: &[usize]) -> usize {
        atoms
            .iter()
            .enumerate()
            .map(|(k, &a)| (bits[[row, a]] as usize) << k)
            .sum()
    }

    fn transformer_position(&self, st: &mut ChainState<T>, group: usize) -> Array2<T> {
        let tf = match &self.layout {
            Layout::Transformer { tf, .. } | Layout::Large { tf, .. } => tf,
            Layout::Recurrent { .. } => unreachable!("recurrent layouts have no transformer"),
        };
        let n = st.rows();
        let input = if group == 0 {
            Array2::zeros((n, self.config.input_bits()))
        } else {
            Self::gather(&st.bits, &self.groups[group - 1])
        };
        let pe = self.positional.slice(s![group..group + 1, ..]);
        let mut x = layers::embed(input.view(), pe, &self.params, tf);
        for (c, cell) in tf.cells.iter().enumerate() {
            x = layers::transformer_cell(
                x.view(),
                &self.params,
                cell,
                self.config.heads,
                Some(&mut st.caches[c]),
            );
        }
        x
    }

    /// Fresh state for `n` empty configurations, ready to produce the first
    /// conditional.
    pub fn start(&self, n: usize) -> ChainState<T> {
        let dh = self.config.d_hidden;
        let mut st = ChainState {
            bits: Array2::zeros((n, self.n_atoms())),
            unit: 0,
            hidden: Array2::zeros((n, dh)),
            caches: Vec::new(),
        };
        self.enter_unit(&mut st);
        st
    }

    /// Computes the head input for unit `st.unit` from the bits decided so far.
    fn enter_unit(&self, st: &mut ChainState<T>) {
        let u = st.unit;
        let p = &self.params;
        match &self.layout {
            Layout::Recurrent { gru, .. } => {
                let x = if u == 0 {
                    Array2::zeros((st.rows(), self.config.input_bits()))
                } else {
                    Self::gather(&st.bits, &self.units[u - 1])
                };
                st.hidden = layers::gru_step(x.view(), st.hidden.view(), p, gru);
            }
            Layout::Transformer { tf, .. } => {
                if u == 0 {
                    st.caches = vec![KvCache::default(); tf.cells.len()];
                }
                st.hidden = self.transformer_position(st, u);
            }
            Layout::Large { tf, gru, .. } => {
                let k = self.units_per_group;
                let x = if u.is_multiple_of(k) {
                    if u == 0 {
                        st.caches = vec![KvCache::default(); tf.cells.len()];
                    }
                    st.hidden = self.transformer_position(st, u / k);
                    Array2::zeros((st.rows(), self.config.output_bits()))
                } else {
                    Self::gather(&st.bits, &self.units[u - 1])
                };
                st.hidden = layers::gru_step(x.view(), st.hidden.view(), p, gru);
            }
        }
    }

    /// Log-conditionals of the current unit, `rows x 2^bits`.
    pub fn log_conditionals(&self, st: &ChainState<T>) -> Result<Array2<T>, ModelError> {
        let lp = layers::head_log_probs(st.hidden.view(), &self.params, self.layout.head());
        if lp.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFiniteConditional { unit: st.unit });
        }
        Ok(lp)
    }

    /// Records the chosen state of the current unit for every row and moves
    /// on to the next unit.
    pub fn advance(&self, st: &mut ChainState<T>, choice: &[usize]) {
        let atoms = &self.units[st.unit];
        for (r, &c) in choice.iter().enumerate() {
            for (k, &a) in atoms.iter().enumerate() {
                st.bits[[r, a]] = ((c >> k) & 1) as u8;
            }
        }
        st.unit += 1;
        if st.unit < self.units.len() {
            self.enter_unit(st);
        }
    }

    /// Draws `n` independent configurations by inverse-CDF sampling of each
    /// conditional in turn. Uniform variates are consumed chain by chain
    /// within each unit, so a seeded generator gives reproducible batches.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Samples<T>, ModelError> {
        let mut st = self.start(n);
        let mut log_probs = vec![T::zero(); n];
        let mut choice = vec![0usize; n];
        for _ in 0..self.units.len() {
            let lc = self.log_conditionals(&st)?;
            for (r, row) in lc.outer_iter().enumerate() {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = row.len() - 1;
                for (j, &l) in row.iter().enumerate() {
                    acc += l.as_f64().exp();
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                choice[r] = pick;
                log_probs[r] += row[pick];
            }
            self.advance(&mut st, &choice);
        }
        let configs = st
            .bits
            .outer_iter()
            .map(|row| SpinConfiguration::new(row.to_vec()))
            .collect();
        Ok(Samples { configs, log_probs })
    }

    fn bits_of(&self, configs: &[SpinConfiguration]) -> Result<Array2<u8>, ModelError> {
        let n = self.n_atoms();
        let mut bits = Array2::zeros((configs.len(), n));
        for (r, c) in configs.iter().enumerate() {
            self.check_size(c)?;
            bits.row_mut(r).assign(&ndarray::ArrayView1::from(c.bits()));
        }
        Ok(bits)
    }

    /// Teacher-forces `bits` from the state's current unit to the end,
    /// adding each chosen log-conditional into `acc`.
    fn run_forced(&self, st: &mut ChainState<T>, bits: &Array2<u8>, acc: &mut [T]) -> Result<(), ModelError> {
        self.run_forced_until(st, bits, acc, self.units.len(), None)
    }

    fn run_forced_until(
        &self,
        st: &mut ChainState<T>,
        bits: &Array2<u8>,
        acc: &mut [T],
        end_unit: usize,
        mut per_unit: Option<&mut Array2<T>>,
    ) -> Result<(), ModelError> {
        let mut choice = vec![0usize; st.rows()];
        while st.unit < end_unit {
            let lc = self.log_conditionals(st)?;
            let atoms = &self.units[st.unit];
            for (r, c) in choice.iter_mut().enumerate() {
                *c = Self::unit_index(bits, r, atoms);
                acc[r] += lc[[r, *c]];
                if let Some(m) = per_unit.as_deref_mut() {
                    m[[r, st.unit]] = lc[[r, *c]];
                }
            }
            self.advance(st, &choice);
        }
        Ok(())
    }

    /// `log p` of the chosen state of every unit, `configs x units`.
    pub fn unit_log_probs(&self, configs: &[SpinConfiguration]) -> Result<Array2<T>, ModelError> {
        let bits = self.bits_of(configs)?;
        let mut st = self.start(configs.len());
        let mut acc = vec![T::zero(); configs.len()];
        let mut out = Array2::zeros((configs.len(), self.units.len()));
        self.run_forced_until(&mut st, &bits, &mut acc, self.units.len(), Some(&mut out))?;
        Ok(out)
    }

    /// `log Psi = 0.5 * log p` for a batch of configurations.
    pub fn log_amplitudes(&self, configs: &[SpinConfiguration]) -> Result<Vec<T>, ModelError> {
        let bits = self.bits_of(configs)?;
        let mut st = self.start(configs.len());
        let mut acc = vec![T::zero(); configs.len()];
        self.run_forced(&mut st, &bits, &mut acc)?;
        Ok(acc.into_iter().map(|x| x * T::lit(0.5)).collect())
    }

    fn check_parts(&self, parts: usize) -> Result<usize, ModelError> {
        let l = self.n_groups();
        if parts == 0 || !l.is_multiple_of(parts) {
            return Err(ModelError::InvalidConfig(format!(
                "{parts} parts do not divide the {l} sequence groups"
            )));
        }
        Ok(l / parts)
    }

    /// Teacher-forced pass over `configs` that keeps the network state at
    /// the start of every `n_groups / parts` groups.
    pub fn build_cache(
        &self,
        configs: &[SpinConfiguration],
        parts: usize,
    ) -> Result<SamplerCache<T>, ModelError> {
        let stride = self.check_parts(parts)?;
        let bits = self.bits_of(configs)?;
        let mut st = self.start(configs.len());
        let mut acc = vec![T::zero(); configs.len()];
        let mut snapshots = Vec::with_capacity(parts);
        for d in 0..parts {
            snapshots.push((st.clone(), acc.clone()));
            let end = (d + 1) * stride * self.units_per_group;
            self.run_forced_until(&mut st, &bits, &mut acc, end, None)?;
        }
        Ok(SamplerCache {
            stride,
            snapshots,
            log_amplitudes: acc.into_iter().map(|x| x * T::lit(0.5)).collect(),
        })
    }

    /// `log Psi(config)` for a configuration that agrees with cached chain
    /// `chain` on every group before `start_group`, recomputing only the
    /// groups from `start_group` on. `start_group` must be a snapshot
    /// boundary.
    pub fn log_amplitude_suffix(
        &self,
        cache: &SamplerCache<T>,
        chain: usize,
        config: &SpinConfiguration,
        start_group: usize,
    ) -> Result<T, ModelError> {
        self.check_size(config)?;
        if !start_group.is_multiple_of(cache.stride) || start_group / cache.stride >= cache.snapshots.len() {
            return Err(ModelError::InvalidConfig(format!(
                "group {start_group} is not a cache boundary (stride {})",
                cache.stride
            )));
        }
        let (snap, acc) = &cache.snapshots[start_group / cache.stride];
        if chain >= snap.rows() {
            return Err(ModelError::InvalidConfig(format!(
                "chain {chain} outside a cache of {} chains",
                snap.rows()
            )));
        }
        let prefix_ok = self.groups[..start_group]
            .iter()
            .flatten()
            .all(|&a| snap.bits[[chain, a]] == config.get(a));
        if !prefix_ok {
            return Err(ModelError::StaleCache {
                chain,
                group: start_group,
            });
        }
        let mut st = snap.select_rows(&[chain]);
        let bits = Array2::from_shape_vec((1, config.len()), config.bits().to_vec()).expect("row shape");
        let mut total = [acc[chain]];
        self.run_forced(&mut st, &bits, &mut total)?;
        Ok(total[0] * T::lit(0.5))
    }

    /// `log Psi` of every configuration and of each of its `N` single-atom
    /// flips (`configs x atoms`), reusing the unflipped prefix state: a flip
    /// inside part `d` resumes from the state at the start of that part.
    pub fn flip_log_amplitudes(
        &self,
        configs: &[SpinConfiguration],
        parts: usize,
    ) -> Result<(Vec<T>, Array2<T>), ModelError> {
        let stride = self.check_parts(parts)?;
        let bits = self.bits_of(configs)?;
        let n = configs.len();
        let mut flips = Array2::zeros((n, self.n_atoms()));
        let mut st = self.start(n);
        let mut acc = vec![T::zero(); n];
        for d in 0..parts {
            let atoms: Vec<usize> = self.groups[d * stride..(d + 1) * stride]
                .iter()
                .flatten()
                .copied()
                .collect();
            let per_chunk = (SUFFIX_ROWS / atoms.len()).max(1);
            let mut start = 0;
            while start < n {
                let end = (start + per_chunk).min(n);
                let rows: Vec<usize> = (start..end)
                    .flat_map(|r| std::iter::repeat_n(r, atoms.len()))
                    .collect();
                let mut fst = st.select_rows(&rows);
                let mut fbits = bits.select(Axis(0), &rows);
                let mut facc: Vec<T> = rows.iter().map(|&r| acc[r]).collect();
                for i in 0..rows.len() {
                    fbits[[i, atoms[i % atoms.len()]]] ^= 1;
                }
                self.run_forced(&mut fst, &fbits, &mut facc)?;
                for (i, &r) in rows.iter().enumerate() {
                    flips[[r, atoms[i % atoms.len()]]] = facc[i] * T::lit(0.5);
                }
                start = end;
            }
            let end_unit = (d + 1) * stride * self.units_per_group;
            self.run_forced_until(&mut st, &bits, &mut acc, end_unit, None)?;
        }
        Ok((acc.into_iter().map(|x| x * T::lit(0.5)).collect(), flips))
    }

    /// `log p` of all `2^N` configurations, indexed by
    /// [`SpinConfiguration::to_index`]. Walks the prefix tree so that every
    /// distinct prefix is evaluated once.
    pub fn log_probabilities_exhaustive(&self) -> Result<Vec<T>, ModelError> {
        let n = self.n_atoms();
        if n > MAX_ENUMERATION_ATOMS {
            return Err(ModelError::TooLarge {
                atoms: n,
                limit: MAX_ENUMERATION_ATOMS,
            });
        }
        let mut out = vec![T::zero(); 1 << n];
        self.expand(self.start(1), vec![T::zero()], vec![0], &mut out)?;
        Ok(out)
    }

    fn expand(&self, st: ChainState<T>, lp: Vec<T>, index: Vec<u64>, out: &mut [T]) -> Result<(), ModelError> {
        if st.unit == self.units.len() {
            for (i, l) in index.into_iter().zip(lp) {
                out[i as usize] = l;
            }
            return Ok(());
        }
        let lc = self.log_conditionals(&st)?;
        let k = lc.ncols();
        let atoms = &self.units[st.unit];
        let per_chunk = (ENUMERATION_ROWS / k).max(1);
        let mut start = 0;
        while start < st.rows() {
            let end = (start + per_chunk).min(st.rows());
            let mut rows = Vec::with_capacity((end - start) * k);
            let mut choice = Vec::with_capacity(rows.capacity());
            let mut child_lp = Vec::with_capacity(rows.capacity());
            let mut child_index = Vec::with_capacity(rows.capacity());
            for r in start..end {
                for c in 0..k {
                    rows.push(r);
                    choice.push(c);
                    child_lp.push(lp[r] + lc[[r, c]]);
                    let bits: u64 = atoms
                        .iter()
                        .enumerate()
                        .map(|(j, &a)| (((c >> j) & 1) as u64) << a)
                        .sum();
                    child_index.push(index[r] | bits);
                }
            }
            let mut child = st.select_rows(&rows);
            self.advance(&mut child, &choice);
            self.expand(child, child_lp, child_index, out)?;
            start = end;
        }
        Ok(())
    }

    /// Adds every parameter block to `g` as a trainable leaf.
    pub fn record_parameters(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Records `log Psi` of a batch as a `batch x 1` value, using the
    /// parameter leaves returned by [`Self::record_parameters`].
    pub fn record_log_amplitudes(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        configs: &[SpinConfiguration],
    ) -> Result<Var, ModelError> {
        let bits = self.bits_of(configs)?;
        let b = configs.len();
        let dh = self.config.d_hidden;
        let picks = |u: usize, rows: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
            rows.map(|r| Self::unit_index(&bits, r, &self.units[u])).collect()
        };
        let log_p = match &self.layout {
            Layout::Recurrent { gru, head } => {
                let mut h = g.constant(Array2::zeros((b, dh)));
                let mut total: Option<Var> = None;
                for u in 0..self.units.len() {
                    let x = if u == 0 {
                        Array2::zeros((b, self.config.input_bits()))
                    } else {
                        Self::gather(&bits, &self.units[u - 1])
                    };
                    let x = g.constant(x);
                    h = layers::recorded::gru_step(g, x, h, vars, gru)?;
                    let lp = layers::recorded::head_log_probs(g, h, vars, head)?;
                    let picked = g.pick(lp, &picks(u, &mut (0..b)))?;
                    total = Some(match total {
                        None => picked,
                        Some(t) => g.add(t, picked)?,
                    });
                }
                total.expect("at least one unit")
            }
            Layout::Transformer { tf, head } => {
                let out = self.record_transformer(g, vars, tf, &bits)?;
                let lp = layers::recorded::head_log_probs(g, out, vars, head)?;
                let l = self.n_groups();
                let idx: Vec<usize> = (0..b * l)
                    .map(|i| Self::unit_index(&bits, i / l, &self.units[i % l]))
                    .collect();
                let picked = g.pick(lp, &idx)?;
                let per_seq = g.reshape(picked, b, l)?;
                g.sum_cols(per_seq)?
            }
            Layout::Large { tf, gru, head } => {
                let mut h = self.record_transformer(g, vars, tf, &bits)?;
                let l = self.n_groups();
                let k = self.units_per_group;
                let ps = self.config.output_bits();
                let mut total: Option<Var> = None;
                for s in 0..k {
                    let x = if s == 0 {
                        Array2::zeros((b * l, ps))
                    } else {
                        Array2::from_shape_fn((b * l, ps), |(i, j)| {
                            let atom = self.units[(i % l) * k + s - 1][j];
                            T::lit(bits[[i / l, atom]] as f64)
                        })
                    };
                    let x = g.constant(x);
                    h = layers::recorded::gru_step(g, x, h, vars, gru)?;
                    let lp = layers::recorded::head_log_probs(g, h, vars, head)?;
                    let idx: Vec<usize> = (0..b * l)
                        .map(|i| Self::unit_index(&bits, i / l, &self.units[(i % l) * k + s]))
                        .collect();
                    let picked = g.pick(lp, &idx)?;
                    total = Some(match total {
                        None => picked,
                        Some(t) => g.add(t, picked)?,
                    });
                }
                let per_seq = g.reshape(total.expect("at least one sub-patch"), b, l)?;
                g.sum_cols(per_seq)?
            }
        };
        Ok(g.scale(log_p, T::lit(0.5))?)
    }

    /// Transformer outputs of all positions of all sequences, stacked as
    /// `(batch * groups) x d_h`.
    fn record_transformer(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        tf: &TransformerIndex,
        bits: &Array2<u8>,
    ) -> Result<Var, ModelError> {
        let b = bits.nrows();
        let l = self.n_groups();
        let p = self.config.input_bits();
        let inputs = Array2::from_shape_fn((b * l, p), |(i, j)| {
            let pos = i % l;
            if pos == 0 {
                T::zero()
            } else {
                T::lit(bits[[i / l, self.groups[pos - 1][j]]] as f64)
            }
        });
        let tile: Vec<usize> = (0..b * l).map(|i| i % l).collect();
        let pe = g.constant(kernels::select_rows(&self.positional, &tile));
        let x = g.constant(inputs);
        let e = g.affine(x, vars[tf.embed_w], vars[tf.embed_b])?;
        let mut h = g.add(e, pe)?;
        for cell in &tf.cells {
            h = layers::recorded::transformer_cell(g, h, vars, cell, self.config.heads, l)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> LogAmplitude<T> for Wavefunction<T> {
    fn log_amplitude(&self, config: &SpinConfiguration) -> Result<T, ModelError> {
        Ok(self.log_amplitudes(std::slice::from_ref(config))?[0])
    }
}

/// Splits each patch into sub-patches, row-major within the patch, with
/// atoms row-major inside every sub-patch.
fn sub_units(groups: &[Vec<usize>], pr: usize, pc: usize, sr: usize, sc: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for patch in groups {
        for br in 0..pr / sr {
            for bc in 0..pc / sc {
                let mut unit = Vec::with_capacity(sr * sc);
                for r in 0..sr {
                    for c in 0..sc {
                        unit.push(patch[(br * sr + r) * pc + bc * sc + c]);
                    }
                }
                out.push(unit);
            }
        }
    }
    out
}
