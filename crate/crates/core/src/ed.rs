//! Exact diagonalization of the Rydberg Hamiltonian on small lattices and
//! exact quantities of models obtained by full enumeration.
//!
//! Basis state `k` has atom `i` excited iff bit `i` of `k` is set, the same
//! convention as [`SpinConfiguration::to_index`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::lattice::{HamiltonianSpec, LatticeError, LatticeSpec, SpinConfiguration};
pub use crate::lattice::Observable;
use crate::scalar::Scalar;
use crate::wavefunction::{ModelError, Wavefunction};

/// Largest lattice the iterative solver accepts.
pub const MAX_ED_ATOMS: usize = 20;
/// Largest lattice for the dense solver.
pub const MAX_DENSE_ATOMS: usize = 12;
/// Largest lattice for model enumeration.
pub const MAX_ENUMERATION_ATOMS: usize = 16;
/// Target residual `||H v - E v||`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

const DENSE_BELOW: usize = 8;
const MAX_RESTARTS: usize = 500;
const KRYLOV_BYTES: usize = 256 << 20;

const DUMP_MAGIC: &[u8; 8] = b"RVMCEDGS";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EdError {
    #[error("{atoms} atoms exceed the limit of {limit}")]
    TooLarge { atoms: usize, limit: usize },
    #[error("eigensolver stopped after {iterations} restarts with residual {residual:.3e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("state has {found} amplitudes, expected {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("ground-state file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ground state of the Hamiltonian on the full basis.
#[derive(Debug, Clone, PartialEq)]
pub struct EdResult {
    pub ground_energy: f64,
    /// Normalized, nonnegative amplitudes indexed by basis state.
    pub amplitudes: Vec<f64>,
    /// `||H v - E v||` of the returned state.
    pub residual: f64,
}

impl EdResult {
    pub fn n_atoms(&self) -> usize {
        self.amplitudes.len().trailing_zeros() as usize
    }
}

fn check_atoms(n: usize, limit: usize) -> Result<(), EdError> {
    if n > limit {
        return Err(EdError::TooLarge { atoms: n, limit });
    }
    Ok(())
}

/// Diagonal energies of every basis state.
pub fn diagonal(ham: &HamiltonianSpec<f64>) -> Vec<f64> {
    let n = ham.n_atoms();
    let mut diag = vec![0.0; 1 << n];
    for k in 1..diag.len() {
        let low = k.trailing_zeros() as usize;
        let rest = k & (k - 1);
        let mut e = diag[rest] - ham.delta;
        let mut bits = rest;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            e += ham.vmat[[low, j]];
            bits &= bits - 1;
        }
        diag[k] = e;
    }
    diag
}

/// `out = H v` without forming the matrix.
pub fn apply_hamiltonian(ham: &HamiltonianSpec<f64>, diag: &[f64], v: &[f64], out: &mut [f64]) {
    let n = ham.n_atoms();
    let half = 0.5 * ham.omega;
    for (k, o) in out.iter_mut().enumerate() {
        let mut flips = 0.0;
        for a in 0..n {
            flips += v[k ^ (1 << a)];
        }
        *o = diag[k] * v[k] - half * flips;
    }
}

/// The full Hamiltonian as a dense matrix.
pub fn dense_hamiltonian(ham: &HamiltonianSpec<f64>) -> Result<DMatrix<f64>, EdError> {
    let n = ham.n_atoms();
    check_atoms(n, MAX_DENSE_ATOMS)?;
    let dim = 1 << n;
    let diag = diagonal(ham);
    let mut h = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        h[(k, k)] = diag[k];
        for a in 0..n {
            h[(k, k ^ (1 << a))] = -0.5 * ham.omega;
        }
    }
    Ok(h)
}

/// Ground state by full dense diagonalization.
pub fn dense_ground_state(ham: &HamiltonianSpec<f64>) -> Result<EdResult, EdError> {
    let h = dense_hamiltonian(ham)?;
    let eig = SymmetricEigen::new(h);
    let k = eig.eigenvalues.imin();
    let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
    Ok(finish(ham, &diagonal(ham), v))
}

/// Lowest eigenpair of the Hamiltonian. Small bases are diagonalized
/// densely; larger ones use restarted Lanczos with full
/// reorthogonalization, started from the uniform state.
pub fn ed_ground_state(ham: &HamiltonianSpec<f64>) -> Result<EdResult, EdError> {
    let n = ham.n_atoms();
    check_atoms(n, MAX_ED_ATOMS)?;
    let diag = diagonal(ham);
    if ham.omega == 0.0 {
        let (k, _) = diag
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (k, &e)| if e < best.1 { (k, e) } else { best });
        let mut v = vec![0.0; diag.len()];
        v[k] = 1.0;
        return Ok(finish(ham, &diag, v));
    }
    if n <= DENSE_BELOW {
        return dense_ground_state(ham);
    }
    let dim = diag.len();
    let krylov = (KRYLOV_BYTES / (8 * dim)).clamp(8, 40);
    let mut x = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut hx = vec![0.0; dim];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_RESTARTS {
        x = lanczos_cycle(ham, &diag, &x, krylov);
        apply_hamiltonian(ham, &diag, &x, &mut hx);
        let theta = dot(&x, &hx);
        residual = hx
            .iter()
            .zip(&x)
            .map(|(h, v)| (h - theta * v).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual < RESIDUAL_TOLERANCE {
            return Ok(finish(ham, &diag, x));
        }
    }
    Err(EdError::NoConvergence {
        iterations: MAX_RESTARTS,
        residual,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// One Lanczos run of at most `m` vectors from `start`; returns the lowest
/// Ritz vector, normalized.
fn lanczos_cycle(ham: &HamiltonianSpec<f64>, diag: &[f64], start: &[f64], m: usize) -> Vec<f64> {
    let dim = start.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut v = start.to_vec();
    normalize(&mut v);
    basis.push(v);
    let mut alpha = Vec::with_capacity(m);
    let mut beta: Vec<f64> = Vec::with_capacity(m);
    let mut w = vec![0.0; dim];
    loop {
        let j = basis.len() - 1;
        apply_hamiltonian(ham, diag, &basis[j], &mut w);
        let a = dot(&w, &basis[j]);
        alpha.push(a);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = dot(&w, &w).sqrt();
        if basis.len() == m || b < 1e-13 {
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let lowest = eig.eigenvalues.imin();
    let y = eig.eigenvectors.column(lowest);
    let mut x = vec![0.0; dim];
    for (coef, q) in y.iter().zip(&basis) {
        x.iter_mut().zip(q).for_each(|(a, b)| *a += coef * b);
    }
    normalize(&mut x);
    x
}

/// Fixes the global sign, clears rounding-level negative entries and
/// recomputes energy and residual of the final vector.
fn finish(ham: &HamiltonianSpec<f64>, diag: &[f64], mut v: Vec<f64>) -> EdResult {
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    normalize(&mut v);
    let mut hv = vec![0.0; v.len()];
    apply_hamiltonian(ham, diag, &v, &mut hv);
    let energy = dot(&v, &hv);
    let residual = hv
        .iter()
        .zip(&v)
        .map(|(h, x)| (h - energy * x).powi(2))
        .sum::<f64>()
        .sqrt();
    EdResult {
        ground_energy: energy,
        amplitudes: v,
        residual,
    }
}

/// `sum_s |psi(s)|^2 O(s)` for a diagonal observable.
pub fn ed_expectation(result: &EdResult, lattice: &LatticeSpec, observable: Observable) -> Result<f64, EdError> {
    let n = lattice.n_atoms();
    if result.amplitudes.len() != 1 << n {
        return Err(EdError::SizeMismatch {
            expected: 1 << n,
            found: result.amplitudes.len(),
        });
    }
    let mut total = 0.0;
    for (k, a) in result.amplitudes.iter().enumerate() {
        if *a != 0.0 {
            total += a * a * observable.evaluate(&SpinConfiguration::from_index(k as u64, n), lattice)?;
        }
    }
    Ok(total)
}

/// `log |Psi|^2` of a model on every basis state.
pub fn model_log_probabilities<T: Scalar>(model: &Wavefunction<T>) -> Result<Vec<f64>, EdError> {
    check_atoms(model.n_atoms(), MAX_ENUMERATION_ATOMS)?;
    Ok(model
        .log_probabilities_exhaustive()?
        .into_iter()
        .map(|l| l.as_f64())
        .collect())
}

/// `sum_s |Psi(s)|^2` over all basis states.
pub fn enumerate_normalization<T: Scalar>(model: &Wavefunction<T>) -> Result<f64, EdError> {
    Ok(model_log_probabilities(model)?.iter().map(|l| l.exp()).sum())
}

/// Model amplitudes `Psi(s)` on every basis state.
pub fn model_amplitudes<T: Scalar>(model: &Wavefunction<T>) -> Result<Vec<f64>, EdError> {
    Ok(model_log_probabilities(model)?
        .iter()
        .map(|l| (0.5 * l).exp())
        .collect())
}

/// Squared overlap of two real states given on the full basis.
pub fn overlap_squared(psi: &[f64], phi: &[f64]) -> Result<f64, EdError> {
    if psi.len() != phi.len() {
        return Err(EdError::SizeMismatch {
            expected: phi.len(),
            found: psi.len(),
        });
    }
    Ok(dot(psi, phi).powi(2))
}

/// `(sum_s Psi(s) phi_0(s))^2` between a model and the exact ground state.
pub fn fidelity<T: Scalar>(model: &Wavefunction<T>, ed: &EdResult) -> Result<f64, EdError> {
    overlap_squared(&model_amplitudes(model)?, &ed.amplitudes)
}

/// `<psi|H|psi>` of a normalized state given on the full basis.
pub fn state_energy(ham: &HamiltonianSpec<f64>, psi: &[f64]) -> Result<f64, EdError> {
    let dim = 1usize << ham.n_atoms();
    if psi.len() != dim {
        return Err(EdError::SizeMismatch {
            expected: dim,
            found: psi.len(),
        });
    }
    let diag = diagonal(ham);
    let mut hpsi = vec![0.0; dim];
    apply_hamiltonian(ham, &diag, psi, &mut hpsi);
    Ok(dot(psi, &hpsi))
}

/// Exact variational energy of a model.
pub fn model_energy<T: Scalar>(model: &Wavefunction<T>, ham: &HamiltonianSpec<f64>) -> Result<f64, EdError> {
    state_energy(ham, &model_amplitudes(model)?)
}

/// Exact expectation of a diagonal observable under a model.
pub fn model_expectation<T: Scalar>(model: &Wavefunction<T>, observable: Observable) -> Result<f64, EdError> {
    let lattice = *model.lattice();
    let n = lattice.n_atoms();
    let mut total = 0.0;
    for (k, l) in model_log_probabilities(model)?.iter().enumerate() {
        total += l.exp() * observable.evaluate(&SpinConfiguration::from_index(k as u64, n), &lattice)?;
    }
    Ok(total)
}

/// Writes a ground state as magic, version, atom count, energy, residual,
/// amplitudes (all little-endian) and a CRC-32 of everything before it.
pub fn save_ed_result(result: &EdResult, path: &Path) -> Result<(), EdError> {
    let mut buf = Vec::with_capacity(36 + 8 * result.amplitudes.len());
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(result.n_atoms() as u32).to_le_bytes());
    buf.extend_from_slice(&result.ground_energy.to_le_bytes());
    buf.extend_from_slice(&result.residual.to_le_bytes());
    for a in &result.amplitudes {
        buf.extend_from_slice(&a.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn load_ed_result(path: &Path) -> Result<EdResult, EdError> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    let bad = |m: &str| EdError::Format(m.to_string());
    if buf.len() < 36 || &buf[..8] != DUMP_MAGIC {
        return Err(bad("not a ground-state file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != DUMP_VERSION {
        return Err(EdError::Format(format!("unsupported version {version}")));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(bad("checksum mismatch"));
    }
    let n = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let f = |at: usize| f64::from_le_bytes(body[at..at + 8].try_into().expect("8 bytes"));
    if n > MAX_ED_ATOMS || body.len() != 32 + 8 * (1 << n) {
        return Err(bad("length does not match the atom count"));
    }
    Ok(EdResult {
        ground_energy: f(16),
        residual: f(24),
        amplitudes: (0..1 << n).map(|k| f(32 + 8 * k)).collect(),
    })
}
