//! Rydberg lattice geometry, Hamiltonian parameters and configuration encodings.
//!
//! Atoms live on a rectangular grid with unit spacing and open boundaries.
//! Atom `i` sits at `(i / cols, i % cols)`, so every per-atom vector in the
//! crate is row-major over the lattice.

use ndarray::Array2;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("lattice must have at least one row and one column, got {rows}x{cols}")]
    InvalidDimensions { rows: usize, cols: usize },
    #[error("configuration has {found} sites but the lattice has {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("{what} {rows}x{cols} does not tile {outer_rows}x{outer_cols}")]
    PatchDivisibility {
        what: &'static str,
        rows: usize,
        cols: usize,
        outer_rows: usize,
        outer_cols: usize,
    },
    #[error("patch index {index} out of range for {bits} bits")]
    PatchIndexOutOfRange { index: usize, bits: usize },
}

/// Rectangular lattice with unit spacing and open boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatticeSpec {
    rows: usize,
    cols: usize,
}

impl LatticeSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self, LatticeError> {
        if rows == 0 || cols == 0 {
            return Err(LatticeError::InvalidDimensions { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Lattice constant; fixed to one.
    pub fn spacing(&self) -> f64 {
        1.0
    }

    pub fn n_atoms(&self) -> usize {
        self.rows * self.cols
    }

    pub fn coords(&self, atom: usize) -> (usize, usize) {
        (atom / self.cols, atom % self.cols)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// The same lattice with rows and columns exchanged.
    pub fn transposed(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
        }
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        let (ra, ca) = self.coords(a);
        let (rb, cb) = self.coords(b);
        let dr = ra as f64 - rb as f64;
        let dc = ca as f64 - cb as f64;
        self.spacing() * (dr * dr + dc * dc).sqrt()
    }

    fn check(&self, config: &SpinConfiguration) -> Result<(), LatticeError> {
        if config.len() != self.n_atoms() {
            return Err(LatticeError::SizeMismatch {
                expected: self.n_atoms(),
                found: config.len(),
            });
        }
        Ok(())
    }
}

/// Van der Waals couplings `V_ij = omega * rb^6 / |r_i - r_j|^6` for all pairs.
pub fn interaction_matrix<T: Scalar>(lattice: &LatticeSpec, omega: T, rb: T) -> Array2<T> {
    let n = lattice.n_atoms();
    let c6 = omega * rb.powi(6);
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            T::zero()
        } else {
            c6 / T::lit(lattice.distance(i, j)).powi(6)
        }
    })
}

/// Rydberg Hamiltonian parameters together with the precomputed couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianSpec<T> {
    pub lattice: LatticeSpec,
    pub omega: T,
    pub delta: T,
    pub rb: T,
    pub vmat: Array2<T>,
}

impl<T: Scalar> HamiltonianSpec<T> {
    pub fn new(lattice: LatticeSpec, omega: T, delta: T, rb: T) -> Self {
        Self {
            lattice,
            omega,
            delta,
            rb,
            vmat: interaction_matrix(&lattice, omega, rb),
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.lattice.n_atoms()
    }

    /// Diagonal part `-delta * sum n_i + sum_{i<j} V_ij n_i n_j`.
    pub fn diagonal_energy(&self, config: &SpinConfiguration) -> Result<T, LatticeError> {
        self.lattice.check(config)?;
        Ok(self.diagonal_energy_unchecked(config.bits()))
    }

    pub(crate) fn diagonal_energy_unchecked(&self, bits: &[u8]) -> T {
        let excited: Vec<usize> = bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b != 0).then_some(i))
            .collect();
        let mut pairs = T::zero();
        for (k, &i) in excited.iter().enumerate() {
            for &j in &excited[k + 1..] {
                pairs += self.vmat[[i, j]];
            }
        }
        pairs - self.delta * T::lit(excited.len() as f64)
    }
}

/// Free-function form of [`HamiltonianSpec::diagonal_energy`].
pub fn diagonal_energy<T: Scalar>(
    config: &SpinConfiguration,
    ham: &HamiltonianSpec<T>,
) -> Result<T, LatticeError> {
    ham.diagonal_energy(config)
}

/// Occupation vector over the lattice, 0 = ground and 1 = Rydberg.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpinConfiguration {
    bits: Vec<u8>,
}

impl SpinConfiguration {
    /// Panics if any entry is not 0 or 1.
    pub fn new(bits: Vec<u8>) -> Self {
        assert!(bits.iter().all(|&b| b <= 1), "occupations must be 0 or 1");
        Self { bits }
    }

    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![0; n] }
    }

    /// Configuration whose bit `i` is bit `i` of `index` (little-endian).
    pub fn from_index(index: u64, n: usize) -> Self {
        assert!(n <= 64);
        Self {
            bits: (0..n).map(|i| ((index >> i) & 1) as u8).collect(),
        }
    }

    pub fn to_index(&self) -> u64 {
        assert!(self.bits.len() <= 64);
        self.bits
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> u8 {
        self.bits[i]
    }

    pub fn flip(&mut self, i: usize) {
        self.bits[i] ^= 1;
    }

    pub fn flipped(&self, i: usize) -> Self {
        let mut out = self.clone();
        out.flip(i);
        out
    }

    pub fn n_excited(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Checkerboard order parameter `|sum_i s_i (n_i - 1/2)| / N` with
/// `s_i = (-1)^(row + col)`.
pub fn staggered_magnetization<T: Scalar>(
    config: &SpinConfiguration,
    lattice: &LatticeSpec,
) -> Result<T, LatticeError> {
    lattice.check(config)?;
    let half = T::lit(0.5);
    let total = config
        .bits()
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (i, &b)| {
            let (r, c) = lattice.coords(i);
            let dev = T::lit(b as f64) - half;
            if (r + c) % 2 == 0 {
                acc + dev
            } else {
                acc - dev
            }
        });
    Ok(total.abs() / T::lit(lattice.n_atoms() as f64))
}

/// Mean Rydberg occupation `sum_i n_i / N`.
pub fn occupation<T: Scalar>(
    config: &SpinConfiguration,
    lattice: &LatticeSpec,
) -> Result<T, LatticeError> {
    lattice.check(config)?;
    Ok(T::lit(config.n_excited() as f64) / T::lit(lattice.n_atoms() as f64))
}

/// Diagonal observables with a per-configuration value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observable {
    StaggeredMagnetization,
    Occupation,
}

impl Observable {
    pub fn evaluate(&self, config: &SpinConfiguration, lattice: &LatticeSpec) -> Result<f64, LatticeError> {
        match self {
            Observable::StaggeredMagnetization => staggered_magnetization(config, lattice),
            Observable::Occupation => occupation(config, lattice),
        }
    }
}

/// Patch tiling of the lattice. Sub-patch dimensions only matter for the
/// large patched transformer; other models keep them equal to the patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchScheme {
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub sub_rows: usize,
    pub sub_cols: usize,
}

impl PatchScheme {
    pub fn single_site() -> Self {
        Self::square(1)
    }

    pub fn square(side: usize) -> Self {
        Self {
            patch_rows: side,
            patch_cols: side,
            sub_rows: side,
            sub_cols: side,
        }
    }

    pub fn with_sub(patch_rows: usize, patch_cols: usize, sub_rows: usize, sub_cols: usize) -> Self {
        Self {
            patch_rows,
            patch_cols,
            sub_rows,
            sub_cols,
        }
    }

    /// Atoms per patch.
    pub fn patch_size(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    /// Atoms per sub-patch.
    pub fn sub_size(&self) -> usize {
        self.sub_rows * self.sub_cols
    }

    pub fn validate(&self, lattice: &LatticeSpec) -> Result<(), LatticeError> {
        check_tiling("patch", self.patch_rows, self.patch_cols, lattice.rows, lattice.cols)?;
        check_tiling(
            "sub-patch",
            self.sub_rows,
            self.sub_cols,
            self.patch_rows,
            self.patch_cols,
        )
    }
}

fn check_tiling(
    what: &'static str,
    rows: usize,
    cols: usize,
    outer_rows: usize,
    outer_cols: usize,
) -> Result<(), LatticeError> {
    if rows == 0 || cols == 0 || !outer_rows.is_multiple_of(rows) || !outer_cols.is_multiple_of(cols) {
        return Err(LatticeError::PatchDivisibility {
            what,
            rows,
            cols,
            outer_rows,
            outer_cols,
        });
    }
    Ok(())
}

/// Atom groups of a `patch_rows x patch_cols` tiling: patches row-major over
/// the patch grid, atoms row-major inside each patch.
pub fn patch_order(
    lattice: &LatticeSpec,
    patch_rows: usize,
    patch_cols: usize,
) -> Result<Vec<Vec<usize>>, LatticeError> {
    check_tiling("patch", patch_rows, patch_cols, lattice.rows, lattice.cols)?;
    let mut groups = Vec::with_capacity(lattice.n_atoms() / (patch_rows * patch_cols));
    for pr in 0..lattice.rows / patch_rows {
        for pc in 0..lattice.cols / patch_cols {
            let mut group = Vec::with_capacity(patch_rows * patch_cols);
            for r in 0..patch_rows {
                for c in 0..patch_cols {
                    group.push(lattice.index(pr * patch_rows + r, pc * patch_cols + c));
                }
            }
            groups.push(group);
        }
    }
    Ok(groups)
}

/// One-hot index of a patch state, `sum_k bits[k] * 2^k`.
pub fn encode_patch(bits: &[u8]) -> usize {
    debug_assert!(bits.len() < usize::BITS as usize);
    bits.iter()
        .enumerate()
        .fold(0usize, |acc, (k, &b)| acc | ((b as usize) << k))
}

/// Inverse of [`encode_patch`] for a patch of `bits` atoms.
pub fn decode_patch(index: usize, bits: usize) -> Result<Vec<u8>, LatticeError> {
    if bits >= usize::BITS as usize || index >> bits != 0 {
        return Err(LatticeError::PatchIndexOutOfRange { index, bits });
    }
    Ok((0..bits).map(|k| ((index >> k) & 1) as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rb7() -> f64 {
        7f64.powf(1.0 / 6.0)
    }

    #[test]
    fn nearest_and_diagonal_couplings() {
        let lat = LatticeSpec::new(2, 2).unwrap();
        let v = interaction_matrix(&lat, 1.0, rb7());
        assert!((v[[0, 1]] - 7.0).abs() < 1e-12);
        assert!((v[[0, 2]] - 7.0).abs() < 1e-12);
        assert!((v[[0, 3]] - 0.875).abs() < 1e-12);
        assert_eq!(v[[2, 2]], 0.0);
    }

    #[test]
    fn couplings_symmetric_positive() {
        let lat = LatticeSpec::new(3, 4).unwrap();
        let v = interaction_matrix(&lat, 1.3, 1.1);
        for i in 0..12 {
            assert_eq!(v[[i, i]], 0.0);
            for j in 0..12 {
                assert_eq!(v[[i, j]], v[[j, i]]);
                if i != j {
                    assert!(v[[i, j]] > 0.0);
                }
            }
        }
    }

    #[test]
    fn diagonal_energy_examples() {
        let lat = LatticeSpec::new(2, 2).unwrap();
        let ham = HamiltonianSpec::new(lat, 1.0, 1.0, rb7());
        assert_eq!(ham.diagonal_energy(&SpinConfiguration::zeros(4)).unwrap(), 0.0);
        let one = SpinConfiguration::new(vec![1, 0, 0, 0]);
        assert_eq!(ham.diagonal_energy(&one).unwrap(), -1.0);
        let pair = SpinConfiguration::new(vec![1, 1, 0, 0]);
        assert!((ham.diagonal_energy(&pair).unwrap() - 5.0).abs() < 1e-12);
        assert!(matches!(
            ham.diagonal_energy(&SpinConfiguration::zeros(3)),
            Err(LatticeError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn diagonal_energy_rotation_invariant() {
        // 90 degree rotation of a 3x2 lattice onto a 2x3 lattice.
        let lat = LatticeSpec::new(3, 2).unwrap();
        let rot = LatticeSpec::new(2, 3).unwrap();
        let ham = HamiltonianSpec::new(lat, 1.0, 0.7, 1.2);
        let ham_rot = HamiltonianSpec::new(rot, 1.0, 0.7, 1.2);
        for index in 0..64u64 {
            let cfg = SpinConfiguration::from_index(index, 6);
            let mut bits = vec![0u8; 6];
            for i in 0..6 {
                let (r, c) = lat.coords(i);
                // (r, c) -> (c, rows - 1 - r)
                bits[rot.index(c, lat.rows() - 1 - r)] = cfg.get(i);
            }
            let a: f64 = ham.diagonal_energy(&cfg).unwrap();
            let b = ham_rot.diagonal_energy(&SpinConfiguration::new(bits)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn staggered_examples() {
        let lat = LatticeSpec::new(4, 4).unwrap();
        let checker: Vec<u8> = (0..16)
            .map(|i| {
                let (r, c) = lat.coords(i);
                ((r + c) % 2 == 0) as u8
            })
            .collect();
        let m: f64 = staggered_magnetization(&SpinConfiguration::new(checker), &lat).unwrap();
        assert_eq!(m, 0.5);
        let m0: f64 = staggered_magnetization(&SpinConfiguration::zeros(16), &lat).unwrap();
        assert_eq!(m0, 0.0);
        let m1: f64 = staggered_magnetization(&SpinConfiguration::new(vec![1; 16]), &lat).unwrap();
        assert_eq!(m1, 0.0);
    }

    #[test]
    fn patch_order_examples() {
        let lat = LatticeSpec::new(4, 4).unwrap();
        let groups = patch_order(&lat, 2, 2).unwrap();
        assert_eq!(groups.len(), 4);
        assert_eq!(groups[0], vec![0, 1, 4, 5]);
        assert_eq!(groups[1], vec![2, 3, 6, 7]);
        let single = patch_order(&LatticeSpec::new(2, 2).unwrap(), 2, 2).unwrap();
        assert_eq!(single, vec![vec![0, 1, 2, 3]]);
        let sites = patch_order(&lat, 1, 1).unwrap();
        assert_eq!(sites, (0..16).map(|i| vec![i]).collect::<Vec<_>>());
        assert!(patch_order(&LatticeSpec::new(8, 8).unwrap(), 3, 3).is_err());
    }

    #[test]
    fn scheme_validation() {
        let lat = LatticeSpec::new(8, 8).unwrap();
        assert!(PatchScheme::with_sub(4, 4, 2, 2).validate(&lat).is_ok());
        assert!(PatchScheme::with_sub(4, 4, 3, 2).validate(&lat).is_err());
        assert!(PatchScheme::square(3).validate(&lat).is_err());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_patch(&[0, 0, 0, 0]), 0);
        assert_eq!(encode_patch(&[1, 0, 0, 0]), 1);
        assert_eq!(encode_patch(&[0, 1, 0, 1]), 10);
        assert!(decode_patch(16, 4).is_err());
        for s in 0..16 {
            assert_eq!(encode_patch(&decode_patch(s, 4).unwrap()), s);
        }
    }

    proptest! {
        #[test]
        fn staggered_in_range(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let lat = LatticeSpec::new(rows, cols).unwrap();
            let n = lat.n_atoms();
            let cfg = SpinConfiguration::from_index(seed & ((1u64 << n) - 1), n);
            let m: f64 = staggered_magnetization(&cfg, &lat).unwrap();
            prop_assert!((0.0..=0.5).contains(&m));
        }

        #[test]
        fn patch_order_is_permutation(pr in 1usize..4, pc in 1usize..4, mr in 1usize..4, mc in 1usize..4) {
            let lat = LatticeSpec::new(pr * mr, pc * mc).unwrap();
            let mut all: Vec<usize> = patch_order(&lat, pr, pc).unwrap().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..lat.n_atoms()).collect::<Vec<_>>());
        }

        #[test]
        fn encode_decode_bijection(bits in proptest::collection::vec(0u8..2, 1..12)) {
            let idx = encode_patch(&bits);
            prop_assert!(idx < 1 << bits.len());
            prop_assert_eq!(decode_patch(idx, bits.len()).unwrap(), bits);
        }
    }
}
