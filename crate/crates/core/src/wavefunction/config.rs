use std::fmt;
use std::str::FromStr;

use super::ModelError;
use crate::lattice::{LatticeSpec, PatchScheme};

/// Largest patch (or sub-patch) that gets a full one-hot output layer.
pub const MAX_OUTPUT_BITS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// GRU over single atoms.
    Rnn,
    /// GRU over patches of atoms.
    PatchedRnn,
    /// Masked transformer encoder over patches of atoms.
    PatchedTransformer,
    /// Patched transformer whose output seeds a sub-patch GRU.
    LargePatchedTransformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Rnn,
        ModelKind::PatchedRnn,
        ModelKind::PatchedTransformer,
        ModelKind::LargePatchedTransformer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::PatchedRnn => "patched_rnn",
            ModelKind::PatchedTransformer => "patched_tf",
            ModelKind::LargePatchedTransformer => "lptf",
        }
    }

    pub fn has_transformer(&self) -> bool {
        matches!(
            self,
            ModelKind::PatchedTransformer | ModelKind::LargePatchedTransformer
        )
    }

    pub fn has_gru(&self) -> bool {
        !matches!(self, ModelKind::PatchedTransformer)
    }

    /// Patch scheme used when a configuration leaves it unspecified.
    pub fn default_scheme(&self) -> PatchScheme {
        match self {
            ModelKind::Rnn => PatchScheme::single_site(),
            ModelKind::PatchedRnn | ModelKind::PatchedTransformer => PatchScheme::square(2),
            ModelKind::LargePatchedTransformer => PatchScheme::with_sub(4, 4, 2, 2),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown model kind '{s}'")))
    }
}

/// Architecture hyperparameters of a wavefunction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden width of the GRU and embedding width of the transformer.
    pub d_hidden: usize,
    /// Feed-forward width inside each transformer cell.
    pub d_ff: usize,
    /// Number of stacked transformer cells.
    pub cells: usize,
    /// Attention heads.
    pub heads: usize,
    pub scheme: PatchScheme,
    pub seed: u64,
}

impl ModelConfig {
    pub const DEFAULT_HIDDEN: usize = 128;
    pub const DEFAULT_FF: usize = 2048;
    pub const DEFAULT_CELLS: usize = 2;
    pub const DEFAULT_HEADS: usize = 8;

    /// Default widths with the kind's default patch scheme.
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            d_hidden: Self::DEFAULT_HIDDEN,
            d_ff: Self::DEFAULT_FF,
            cells: Self::DEFAULT_CELLS,
            heads: Self::DEFAULT_HEADS,
            scheme: kind.default_scheme(),
            seed: 0,
        }
    }

    pub fn with_scheme(mut self, scheme: PatchScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_widths(mut self, d_hidden: usize, d_ff: usize, cells: usize, heads: usize) -> Self {
        self.d_hidden = d_hidden;
        self.d_ff = d_ff;
        self.cells = cells;
        self.heads = heads;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Atoms fed to the model per sequence step.
    pub fn input_bits(&self) -> usize {
        self.scheme.patch_size()
    }

    /// Atoms decided by one softmax output.
    pub fn output_bits(&self) -> usize {
        match self.kind {
            ModelKind::LargePatchedTransformer => self.scheme.sub_size(),
            _ => self.scheme.patch_size(),
        }
    }

    /// Checks the hyperparameters alone (no lattice).
    pub fn validate_architecture(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_hidden == 0 {
            return bad("d_hidden must be positive".into());
        }
        let s = &self.scheme;
        if s.patch_rows == 0 || s.patch_cols == 0 {
            return bad("patch dimensions must be positive".into());
        }
        if self.kind == ModelKind::Rnn && s.patch_size() != 1 {
            return bad(format!(
                "kind rnn needs a 1x1 patch, got {}x{}",
                s.patch_rows, s.patch_cols
            ));
        }
        if self.kind == ModelKind::LargePatchedTransformer
            && (s.sub_rows == 0
                || s.sub_cols == 0
                || !s.patch_rows.is_multiple_of(s.sub_rows)
                || !s.patch_cols.is_multiple_of(s.sub_cols))
        {
            return bad(format!(
                "sub-patch {}x{} does not tile patch {}x{}",
                s.sub_rows, s.sub_cols, s.patch_rows, s.patch_cols
            ));
        }
        if self.output_bits() > MAX_OUTPUT_BITS {
            return bad(format!(
                "output over {} atoms exceeds the {MAX_OUTPUT_BITS}-atom one-hot limit",
                self.output_bits()
            ));
        }
        if self.kind.has_transformer() {
            if self.d_ff == 0 || self.cells == 0 || self.heads == 0 {
                return bad("d_ff, cells and heads must be positive".into());
            }
            if !self.d_hidden.is_multiple_of(self.heads) {
                return bad(format!(
                    "d_hidden {} is not divisible by {} heads",
                    self.d_hidden, self.heads
                ));
            }
            if !self.d_hidden.is_multiple_of(2) {
                return bad("d_hidden must be even for the positional encoding".into());
            }
        }
        Ok(())
    }

    pub fn validate(&self, lattice: &LatticeSpec) -> Result<(), ModelError> {
        self.validate_architecture()?;
        let s = &self.scheme;
        let check = if self.kind == ModelKind::LargePatchedTransformer {
            s.validate(lattice)
        } else {
            PatchScheme::with_sub(s.patch_rows, s.patch_cols, s.patch_rows, s.patch_cols)
                .validate(lattice)
        };
        check.map_err(ModelError::from)
    }

    /// Closed-form number of trainable scalars.
    pub fn closed_form_parameter_count(&self) -> usize {
        let dh = self.d_hidden;
        let dff = self.d_ff;
        let rnn = |d_in: usize, d_out: usize| 3 * d_in * dh + 4 * dh * dh + 7 * dh + dh * d_out + d_out;
        let tf_body = |d_in: usize| d_in * dh + dh + self.cells * (4 * dh * dh + 9 * dh + 2 * dff * dh + dff);
        let p = self.scheme.patch_size();
        match self.kind {
            ModelKind::Rnn | ModelKind::PatchedRnn => rnn(p, 1 << p),
            ModelKind::PatchedTransformer => tf_body(p) + dh * dh + dh + dh * (1 << p) + (1 << p),
            ModelKind::LargePatchedTransformer => {
                let ps = self.scheme.sub_size();
                tf_body(p) + rnn(ps, 1 << ps)
            }
        }
    }
}
