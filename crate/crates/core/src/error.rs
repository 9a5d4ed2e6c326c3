use thiserror::Error;

use crate::parallelism::ParallelKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("unknown device `{0}`")]
    UnknownDevice(String),

    #[error("{count} participants do not evenly divide {what} ({value})")]
    Divisibility {
        what: &'static str,
        value: u64,
        count: usize,
    },

    #[error("{kind} needs at least {required} {what}, got {available}")]
    TooFew {
        kind: ParallelKind,
        what: &'static str,
        required: usize,
        available: usize,
    },

    #[error("no memory-feasible contiguous stage partition")]
    NoFeasiblePartition,

    #[error("infeasible: {0}")]
    Infeasible(Infeasibility),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Why a participant set cannot run any parallelism.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Infeasibility {
    /// One entry per attempted kind.
    pub causes: Vec<(ParallelKind, String)>,
}

impl std::fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.causes.is_empty() {
            return write!(f, "no candidates");
        }
        for (i, (kind, cause)) in self.causes.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{kind}: {cause}")?;
        }
        Ok(())
    }
}
