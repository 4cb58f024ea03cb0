use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("state space must be nonempty")]
    EmptyStateSpace,
    #[error("reference weight m({state}) = {value} must be strictly positive")]
    NonpositiveWeight { state: usize, value: f64 },
    #[error("jump rate q({from},{to}) = {value} must be nonnegative")]
    NegativeRate { from: usize, to: usize, value: f64 },
    #[error("kill rate at state {state} is {value}, must be nonnegative")]
    NegativeKillRate { state: usize, value: f64 },
    #[error("{context}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("time must be strictly positive, got {0}")]
    NonpositiveTime(f64),
    #[error("state index {state} out of range for {n} states")]
    StateOutOfRange { state: usize, n: usize },

    #[error("branching rate beta({state}) = {value} must be nonnegative")]
    NegativeBeta { state: usize, value: f64 },
    #[error("offspring law at state {state}: {reason}")]
    InvalidOffspringLaw { state: usize, reason: String },
    #[error("generating function argument |z| = {0} exceeds 1")]
    GfArgumentOutOfRange(f64),
    #[error("offspring family {family:?} has a divergent mean; law rejected (bounded-A assumption)")]
    UnboundedMeanOffspring { family: &'static str },

    #[error("leading eigenvalue is not simple (multiplicity {multiplicity}); model is likely reducible")]
    NonSimpleLeadingEigenvalue { multiplicity: usize },
    #[error("leading eigenvalue has imaginary part {imag:e} beyond tolerance {tol:e}")]
    ComplexLeadingEigenvalue { imag: f64, tol: f64 },
    #[error("embedded jump chain is not irreducible; the principal eigenvector need not be positive")]
    NotIrreducible,
    #[error("principal eigenvector has a nonpositive entry (min {min:e}); Perron positivity failed")]
    PerronPositivityFailed { min: f64 },
    #[error("eigenvector iteration did not reach residual {target:e} (achieved {achieved:e})")]
    EigenResidual { target: f64, achieved: f64 },
    #[error("time grid must be strictly positive, increasing, with at least {min} points")]
    BadTimeGrid { min: usize },
    #[error("normalized kernel deviation is non-decreasing on the grid (D({t0}) = {d0:e}, D({t1}) = {d1:e}); triple is inconsistent with the operator")]
    NonDecayingDeviation { t0: f64, d0: f64, t1: f64, d1: f64 },
    #[error("h-transform row-sum residual {residual:e} exceeds {tol:e}; triple is inconsistent")]
    HTransformResidual { residual: f64, tol: f64 },

    #[error("initial point measure must be nonempty")]
    EmptyInitialMeasure,
    #[error("invalid simulation config: {0}")]
    InvalidSimConfig(String),

    #[error("spine records cover horizon {horizon}, requested time {t}")]
    IncompatibleHorizon { horizon: f64, t: f64 },
    #[error("overflowed replicates contaminate the comparison: {overflowed} of {total} exceed the {limit:.3}% budget")]
    OverflowContamination {
        overflowed: usize,
        total: usize,
        limit: f64,
    },

    #[error("all {0} replicates overflowed the population cap; experiment unusable at this horizon")]
    AllReplicatesOverflowed(usize),
    #[error("dichotomy verdict refused: family {family} truncated at kmax = {kmax}, but the horizon reaches offspring counts up to {needed:.1}; the truncated law has a nondegenerate limit")]
    DichotomyTruncationRefusal {
        family: &'static str,
        kmax: u64,
        needed: f64,
    },
    #[error("only {accepted} replicates survived exclusion; at least {required} required")]
    InsufficientReplicates { accepted: usize, required: usize },

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("unknown fixture id `{0}` (known: yule2, asym3, heavy, griddiff)")]
    UnknownFixture(String),
    #[error("malformed spec document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
