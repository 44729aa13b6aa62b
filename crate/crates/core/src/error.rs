use thiserror::Error;

/// Errors raised by the simulation, verification and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} is not Hermitian (max |a - a^dagger| = {deviation:.3e})")]
    NotHermitian { what: &'static str, deviation: f64 },

    #[error(
        "degenerate level at the Fermi energy: E = {energy:.12} has multiplicity {multiplicity} \
         but only {occupied} of those states would be filled; enable fractional filling to share \
         the occupation"
    )]
    FermiDegeneracy {
        energy: f64,
        multiplicity: usize,
        occupied: usize,
    },

    #[error("step size warning escalated to error: {0}")]
    StepSize(String),

    #[error("replay grid mismatch: {0}")]
    ReplayGridMismatch(String),

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("current has imaginary residue {residue:.3e} above threshold {threshold:.1e}")]
    ImaginaryCurrent { residue: f64, threshold: f64 },

    #[error("broadening matrix has a negative eigenvalue {eigenvalue:.3e}")]
    NegativeBroadening { eigenvalue: f64 },

    #[error("Landauer oracle needs uniform chain leads: {0}")]
    UnsupportedLead(String),

    #[error("expansion point {point:?} is too close to the sample boundary for the stencil")]
    StencilOutOfBounds { point: Vec<f64> },

    #[error(
        "evaluation at distance {distance:.4} exceeds the trusted radius {allowed:.4} of the \
         expansion at {center:?}"
    )]
    RadiusExceeded {
        center: Vec<f64>,
        distance: f64,
        allowed: f64,
    },

    #[error("radius collapse: estimate {radius:.3e} below grid spacing; furthest point reached {reached:?}")]
    RadiusCollapse { reached: Vec<f64>, radius: f64 },

    #[error("continuation request is not connected: {0}")]
    NotConnected(String),

    #[error("order {order} is not minimal: lower order {violating} already differs by more than a constant")]
    NotMinimalOrder { order: usize, violating: usize },

    #[error("potentials differ only by a constant at order {order}")]
    ConstantDifference { order: usize },

    #[error("invariant breach: {0}")]
    InvariantBreach(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvariantBreach(_) | Error::StepSize(_) => 3,
            Error::Numerical(_) | Error::RadiusCollapse { .. } | Error::ImaginaryCurrent { .. } => {
                4
            }
            _ => 2,
        }
    }
}
