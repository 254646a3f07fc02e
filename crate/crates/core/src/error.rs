use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("layer norm over a single feature with eps = 0 divides by zero")]
    DivisionHazard,

    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite or exploding state on path {path} at step {step}")]
    StateExplosion { path: usize, step: usize },

    #[error("newton iteration did not converge at time step {step} after {iterations} iterations")]
    NoConvergence { step: usize, iterations: usize },

    #[error("query ({t}, {x}) lies outside the grid")]
    OutOfGrid { t: f64, x: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the failure is numerical (as opposed to a bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_)
                | Error::StateExplosion { .. }
                | Error::NoConvergence { .. }
                | Error::DegenerateFit(_)
        )
    }
}
