use thiserror::Error;

/// Errors raised by the estimators, diagnostics and instance constructions.
#[derive(Debug, Error)]
pub enum OpeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// The (regularized) Gram matrix cannot be inverted reliably.
    #[error("covariance matrix is singular (condition estimate {condition:e})")]
    SingularCovariance { condition: f64 },

    /// The discounted series in `gamma * M` does not converge.
    #[error("discounted series diverges: spectral radius {spectral_radius} with gamma {gamma}")]
    DivergentSeries { spectral_radius: f64, gamma: f64 },

    #[error("stationary distribution is not unique (residual between starts {gap:e})")]
    StationaryAmbiguous { gap: f64 },

    #[error("p1 is not absolutely continuous w.r.t. p2 at cell {cell} (p1 = {p1})")]
    AbsoluteContinuity { cell: usize, p1: f64 },

    #[error("contraction lemma hypothesis fails: residual {residual:e}")]
    LemmaHypothesisFailed { residual: f64 },

    #[error("z = {z} makes the data covariance singular")]
    SingularSigma { z: f64 },

    #[error("perturbation produces an invalid kernel (max violation {max_violation:e})")]
    PerturbationTooLarge { max_violation: f64 },

    #[error("perturbation total variation {tv} exceeds the radius {epsilon}")]
    EpsilonExceeded { tv: f64, epsilon: f64 },

    #[error("instance hypothesis unmet: {0}")]
    HypothesisUnmet(String),

    #[error("feature map has ||phi||_2 = {max_norm} > 1")]
    UnnormalizedFeatures { max_norm: f64 },

    #[error("improved bound requires phi^T Sigma^-1 phi' >= 0, found {min_cross:e}")]
    ImprovedBoundInapplicable { min_cross: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl OpeError {
    /// Stable variant name, used in CLI diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            OpeError::InvalidInput(_) => "InvalidInput",
            OpeError::DimensionMismatch { .. } => "DimensionMismatch",
            OpeError::SingularCovariance { .. } => "SingularCovariance",
            OpeError::DivergentSeries { .. } => "DivergentSeries",
            OpeError::StationaryAmbiguous { .. } => "StationaryAmbiguous",
            OpeError::AbsoluteContinuity { .. } => "AbsoluteContinuity",
            OpeError::LemmaHypothesisFailed { .. } => "LemmaHypothesisFailed",
            OpeError::SingularSigma { .. } => "SingularSigma",
            OpeError::PerturbationTooLarge { .. } => "PerturbationTooLarge",
            OpeError::EpsilonExceeded { .. } => "EpsilonExceeded",
            OpeError::HypothesisUnmet(_) => "HypothesisUnmet",
            OpeError::UnnormalizedFeatures { .. } => "UnnormalizedFeatures",
            OpeError::ImprovedBoundInapplicable { .. } => "ImprovedBoundInapplicable",
            OpeError::Io(_) => "Io",
            OpeError::Json(_) => "Json",
            OpeError::Csv(_) => "Csv",
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            OpeError::SingularCovariance { .. }
                | OpeError::DivergentSeries { .. }
                | OpeError::StationaryAmbiguous { .. }
                | OpeError::PerturbationTooLarge { .. }
                | OpeError::LemmaHypothesisFailed { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, OpeError>;

pub(crate) fn ensure_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(OpeError::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
