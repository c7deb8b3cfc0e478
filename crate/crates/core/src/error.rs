use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("matrix is not Hermitian (max asymmetry {asymmetry:.3e})")]
    NotHermitian { asymmetry: f64 },

    #[error("invalid covariance: Hermitian matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("matrix is substantially indefinite (min eigenvalue {min_eig:.3e}, norm {norm:.3e})")]
    Indefinite { min_eig: f64, norm: f64 },

    #[error("user and element positions coincide (distance {distance:.3e} m)")]
    CoincidentPoints { distance: f64 },

    #[error("position unidentifiable under this beamforming at {position:?} (FIM condition {condition:.3e})")]
    SingularFim { position: [f64; 3], condition: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("power group (band {band}, frame {frame}) has zero norm")]
    ZeroPowerGroup { band: usize, frame: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
