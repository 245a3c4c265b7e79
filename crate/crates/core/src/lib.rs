//! Shared-factor weight factorization for tiny diffusion transformers.
//!
//! Block weight matrices are parameterized as `W(l) = U . diag(sigma_l) . V^T`
//! with `U, V` shared across layers and the per-layer singular values grouped
//! `s`-at-a-time. The shared pair is condensed by training an auxiliary model,
//! extracted as a depth-agnostic "learngene", and reused to initialize models
//! of any depth by fitting only the grouped singular values on a small data
//! sample. The crate also ships DDPM training/sampling, procedural desk
//! datasets, a Gaussian-Frechet sample metric, a convergence benchmark
//! harness, and a binary checkpoint container.
//!
//! Numeric code is generic over [`scalar::Scalar`] (f32 or f64); the type
//! aliases at the crate root pin the shipped f64 configuration, which is also
//! what the file formats store.

pub mod data;
pub mod diffusion;
pub mod factorized;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub mod bench;

pub use rng::DeskRng;

/// Shipped element type.
pub type Elem = f64;

pub type Tensor = tensor::Tensor<Elem>;
pub type GradTape = tensor::GradTape<Elem>;
pub type ParamStore = params::ParamStore<Elem>;
pub type DiTModel = model::DiTModel<Elem>;
pub type DiffusionSchedule = diffusion::DiffusionSchedule<Elem>;
pub type EmaModel = diffusion::EmaModel<Elem>;
pub type FactorizedFamily = factorized::FactorizedFamily<Elem>;
pub type Learngene = factorized::Learngene<Elem>;
pub type DeskDataset = data::DeskDataset<Elem>;
pub type GaussianStats = metrics::GaussianStats<Elem>;

/// Unified error type across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] io::FormatError),
    #[error("training diverged at step {step}: loss became non-finite (last finite loss {last_finite_loss})")]
    Diverged { step: u64, last_finite_loss: f64 },
    #[error("incompatible widths: expected D={expected}, found D={found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
