//! Stateful diffusion policies for action-window generation.
//!
//! The crate trains a DDPM over fixed-length action windows ("diffusion
//! policy") and extends it with a transition branch — a trainable replica of
//! the denoiser encoder wired back through zero-initialized connectors — so
//! that each new window is conditioned on the previously generated one.
//! Three synthetic desk-scale tasks (cosine continuation, drum beats, target
//! scooping) plus behavior-cloning baselines and a benchmark harness exercise
//! the stateful-vs-stateless comparison end to end.

pub mod baselines;
pub mod diffusion;
pub mod eval;
pub mod nets;
pub mod policy;
pub mod seeds;
pub mod tasks;
pub mod training;

/// Crate-wide error type. Variants map onto the CLI's exit-code classes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an operation's arguments was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Matrix/tensor dimensions do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A step or element index fell outside its valid range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    /// A computation produced non-finite values.
    #[error("numerical divergence: {0}")]
    Divergence(String),
    /// A required artifact (checkpoint, dataset, ...) is absent.
    #[error("missing input: {0}")]
    MissingInput(String),
    /// A persisted file failed validation (magic, version, digest, kind).
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    /// The environment rejected an action; the rollout aborts.
    #[error("environment fault: {0}")]
    EnvFault(String),
    /// Configuration failed validation.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use diffusion::{ActionWindow, NoiseSchedule};
pub use nets::{DenoiserConfig, ParamSet, TransitionParams};
//pub use policy::{EpisodeLog, PolicyKind, PolicySpec, PolicyState};
//pub use tasks::{Demonstration, Observation, OcclusionPlan, Task};
//pub use training::{Checkpoint, CheckpointKind, TrainHyper, WindowPair};
