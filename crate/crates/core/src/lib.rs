//! Learning spatial arrangement preferences from example scenes.
//!
//! A graph-attention VAE ([`vae`]) encodes a user's arranged scenes into a
//! small preference vector and decodes personalised positions for any known
//! template. [`baselines`] and [`posegraph`] hold the comparison methods,
//! [`synth`] generates users with known preferences, and [`experiments`]
//! scores everything against them.

pub mod autodiff;
pub mod baselines;
pub mod eval;
pub mod experiments;
pub mod gnn;
pub mod posegraph;
pub mod scene;
pub mod semantics;
pub mod service;
pub mod synth;
pub mod vae;

use thiserror::Error;

/// Which family an error belongs to, for exit codes and HTTP status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Model,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Model => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Scene(#[from] scene::SceneError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Semantics(#[from] semantics::SemanticsError),
    #[error(transparent)]
    Vae(#[from] vae::VaeError),
    #[error(transparent)]
    Baseline(#[from] baselines::BaselineError),
    #[error(transparent)]
    PoseGraph(#[from] posegraph::PoseGraphError),
    #[error(transparent)]
    Experiment(#[from] experiments::ExperimentError),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use experiments::ExperimentError as E;
        use vae::VaeError as V;
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Vae(V::Config(_)) => ErrorClass::Config,
            Error::Vae(V::Mismatch(_) | V::Bundle(_) | V::UnknownTemplate(_)) => ErrorClass::Model,
            Error::Experiment(E::UnknownMethod(_) | E::Unsupported { .. }) => ErrorClass::Config,
            Error::Experiment(E::NoModel(_)) => ErrorClass::Config,
            Error::Experiment(E::Vae(V::Mismatch(_) | V::Bundle(_) | V::UnknownTemplate(_))) => ErrorClass::Model,
            Error::Synth(synth::SynthError::Params(_) | synth::SynthError::Mix(_) | synth::SynthError::NoUsers) => {
                ErrorClass::Config
            }
            _ => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Reads a whole file, naming it in the error.
pub fn read_file(path: impl AsRef<std::path::Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: impl AsRef<std::path::Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<scene::Dataset> {
    Ok(scene::Dataset::from_json(&read_file(path)?)?)
}
