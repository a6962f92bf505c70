//! Error kinds and their exit codes.

use std::fmt::Display;
use std::path::Path;

use netdisguise::disguise::DisguiseError;
use netdisguise::graph::GraphError;
use netdisguise::importance::ImportanceError;
use netdisguise::sideinfo::SideInfoError;
use netdisguise::steganalysis::SteganalysisError;
use netdisguise::tasks::TaskError;
use netdisguise::tensor::TensorError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Io,
    ModelFormat,
    Config,
    CrcMismatch,
    Integrity,
    Divergence,
    Capacity,
    Pipeline,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Io | ErrorKind::ModelFormat => 1,
            ErrorKind::Config => 2,
            ErrorKind::CrcMismatch | ErrorKind::Integrity => 3,
            ErrorKind::Divergence => 4,
            ErrorKind::Capacity => 5,
            ErrorKind::Pipeline => 6,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Display) -> Self {
        Self { kind, message: message.to_string() }
    }

    pub fn config(message: impl Display) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn io(path: &Path, e: impl Display) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {e}", path.display()))
    }

    /// The JSON object written to standard error.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message, "exit_code": self.kind.exit_code() }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn tensor_kind(e: &TensorError) -> ErrorKind {
    match e {
        TensorError::NonFinite(_) => ErrorKind::Divergence,
        TensorError::ShapeMismatch(_) | TensorError::ZeroFanIn(_) => ErrorKind::Config,
        _ => ErrorKind::Pipeline,
    }
}

fn graph_kind(e: &GraphError) -> ErrorKind {
    match e {
        GraphError::Io(_) => ErrorKind::Io,
        GraphError::BadMagic | GraphError::Version(_) | GraphError::Truncated(_) | GraphError::Checksum { .. } => ErrorKind::ModelFormat,
        GraphError::Invalid(_) | GraphError::Selection(_) | GraphError::Index(_) => ErrorKind::Config,
        GraphError::Tensor(t) => tensor_kind(t),
    }
}

fn task_kind(e: &TaskError) -> ErrorKind {
    match e {
        TaskError::Invalid(_) | TaskError::Shape(_) => ErrorKind::Config,
        TaskError::Graph(g) => graph_kind(g),
        TaskError::Tensor(t) => tensor_kind(t),
        TaskError::Io(_) => ErrorKind::Io,
    }
}

fn importance_kind(e: &ImportanceError) -> ErrorKind {
    match e {
        ImportanceError::NonFiniteLoss => ErrorKind::Divergence,
        ImportanceError::Graph(g) => graph_kind(g),
        ImportanceError::Task(t) => task_kind(t),
        _ => ErrorKind::Pipeline,
    }
}

fn disguise_kind(e: &DisguiseError) -> ErrorKind {
    match e {
        DisguiseError::Divergence(_) => ErrorKind::Divergence,
        DisguiseError::Config(_) => ErrorKind::Config,
        DisguiseError::Floor(_) | DisguiseError::SecretViolation { .. } => ErrorKind::Pipeline,
        DisguiseError::Importance(i) => importance_kind(i),
        DisguiseError::Graph(g) => graph_kind(g),
        DisguiseError::Task(t) => task_kind(t),
    }
}

fn sideinfo_kind(e: &SideInfoError) -> ErrorKind {
    match e {
        SideInfoError::Capacity { .. } => ErrorKind::Capacity,
        SideInfoError::Checksum { .. } => ErrorKind::CrcMismatch,
        SideInfoError::Version(_) | SideInfoError::Layout(_) => ErrorKind::Integrity,
        SideInfoError::NonFiniteHost(_) => ErrorKind::Pipeline,
        SideInfoError::Graph(g) => graph_kind(g),
    }
}

fn steganalysis_kind(e: &SteganalysisError) -> ErrorKind {
    match e {
        SteganalysisError::Pool(_) => ErrorKind::Config,
        SteganalysisError::Empty | SteganalysisError::Degenerate { .. } => ErrorKind::Pipeline,
        SteganalysisError::Disguise(d) => disguise_kind(d),
        SteganalysisError::SideInfo(s) => sideinfo_kind(s),
        SteganalysisError::Task(t) => task_kind(t),
        SteganalysisError::Graph(g) => graph_kind(g),
    }
}

macro_rules! from_core {
    ($($ty:ty => $kind:ident),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($kind(&e), e)
            }
        })*
    };
}

from_core! {
    GraphError => graph_kind,
    TaskError => task_kind,
    ImportanceError => importance_kind,
    DisguiseError => disguise_kind,
    SideInfoError => sideinfo_kind,
    SteganalysisError => steganalysis_kind,
}
