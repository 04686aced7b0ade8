use std::fmt;

/// Failure classes with their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Checkpoint,
    Transport,
    HashMismatch,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Checkpoint => 4,
            Kind::Transport => 5,
            Kind::HashMismatch => 6,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            kind,
            error: error.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub trait ResultExt<T> {
    fn kind(self, kind: Kind) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn kind(self, kind: Kind) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(kind, e))
    }
}

pub use anyhow::Context;

/// Transport errors keep their own class wherever they surface.
pub fn classify(err: xmutest::Error, fallback: Kind) -> Failure {
    let kind = match &err {
        xmutest::Error::Transport(_) => Kind::Transport,
        xmutest::Error::Checkpoint(_) => Kind::Checkpoint,
        _ => fallback,
    };
    Failure::new(kind, err)
}
