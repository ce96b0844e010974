//! Failure classes and their exit codes.

use std::fmt;

use ddbridge::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    MissingCheckpoint,
    Manifest,
    DivergedSampling,
    DivergedTraining,
    Runtime,
}

impl Kind {
    pub fn prefix(self) -> &'static str {
        match self {
            Kind::Config => "config error",
            Kind::MissingCheckpoint => "missing checkpoint",
            Kind::Manifest => "manifest/volume mismatch",
            Kind::DivergedSampling => "diverged sampling",
            Kind::DivergedTraining => "diverged training",
            Kind::Runtime => "runtime error",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: Kind, message: String) -> Self {
        Failure { kind, message }
    }

    pub fn config(message: String) -> Self {
        Failure::new(Kind::Config, message)
    }

    pub fn runtime(message: String) -> Self {
        Failure::new(Kind::Runtime, message)
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            Kind::Config => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.prefix(), self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) | Error::UnknownVariable(_) => Kind::Config,
            Error::DivergedSampling { .. } => Kind::DivergedSampling,
            Error::NonFiniteLoss { .. } => Kind::DivergedTraining,
            Error::Shape(_) | Error::Format { .. } | Error::Checksum { .. } | Error::Json(_) => {
                Kind::Manifest
            }
            _ => Kind::Runtime,
        };
        Failure::new(kind, e.to_string())
    }
}
