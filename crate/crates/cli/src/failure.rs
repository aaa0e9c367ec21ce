use std::fmt;

/// Exit 2: the request cannot be satisfied as configured. Exit 3: it failed while running.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Config(anyhow::anyhow!(msg.into()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e:#}"),
            Failure::Runtime(e) => write!(f, "runtime error: {e:#}"),
        }
    }
}

impl From<tsafe_core::Error> for Failure {
    fn from(e: tsafe_core::Error) -> Self {
        use tsafe_core::Error as E;
        match e {
            E::InvalidInput(_) | E::DimensionMismatch { .. } | E::InsufficientData(_) => Failure::Config(e.into()),
            E::Divergence(_) | E::Io(_) | E::Csv(_) | E::Json(_) => Failure::Runtime(e.into()),
        }
    }
}
