use std::fmt::Display;

/// A command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad config, flags or missing inputs: exit 2.
    Usage(anyhow::Error),
    /// Anything that went wrong while running: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<slumseg::Error> for Failure {
    fn from(e: slumseg::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub trait UsageExt<T> {
    /// Marks an error as a configuration or usage error.
    fn usage(self) -> Result<T, Failure>;
    fn usage_context(self, what: impl Display) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn usage_context(self, what: impl Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into().context(what.to_string())))
    }
}

pub fn usage(msg: impl Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}
