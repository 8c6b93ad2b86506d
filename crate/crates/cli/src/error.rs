use std::fmt;

use npt_core::NptError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numeric(String),
    Core(NptError),
}

impl CliError {
    /// 2 usage, 3 data or IO, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(
                NptError::InvalidArgument(_)
                | NptError::Parse(_)
                | NptError::SingleClass(_)
                | NptError::UnseparableSpec { .. }
                | NptError::TooFewClasses(_),
            ) => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<NptError> for CliError {
    fn from(e: NptError) -> Self {
        CliError::Core(e)
    }
}
