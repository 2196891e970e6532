//! Command implementations and shared plumbing.

use std::fmt;
use std::path::Path;

use depthflow_core::traj::{RoleSet, TokenRole, TrajectoryTensor};
use depthflow_core::Error as CoreError;

pub mod compare;
pub mod dmd_cmd;
pub mod dynamics;
pub mod fit;
pub mod gen;
pub mod segment;
pub mod simmat;

/// Errors mapped onto process exit codes: 2 usage, 3 data, 4 numerical.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ if e.is_numerical() => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Token-role filter accepted by `--role`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum RoleArg {
    All,
    Cls,
    Register,
    Patch,
}

impl RoleArg {
    pub fn to_set(self) -> RoleSet {
        match self {
            RoleArg::All => RoleSet::ALL,
            RoleArg::Cls => RoleSet::only(TokenRole::Cls),
            RoleArg::Register => RoleSet::only(TokenRole::Register),
            RoleArg::Patch => RoleSet::only(TokenRole::Patch),
        }
    }

    pub fn to_single(self) -> Option<TokenRole> {
        match self {
            RoleArg::All => None,
            RoleArg::Cls => Some(TokenRole::Cls),
            RoleArg::Register => Some(TokenRole::Register),
            RoleArg::Patch => Some(TokenRole::Patch),
        }
    }
}

pub fn load_trajectory(path: &Path) -> Result<TrajectoryTensor, CliError> {
    depthflow_core::traj::read_trajectory(path).map_err(CliError::from)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("reading {} {}: {e}", what, path.display())))?;
    serde_json::from_str(&body)
        .map_err(|e| CliError::Data(format!("parsing {} {}: {e}", what, path.display())))
}

pub fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

pub fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serializing {}: {e}", path.display())))?;
    write_text(path, &(body + "\n"))
}
