use std::path::{Path, PathBuf};

use thiserror::Error;

use layoutdiff_core::layout::load_layout;
use layoutdiff_core::scene::{validate_scene, Scene};

/// Command failures, each with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("invalid layout {}:\n{report}", .path.display())]
    InvalidLayout { path: PathBuf, report: String },
    #[error("no input pairs in {}", .0.display())]
    EmptyInput(PathBuf),
    #[error("every scene failed")]
    AllFailed,
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NotFound(_) => 2,
            CliError::InvalidLayout { .. } => 3,
            CliError::EmptyInput(_) => 4,
            CliError::AllFailed | CliError::Other(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::NotFound(path.to_owned())
        } else {
            CliError::Other(anyhow::anyhow!("{}: {e}", path.display()))
        }
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Reads, parses and validates a layout document.
pub fn load_scene(path: &Path) -> Result<Scene, CliError> {
    let bytes = read_file(path)?;
    let invalid = |report: String| CliError::InvalidLayout {
        path: path.to_owned(),
        report,
    };
    let loaded = load_layout(&bytes).map_err(|e| invalid(format!("  {e}")))?;
    let report = validate_scene(&loaded.scene);
    if !report.is_empty() {
        return Err(invalid(report.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n")));
    }
    Ok(loaded.scene)
}
