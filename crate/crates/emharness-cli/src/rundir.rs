//! Run directory layout. A run owns one directory under the runs root;
//! matching writes it once, later commands only add new files next to the
//! existing ones.

use std::path::{Path, PathBuf};

use crate::CliError;

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(runs_root: &Path, run_id: &str) -> Self {
        RunPaths {
            root: runs_root.join(run_id),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn decisions(&self) -> PathBuf {
        self.root.join("decisions.jsonl")
    }

    pub fn usage(&self) -> PathBuf {
        self.root.join("usage.jsonl")
    }

    pub fn failures(&self) -> PathBuf {
        self.root.join("failures.jsonl")
    }

    pub fn explanations(&self) -> PathBuf {
        self.root.join("explanations.jsonl")
    }

    pub fn error_classes(&self) -> PathBuf {
        self.root.join("error_classes.json")
    }

    pub fn assignments(&self) -> PathBuf {
        self.root.join("assignments.jsonl")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports_dir().join(name)
    }

    /// Fails when the directory already holds a run; completed runs are never
    /// overwritten.
    pub fn ensure_absent(&self) -> Result<(), CliError> {
        if self.config().exists() {
            return Err(CliError::Config(format!(
                "run directory {} already exists; pick a new run_id",
                self.root.display()
            )));
        }
        Ok(())
    }

    pub fn create_fresh(&self) -> Result<(), CliError> {
        self.ensure_absent()?;
        std::fs::create_dir_all(self.reports_dir())
            .map_err(|e| CliError::Internal(format!("cannot create run directory: {e}")))
    }

    /// Opens an existing run for follow-up commands.
    pub fn require_existing(&self) -> Result<(), CliError> {
        if !self.config().is_file() {
            return Err(CliError::Config(format!(
                "no run found at {}",
                self.root.display()
            )));
        }
        Ok(())
    }
}
