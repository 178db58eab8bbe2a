use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::config::{RunConfig, Stage};
use crate::error::{Error, IoContext, Result};

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.resolved";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONVERSION_FILE: &str = "conversion.json";
pub const CONVERTED_DIR: &str = "converted";
pub const OUTLIERS_DIR: &str = "outliers";
pub const SCORES_FILE: &str = "scores.csv";
pub const KEPT_MANIFEST_FILE: &str = "kept_manifest.json";
pub const REPORT_FILES: [&str; 5] = ["report.json", "report.csv", "report_folds.csv", "plot.csv", "plot.svg"];

/// Holds the run directory's lock file for its lifetime.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates `root` if needed and takes the lock. Fails if another process
    /// holds it.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).at(root)?;
        let lock = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).at(&lock)?;
                Ok(RunDir {
                    root: root.to_path_buf(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&lock).unwrap_or_default();
                Err(Error::RunDir {
                    path: root.to_path_buf(),
                    message: format!(
                        "locked by process {} ({}); delete the lock file if that process is gone",
                        holder.trim(),
                        lock.display()
                    ),
                })
            }
            Err(e) => Err(Error::io(&lock, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn conversion_path(&self) -> PathBuf {
        self.root.join(CONVERSION_FILE)
    }

    pub fn converted_dir(&self) -> PathBuf {
        self.root.join(CONVERTED_DIR)
    }

    pub fn scores_path(&self) -> PathBuf {
        self.root.join(OUTLIERS_DIR).join(SCORES_FILE)
    }

    pub fn kept_manifest_path(&self) -> PathBuf {
        self.root.join(OUTLIERS_DIR).join(KEPT_MANIFEST_FILE)
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    /// The stored resolved config, if any.
    pub fn stored_config(&self) -> Result<Option<RunConfig>> {
        let path = self.config_path();
        if !path.exists() {
            return Ok(None);
        }
        RunConfig::load(&path).map(Some)
    }

    /// True if anything produced by `stage` or a later stage exists.
    pub fn has_outputs_from(&self, stage: Stage) -> Result<bool> {
        Ok(self.outputs_from(stage)?.iter().any(|p| p.exists()))
    }

    fn outputs_from(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        if stage <= Stage::Convert {
            out.extend([self.manifest_path(), self.conversion_path(), self.converted_dir()]);
        }
        if stage <= Stage::Outliers {
            out.push(self.root.join(OUTLIERS_DIR));
        }
        for entry in fs::read_dir(&self.root).at(&self.root)? {
            let entry = entry.at(&self.root)?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name.strip_prefix("fold").is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit())) {
                out.push(entry.path());
            }
        }
        out.extend(REPORT_FILES.iter().map(|f| self.root.join(f)));
        Ok(out)
    }

    /// Deletes everything produced by `stage` and later stages.
    pub fn invalidate_from(&self, stage: Stage) -> Result<()> {
        for p in self.outputs_from(stage)? {
            if p.is_dir() {
                fs::remove_dir_all(&p).at(&p)?;
            } else if p.exists() {
                fs::remove_file(&p).at(&p)?;
            }
        }
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}
