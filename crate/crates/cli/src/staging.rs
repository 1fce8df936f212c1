//! Artifacts are written into a hidden temporary directory next to their
//! destination and renamed into place only once every file exists, so a
//! failed command leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::CliError;

pub(crate) struct Staging {
    dir: TempDir,
    moves: Vec<(PathBuf, PathBuf)>,
}

fn existing_ancestor(path: &Path) -> PathBuf {
    let mut p = if path.as_os_str().is_empty() {
        Path::new(".")
    } else {
        path
    };
    loop {
        if p.is_dir() {
            return p.to_path_buf();
        }
        match p.parent() {
            Some(parent) if !parent.as_os_str().is_empty() => p = parent,
            _ => return PathBuf::from("."),
        }
    }
}

impl Staging {
    /// Staging area on the same file system as `destination`.
    pub fn near(destination: &Path) -> Result<Self, CliError> {
        let base = existing_ancestor(destination.parent().unwrap_or(Path::new(".")));
        let dir = tempfile::Builder::new()
            .prefix(".morphstn-stage-")
            .tempdir_in(&base)
            .map_err(|e| CliError::input(format!("cannot create a staging directory in {}: {e}", base.display())))?;
        Ok(Staging { dir, moves: Vec::new() })
    }

    /// Temporary path to write the artifact that will end up at `target`.
    pub fn file(&mut self, target: &Path) -> PathBuf {
        let tmp = self.dir.path().join(format!("{}", self.moves.len()));
        self.moves.push((tmp.clone(), target.to_path_buf()));
        tmp
    }

    /// Moves every staged file into place; on failure, removes those already moved.
    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut done: Vec<PathBuf> = Vec::new();
        for (tmp, target) in &self.moves {
            let result = target
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map_or(Ok(()), fs::create_dir_all)
                .and_then(|_| fs::rename(tmp, target));
            if let Err(e) = result {
                for p in &done {
                    let _ = fs::remove_file(p);
                }
                return Err(CliError::input(format!("cannot write {}: {e}", target.display())));
            }
            done.push(target.clone());
        }
        Ok(done)
    }
}
