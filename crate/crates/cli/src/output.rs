//! Output directories, overwrite protection and CSV helpers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

pub const SOURCE_TRAIN: &str = "source_train.txt";
pub const SOURCE_DEV: &str = "source_dev.txt";
pub const TARGET_UNLABELED: &str = "target_unlabeled.txt";
pub const TARGET_TEST: &str = "target_test.txt";

/// Creates `dir` and refuses to proceed if any of `files` already exists
/// there, unless `force`.
pub fn prepare(dir: &Path, files: &[&str], force: bool) -> CliResult<()> {
    if !force {
        if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::usage(format!(
                "{} exists; pass --force to overwrite",
                f.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

pub fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Joins fields into one CSV line; fields never contain commas here.
pub fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn prepare_refuses_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("metrics.csv"), "x").unwrap();
        let err = prepare(dir.path(), &["metrics.csv"], false).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        prepare(dir.path(), &["metrics.csv"], true).unwrap();
        prepare(&dir.path().join("fresh"), &["metrics.csv"], false).unwrap();
        assert!(dir.path().join("fresh").is_dir());
    }
}
