//! Atomic artifact writing and small formatting helpers.

use anyhow::{Context, Result};
use std::path::{Path, PathBuf};

/// Writes via a temp file plus rename so sweep points never leave partial
/// artifacts.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Fixed-notation float for CSV cells; deterministic across runs.
pub fn num(x: f64) -> String {
    format!("{x:.9e}")
}

/// Parses "1..512" (inclusive), "1,2,4,8", or a single value.
pub fn parse_batches(spec: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = spec.split_once("..") {
        let lo: u64 = a.trim().parse().context("bad sweep start")?;
        let hi: u64 = b.trim().parse().context("bad sweep end")?;
        anyhow::ensure!(lo >= 1 && hi >= lo, "empty or invalid sweep '{spec}'");
        return Ok((lo..=hi).collect());
    }
    let list: Vec<u64> = spec
        .split(',')
        .map(|s| s.trim().parse::<u64>().context("bad batch value"))
        .collect::<Result<_>>()?;
    anyhow::ensure!(
        !list.is_empty() && list.iter().all(|&b| b >= 1),
        "empty sweep"
    );
    Ok(list)
}
