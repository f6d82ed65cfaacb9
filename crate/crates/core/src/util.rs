//! Small filesystem helpers.

use std::io::Write;
use std::path::Path;

use crate::error::{io_err, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

/// Creates `dir` and its parents.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// A seed for a sub-task (an epoch's shuffle, one sample's augmentation, an
/// ablation cell) derived deterministically from a master seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master);
    for &p in parts {
        rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng.gen::<u64>() ^ p);
    }
    rng.gen()
}
