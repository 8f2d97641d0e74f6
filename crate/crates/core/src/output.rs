//! Shared text formatting for CSV artifacts.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

/// Formats a float with 17 significant digits, locale-independent.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        // Avoids "-0.0000000000000000e0" for negative zero.
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}

/// Writes `contents` to `path` via a temporary file in the same directory and
/// a rename, so readers never observe a partially written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, std::f64::consts::PI] {
            let s = fmt_float(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_float(-0.0), fmt_float(0.0));
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
