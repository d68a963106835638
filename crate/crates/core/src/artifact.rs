//! Write-once output files and float formatting shared by all artifacts.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to `path`, refusing to replace an existing file unless
/// `force` is set.
pub fn write_new(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::Exists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Decimal with 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(out: &mut String, v: f64) {
    if v == 0.0 {
        out.push_str(if v.is_sign_negative() { "-0.0" } else { "0.0" });
    } else {
        write!(out, "{v:.16e}").expect("string write");
    }
}
