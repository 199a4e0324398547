//! Cache directory resolution.

use std::path::PathBuf;

/// Environment variable overriding the cache location. This is the only
/// environment variable the crate reads.
pub const CACHE_DIR_ENV: &str = "CXRKIT_CACHE_DIR";

/// Directory for derived artifacts (preprocessed images, pretrained backbone
/// checkpoints): `$CXRKIT_CACHE_DIR` when set and nonempty, otherwise
/// `cxrkit-cache` under the system temp directory.
pub fn cache_dir() -> PathBuf {
    match std::env::var_os(CACHE_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => std::env::temp_dir().join("cxrkit-cache"),
    }
}
