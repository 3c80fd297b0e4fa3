//! Single-writer directory output with atomic rename on completion.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

fn staging_path(dest: &Path) -> PathBuf {
    let name = dest
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    dest.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Write `files` into a fresh directory at `dest`, replacing any previous
/// directory there. Readers never observe a partially written directory.
pub fn write_dir(dest: &Path, files: &[(&str, &[u8])]) -> io::Result<()> {
    if let Some(parent) = dest.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let stage = staging_path(dest);
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    fs::create_dir_all(&stage)?;
    for (name, bytes) in files {
        let mut f = fs::File::create(stage.join(name))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    if dest.exists() {
        fs::remove_dir_all(dest)?;
    }
    fs::rename(&stage, dest)
}

/// Write one file via a sibling temp file and rename.
pub fn write_file(dest: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = dest.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let stage = staging_path(dest);
    {
        let mut f = fs::File::create(&stage)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&stage, dest)
}
