//! Adapter archives: gzip-compressed tar with a top-level `comet.toml`.

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CONFIG_ENTRY: &str = "comet.toml";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive is empty")]
    Empty,
    #[error("archive is not a gzip-compressed tar: {0}")]
    Format(io::Error),
    #[error("archive has no top-level {CONFIG_ENTRY}")]
    MissingConfig,
    #[error("{CONFIG_ENTRY} is not UTF-8")]
    ConfigEncoding,
    #[error("checksum mismatch: expected {expected}, got {actual}")]
    Checksum { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn normalized(path: &Path) -> String {
    let s = path.to_string_lossy();
    s.strip_prefix("./").unwrap_or(&s).to_string()
}

/// Reads the top-level `comet.toml` without unpacking anything else.
pub fn read_config(archive: &[u8]) -> Result<String, ArchiveError> {
    if archive.is_empty() {
        return Err(ArchiveError::Empty);
    }
    let mut tar = tar::Archive::new(GzDecoder::new(archive));
    for entry in tar.entries().map_err(ArchiveError::Format)? {
        let mut entry = entry.map_err(ArchiveError::Format)?;
        let path = entry.path().map_err(ArchiveError::Format)?;
        if normalized(&path) == CONFIG_ENTRY {
            let mut text = Vec::new();
            entry.read_to_end(&mut text).map_err(ArchiveError::Format)?;
            return String::from_utf8(text).map_err(|_| ArchiveError::ConfigEncoding);
        }
    }
    Err(ArchiveError::MissingConfig)
}

/// Verifies `archive` against `sha256` and unpacks it into `dest`.
/// Entries escaping `dest` are skipped by the tar reader.
pub fn verify_and_unpack(archive: &Path, sha256: &str, dest: &Path) -> Result<(), ArchiveError> {
    let actual = sha256_file(archive)?;
    if !actual.eq_ignore_ascii_case(sha256) {
        return Err(ArchiveError::Checksum {
            expected: sha256.to_string(),
            actual,
        });
    }
    let mut tar = tar::Archive::new(GzDecoder::new(File::open(archive)?));
    tar.set_preserve_permissions(true);
    tar.unpack(dest).map_err(ArchiveError::Format)?;
    if !dest.join(CONFIG_ENTRY).is_file() {
        return Err(ArchiveError::MissingConfig);
    }
    Ok(())
}

/// Builds an archive from `(name, bytes, mode)` entries.
pub fn build(entries: &[(&str, &[u8], u32)]) -> io::Result<Vec<u8>> {
    let mut tar = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::fast()));
    for (name, bytes, mode) in entries {
        let mut h = tar::Header::new_gnu();
        h.set_size(bytes.len() as u64);
        h.set_mode(*mode);
        h.set_mtime(0);
        h.set_cksum();
        tar.append_data(&mut h, name, *bytes)?;
    }
    tar.into_inner()?.finish()
}

/// Packs a directory tree; paths in the archive are relative to `dir`.
pub fn pack_dir(dir: &Path) -> io::Result<Vec<u8>> {
    pack_dir_with(dir, &[])
}

/// Packs `dir` plus extra files given as `(archive name, source path)`.
pub fn pack_dir_with(dir: &Path, extra: &[(&str, &Path)]) -> io::Result<Vec<u8>> {
    let mut tar = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::fast()));
    tar.follow_symlinks(true);
    tar.append_dir_all(".", dir)?;
    for (name, path) in extra {
        tar.append_path_with_name(path, name)?;
    }
    tar.into_inner()?.finish()
}
