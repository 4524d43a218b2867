//! Moving archives to agents and result files back.
//!
//! `local-exec` copies through the local filesystem; `secure-copy` shells
//! out to `scp` in batch mode against the node's `[user@]host`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

use comet_core::{NodeDescriptor, NodeRole, Transport};

#[derive(Debug, Clone)]
pub struct Delivery {
    pub scp_program: PathBuf,
    /// Scratch space for secure-copy uploads.
    pub outgoing: PathBuf,
    /// Test hook: flip one byte of the copy delivered to this role.
    pub corrupt_in_flight: Option<NodeRole>,
}

impl Delivery {
    pub fn new(outgoing: impl Into<PathBuf>) -> Self {
        Self {
            scp_program: PathBuf::from("scp"),
            outgoing: outgoing.into(),
            corrupt_in_flight: None,
        }
    }

    /// Places `bytes` as `incoming/name` on the node.
    pub fn send(&self, node: &NodeDescriptor, incoming: &str, name: &str, bytes: &[u8]) -> Result<(), String> {
        let copy;
        let mut bytes = bytes;
        if self.corrupt_in_flight == Some(node.role) && !bytes.is_empty() {
            let mut flipped = bytes.to_vec();
            let mid = flipped.len() / 2;
            flipped[mid] ^= 0x01;
            copy = flipped;
            bytes = &copy;
        }
        match node.transport {
            Transport::LocalExec => {
                let dest = Path::new(incoming).join(name);
                let part = dest.with_extension("part");
                fs::write(&part, bytes)
                    .and_then(|_| fs::rename(&part, &dest))
                    .map_err(|e| format!("copy to {}: {e}", dest.display()))
            }
            Transport::SecureCopy => {
                fs::create_dir_all(&self.outgoing).map_err(|e| e.to_string())?;
                let local = self.outgoing.join(format!("{}-{name}", node.role));
                fs::write(&local, bytes).map_err(|e| e.to_string())?;
                let remote = format!("{}:{incoming}/{name}", node.ssh_target());
                let out = self.scp(&[local.as_os_str(), remote.as_ref()]);
                let _ = fs::remove_file(&local);
                out
            }
        }
    }

    /// Copies the regular files directly inside `remote_dir` into `dest`.
    pub fn fetch(&self, node: &NodeDescriptor, remote_dir: &str, dest: &Path) -> Result<Vec<PathBuf>, String> {
        fs::create_dir_all(dest).map_err(|e| e.to_string())?;
        match node.transport {
            Transport::LocalExec => {
                let mut got = Vec::new();
                let entries = fs::read_dir(remote_dir).map_err(|e| format!("{remote_dir}: {e}"))?;
                for entry in entries {
                    let entry = entry.map_err(|e| e.to_string())?;
                    if !entry.file_type().map_err(|e| e.to_string())?.is_file() {
                        continue;
                    }
                    let to = dest.join(entry.file_name());
                    copy_file(&entry.path(), &to).map_err(|e| format!("{}: {e}", entry.path().display()))?;
                    got.push(to);
                }
                Ok(got)
            }
            Transport::SecureCopy => {
                let before = listing(dest);
                let remote = format!("{}:{remote_dir}/*", node.ssh_target());
                self.scp(&[remote.as_ref(), dest.as_os_str()])?;
                Ok(listing(dest).into_iter().filter(|p| !before.contains(p)).collect())
            }
        }
    }

    fn scp(&self, args: &[&std::ffi::OsStr]) -> Result<(), String> {
        let out = Command::new(&self.scp_program)
            .args(["-B", "-q"])
            .args(args)
            .output()
            .map_err(|e| format!("{}: {e}", self.scp_program.display()))?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!(
                "scp exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ))
        }
    }
}

fn copy_file(from: &Path, to: &Path) -> io::Result<()> {
    // Appending agents may still be flushing; copy what is there.
    fs::copy(from, to).map(|_| ())
}

fn listing(dir: &Path) -> Vec<PathBuf> {
    fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default()
}
