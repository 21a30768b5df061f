use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// A fresh `<outdir>/<command>-<unix seconds>[-k]` directory. Every file a
/// run produces goes in here.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(outdir: &Path, command: &str) -> io::Result<Self> {
        fs::create_dir_all(outdir)?;
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut k = 0usize;
        loop {
            let name = if k == 0 {
                format!("{command}-{stamp}")
            } else {
                format!("{command}-{stamp}-{k}")
            };
            let path = outdir.join(name);
            // create_dir fails on an existing directory, so two runs
            // started in the same second never share one
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        fs::write(self.path.join(name), bytes)
    }

    pub fn write_json<V: Serialize>(&self, name: &str, value: &V) -> io::Result<()> {
        let mut text = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        text.push(b'\n');
        self.write(name, &text)
    }
}
