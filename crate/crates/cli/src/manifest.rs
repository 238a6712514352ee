//! Per-run manifest: subcommand, crate version, seed, and a hash of the
//! effective configuration. Deliberately free of timestamps and absolute
//! paths so identical runs produce byte-identical output trees.

use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub struct RunManifest {
    lines: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            lines: vec![
                ("command".into(), command.into()),
                ("version".into(), env!("CARGO_PKG_VERSION").into()),
            ],
        }
    }

    pub fn field(mut self, key: &str, value: impl ToString) -> Self {
        self.lines.push((key.into(), value.to_string()));
        self
    }

    /// Hash of the effective config text that shaped this run.
    pub fn config(self, text: &str) -> Self {
        let digest = Sha256::digest(text.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.field("config_hash", hex)
    }

    pub fn write(&self, out_dir: &Path) -> std::io::Result<()> {
        let mut text = String::new();
        for (k, v) in &self.lines {
            text.push_str(&format!("{k} {v}\n"));
        }
        fs::write(out_dir.join("run_manifest.txt"), text)
    }
}
