//! Run manifests: the configuration snapshot, input and output checksums
//! and tool version that make every output reproducible.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ToolkitConfig;

#[derive(Serialize)]
struct FileEntry {
    path: PathBuf,
    crc32: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    arguments: &'a [String],
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    config: &'a ToolkitConfig,
}

pub struct Recorder {
    command: String,
    arguments: Vec<String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, arguments: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            arguments,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) -> PathBuf {
        self.outputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    /// Writes `manifest-<command>.toml` into the output directory.
    pub fn write(&self, config: &ToolkitConfig) -> Result<PathBuf> {
        let entries = |paths: &[PathBuf]| -> Result<Vec<FileEntry>> {
            paths
                .iter()
                .map(|p| {
                    let crc = cbct_motion::io::file_checksum(p)?;
                    Ok(FileEntry {
                        path: p.clone(),
                        crc32: format!("{crc:08x}"),
                    })
                })
                .collect()
        };
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            arguments: &self.arguments,
            inputs: entries(&self.inputs)?,
            outputs: entries(&self.outputs)?,
            config,
        };
        let path = config.output_dir.join(format!("manifest-{}.toml", self.command));
        let text = toml::to_string(&manifest).context("serializing manifest")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
