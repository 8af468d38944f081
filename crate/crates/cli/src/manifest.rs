use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;

/// Record of one file-writing invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub seeds: Vec<u64>,
    pub build: String,
    pub wall_seconds: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(seeds: Vec<u64>, start: Instant) -> Self {
        let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
        RunManifest {
            command: std::env::args().collect(),
            seeds,
            build: format!("mxlb {} ({profile})", env!("CARGO_PKG_VERSION")),
            wall_seconds: start.elapsed().as_secs_f64(),
            outputs: Vec::new(),
        }
    }

    pub fn outputs<P: AsRef<Path>>(mut self, paths: impl IntoIterator<Item = P>) -> Self {
        self.outputs
            .extend(paths.into_iter().map(|p| p.as_ref().display().to_string()));
        self
    }

    /// `<primary>.manifest.json` next to the primary output.
    pub fn write_beside(self, primary: &Path) -> Result<()> {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        self.write_to(&PathBuf::from(name))
    }

    pub fn write_to(mut self, path: &Path) -> Result<()> {
        self.outputs.push(path.display().to_string());
        let json = serde_json::to_string_pretty(&self)?;
        super::write(path, format!("{json}\n").as_bytes())?;
        println!("manifest: {}", path.display());
        Ok(())
    }
}
