//! TOML configuration. Command-line flags take precedence over file values.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub gate: GateSection,
    #[serde(default)]
    pub io: IoSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub d: Option<f64>,
    pub selector: Option<String>,
    pub k_fraction: Option<f64>,
    pub direct_weights: Option<(f64, f64)>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    pub content: Option<PathBuf>,
    pub style: Option<PathBuf>,
    pub style_emb: Option<PathBuf>,
    pub content_emb: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
