use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub manifest: PathBuf,
    pub k_default: usize,
    /// Backbone key; only `"mock"` has weights in this build.
    pub backbone: String,
    pub clip: String,
    pub captioner: String,
    /// Origins allowed by CORS; `"*"` allows any.
    pub cors_allow: Vec<String>,
    /// Requests allowed to wait for the backbone before new ones are turned away.
    pub queue_depth: usize,
    pub deadline_secs: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint: PathBuf::new(),
            index: PathBuf::new(),
            manifest: PathBuf::new(),
            k_default: 10,
            backbone: "mock".into(),
            clip: "mock".into(),
            captioner: "stub".into(),
            cors_allow: Vec::new(),
            queue_depth: 8,
            deadline_secs: 30.0,
        }
    }
}

impl ServiceConfig {
    /// Reads a TOML file; relative asset paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Startup(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| ServiceError::Startup(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.checkpoint, &mut cfg.index, &mut cfg.manifest] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}
