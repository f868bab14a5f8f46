use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use serde_json::{json, Map, Value};

/// Everything needed to rerun a command: its resolved flags, the derived
/// configurations, and the files it produced.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub flags: Value,
    pub resolved: Map<String, Value>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &'static str, flags: &impl Serialize) -> Self {
        Self {
            tool: "glam",
            version: env!("CARGO_PKG_VERSION"),
            command,
            flags: serde_json::to_value(flags)
                .unwrap_or_else(|e| json!({ "error": e.to_string() })),
            resolved: Map::new(),
            outputs: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: &impl Serialize) -> Self {
        let v = serde_json::to_value(value).unwrap_or_else(|e| json!({ "error": e.to_string() }));
        self.resolved.insert(key.to_string(), v);
        self
    }

    pub fn outputs(mut self, files: &[&str]) -> Self {
        self.outputs = files.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| glam_core::GlamError::Io { path, source: e })?;
        Ok(())
    }
}
