//! Provenance sidecars: every output file gets a `.provenance.json`
//! neighbor recording the inputs, parameters, and seed of the run.
//! Nothing time- or host-dependent goes in, so identical runs produce
//! identical sidecars.

use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{Map, Value};

pub struct Provenance {
    map: Map<String, Value>,
    inputs: Map<String, Value>,
    params: Map<String, Value>,
}

impl Provenance {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut map = Map::new();
        map.insert("tool".into(), Value::from("brainparc"));
        map.insert("version".into(), Value::from(env!("CARGO_PKG_VERSION")));
        map.insert("command".into(), Value::from(command));
        map.insert("seed".into(), Value::from(seed));
        Provenance {
            map,
            inputs: Map::new(),
            params: Map::new(),
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        self.inputs
            .insert(key.into(), Value::from(path.display().to_string()));
        self
    }

    pub fn param(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.params.insert(key.into(), value.into());
        self
    }

    /// Write `<output>.provenance.json` next to an output file.
    pub fn write_for(&self, output: &Path) -> Result<()> {
        let mut map = self.map.clone();
        map.insert("inputs".into(), Value::Object(self.inputs.clone()));
        map.insert("parameters".into(), Value::Object(self.params.clone()));
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".provenance.json");
        let path = output.with_file_name(name);
        let text = serde_json::to_string_pretty(&Value::Object(map))?;
        std::fs::write(&path, text.as_bytes())
            .with_context(|| format!("writing provenance {}", path.display()))
    }
}
