//! Tensor directories: one `TALLTEN1` file per named tensor.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Result, TallError};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::NamedTensors;

pub const CONFIG_FILE: &str = "config.json";

pub fn save_params(dir: &Path, params: &NamedTensors) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TallError::io(dir, e))?;
    for (name, t) in params {
        write_tensor(&dir.join(format!("{name}.bin")), t)?;
    }
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<NamedTensors> {
    let mut out = NamedTensors::new();
    let entries = std::fs::read_dir(dir).map_err(|e| TallError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| TallError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| TallError::config(format!("bad tensor file name {}", path.display())))?;
            out.insert(name.to_string(), read_tensor(&path)?);
        }
    }
    Ok(out)
}

/// Writes `config.json` and `params/` under `dir`.
pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TallError::io(dir, e))?;
    let cfg = dir.join(CONFIG_FILE);
    std::fs::write(&cfg, serde_json::to_vec_pretty(&model.config)?).map_err(|e| TallError::io(cfg, e))?;
    save_params(&dir.join("params"), &model.params)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let cfg = dir.join(CONFIG_FILE);
    let text = std::fs::read(&cfg).map_err(|e| TallError::io(&cfg, e))?;
    let config: ModelConfig = serde_json::from_slice(&text)?;
    Model::from_params(config, load_params(&dir.join("params"))?)
}
