use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_blob, write_blob};

const MANIFEST: &str = "manifest.txt";
const CONFIG: &str = "config.json";

/// Writes `config.json`, one `SRMT` blob per parameter and `manifest.txt`
/// with `name file dims` lines.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG), serde_json::to_string_pretty(&model.config)?)?;
    let mut manifest = String::new();
    for (k, (name, t)) in model.store.names().iter().zip(model.store.tensors()).enumerate() {
        let file = format!("p{k:03}.srmt");
        write_blob(&dir.join(&file), t)?;
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(manifest, "{name} {file} {}", dims.join("x")).expect("string write");
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Rebuilds the model from `config.json` and loads every blob, checking
/// names and shapes against the architecture.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG))?)?;
    let mut model = Model::new(config);
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, architecture has {}",
            lines.len(),
            model.store.len()
        )));
    }
    let mut tensors = Vec::with_capacity(lines.len());
    for (line, want) in lines.iter().zip(model.store.names()) {
        let [name, file, dims] = line.split_whitespace().collect::<Vec<_>>()[..] else {
            return Err(Error::Checkpoint(format!("malformed manifest line {line:?}")));
        };
        if name != want {
            return Err(Error::Checkpoint(format!("expected parameter {want}, found {name}")));
        }
        let t = read_blob(&dir.join(file))?;
        let listed: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        if listed.join("x") != dims {
            return Err(Error::Checkpoint(format!(
                "{name}: blob shape {:?} but manifest says {dims}",
                t.shape()
            )));
        }
        tensors.push(t);
    }
    model.load_parameters(tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(ModelConfig {
            init_seed: 5,
            ..ModelConfig::default()
        });
        model.store.tensors_mut()[3].data_mut()[0] = 0.123_456_79;
        save_checkpoint(&model, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.store.tensors(), model.store.tensors());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::default());
        save_checkpoint(&model, dir.path()).unwrap();
        let cfg = ModelConfig {
            enhancer_depth: 2,
            ..ModelConfig::default()
        };
        fs::write(dir.path().join(CONFIG), serde_json::to_string(&cfg).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
