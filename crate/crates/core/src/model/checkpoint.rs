//! Safetensors checkpoints with a JSON header describing the model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::config::{InjectionConfig, ModelConfig};
use super::csgo::CsgoModel;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const METADATA_KEY: &str = "csgo";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub injection: InjectionConfig,
    pub dtype: String,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

/// Writes every parameter plus the header.
pub fn save(model: &CsgoModel, injection: &InjectionConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        injection: *injection,
        dtype: dtype_name(model.dtype())?.to_string(),
    };
    let tensors = model.store().snapshot()?;
    let metadata = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&header)?)]);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    safetensors::serialize_to_file(tensors.iter(), Some(metadata), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    header_from_bytes(&bytes, path)
}

fn header_from_bytes(bytes: &[u8], path: &Path) -> Result<CheckpointHeader> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing {METADATA_KEY:?} header", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(raw)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint version {v} is not supported (expected {CHECKPOINT_VERSION})",
                path.display()
            )))
        }
        None => return Err(Error::Checkpoint(format!("{}: header has no version", path.display()))),
    }
    let header: CheckpointHeader = serde_json::from_value(value)?;
    header.model.validate()?;
    header.injection.validate()?;
    Ok(header)
}

/// Rebuilds the model and its saved injection config.
pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<(CsgoModel, InjectionConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = header_from_bytes(&bytes, path)?;
    let dtype = parse_dtype(&header.dtype)?;
    let tensors: BTreeMap<_, _> = candle_core::safetensors::load_buffer(&bytes, device)?
        .into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
        .collect::<Result<_>>()?;
    let model = CsgoModel::build(header.model.clone(), ParamStore::new(0), dtype, device)?;
    model.store().load(&tensors)?;
    Ok((model, header.injection))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = CsgoModel::new(ModelConfig::tiny(), 5, DType::F32, &Device::Cpu).unwrap();
        let inj = InjectionConfig::inference().with_tokens(2);
        save(&model, &inj, &path).unwrap();
        let (loaded, inj2) = load(&path, &Device::Cpu).unwrap();
        assert_eq!(inj, inj2);
        assert_eq!(loaded.config(), model.config());
        let a = model.store().snapshot().unwrap();
        let b = loaded.store().snapshot().unwrap();
        assert_eq!(a.len(), b.len());
        for (k, v) in &a {
            let x = v.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = b[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y, "{k}");
        }
    }

    #[test]
    fn rejects_missing_header_and_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.safetensors");
        let t = candle_core::Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap();
        safetensors::serialize_to_file([("x", &t)], None, &path).unwrap();
        assert!(matches!(load(&path, &Device::Cpu), Err(Error::Checkpoint(_))));

        let meta = HashMap::from([(METADATA_KEY.to_string(), r#"{"version": 99}"#.to_string())]);
        safetensors::serialize_to_file([("x", &t)], Some(meta), &path).unwrap();
        let err = read_header(&path).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }
}
