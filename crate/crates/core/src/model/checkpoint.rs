//! Text manifest plus little-endian f32 blob.
//!
//! ```text
//! format=sbat-checkpoint/1
//! seed=7
//! blob=best.bin
//! config.d_model=64
//! ...
//! param.count=2
//! param.0.name=input.image.w
//! param.0.shape=32x64
//! param.0.offset=0
//! meta.data_dir=data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ModelConfig, SbatModel};
use crate::error::{Error, Result};
use crate::numkit::{Real, Tensor};

const FORMAT: &str = "sbat-checkpoint/1";

/// Weights plus the information needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SbatModel<f32>,
    pub seed: u64,
    /// Free-form string metadata (no newlines).
    pub meta: BTreeMap<String, String>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Writes `manifest` and its blob (same stem, `.bin`).
pub fn save_checkpoint<R: Real>(
    manifest: &Path,
    model: &SbatModel<R>,
    seed: u64,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let blob = blob_path(manifest);
    let blob_name = blob
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", manifest.display())))?
        .to_string();
    let mut text = format!("format={FORMAT}\nseed={seed}\nblob={blob_name}\n");
    let cfg = serde_json::to_value(model.config())?;
    if let serde_json::Value::Object(fields) = cfg {
        for (k, v) in fields {
            text.push_str(&format!("config.{k}={v}\n"));
        }
    }
    let params = model.params();
    text.push_str(&format!("param.count={}\n", params.len()));
    let mut bytes = Vec::with_capacity(params.numel() * 4);
    for (i, (_, p)) in params.iter().enumerate() {
        let shape: Vec<String> = p.value.shape().iter().map(|s| s.to_string()).collect();
        text.push_str(&format!("param.{i}.name={}\n", p.name));
        text.push_str(&format!("param.{i}.shape={}\n", shape.join("x")));
        text.push_str(&format!("param.{i}.offset={}\n", bytes.len()));
        for v in p.value.data() {
            bytes.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    for (k, v) in meta {
        if v.contains('\n') || k.contains('=') {
            return Err(Error::Config(format!("metadata entry {k:?} is not a single line")));
        }
        text.push_str(&format!("meta.{k}={v}\n"));
    }
    if let Some(dir) = manifest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    fs::write(manifest, text).map_err(|e| Error::io(manifest, e))
}

/// Reads a manifest and its blob, matching parameters by name and shape.
pub fn load_checkpoint(manifest: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(manifest, i + 1, "expected key=value"))?;
        entries.insert(k.to_string(), (i + 1, v.to_string()));
    }
    let get = |k: &str| -> Result<&str> {
        entries
            .get(k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| parse_err(manifest, 0, format!("missing key {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        let (line, v) = entries
            .get(k)
            .ok_or_else(|| parse_err(manifest, 0, format!("missing key {k}")))?;
        v.parse()
            .map_err(|_| parse_err(manifest, *line, format!("{k} is not an integer")))
    };
    if get("format")? != FORMAT {
        return Err(parse_err(manifest, 1, format!("unsupported format {:?}", get("format")?)));
    }
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| parse_err(manifest, 2, "seed is not an integer"))?;

    let mut cfg_map = serde_json::Map::new();
    let mut meta = BTreeMap::new();
    for (k, (line, v)) in &entries {
        if let Some(field) = k.strip_prefix("config.") {
            let value: serde_json::Value = serde_json::from_str(v)
                .map_err(|e| parse_err(manifest, *line, format!("{k}: {e}")))?;
            cfg_map.insert(field.to_string(), value);
        } else if let Some(field) = k.strip_prefix("meta.") {
            meta.insert(field.to_string(), v.clone());
        }
    }
    let cfg: ModelConfig = serde_json::from_value(serde_json::Value::Object(cfg_map))?;
    let mut model = SbatModel::<f32>::new(cfg, seed)?;

    let blob = match manifest.parent() {
        Some(dir) => dir.join(get("blob")?),
        None => PathBuf::from(get("blob")?),
    };
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let count = num("param.count")?;
    if count != model.params().len() {
        return Err(parse_err(
            manifest,
            entries["param.count"].0,
            format!("{count} parameters, model expects {}", model.params().len()),
        ));
    }
    for i in 0..count {
        let name = get(&format!("param.{i}.name"))?;
        let shape_key = format!("param.{i}.shape");
        let shape: Vec<usize> = get(&shape_key)?
            .split('x')
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(manifest, entries[&shape_key].0, "bad shape"))?;
        let offset = num(&format!("param.{i}.offset"))?;
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| parse_err(manifest, 0, format!("unknown parameter {name}")))?;
        let p = model.params_mut().get_mut(id);
        if p.value.shape() != shape.as_slice() {
            return Err(parse_err(
                manifest,
                entries[&shape_key].0,
                format!("{name} has shape {shape:?}, model expects {:?}", p.value.shape()),
            ));
        }
        let len = p.value.numel() * 4;
        let chunk = bytes
            .get(offset..offset + len)
            .ok_or_else(|| parse_err(manifest, 0, format!("blob too short for {name}")))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        p.value = Tensor::new(&shape, data)?;
    }
    Ok(Checkpoint { model, seed, meta })
}
