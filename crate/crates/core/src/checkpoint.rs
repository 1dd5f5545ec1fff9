//! Checkpoint container: human-readable header, raw little-endian f64 payload.
//!
//! Layout:
//!
//! ```text
//! CRFT-CKPT 1\n
//! {json header: kind, config, train_steps, seed, tensor directory}\n
//! <payload: concatenated f64 little-endian values>
//! ```
//!
//! Directory offsets are byte offsets into the payload. Save/load round-trips
//! are byte-exact; corrupt or truncated files produce structured errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infoflow::CrftConfig;
use crate::intervention::{InterventionParams, LowRankEdit};
use crate::model::{MicroTransformer, ModelConfig};

pub const MAGIC: &str = "CRFT-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    train_steps: u64,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Extra metadata stored alongside intervention parameters so evaluation can
/// re-identify positions with the same settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct InterventionMeta {
    d_model: usize,
    rank: usize,
    train_r: bool,
    layers: Vec<usize>,
    n_groups: usize,
    crft: CrftConfig,
}

fn write_container(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    train_steps: u64,
    seed: u64,
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let mut directory = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        directory.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += (data.len() * 8) as u64;
    }
    let header = Header {
        kind: kind.to_string(),
        config,
        train_steps,
        seed,
        tensors: directory,
    };
    let mut buf = Vec::new();
    writeln!(buf, "{MAGIC} {VERSION}")?;
    let header_json = serde_json::to_string(&header)?;
    writeln!(buf, "{header_json}")?;
    for (_, _, data) in tensors {
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let first_nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptCheckpoint("missing magic line".into()))?;
    let magic_line = std::str::from_utf8(&bytes[..first_nl])
        .map_err(|_| Error::CorruptCheckpoint("magic line is not utf-8".into()))?;
    let mut parts = magic_line.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::CorruptCheckpoint(format!("bad magic: {magic_line:?}")));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::CorruptCheckpoint("unreadable version".into()))?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let rest = &bytes[first_nl + 1..];
    let second_nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptCheckpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&rest[..second_nl])
        .map_err(|e| Error::CorruptCheckpoint(format!("header parse: {e}")))?;
    let payload = rest[second_nl + 1..].to_vec();
    Ok((header, payload))
}

fn tensor_from_payload(payload: &[u8], entry: &TensorEntry) -> Result<Vec<f64>> {
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + numel * 8;
    if end > payload.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "tensor {} runs past payload ({} > {})",
            entry.name,
            end,
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(numel);
    for chunk in payload[start..end].chunks_exact(8) {
        out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(out)
}

pub fn save_model(model: &MicroTransformer, path: &Path) -> Result<()> {
    let tensors: Vec<(String, Vec<usize>, &[f64])> = model
        .named_tensors()
        .into_iter()
        .map(|(n, s, d)| (n, s, d.as_slice()))
        .collect();
    write_container(
        path,
        "model",
        serde_json::to_value(&model.cfg)?,
        model.train_steps,
        model.seed,
        &tensors,
    )
}

pub fn load_model(path: &Path) -> Result<MicroTransformer> {
    let (header, payload) = read_container(path)?;
    if header.kind != "model" {
        return Err(Error::CorruptCheckpoint(format!(
            "expected a model checkpoint, found kind {:?}",
            header.kind
        )));
    }
    let cfg: ModelConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("config parse: {e}")))?;
    cfg.validate()?;
    let mut model = MicroTransformer::new(cfg, header.seed)?;
    model.train_steps = header.train_steps;

    let by_name: BTreeMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    for (name, shape, dst) in model
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s, ()))
        .collect::<Vec<_>>()
    {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        if entry.shape != shape {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name}: shape {:?} in file, expected {shape:?}",
                entry.shape
            )));
        }
        let _ = dst;
    }
    for (name, data) in model.named_tensors_mut() {
        let entry = by_name.get(name.as_str()).expect("checked above");
        *data = tensor_from_payload(&payload, entry)?;
    }
    Ok(model)
}

pub fn save_intervention(
    params: &InterventionParams,
    crft: &CrftConfig,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let meta = InterventionMeta {
        d_model: params.d_model,
        rank: params.rank,
        train_r: params.train_r,
        layers: params.layers.clone(),
        n_groups: params.n_groups,
        crft: crft.clone(),
    };
    let mut tensors: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for ((layer, group), edit) in &params.edits {
        let base = format!("layer{layer}.group{group}");
        tensors.push((format!("{base}.R"), vec![params.rank, params.d_model], &edit.r_rows));
        tensors.push((format!("{base}.W"), vec![params.rank, params.d_model], &edit.w));
        tensors.push((format!("{base}.b"), vec![params.rank], &edit.b));
    }
    write_container(path, "intervention", serde_json::to_value(&meta)?, 0, seed, &tensors)
}

pub fn load_intervention(path: &Path) -> Result<(InterventionParams, CrftConfig)> {
    let (header, payload) = read_container(path)?;
    if header.kind != "intervention" {
        return Err(Error::CorruptCheckpoint(format!(
            "expected an intervention checkpoint, found kind {:?}",
            header.kind
        )));
    }
    let meta: InterventionMeta = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("config parse: {e}")))?;
    let by_name: BTreeMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    let mut edits = BTreeMap::new();
    for &layer in &meta.layers {
        for group in 0..meta.n_groups {
            let base = format!("layer{layer}.group{group}");
            let fetch = |suffix: &str, shape: &[usize]| -> Result<Vec<f64>> {
                let name = format!("{base}.{suffix}");
                let entry = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
                if entry.shape != shape {
                    return Err(Error::CorruptCheckpoint(format!(
                        "tensor {name}: shape {:?} in file, expected {shape:?}",
                        entry.shape
                    )));
                }
                tensor_from_payload(&payload, entry)
            };
            let r_rows = fetch("R", &[meta.rank, meta.d_model])?;
            let w = fetch("W", &[meta.rank, meta.d_model])?;
            let b = fetch("b", &[meta.rank])?;
            edits.insert((layer, group), LowRankEdit { r_rows, w, b });
        }
    }
    Ok((
        InterventionParams {
            d_model: meta.d_model,
            rank: meta.rank,
            train_r: meta.train_r,
            layers: meta.layers,
            n_groups: meta.n_groups,
            edits,
        },
        meta.crft,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infoflow::CrftConfig;
    use crate::model::ModelConfig;

    fn tiny_model() -> MicroTransformer {
        MicroTransformer::new(
            ModelConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 8,
                d_ff: 16,
                vocab_size: 11,
                max_seq: 16,
                dropout: 0.0,
            },
            77,
        )
        .unwrap()
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny_model();
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(m, loaded);
        assert_eq!(m.freeze_digest(), loaded.freeze_digest());
    }

    #[test]
    fn file_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let m = tiny_model();
        save_model(&m, &p1).unwrap();
        let loaded = load_model(&p1).unwrap();
        save_model(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny_model();
        save_model(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_model(&path) {
            Err(Error::CorruptCheckpoint(_)) => {}
            other => panic!("expected corrupt-checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny_model();
        save_model(&m, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Bump the version digit in "CRFT-CKPT 1\n".
        let pos = bytes.iter().position(|&b| b == b'1').unwrap();
        bytes[pos] = b'9';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn bad_magic_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, b"NOT-A-CKPT 1\n{}\n").unwrap();
        assert!(matches!(load_model(&path), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn intervention_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.ckpt");
        let params = InterventionParams::init(8, 2, &[0, 1], 2, true, 5).unwrap();
        let cfg = CrftConfig::default();
        save_intervention(&params, &cfg, 5, &path).unwrap();
        let (loaded, loaded_cfg) = load_intervention(&path).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(cfg, loaded_cfg);
    }
}
