//! Versioned binary weight container shared by every trainable model.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a u64 header
//! length, a JSON header, then the raw little-endian tensor payload. The
//! header carries the model kind, an echo of the config the weights were
//! trained with (so a loader can rebuild the exact architecture), and the
//! name/shape/offset index of every tensor. Tensors are written in sorted
//! name order, making a checkpoint a pure function of the weights.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::VarMap;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TXSRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload (which starts right after the header).
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    /// Which model these weights belong to: "codec", "recognizer", "unet".
    pub kind: String,
    /// Echo of the builder config, enough to reconstruct the architecture.
    pub config: serde_json::Value,
    /// Element type of every tensor in the payload: "f32" or "f64".
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::msg(format!(
            "checkpoints store f32 or f64 weights, not {other:?}"
        ))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => Ok(flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()),
        DType::F64 => Ok(flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()),
        other => Err(Error::msg(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn tensor_from_bytes(
    bytes: &[u8],
    shape: &[usize],
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let vals: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_vec(vals, shape, device)?
        }
        DType::F64 => {
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            Tensor::from_vec(vals, shape, device)?
        }
        other => return Err(Error::msg(format!("unsupported checkpoint dtype {other:?}"))),
    };
    Ok(t)
}

/// Writes every variable of `varmap` to `path`, tagged with `kind` and a
/// JSON echo of the model config. The write goes through a temp file and a
/// rename so a crash never leaves a truncated checkpoint behind.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: &serde_json::Value,
    varmap: &VarMap,
) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    if names.is_empty() {
        return Err(ckpt_err(path, "refusing to write a checkpoint with no tensors"));
    }

    let dtype = data[names[0]].dtype();
    let dtype_str = dtype_name(dtype)?;
    let mut entries = Vec::with_capacity(names.len());
    let mut payload = Vec::new();
    for name in names {
        let var = &data[name];
        if var.dtype() != dtype {
            return Err(ckpt_err(
                path,
                format!("mixed dtypes: {name} is {:?}, expected {dtype:?}", var.dtype()),
            ));
        }
        let bytes = tensor_bytes(var.as_tensor())?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
            offset: payload.len() as u64,
            byte_len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config: config.clone(),
        dtype: dtype_str.to_string(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(20 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses the container header and returns it along with the payload bytes.
fn read_container(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let raw = std::fs::read(path).map_err(|e| ckpt_err(path, format!("read failed: {e}")))?;
    if raw.len() < 20 || &raw[..8] != MAGIC {
        return Err(ckpt_err(path, "not a weight checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(ckpt_err(
            path,
            format!("unsupported container version {version}, expected {VERSION}"),
        ));
    }
    let header_len = u64::from_le_bytes(raw[12..20].try_into().unwrap()) as usize;
    if raw.len() < 20 + header_len {
        return Err(ckpt_err(path, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&raw[20..20 + header_len])
        .map_err(|e| ckpt_err(path, format!("malformed header: {e}")))?;
    let payload = raw[20 + header_len..].to_vec();
    for entry in &header.tensors {
        let end = entry.offset + entry.byte_len;
        if end as usize > payload.len() {
            return Err(ckpt_err(
                path,
                format!("tensor {} extends past the payload", entry.name),
            ));
        }
    }
    Ok((header, payload))
}

/// Reads only the header — for config echo and inspection.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_container(path)?.0)
}

/// Fills an already-built model's `varmap` from a checkpoint.
///
/// The variable names and shapes must match the file exactly (both
/// directions); the stored values are converted to each variable's dtype.
/// `expected_kind` guards against loading weights into the wrong model.
pub fn load_checkpoint(path: &Path, expected_kind: &str, varmap: &VarMap) -> Result<CheckpointHeader> {
    let (header, payload) = read_container(path)?;
    if header.kind != expected_kind {
        return Err(ckpt_err(
            path,
            format!("holds `{}` weights, expected `{expected_kind}`", header.kind),
        ));
    }
    let file_dtype = match header.dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(ckpt_err(path, format!("unknown dtype `{other}`"))),
    };

    let data = varmap.data().lock().unwrap();
    let mut wanted: Vec<&String> = data.keys().collect();
    wanted.sort();
    let in_file: std::collections::BTreeMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    if wanted.len() != in_file.len() {
        return Err(ckpt_err(
            path,
            format!(
                "model has {} tensors but the file has {}",
                wanted.len(),
                in_file.len()
            ),
        ));
    }
    for name in wanted {
        let entry = in_file
            .get(name.as_str())
            .ok_or_else(|| ckpt_err(path, format!("missing tensor {name}")))?;
        let var = &data[name];
        if var.dims() != entry.shape.as_slice() {
            return Err(ckpt_err(
                path,
                format!(
                    "tensor {name}: model shape {:?} but file shape {:?}",
                    var.dims(),
                    entry.shape
                ),
            ));
        }
        let bytes = &payload[entry.offset as usize..(entry.offset + entry.byte_len) as usize];
        let t = tensor_from_bytes(bytes, &entry.shape, file_dtype, var.device())?
            .to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use candle_nn::{Init, VarBuilder};

    fn dev() -> Device {
        Device::Cpu
    }

    fn build_map(dtype: DType, fill: f64) -> VarMap {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &dev());
        let _ = vb
            .get_with_hints((3, 4), "layer.weight", Init::Const(fill))
            .unwrap();
        let _ = vb
            .get_with_hints((3,), "layer.bias", Init::Const(fill * 2.0))
            .unwrap();
        varmap
    }

    fn values(varmap: &VarMap, name: &str) -> Vec<f32> {
        let data = varmap.data().lock().unwrap();
        data[name]
            .as_tensor()
            .to_dtype(DType::F32)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
    }

    #[test]
    fn roundtrip_restores_weights_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let src = build_map(DType::F32, 0.25);
        crate::init::init_weights(&src, 3, &[]).unwrap();
        let cfg = serde_json::json!({"hidden": 4, "note": "test"});
        save_checkpoint(&path, "codec", &cfg, &src).unwrap();

        let dst = build_map(DType::F32, 9.0);
        let header = load_checkpoint(&path, "codec", &dst).unwrap();
        assert_eq!(header.kind, "codec");
        assert_eq!(header.config["hidden"], 4);
        assert_eq!(header.dtype, "f32");
        assert_eq!(values(&src, "layer.weight"), values(&dst, "layer.weight"));
        assert_eq!(values(&src, "layer.bias"), values(&dst, "layer.bias"));

        let peek = read_header(&path).unwrap();
        assert_eq!(peek.tensors.len(), 2);
        // Sorted name order.
        assert_eq!(peek.tensors[0].name, "layer.bias");
        assert_eq!(peek.tensors[1].name, "layer.weight");
    }

    #[test]
    fn wrong_kind_wrong_shape_and_corruption_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let src = build_map(DType::F32, 1.0);
        save_checkpoint(&path, "codec", &serde_json::json!({}), &src).unwrap();

        // Kind mismatch.
        let dst = build_map(DType::F32, 0.0);
        assert!(load_checkpoint(&path, "unet", &dst).is_err());

        // Shape mismatch: model with a differently-sized weight.
        let other = VarMap::new();
        let vb = VarBuilder::from_varmap(&other, DType::F32, &dev());
        let _ = vb
            .get_with_hints((3, 5), "layer.weight", Init::Const(0.0))
            .unwrap();
        let _ = vb
            .get_with_hints((3,), "layer.bias", Init::Const(0.0))
            .unwrap();
        let err = load_checkpoint(&path, "codec", &other).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");

        // Tensor-count mismatch.
        let fewer = VarMap::new();
        let vb = VarBuilder::from_varmap(&fewer, DType::F32, &dev());
        let _ = vb
            .get_with_hints((3, 4), "layer.weight", Init::Const(0.0))
            .unwrap();
        assert!(load_checkpoint(&path, "codec", &fewer).is_err());

        // Corrupted magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_checkpoint(&bad, "codec", &dst).is_err());

        // Truncated payload.
        let full = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &full[..full.len() - 8]).unwrap();
        assert!(load_checkpoint(&cut, "codec", &dst).is_err());
    }

    #[test]
    fn dtype_converts_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let src = build_map(DType::F32, 0.5);
        save_checkpoint(&path, "codec", &serde_json::json!({}), &src).unwrap();
        let dst64 = build_map(DType::F64, 0.0);
        let header = load_checkpoint(&path, "codec", &dst64).unwrap();
        assert_eq!(header.dtype, "f32");
        assert_eq!(values(&dst64, "layer.weight"), values(&src, "layer.weight"));
    }

    #[test]
    fn identical_weights_produce_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let a_path = dir.path().join("a.ckpt");
        let b_path = dir.path().join("b.ckpt");
        let a = build_map(DType::F32, 0.0);
        let b = build_map(DType::F32, 0.0);
        crate::init::init_weights(&a, 11, &[]).unwrap();
        crate::init::init_weights(&b, 11, &[]).unwrap();
        let cfg = serde_json::json!({"k": 1});
        save_checkpoint(&a_path, "unet", &cfg, &a).unwrap();
        save_checkpoint(&b_path, "unet", &cfg, &b).unwrap();
        assert_eq!(std::fs::read(&a_path).unwrap(), std::fs::read(&b_path).unwrap());
    }
}
