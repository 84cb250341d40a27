//! MMCK checkpoint files.
//!
//! Layout: magic `MMCK`, one version byte, an 8-byte little-endian header
//! length, a JSON header listing tensors as `{name, shape, dtype: "f32"}` in
//! order, then the raw little-endian buffers concatenated. Round-trips are
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nets::{SegModel, UNetConfig};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MMCK";
pub const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    task_id: String,
    unet: UNetConfig,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

pub fn save_model(model: &SegModel<f32>, path: &Path) -> Result<()> {
    let named = model.named_tensors();
    let header = Header {
        task_id: model.task_id.clone(),
        unet: *model.cfg(),
        tensors: named
            .iter()
            .map(|(name, shape, _)| TensorMeta {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f32".to_string(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::InvalidConfig(format!("checkpoint header: {e}")))?;

    let mut buf = Vec::with_capacity(13 + header_bytes.len() + model.param_count() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, _, data) in &named {
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SegModel<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;

    if bytes.len() < 13 {
        return Err(Error::corrupt(path, "shorter than the fixed prefix"));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::corrupt(path, "bad magic, expected MMCK"));
    }
    if bytes[4] != VERSION {
        return Err(Error::corrupt(
            path,
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let body_start = match 13usize.checked_add(header_len) {
        Some(v) if bytes.len() >= v => v,
        _ => return Err(Error::corrupt(path, "truncated header")),
    };
    let header: Header = serde_json::from_slice(&bytes[13..body_start])
        .map_err(|e| Error::corrupt(path, format!("header json: {e}")))?;

    let mut model: SegModel<f32> = SegModel::zeroed(header.unet, &header.task_id)?;
    {
        let expected = model.named_tensors();
        if expected.len() != header.tensors.len() {
            return Err(Error::corrupt(
                path,
                format!(
                    "tensor count {} does not match config-derived layout {}",
                    header.tensors.len(),
                    expected.len()
                ),
            ));
        }
        for ((name, shape, _), meta) in expected.iter().zip(&header.tensors) {
            if *name != meta.name || *shape != meta.shape {
                return Err(Error::corrupt(
                    path,
                    format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        meta.name, meta.shape, name, shape
                    ),
                ));
            }
            if meta.dtype != "f32" {
                return Err(Error::corrupt(
                    path,
                    format!("tensor {}: unsupported dtype {}", meta.name, meta.dtype),
                ));
            }
        }
    }

    let total: usize = model.param_count();
    let body = &bytes[body_start..];
    if body.len() != total * 4 {
        return Err(Error::corrupt(
            path,
            format!("body is {} bytes, expected {}", body.len(), total * 4),
        ));
    }
    let mut off = 0usize;
    for slice in model.param_slices_mut() {
        for v in slice.iter_mut() {
            *v = f32::from_le_bytes(body[off..off + 4].try_into().unwrap());
            off += 4;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::build_model;
    use crate::rng::SeededRng;

    fn cfg() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 1,
            num_classes: 2,
            dropout_rate: 0.25,
        }
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mmck");
        let m: SegModel<f32> =
            build_model(cfg(), "structure", &mut SeededRng::from_seed(1)).unwrap();
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(m, loaded);
        // and the exact bytes are reproducible
        save_model(&loaded, &dir.path().join("m2.mmck")).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(dir.path().join("m2.mmck")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mmck");
        let m: SegModel<f32> = build_model(cfg(), "t", &mut SeededRng::from_seed(2)).unwrap();
        save_model(&m, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // bad magic
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Corrupt { .. })));

        // bad version
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Corrupt { .. })));

        // truncated body
        let bad = good[..good.len() - 5].to_vec();
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Corrupt { .. })));

        // header json garbage
        let mut bad = good.clone();
        bad[14] = b'!';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Corrupt { .. })));

        // too short overall
        std::fs::write(&path, b"MM").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Corrupt { .. })));
    }
}
