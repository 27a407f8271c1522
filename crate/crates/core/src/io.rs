//! Framed binary files: 8-byte magic, u32 little-endian header length, JSON
//! header, then a raw little-endian f32 payload. Datasets and checkpoints
//! share the framing and differ only in magic and header schema.

use crate::error::{Error, Result};
use crate::scorenet::{Arch, ModelKind, ScoreModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 8] = b"CLDPDATA";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLDPCKPT";
pub const RESULT_MAGIC: &[u8; 8] = b"CLDPTRAJ";

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

pub fn write_framed<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    payload: &[f32],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    let hdr = serde_json::to_vec(header)
        .map_err(|e| Error::format(path_str(path), format!("header encode: {e}")))?;
    w.write_all(&(hdr.len() as u32).to_le_bytes())?;
    w.write_all(&hdr)?;
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_framed<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut got_magic = [0u8; 8];
    r.read_exact(&mut got_magic)
        .map_err(|_| Error::format(path_str(path), "file too short for magic"))?;
    if &got_magic != magic {
        return Err(Error::format(
            path_str(path),
            format!("bad magic {:?}", String::from_utf8_lossy(&got_magic)),
        ));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::format(path_str(path), "file too short for header length"))?;
    let hdr_len = u32::from_le_bytes(len_bytes) as usize;
    let mut hdr = vec![0u8; hdr_len];
    r.read_exact(&mut hdr)
        .map_err(|_| Error::format(path_str(path), "file too short for header"))?;
    let header: H = serde_json::from_slice(&hdr)
        .map_err(|e| Error::format(path_str(path), format!("header decode: {e}")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 4 != 0 {
        return Err(Error::format(path_str(path), "payload is not whole f32s"));
    }
    let payload = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub kind: ModelKind,
    pub param_count: usize,
    pub seed: u64,
    pub train_steps: usize,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ScoreModel,
    seed: u64,
    train_steps: usize,
) -> Result<()> {
    let header = CheckpointHeader {
        arch: model.arch,
        kind: model.kind,
        param_count: model.params.len(),
        seed,
        train_steps,
    };
    let payload: Vec<f32> = model.params.iter().map(|&p| p as f32).collect();
    write_framed(path, CHECKPOINT_MAGIC, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<(ScoreModel, CheckpointHeader)> {
    let (header, payload): (CheckpointHeader, Vec<f32>) = read_framed(path, CHECKPOINT_MAGIC)?;
    header.arch.validate()?;
    if header.param_count != header.arch.param_count() {
        return Err(Error::format(
            path_str(path),
            format!(
                "header claims {} params, arch needs {}",
                header.param_count,
                header.arch.param_count()
            ),
        ));
    }
    if payload.len() != header.param_count {
        return Err(Error::format(
            path_str(path),
            format!("payload holds {} params, header claims {}", payload.len(), header.param_count),
        ));
    }
    let model = ScoreModel {
        arch: header.arch,
        kind: header.kind,
        params: payload.iter().map(|&p| p as f64).collect(),
    };
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn framed_round_trip_preserves_header_and_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct H {
            name: String,
            count: usize,
        }
        let h = H { name: "probe".into(), count: 3 };
        let payload = vec![1.5f32, -2.25, 0.0];
        write_framed(&path, DATASET_MAGIC, &h, &payload).unwrap();
        let (h2, p2): (H, Vec<f32>) = read_framed(&path, DATASET_MAGIC).unwrap();
        assert_eq!(h, h2);
        assert_eq!(payload, p2);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        write_framed(&path, DATASET_MAGIC, &serde_json::json!({}), &[]).unwrap();
        let got: Result<(serde_json::Value, Vec<f32>)> = read_framed(&path, CHECKPOINT_MAGIC);
        assert!(matches!(got, Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        std::fs::write(&path, b"CLDPDATA\xff\xff").unwrap();
        let got: Result<(serde_json::Value, Vec<f32>)> = read_framed(&path, DATASET_MAGIC);
        assert!(matches!(got, Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        use crate::scorenet::{Arch, ModelKind, ScoreModel};
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arch = Arch { horizon: 4, grid: 8, channels: 6, depth: 2, embed_dim: 8 };
        let model = ScoreModel::init(arch, ModelKind::Async, 42).unwrap();
        save_checkpoint(&path, &model, 42, 17).unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.train_steps, 17);
        assert_eq!(header.kind, ModelKind::Async);
        assert_eq!(loaded.params.len(), model.params.len());
        // f32 quantization is the only loss permitted by the format.
        for (a, b) in loaded.params.iter().zip(&model.params) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn corrupt_param_count_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arch = Arch { horizon: 4, grid: 8, channels: 6, depth: 2, embed_dim: 8 };
        let header = CheckpointHeader {
            arch,
            kind: ModelKind::Sync,
            param_count: 3,
            seed: 0,
            train_steps: 0,
        };
        write_framed(&path, CHECKPOINT_MAGIC, &header, &[0.0; 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
