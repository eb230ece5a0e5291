//! Parameter checkpoints: a flat binary container holding the magic `DFF1`,
//! a length-prefixed JSON architecture descriptor, and the raw 64-bit
//! little-endian parameter values in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::atomic_write;
use crate::error::{Error, Result};
use crate::model::{DffArch, DffParams};
use crate::seg::{SegArch, SegParams};
use crate::tensor::Param;

const MAGIC: &[u8; 4] = b"DFF1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum Header {
    Dff { arch: DffArch },
    Seg { arch: SegArch },
}

/// Either trained model, as read back from disk.
pub enum Checkpoint {
    Dff(DffParams),
    Seg(SegParams),
}

fn encode(header: &Header, params: &[Param]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let values: usize = params.iter().map(|p| p.value.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_dff(path: &Path, params: &DffParams) -> Result<()> {
    atomic_write(path, &encode(&Header::Dff { arch: *params.arch() }, params.params()))
}

pub fn save_seg(path: &Path, params: &SegParams) -> Result<()> {
    atomic_write(path, &encode(&Header::Seg { arch: *params.arch() }, params.params()))
}

/// Reads `count` f64 values from `bytes`; the slice must hold exactly that
/// many.
fn read_values(path: &Path, bytes: &[u8], count: usize) -> Result<Vec<f64>> {
    if bytes.len() != 8 * count {
        return Err(Error::data_at(
            path,
            format!("expected {} parameter bytes, found {}", 8 * count, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Fills a freshly initialized parameter set with the stored values, keeping
/// the declared names and shapes.
fn fill(path: &Path, reference: Vec<Param>, bytes: &[u8]) -> Result<Vec<Param>> {
    let total: usize = reference.iter().map(|p| p.value.len()).sum();
    let mut values = read_values(path, bytes, total)?.into_iter();
    reference
        .into_iter()
        .map(|p| {
            let shape = p.value.shape().to_vec();
            let data: Vec<f64> = values.by_ref().take(p.value.len()).collect();
            for (i, v) in data.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::data_at(
                        path,
                        format!("non-finite value at offset {i} of {}", p.name),
                    ));
                }
            }
            Ok(Param::new(&p.name, crate::tensor::Tensor::new(shape, data)?))
        })
        .collect()
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::data_at(path, "not a DFF1 checkpoint"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + len {
        return Err(Error::data_at(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + len])
        .map_err(|e| Error::data_at(path, format!("bad header: {e}")))?;
    let body = &bytes[8 + len..];
    match header {
        Header::Dff { arch } => {
            arch.validate()?;
            let reference = DffParams::init(arch, 0)?;
            let params = fill(path, reference.params().to_vec(), body)?;
            Ok(Checkpoint::Dff(DffParams::from_parts(arch, params)?))
        }
        Header::Seg { arch } => {
            arch.validate()?;
            let reference = SegParams::init(arch, 0)?;
            let params = fill(path, reference.params().to_vec(), body)?;
            Ok(Checkpoint::Seg(SegParams::from_parts(arch, params)?))
        }
    }
}

pub fn load_dff(path: &Path) -> Result<DffParams> {
    match load(path)? {
        Checkpoint::Dff(p) => Ok(p),
        Checkpoint::Seg(_) => {
            Err(Error::data_at(path, "holds a segmentation model, not a fusion model"))
        }
    }
}

pub fn load_seg(path: &Path) -> Result<SegParams> {
    match load(path)? {
        Checkpoint::Seg(p) => Ok(p),
        Checkpoint::Dff(_) => {
            Err(Error::data_at(path, "holds a fusion model, not a segmentation model"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dff_fixture() -> DffParams {
        let arch = DffArch { input: (1, 8, 8), encoder_channels: (2, 3), num_classes: 2 };
        DffParams::init(arch, 42).unwrap()
    }

    fn seg_fixture() -> SegParams {
        let arch =
            SegArch { input: (1, 16, 16), base_channels: 2, dropout_rate: 0.25, num_classes: 2 };
        SegParams::init(arch, 42).unwrap()
    }

    #[test]
    fn dff_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dff");
        let params = dff_fixture();
        save_dff(&path, &params).unwrap();
        let back = load_dff(&path).unwrap();
        assert_eq!(back.arch(), params.arch());
        for (a, b) in params.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let x: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn seg_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.seg");
        let params = seg_fixture();
        save_seg(&path, &params).unwrap();
        let back = load_seg(&path).unwrap();
        assert_eq!(back.arch(), params.arch());
        for (a, b) in params.params().iter().zip(back.params()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        save_dff(&p1, &dff_fixture()).unwrap();
        save_dff(&p2, &dff_fixture()).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn kind_mismatch_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model");
        save_seg(&path, &seg_fixture()).unwrap();
        let err = load_dff(&path).unwrap_err().to_string();
        assert!(err.contains("segmentation"), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model");
        save_dff(&path, &dff_fixture()).unwrap();
        let good = fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        let truncated = good[..good.len() - 8].to_vec();
        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0u8; 8]);
        for (name, bytes) in
            [("magic", bad_magic), ("truncated", truncated), ("trailing", trailing)]
        {
            fs::write(&path, &bytes).unwrap();
            assert!(load(&path).is_err(), "{name} accepted");
        }
    }
}
