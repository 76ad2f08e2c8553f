//! GBTV v1 persistence: a JSON header `<name>.json` next to a raw
//! little-endian payload `<name>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dims, MaskKind, Modality, SegMask, Volume, NUM_MODALITIES};
use crate::error::{Error, Result};

pub const MAGIC: &str = "GBTV1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub magic: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "D")]
    pub depth: usize,
    #[serde(rename = "M")]
    pub modalities_count: usize,
    pub dtype: String,
    pub modalities: Vec<String>,
    pub voxel_id: String,
}

impl VolumeHeader {
    pub(super) fn for_volume(v: &Volume) -> Self {
        let d = v.dims();
        Self {
            magic: MAGIC.into(),
            height: d.height,
            width: d.width,
            depth: d.depth,
            modalities_count: NUM_MODALITIES,
            dtype: "f32le".into(),
            modalities: Modality::ALL.iter().map(|m| m.name().to_string()).collect(),
            voxel_id: v.voxel_id().to_string(),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            depth: self.depth,
            height: self.height,
            width: self.width,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.height * self.width * self.depth * self.modalities_count * 4
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if self.magic != MAGIC {
            return Err(bad(format!("magic {:?}, expected {MAGIC:?}", self.magic)));
        }
        if self.modalities_count != NUM_MODALITIES {
            return Err(bad(format!(
                "M must be {NUM_MODALITIES}, header says {}",
                self.modalities_count
            )));
        }
        if self.dtype != "f32le" {
            return Err(bad(format!("dtype {:?}, expected \"f32le\"", self.dtype)));
        }
        let expected: Vec<&str> = Modality::ALL.iter().map(|m| m.name()).collect();
        if self.modalities != expected {
            return Err(bad(format!(
                "modalities {:?}, expected {expected:?}",
                self.modalities
            )));
        }
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return Err(bad("H, W and D must all be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskHeader {
    pub magic: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "D")]
    pub depth: usize,
    pub dtype: String,
    pub voxel_id: String,
}

fn stem_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}

fn f32_payload(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32_from_payload(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.json` and `<stem>.bin`. `path` may be the stem or either
/// file name.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (json, bin) = stem_paths(path.as_ref());
    let header = serde_json::to_vec_pretty(&v.header())?;
    write(&json, &header)?;
    write(&bin, &f32_payload(v.data()))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (json, bin) = stem_paths(path.as_ref());
    let header: VolumeHeader = serde_json::from_slice(&read(&json)?).map_err(|e| Error::Format {
        path: json.clone(),
        reason: e.to_string(),
    })?;
    header.validate(&json)?;
    let payload = read(&bin)?;
    if payload.len() != header.payload_bytes() {
        return Err(Error::PayloadSize {
            path: bin,
            expected: header.payload_bytes(),
            actual: payload.len(),
        });
    }
    Volume::new(header.dims(), header.voxel_id, f32_from_payload(&payload))
}

pub fn save_mask(mask: &SegMask, voxel_id: &str, path: impl AsRef<Path>) -> Result<()> {
    if mask.kind() != MaskKind::Binary {
        return Err(Error::Invalid(
            "only binary masks have an on-disk form (dtype u8)".into(),
        ));
    }
    let (json, bin) = stem_paths(path.as_ref());
    let d = mask.dims();
    let header = MaskHeader {
        magic: MAGIC.into(),
        height: d.height,
        width: d.width,
        depth: d.depth,
        dtype: "u8".into(),
        voxel_id: voxel_id.into(),
    };
    write(&json, &serde_json::to_vec_pretty(&header)?)?;
    write(&bin, &mask.to_u8())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<(SegMask, String)> {
    let (json, bin) = stem_paths(path.as_ref());
    let header: MaskHeader = serde_json::from_slice(&read(&json)?).map_err(|e| Error::Format {
        path: json.clone(),
        reason: e.to_string(),
    })?;
    if header.magic != MAGIC || header.dtype != "u8" {
        return Err(Error::Format {
            path: json,
            reason: format!(
                "mask header magic {:?} dtype {:?}, expected {MAGIC:?} / \"u8\"",
                header.magic, header.dtype
            ),
        });
    }
    let dims = Dims {
        depth: header.depth,
        height: header.height,
        width: header.width,
    };
    let payload = read(&bin)?;
    if payload.len() != dims.voxels() {
        return Err(Error::PayloadSize {
            path: bin,
            expected: dims.voxels(),
            actual: payload.len(),
        });
    }
    Ok((SegMask::binary(dims, payload)?, header.voxel_id))
}

/// Single-buffer form used for uploads: `u32le header length`, the JSON
/// header, then the f32le payload.
pub fn encode_container(v: &Volume) -> Vec<u8> {
    let header = serde_json::to_vec(&v.header()).expect("header serializes");
    let mut out = Vec::with_capacity(4 + header.len() + v.data().len() * 4);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&f32_payload(v.data()));
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<(VolumeHeader, Volume)> {
    let origin = PathBuf::from("<container>");
    let bad = |reason: String| Error::Format {
        path: origin.clone(),
        reason,
    };
    if bytes.len() < 4 {
        return Err(bad(format!(
            "container is {} bytes; need at least 4 for the header length",
            bytes.len()
        )));
    }
    let header_len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if 4 + header_len > bytes.len() {
        return Err(bad(format!(
            "header length {header_len} at byte 0 exceeds the {} bytes after the length prefix",
            bytes.len() - 4
        )));
    }
    let header: VolumeHeader = serde_json::from_slice(&bytes[4..4 + header_len])
        .map_err(|e| bad(format!("header JSON in bytes 4..{}: {e}", 4 + header_len)))?;
    header.validate(&origin)?;
    let payload = &bytes[4 + header_len..];
    if payload.len() != header.payload_bytes() {
        return Err(Error::PayloadSize {
            path: origin,
            expected: header.payload_bytes(),
            actual: payload.len(),
        });
    }
    let volume = Volume::new(header.dims(), header.voxel_id.clone(), f32_from_payload(payload))?;
    Ok((header, volume))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_volume(d: usize, h: usize, w: usize, seed: u64) -> Volume {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dims = Dims {
            depth: d,
            height: h,
            width: w,
        };
        let data = (0..NUM_MODALITIES * dims.voxels())
            .map(|_| rng.random_range(-1e3f32..1e3))
            .collect();
        Volume::new(dims, format!("v{seed}"), data).unwrap()
    }

    #[test]
    fn save_then_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(3, 4, 5, 1);
        save_volume(&v, dir.path().join("a")).unwrap();
        let back = load_volume(dir.path().join("a.json")).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.header(), back.header());
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(2, 2, 2, 2);
        let stem = dir.path().join("t");
        save_volume(&v, &stem).unwrap();
        let bin = dir.path().join("t.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        match load_volume(&stem).unwrap_err() {
            Error::PayloadSize {
                expected, actual, ..
            } => {
                assert_eq!(expected, 2 * 2 * 2 * 4 * 4);
                assert_eq!(actual, expected - 3);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn three_modalities_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(1, 2, 2, 3);
        let stem = dir.path().join("m3");
        save_volume(&v, &stem).unwrap();
        let json = dir.path().join("m3.json");
        let mut header: serde_json::Value =
            serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
        header["M"] = 3.into();
        fs::write(&json, serde_json::to_vec(&header).unwrap()).unwrap();
        let err = load_volume(&stem).unwrap_err().to_string();
        assert!(err.contains("M must be 4"), "{err}");
    }

    #[test]
    fn header_keys_match_format() {
        let v = random_volume(1, 1, 1, 4);
        let json = serde_json::to_value(v.header()).unwrap();
        for key in ["magic", "H", "W", "D", "M", "dtype", "modalities", "voxel_id"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["magic"], "GBTV1");
        assert_eq!(json["dtype"], "f32le");
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims {
            depth: 2,
            height: 2,
            width: 3,
        };
        let m = SegMask::binary(dims, vec![0, 1, 1, 0, 0, 1, 1, 1, 0, 0, 0, 1]).unwrap();
        save_mask(&m, "id7", dir.path().join("m")).unwrap();
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("m.json")).unwrap()).unwrap();
        assert!(json.get("M").is_none());
        assert_eq!(json["dtype"], "u8");
        let (back, id) = load_mask(dir.path().join("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(id, "id7");
    }

    #[test]
    fn container_diagnostics() {
        let v = random_volume(1, 2, 2, 5);
        let bytes = encode_container(&v);
        let (_, back) = decode_container(&bytes).unwrap();
        assert_eq!(back, v);
        let err = decode_container(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("expected 64 bytes, found 63"), "{err}");
        let err = decode_container(&[200, 0, 0, 0, b'{']).unwrap_err().to_string();
        assert!(err.contains("header length 200"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_exact(d in 1usize..5, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let v = random_volume(d, h, w, seed);
            save_volume(&v, dir.path().join("p")).unwrap();
            let back = load_volume(dir.path().join("p")).unwrap();
            let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(v.header(), back.header());
        }
    }
}
