//! MVPT feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MVPT" | version u32 | modality u8 (0=visual, 1=music)
//! | segments u32 | dim u32 | segment_duration f32
//! | segments*dim f32 values, row-major
//! ```
//!
//! Track ids and labels live in the dataset manifest, not in the file.
//! Round-trips are bit-exact.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{DataError, FeatureSequence, Modality};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<(), DataError> {
    seq.validate()?;
    let mut buf: Vec<u8> =
        Vec::with_capacity(4 + 4 + 1 + 4 + 4 + 4 + seq.features.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(match seq.modality {
        Modality::Visual => 0,
        Modality::Music => 1,
    });
    buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&seq.segment_duration.to_le_bytes());
    for v in seq.features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence, DataError> {
    let bytes = fs::read(path)?;
    let fail = |details: String| DataError::Format {
        path: path.to_path_buf(),
        details,
    };
    if bytes.len() < 21 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let modality = match bytes[8] {
        0 => Modality::Visual,
        1 => Modality::Music,
        other => return Err(fail(format!("unknown modality byte {other}"))),
    };
    let segments = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let duration = f32::from_le_bytes(bytes[17..21].try_into().unwrap());
    let expected = 21 + segments * dim * 4;
    if bytes.len() < expected {
        return Err(fail(format!(
            "truncated payload: {} segments x {} dims needs {} bytes, file has {}",
            segments,
            dim,
            expected,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(segments * dim);
    for chunk in bytes[21..expected].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let features = Tensor::new(vec![segments, dim], data)
        .map_err(|e| fail(format!("invalid geometry: {e}")))?;
    let track_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(track_id, modality, features, duration)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSequence {
        let data: Vec<f32> = (0..6).map(|i| (i as f32).sin()).collect();
        FeatureSequence::new(
            "s",
            Modality::Music,
            Tensor::new(vec![3, 2], data).unwrap(),
            6.7,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mvpt");
        let seq = sample();
        write_features(&path, &seq).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.modality, seq.modality);
        assert_eq!(back.segment_duration.to_bits(), seq.segment_duration.to_bits());
        for (a, b) in back.features.data().iter().zip(seq.features.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Writing again produces identical bytes.
        let first = std::fs::read(&path).unwrap();
        write_features(&path, &back).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn bad_magic_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mvpt");
        let mut bytes = vec![];
        bytes.extend_from_slice(b"XXXX");
        bytes.extend_from_slice(&[0u8; 32]);
        std::fs::write(&path, bytes).unwrap();
        let err = read_features(&path).unwrap_err().to_string();
        assert!(err.contains("XXXX"), "{err}");
    }

    #[test]
    fn truncated_payload_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mvpt");
        write_features(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        let err = read_features(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
