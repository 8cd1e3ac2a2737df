//! Binary feature files.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MSKF"
//! 4       4     u32 version (= 1)
//! 8       4     u32 T (frames)
//! 12      4     u32 d (dims)
//! 16      4     f32 frame rate (Hz)
//! 20      4·T·d f32 values, row-major
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::FeatureMatrix;
use crate::error::{Error, Result};

pub const FEAT_MAGIC: &[u8; 4] = b"MSKF";
const FEAT_VERSION: u32 = 1;

pub fn encode_features(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * f.len() * f.dim());
    out.extend_from_slice(FEAT_MAGIC);
    out.write_u32::<LittleEndian>(FEAT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(f.len() as u32).unwrap();
    out.write_u32::<LittleEndian>(f.dim() as u32).unwrap();
    out.write_f32::<LittleEndian>(f.frame_rate() as f32).unwrap();
    for &v in f.frames().iter() {
        out.write_f32::<LittleEndian>(v as f32).unwrap();
    }
    out
}

pub fn decode_features(bytes: &[u8], origin: &str) -> Result<FeatureMatrix> {
    let bad = |msg: &str| Error::Format { path: origin.to_string(), msg: msg.to_string() };
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != FEAT_MAGIC {
        return Err(bad("bad magic, expected MSKF"));
    }
    let header = (|| -> std::io::Result<(u32, u32, u32, f32)> {
        Ok((
            cur.read_u32::<LittleEndian>()?,
            cur.read_u32::<LittleEndian>()?,
            cur.read_u32::<LittleEndian>()?,
            cur.read_f32::<LittleEndian>()?,
        ))
    })();
    let (version, t, d, rate) = header.map_err(|_| bad("truncated header"))?;
    if version != FEAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = t as usize * d as usize;
    if bytes.len() != 20 + 4 * n {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * n, bytes.len() - 20)));
    }
    let mut data = vec![0f32; n];
    cur.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated data"))?;
    let frames = Array2::from_shape_vec((t as usize, d as usize), data.into_iter().map(f64::from).collect())
        .map_err(|e| bad(&e.to_string()))?;
    FeatureMatrix::new(frames, rate as f64).map_err(|e| bad(&e.to_string()))
}

pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    fs::write(path, encode_features(f))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path)?;
    decode_features(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let f = FeatureMatrix::new(array![[1.0, -2.0]], 100.0).unwrap();
        let bytes = encode_features(&f);
        assert_eq!(&bytes[..4], b"MSKF");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 1u32.to_le_bytes());
        assert_eq!(bytes[12..16], 2u32.to_le_bytes());
        assert_eq!(bytes[16..20], 100f32.to_le_bytes());
        assert_eq!(bytes[20..24], 1f32.to_le_bytes());
        assert_eq!(bytes[24..28], (-2f32).to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn rejects_corruption() {
        let f = FeatureMatrix::new(array![[1.0]], 100.0).unwrap();
        let mut bytes = encode_features(&f);
        assert!(decode_features(&bytes[..22], "x").is_err());
        bytes[0] = b'X';
        assert!(decode_features(&bytes, "x").is_err());
    }

    proptest! {
        #[test]
        fn f32_values_survive_a_round_trip(
            t in 1usize..6, d in 1usize..5, seed in any::<u64>()
        ) {
            let vals: Vec<f64> = (0..t * d)
                .map(|i| ((crate::rng::splitmix64(seed ^ i as u64) >> 40) as f32 / 1e3 - 8e3) as f64)
                .collect();
            let f = FeatureMatrix::new(Array2::from_shape_vec((t, d), vals).unwrap(), 33.25).unwrap();
            let back = decode_features(&encode_features(&f), "mem").unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
