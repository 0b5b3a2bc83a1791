//! Binary volume format.
//!
//! Layout: 8-byte magic `OBSVOL01`, then little-endian `3 x u32` dims,
//! `3 x f64` pitch in cm, then `nx * ny * nz` `f32` values in x-fastest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Volume3D;

pub const VOLUME_MAGIC: &[u8; 8] = b"OBSVOL01";
const HEADER_LEN: usize = 8 + 3 * 4 + 3 * 8;

pub fn encode_volume<T: Real>(v: &Volume3D<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    out.extend_from_slice(VOLUME_MAGIC);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for p in v.pitch() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for x in v.data() {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume<T: Real>(bytes: &[u8], path: &Path) -> Result<Volume3D<T>> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..8] != VOLUME_MAGIC {
        return Err(fail("bad magic bytes".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let dims = [u32_at(8), u32_at(12), u32_at(16)];
    let pitch = [f64_at(20), f64_at(28), f64_at(36)];
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(format!("dims {dims:?} overflow")))?;
    let expected = n.checked_mul(4).and_then(|b| b.checked_add(HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(fail(format!(
            "payload is {} bytes, expected {} for dims {dims:?}",
            bytes.len() - HEADER_LEN,
            n * 4
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
        .collect();
    Volume3D::from_data(dims, pitch, data).map_err(|e| fail(e.to_string()))
}

pub fn save_volume<T: Real>(v: &Volume3D<T>, path: &Path) -> Result<()> {
    let bytes = encode_volume(v);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume<T: Real>(path: &Path) -> Result<Volume3D<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vol");
        let v = Volume3D::<f32>::from_fn([64, 64, 32], [0.44, 0.44, 0.5], |i, j, k| (i * 3 + j * 7 + k) as f32 * 0.1)
            .unwrap();
        save_volume(&v, &path).unwrap();
        let back: Volume3D<f32> = load_volume(&path).unwrap();
        assert_eq!(back.dims(), [64, 64, 32]);
        assert_eq!(back.pitch(), [0.44, 0.44, 0.5]);
        assert!(v.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let v = Volume3D::<f64>::filled([2, 2, 2], [1.0; 3], 1.5).unwrap();
        let good = encode_volume(&v);
        let p = Path::new("mem");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume::<f64>(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(decode_volume::<f64>(&good[..good.len() - 1], p), Err(Error::Format { .. })));
        assert!(matches!(decode_volume::<f64>(&good[..10], p), Err(Error::Format { .. })));
        assert_eq!(decode_volume::<f64>(&good, p).unwrap(), v);
    }
}
