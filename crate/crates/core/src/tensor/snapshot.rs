use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"HPTF";
const VERSION: u32 = 1;

/// Serialises `t` as `HPTF | u32 version | u8 dtype | u8 rank | u64 extents… | payload`,
/// all little-endian.
pub fn write_snapshot_to<T: Element, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.rank() + t.byte_size() as usize);
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::DTYPE.code());
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn write_snapshot<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshot_to(t, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// Reads a snapshot; `origin` only labels errors.
pub fn read_snapshot_from<T: Element, R: Read>(mut r: R, origin: &Path) -> Result<Tensor<T>> {
    let corrupt = |reason: String| Error::CorruptPayload {
        path: origin.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
    if bytes.len() < 10 || &bytes[..4] != SNAPSHOT_MAGIC {
        return Err(corrupt("missing HPTF header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| corrupt(format!("unknown dtype code {}", bytes[8])))?;
    if dtype != T::DTYPE {
        return Err(corrupt(format!("stored dtype {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let rank = bytes[9] as usize;
    let header = 10 + 8 * rank;
    if bytes.len() < header {
        return Err(corrupt("truncated extents".into()));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().expect("8 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let width = dtype.size_bytes();
    if bytes.len() - header != n * width {
        return Err(corrupt(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            n * width
        )));
    }
    let data = bytes[header..].chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
}

pub fn read_snapshot<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot_from(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let t = Tensor::<f32>::from_fn(&[3, 5], |i| (i as f32).sin());
        let mut buf = Vec::new();
        write_snapshot_to(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"HPTF");
        assert_eq!(buf.len(), 4 + 4 + 1 + 1 + 16 + 60);
        let back: Tensor<f32> = read_snapshot_from(&buf[..], Path::new("mem")).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn dtype_mismatch_and_truncation_are_corrupt() {
        let t = Tensor::<f64>::ones(&[4]);
        let mut buf = Vec::new();
        write_snapshot_to(&t, &mut buf).unwrap();
        let wrong: Result<Tensor<f32>> = read_snapshot_from(&buf[..], Path::new("mem"));
        assert!(matches!(wrong, Err(Error::CorruptPayload { .. })));
        buf.pop();
        let short: Result<Tensor<f64>> = read_snapshot_from(&buf[..], Path::new("mem"));
        assert!(matches!(short, Err(Error::CorruptPayload { .. })));
    }
}
