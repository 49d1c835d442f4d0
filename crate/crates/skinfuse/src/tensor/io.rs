//! Flat binary tensor files, used for checkpoints and dataset images.
//!
//! Layout, all little-endian:
//!   u32                  rank
//!   u64 * rank           dimensions
//!   f64 * prod(dims)     values, row-major
//!
//! The format is byte-deterministic: writing the same tensor twice yields
//! identical files, which the reproducibility checks rely on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    emit(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        emit(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::Ingest(format!("{}: implausible tensor rank {}", path.display(), rank)));
    }

    let mut u64buf = [0u8; 8];
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }

    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
        data.push(f64::from_le_bytes(u64buf));
    }
    // Trailing garbage means the file does not actually hold one tensor.
    if r.read(&mut [0u8; 1]).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Ingest(format!("{}: trailing bytes after tensor payload", path.display())));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = Tensor::from_fn(&[3, 2, 4], |i| (i as f64).sqrt() - 1.5);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn scalar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_tensor(&path, &Tensor::scalar(-0.0)).unwrap();
        let back = read_tensor(&path).unwrap();
        assert!(back.is_scalar());
        assert_eq!(back.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let t = Tensor::from_fn(&[5, 5], |i| (i as f64) * 0.1);
        write_tensor(&a, &t).unwrap();
        write_tensor(&b, &t).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn truncated_file_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = Tensor::from_fn(&[4], |i| i as f64);
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_tensor(&path).is_err());
    }
}
