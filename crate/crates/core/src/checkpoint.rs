//! Parameter checkpoints: a flat list of named matrices in a small binary
//! container. Values are stored as raw IEEE-754 bits, so save/load round-trips
//! are bit-exact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "GFLCKPT\0"
//! version u32      currently 1
//! count   u32      number of entries
//! entry*  name_len u16, name bytes (utf-8),
//!         rows u32, cols u32, rows*cols f64 values (as u64 bits)
//! footer  u64      FNV-1a of all preceding bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::fnv1a;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GFLCKPT\0";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        assert!(
            name_bytes.len() <= u16::MAX as usize,
            "parameter name too long"
        );
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        path: path.display().to_string(),
        bytes: &bytes,
        offset: 0,
    };

    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(r.error_at(0, "bad magic; not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: r.path.clone(),
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_bytes = r.take(name_len)?.to_vec();
        let name = String::from_utf8(name_bytes)
            .map_err(|_| r.error_here("parameter name is not valid utf-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 100_000_000 {
            return Err(r.error_here(&format!("implausible shape {rows}x{cols}")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_bits(r.u64()?));
        }
        entries.push((name, Tensor::new(vec![rows, cols], data)));
    }
    let body_end = r.offset;
    let stored = r.u64()?;
    if r.offset != bytes.len() {
        return Err(r.error_here("trailing bytes after checksum"));
    }
    if stored != fnv1a(&bytes[..body_end]) {
        return Err(r.error_at(body_end as u64, "checksum mismatch; file is corrupted"));
    }
    Ok(entries)
}

struct Reader<'a> {
    path: String,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(self.error_here(&format!(
                "unexpected end of file (wanted {n} bytes, {} left)",
                self.bytes.len() - self.offset
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn error_here(&self, reason: &str) -> Error {
        self.error_at(self.offset as u64, reason)
    }

    fn error_at(&self, offset: u64, reason: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            reason: reason.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("gfl-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = Rng::new(42);
        let a = Tensor::from_fn(3, 5, |_, _| rng.uniform(-1.0, 1.0));
        let b = Tensor::from_fn(7, 2, |_, _| rng.normal() * 1e-17);
        let path = temp_path("roundtrip.ckpt");
        save_checkpoint(
            &path,
            &[("alpha.weight".into(), &a), ("beta.bias".into(), &b)],
        )
        .unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "alpha.weight");
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in back[1].1.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let a = Tensor::scalar(1.0);
        let path = temp_path("version.ckpt");
        save_checkpoint(&path, &[("w".into(), &a)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9; // bump version field
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::UnsupportedVersion { found, .. }) => assert_eq!(found, 9),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn corruption_is_detected_with_offset() {
        let a = Tensor::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        let path = temp_path("corrupt.ckpt");
        save_checkpoint(&path, &[("w".into(), &a)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
