//! Binary tensor-table files.
//!
//! Layout: magic `SRNCKPT1`, u32 entry count, then per entry a u16 name
//! length, the UTF-8 name, a u8 rank, `rank` u32 dims and the real32
//! payload. A trailing u32 holds the CRC32 of every byte between the entry
//! count and the checksum. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRNCKPT1";

pub fn encode_entries(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let body_start = buf.len();
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Config(format!("name too long: {}", name)))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("rank too large for {}", name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension too large in {}", name)))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[body_start..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {} at offset {}", what, self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_entries(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        let off = magic.iter().zip(CHECKPOINT_MAGIC).position(|(a, b)| a != b).unwrap_or(0);
        return Err(Error::format(path, format!("bad checkpoint magic at offset {}", off)));
    }
    let count = r.u32("entry count")? as usize;
    let body_start = r.pos;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, format!("name at offset {} is not UTF-8", name_at)))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, "payload")?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
    }
    let crc = crc32fast::hash(&bytes[body_start..body_end]);
    if crc != stored {
        return Err(Error::format(path, format!("checksum mismatch: stored {:08x}, computed {:08x}", stored, crc)));
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let buf = encode_entries(entries)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_entries(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.weight".into(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap()),
            ("meta.flag".into(), Tensor::scalar(1.0)),
        ]
    }

    #[test]
    fn layout_and_round_trip() {
        let bytes = encode_entries(&sample()).unwrap();
        // magic + count + (2 + 8 + 1 + 8 + 24) + (2 + 9 + 1 + 4) + crc
        assert_eq!(bytes.len(), 8 + 4 + 43 + 16 + 4);
        let back = decode_entries(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_entries(&sample()).unwrap();
        bytes[36] ^= 0x40;
        let err = decode_entries(&bytes, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        let bytes = encode_entries(&sample()).unwrap();
        let err = decode_entries(&bytes[..bytes.len() - 7], Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut bytes = encode_entries(&sample()).unwrap();
        bytes[3] = b'X';
        let err = decode_entries(&bytes, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("offset 3"), "{err}");
    }
}
