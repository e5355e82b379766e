//! Binary tensor archive.
//!
//! Layout (little-endian throughout):
//!   magic "SLTS", version u32, entry count u32, then per entry:
//!   name length u16, UTF-8 name, rank u8, dims as u32s, payload.
//!
//! Payload is f32 data for ordinary entries. Entries whose name starts
//! with "meta." carry raw bytes instead (one byte per element of a
//! rank-1 shape); feature files use this for UTF-8 identifiers.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLTS";
pub const VERSION: u32 = 1;

/// One archive entry.
#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Tensor),
    Raw(Vec<u8>),
}

fn is_raw(name: &str) -> bool {
    name.starts_with("meta.")
}

/// Write an archive. Tensor values are stored as f32.
pub fn write_archive(path: &Path, entries: &BTreeMap<String, EntryData>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, entry) in entries {
        if name.len() > u16::MAX as usize {
            return Err(Error::Data(format!("entry name too long: {name}")));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match entry {
            EntryData::F32(t) => {
                if is_raw(name) {
                    return Err(Error::Data(format!(
                        "entry {name} uses the raw-name prefix but holds tensor data"
                    )));
                }
                buf.push(t.rank() as u8);
                for &d in t.shape() {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in t.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            EntryData::Raw(bytes) => {
                if !is_raw(name) {
                    return Err(Error::Data(format!(
                        "raw entry {name} must use the meta. prefix"
                    )));
                }
                buf.push(1u8);
                buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                buf.extend_from_slice(bytes);
            }
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
    path: std::path::PathBuf,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt {
                path: self.path.clone(),
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read an archive written by [`write_archive`].
pub fn read_archive(path: &Path) -> Result<BTreeMap<String, EntryData>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader {
        buf,
        pos: 0,
        path: path.to_path_buf(),
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_off = r.pos;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| {
            Error::Corrupt {
                path: path.to_path_buf(),
                offset: name_off as u64,
                detail: "entry name is not UTF-8".to_string(),
            }
        })?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        if is_raw(&name) {
            let bytes = r.take(numel, "raw payload")?.to_vec();
            out.insert(name, EntryData::Raw(bytes));
        } else {
            let payload = r.take(4 * numel, "tensor payload")?;
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                offset: r.pos as u64,
                detail: e.to_string(),
            })?;
            out.insert(name, EntryData::F32(t));
        }
    }
    if r.pos != r.buf.len() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: r.pos as u64,
            detail: format!("{} trailing bytes", r.buf.len() - r.pos),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.slts");
        let mut entries = BTreeMap::new();
        entries.insert(
            "w".to_string(),
            EntryData::F32(Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.1, 7.5, -0.0]).unwrap()),
        );
        entries.insert(
            "meta.image_id".to_string(),
            EntryData::Raw(b"scene-000042".to_vec()),
        );
        write_archive(&path, &entries).unwrap();
        let back = read_archive(&path).unwrap();
        // 0.1 is not f32-representable exactly; compare after the same rounding
        let mut expect = entries.clone();
        if let EntryData::F32(t) = expect.get_mut("w").unwrap() {
            t.round_f32();
        }
        assert_eq!(back, expect);

        // write(read(x)) must be byte-identical to the original file
        let path2 = dir.path().join("b.slts");
        write_archive(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.slts");
        let mut entries = BTreeMap::new();
        entries.insert(
            "w".to_string(),
            EntryData::F32(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
        );
        write_archive(&path, &entries).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        match read_archive(&path) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset > 0),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.slts");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            read_archive(&path),
            Err(Error::Corrupt { offset: 0, .. })
        ));
    }
}
