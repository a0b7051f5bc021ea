//! Binary checkpoint format for named parameter tensors.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic    5 bytes   "DLAB1"
//! version  u32       currently 1
//! then zero or more parameter records until EOF:
//!   name_len  u32
//!   name      name_len bytes of UTF-8
//!   rank      u32
//!   extents   rank x u64
//!   payload   prod(extents) x f64 (IEEE-754, little-endian)
//! ```
//!
//! Records are written sorted by name so identical parameter sets always
//! produce identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DlabError, Result};

pub const MAGIC: &[u8; 5] = b"DLAB1";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 16;
const MAX_NUMEL: u64 = 1 << 30;

pub fn write_checkpoint(path: &Path, params: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let mut ordered: Vec<&(String, Vec<usize>, Vec<f64>)> = params.iter().collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0));
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, shape, data) in ordered {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(DlabError::shape(format!(
                "parameter {name}: data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &e in shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| DlabError::data(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(DlabError::data(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DlabError::data(format!(
            "{}: checkpoint version {version} unsupported; this build reads version {VERSION} — re-export the checkpoint",
            path.display()
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 4];
        match r.read(&mut first)? {
            0 => break,
            4 => {}
            n => {
                // finish the partial read
                r.read_exact(&mut first[n..])
                    .map_err(|_| DlabError::data("truncated record header".to_string()))?;
            }
        }
        let name_len = u32::from_le_bytes(first) as usize;
        if name_len > MAX_NAME_LEN {
            return Err(DlabError::data(format!("parameter name length {name_len} too large")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| DlabError::data("parameter name is not UTF-8".to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > MAX_RANK {
            return Err(DlabError::data(format!("parameter {name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = read_u64(&mut r)?;
            numel = numel.saturating_mul(e.max(1));
            shape.push(e as usize);
        }
        if numel > MAX_NUMEL {
            return Err(DlabError::data(format!(
                "parameter {name}: element count {numel} too large"
            )));
        }
        let count: usize = shape.iter().product();
        let mut data = vec![0.0f64; count];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| DlabError::data(format!("parameter {name}: truncated payload")))?;
            *v = f64::from_le_bytes(buf);
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| DlabError::data("truncated integer field".to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| DlabError::data("truncated integer field".to_string()))?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = vec![
            ("b.weight".to_string(), vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]),
            ("a.bias".to_string(), vec![3], vec![0.1, 0.2, 0.3]),
        ];
        write_checkpoint(&path, &params).unwrap();
        let back = read_checkpoint(&path).unwrap();
        // sorted by name on disk
        assert_eq!(back[0].0, "a.bias");
        assert_eq!(back[1].0, "b.weight");
        assert_eq!(back[0].2, vec![0.1, 0.2, 0.3]);
        assert_eq!(back[1].1, vec![2, 2]);
        assert_eq!(back[1].2, vec![1.0, -2.5, 3.25, 0.0]);
    }

    #[test]
    fn exact_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ckpt");
        let params = vec![("w".to_string(), vec![2], vec![1.0, 2.0])];
        write_checkpoint(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"DLAB1");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes()); // name_len
        expect.extend_from_slice(b"w");
        expect.extend_from_slice(&1u32.to_le_bytes()); // rank
        expect.extend_from_slice(&2u64.to_le_bytes()); // extent
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&2.0f64.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE!xxxx").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(DlabError::Data(_))));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
