//! MSDT checkpoint container.
//!
//! Layout: magic `MSDT`, u32 version (=1), u32 tensor count; per tensor a
//! u16 name length, the UTF-8 name, u8 rank, u32 dims, then the raw
//! little-endian f32 payload. Values are stored in f32; everything in memory
//! stays f64.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSDT";
pub const VERSION: u32 = 1;

pub fn to_bytes(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len())
        .map_err(|_| CoreError::InvalidArgument("too many tensors for checkpoint".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len()).map_err(|_| {
            CoreError::InvalidArgument(format!("tensor name too long: {name}"))
        })?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| CoreError::InvalidArgument(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| CoreError::InvalidArgument(format!("dim too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in tensor.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(CoreError::parse("checkpoint header", "bad magic, expected MSDT"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CoreError::parse(
            "checkpoint header",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let ctx = format!("checkpoint tensor {i}");
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| CoreError::parse(ctx.clone(), "name is not UTF-8"))?;
        let rank = cur.take(1)?[0] as usize;
        if rank == 0 {
            return Err(CoreError::parse(ctx, "rank 0"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let payload = cur.take(n * 4)?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push((name, Tensor::new(shape, values)?));
    }
    if cur.pos != bytes.len() {
        return Err(CoreError::parse(
            format!("checkpoint offset {}", cur.pos),
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, to_bytes(entries)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    from_bytes(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::parse(
                format!("checkpoint offset {}", self.pos),
                format!("truncated: wanted {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let entries = vec![
            ("a.weight".to_string(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 4.0, 0.5, -0.125]).unwrap()),
            ("pcam.0.beta".to_string(), Tensor::scalar(0.0)),
        ];
        let bytes = to_bytes(&entries).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.weight");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        // all values here are exactly representable in f32
        assert_eq!(back[0].1.values(), entries[0].1.values());
        assert_eq!(back[1].0, "pcam.0.beta");
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let entries = vec![("x".to_string(), Tensor::scalar(1.0))];
        let bytes = to_bytes(&entries).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(from_bytes(&bad).is_err());

        assert!(from_bytes(&bytes[..bytes.len() - 2]).is_err());

        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
