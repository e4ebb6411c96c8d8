//! Binary checkpoint files.
//!
//! Layout (all integers little-endian u32):
//! magic `SYNFCKPT`, version, manifest length + UTF-8 manifest, tensor count,
//! then per tensor name length + name + rows + cols, then every tensor's
//! data as little-endian f32 in directory order, and finally a u64 FNV-1a
//! checksum of everything before it.

use std::collections::BTreeMap;

use super::{Matrix, NumericsError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYNFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: String,
    pub tensors: BTreeMap<String, Matrix<f32>>,
}

fn bad(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

pub fn write_checkpoint(manifest: &str, tensors: &[(String, &Matrix<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, x: usize| {
        out.extend_from_slice(&u32::try_from(x).expect("fits in u32").to_le_bytes())
    };
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    u32le(&mut out, manifest.len());
    out.extend_from_slice(manifest.as_bytes());
    u32le(&mut out, tensors.len());
    for (name, m) in tensors {
        u32le(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32le(&mut out, m.rows());
        u32le(&mut out, m.cols());
    }
    for (_, m) in tensors {
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NumericsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NumericsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String, NumericsError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NumericsError> {
    if bytes.len() < 8 {
        return Err(bad("truncated file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    if checksum(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(bad("checksum mismatch"));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let manifest = r.string()?;
    let count = r.u32()?;
    let mut dir = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        dir.push((name, rows, cols));
    }
    let mut tensors = BTreeMap::new();
    for (name, rows, cols) in dir {
        let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor too large"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(name.clone(), Matrix::from_vec(rows, cols, data)).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { manifest, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = Matrix::<f32>::from_f64(2, 2, &[1.0, -2.5, 3.25, 0.0]);
        let b = Matrix::<f32>::scalar(7.0);
        let bytes = write_checkpoint("{\"k\":1}", &[("a".into(), &a), ("z/b".into(), &b)]);
        let ck = read_checkpoint(&bytes).unwrap();
        assert_eq!(ck.manifest, "{\"k\":1}");
        assert_eq!(ck.tensors["a"], a);
        assert_eq!(ck.tensors["z/b"], b);
        let again = write_checkpoint(&ck.manifest, &[("a".into(), &ck.tensors["a"]), ("z/b".into(), &ck.tensors["z/b"])]);
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_corruption() {
        let a = Matrix::<f32>::scalar(1.0);
        let bytes = write_checkpoint("", &[("a".into(), &a)]);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(read_checkpoint(&wrong).is_err());
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 1;
        assert!(read_checkpoint(&flipped).is_err());
    }
}
