//! Binary container shared by checkpoints and traces: an 8-byte magic, a
//! `u32`-length-prefixed UTF-8 block of `key=value` lines, then named blobs
//! of little-endian `f32` until end of file. A blob is a `u32` name length,
//! the name bytes, a `u64` element count and the values.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub values: Vec<f32>,
}

pub type Metadata = Vec<(String, String)>;

pub fn encode(magic: &[u8; 8], metadata: &[(String, String)], blobs: &[Blob]) -> Result<Vec<u8>> {
    let mut meta = String::new();
    for (k, v) in metadata {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::config(format!("metadata entry '{k}' cannot be encoded")));
        }
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    let payload: usize = blobs.iter().map(|b| 12 + b.name.len() + 4 * b.values.len()).sum();
    let mut out = Vec::with_capacity(12 + meta.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for b in blobs {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.values.len() as u64).to_le_bytes());
        for v in &b.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos;
        let raw = self.take(n, what)?;
        std::str::from_utf8(raw).map_err(|_| Error::format(at as u64, format!("{what} is not UTF-8")))
    }
}

pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<(Metadata, Vec<Blob>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != magic {
        return Err(Error::format(0, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos;
    let meta = r.utf8(meta_len, "metadata")?;
    let mut metadata = Vec::new();
    let mut line_at = meta_at;
    for line in meta.split_terminator('\n') {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(line_at as u64, "metadata line without '='"))?;
        metadata.push((k.to_string(), v.to_string()));
        line_at += line.len() + 1;
    }
    let mut blobs = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("blob name length")? as usize;
        let name = r.utf8(name_len, "blob name")?.to_string();
        let count = r.u64("blob length")?;
        let need = count.checked_mul(4).filter(|&n| n <= (bytes.len() - r.pos) as u64);
        let Some(need) = need else {
            return Err(Error::format(r.pos as u64, format!("blob '{name}' runs past end of file")));
        };
        let raw = r.take(need as usize, "blob")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blobs.push(Blob { name, values });
    }
    Ok((metadata, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTMAG1";

    #[test]
    fn round_trip() {
        let meta = vec![("a".to_string(), "1".to_string()), ("b.c".to_string(), "x=y".to_string())];
        let blobs = vec![
            Blob {
                name: "w".into(),
                values: vec![1.5, -0.0, f32::MIN_POSITIVE],
            },
            Blob {
                name: "empty".into(),
                values: vec![],
            },
        ];
        let bytes = encode(MAGIC, &meta, &blobs).unwrap();
        let (m2, b2) = decode(MAGIC, &bytes).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(b2, blobs);
        assert_eq!(encode(MAGIC, &m2, &b2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode(MAGIC, &[], &[Blob { name: "w".into(), values: vec![1.0; 4] }]).unwrap();
        assert!(matches!(decode(b"OTHERMAG", &bytes), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(decode(MAGIC, cut), Err(Error::Format { .. })));
        let bad_meta = vec![("k\n".to_string(), "v".to_string())];
        assert!(encode(MAGIC, &bad_meta, &[]).is_err());
    }
}
