//! Shared checkpoint format: a length-prefixed UTF-8 JSON header listing
//! tensor names/shapes/dtypes and free-form metadata, followed by
//! little-endian IEEE-754 float32 payloads in header order, followed by a
//! CRC-32 checksum of the payload bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor `{name}`")))?;
        Ok(self.tensors.remove(idx).1)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            version: 1,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header)
            .map_err(|e| TensorError::Checkpoint(format!("header encode: {e}")))?;
        let io = |e: std::io::Error| TensorError::Checkpoint(format!("write: {e}"));
        w.write_all(&(hjson.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&hjson).map_err(io)?;
        let mut crc = Crc32::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                let bytes = v.to_le_bytes();
                crc.update(&bytes);
                w.write_all(&bytes).map_err(io)?;
            }
        }
        w.write_all(&crc.finish().to_le_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| TensorError::Checkpoint(format!("read: {e}"));
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4).map_err(io)?;
        let hlen = u32::from_le_bytes(len4) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(io)?;
        let header: Header = serde_json::from_slice(&hbuf)
            .map_err(|e| TensorError::Checkpoint(format!("header decode: {e}")))?;
        if header.version != 1 {
            return Err(TensorError::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut crc = Crc32::new();
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(TensorError::Checkpoint(format!(
                    "tensor `{}` has unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf).map_err(io)?;
            crc.update(&buf);
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((entry.name.clone(), Tensor::from_vec(entry.shape.clone(), data)?));
        }
        let mut want = [0u8; 4];
        r.read_exact(&mut want).map_err(io)?;
        if u32::from_le_bytes(want) != crc.finish() {
            return Err(TensorError::Checkpoint("payload checksum mismatch".into()));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| TensorError::Checkpoint(format!("create {}: {e}", path.display())))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| TensorError::Checkpoint(format!("open {}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// CRC-32 (IEEE 802.3), bytewise table-driven.
struct Crc32 {
    table: [u32; 256],
    state: u32,
}

impl Crc32 {
    fn new() -> Self {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        Self { table, state: 0xFFFF_FFFF }
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state = self.table[((self.state ^ b as u32) & 0xFF) as usize] ^ (self.state >> 8);
        }
    }

    fn finish(&self) -> u32 {
        self.state ^ 0xFFFF_FFFF
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_known_vector() {
        let mut crc = Crc32::new();
        crc.update(b"123456789");
        assert_eq!(crc.finish(), 0xCBF4_3926);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let mut ck = Checkpoint::new();
        ck.meta.insert("note".into(), "weights use truncated normal, std 0.02".into());
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0])
            .unwrap();
        let b = Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        ck.push("layer.w", &a);
        ck.push("layer.b", &b);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.meta.get("note").map(String::as_str), ck.meta.get("note").map(String::as_str));
        assert_eq!(back.get("layer.w").unwrap().data(), a.data());
        assert_eq!(back.get("layer.b").unwrap().data(), b.data());
        // A second serialization is byte-identical.
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let mut ck = Checkpoint::new();
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        ck.push("t", &a);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let n = buf.len();
        buf[n - 6] ^= 0xFF; // flip a payload byte
        assert!(Checkpoint::read_from(&buf[..]).is_err());
    }
}
