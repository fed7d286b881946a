//! Versioned binary checkpoint container: named parameter tensors, optional
//! optimizer state, and a small string metadata map. Little-endian
//! throughout, with a trailing CRC-32.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::{NumError, OptimizerState, Tensor};

/// Magic header identifying the container and its format version.
pub const CHECKPOINT_MAGIC: &[u8; 12] = b"MBLAB-CKPT-1";

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    /// Free-form string metadata (model kind, config digest, ...).
    pub meta: Vec<(String, String)>,
    /// Named parameter tensors in a stable order.
    pub tensors: Vec<(String, Tensor)>,
    /// Optimizer moments aligned with `tensors` by index.
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        put_u32(&mut buf, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut buf, d as u64);
            }
            for &v in t.data() {
                put_f64(&mut buf, v);
            }
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(st) => {
                buf.push(1);
                put_f64(&mut buf, st.learning_rate);
                put_f64(&mut buf, st.beta1);
                put_f64(&mut buf, st.beta2);
                put_f64(&mut buf, st.epsilon);
                match st.clip_threshold {
                    None => buf.push(0),
                    Some(c) => {
                        buf.push(1);
                        put_f64(&mut buf, c);
                    }
                }
                put_u64(&mut buf, st.step);
                for (m, v) in &st.moments {
                    for &x in m {
                        put_f64(&mut buf, x);
                    }
                    for &x in v {
                        put_f64(&mut buf, x);
                    }
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumError> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
            return Err(NumError::Checkpoint("truncated: shorter than header".into()));
        }
        let magic = &bytes[..CHECKPOINT_MAGIC.len()];
        if magic != CHECKPOINT_MAGIC {
            if &magic[..11] == &CHECKPOINT_MAGIC[..11] {
                return Err(NumError::Checkpoint(format!(
                    "version mismatch: found {:?}, expected {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(CHECKPOINT_MAGIC),
                )));
            }
            return Err(NumError::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = LittleEndian::read_u32(tail);
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(NumError::Checkpoint(format!(
                "checksum failure: stored {stored:#010x}, computed {actual:#010x}"
            )));
        }

        let mut cur = Cursor { buf: body, pos: CHECKPOINT_MAGIC.len() };
        let meta_count = cur.u32()? as usize;
        let mut meta = Vec::with_capacity(meta_count);
        for _ in 0..meta_count {
            let k = cur.string()?;
            let v = cur.string()?;
            meta.push((k, v));
        }
        let tensor_count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cur.f64()?);
            }
            tensors.push((name, Tensor::new(shape, data)));
        }
        let optimizer = if cur.u8()? == 1 {
            let learning_rate = cur.f64()?;
            let beta1 = cur.f64()?;
            let beta2 = cur.f64()?;
            let epsilon = cur.f64()?;
            let clip_threshold = if cur.u8()? == 1 { Some(cur.f64()?) } else { None };
            let step = cur.u64()?;
            let mut moments = Vec::with_capacity(tensors.len());
            for (_, t) in &tensors {
                let n = t.numel();
                let mut m = Vec::with_capacity(n);
                for _ in 0..n {
                    m.push(cur.f64()?);
                }
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(cur.f64()?);
                }
                moments.push((m, v));
            }
            Some(OptimizerState {
                learning_rate,
                beta1,
                beta2,
                epsilon,
                clip_threshold,
                step,
                moments,
            })
        } else {
            None
        };
        if cur.pos != body.len() {
            return Err(NumError::Checkpoint(format!(
                "trailing garbage: {} unread bytes",
                body.len() - cur.pos
            )));
        }
        Ok(Checkpoint { meta, tensors, optimizer })
    }

    /// Writes atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<(), NumError> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)
            .and_then(|_| fs::rename(&tmp, path))
            .map_err(|e| NumError::Checkpoint(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NumError> {
        let bytes = fs::read(path)
            .map_err(|e| NumError::Checkpoint(format!("read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumError> {
        if self.pos + n > self.buf.len() {
            return Err(NumError::Checkpoint("truncated: record extends past end".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NumError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NumError> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64, NumError> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn f64(&mut self) -> Result<f64, NumError> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    fn string(&mut self) -> Result<String, NumError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| NumError::Checkpoint("invalid UTF-8 in string field".into()))
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let params = vec![
            ("layer.w".to_string(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 0.25, -9.0])),
            ("layer.b".to_string(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3])),
        ];
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let mut opt = OptimizerState::new(1e-3, Some(1.0), &tensors);
        opt.step = 7;
        opt.moments[0].0[2] = 0.5;
        Checkpoint {
            meta: vec![("model".into(), "proposed".into())],
            tensors: params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensors[0].1.data(), ck.tensors[0].1.data());
        assert_eq!(back.optimizer, ck.optimizer);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        // Either the CRC or the cursor catches it first; both are accepted.
        let msg = err.to_string();
        assert!(msg.contains("checksum") || msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let mut bytes = sample().to_bytes();
        bytes[11] = b'9';
        // Recompute the CRC so only the version differs.
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version mismatch"), "{err}");
    }
}
