//! `UCKP` container: named f32 tensors with a trailing CRC32.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"UCKP";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered named tensors.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode_checkpoint(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid("checkpoint", format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("checkpoint", "rank above 255"))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid("checkpoint", "dimension above u32"))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<NamedTensors> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(bad("CRC mismatch"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let head = take(2)?;
        if head[0] != DTYPE_F32 {
            return Err(bad(&format!("unknown dtype {}", head[0])));
        }
        let mut shape = Vec::with_capacity(head[1] as usize);
        for _ in 0..head[1] {
            shape.push(u32_at(take(4)?) as usize);
        }
        let n: usize = shape.iter().product();
        let data = take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    let tmp = path.with_extension("uckp.partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Name-indexed view for lookups.
pub struct TensorMap(BTreeMap<String, Tensor<f32>>);

impl TensorMap {
    pub fn new(tensors: NamedTensors) -> Self {
        Self(tensors.into_iter().collect())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.0.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        let t = self.get(name)?;
        if t.numel() != 1 {
            return Err(Error::invalid("checkpoint", format!("{name} is not a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    /// Fills `store` from `{prefix}{param name}` entries.
    pub fn load_store(&self, store: &mut ParamStore<f32>, prefix: &str) -> Result<()> {
        let values = store
            .iter()
            .map(|(name, _)| self.get(&format!("{prefix}{name}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        store.load_from(&values)
    }
}

/// `{prefix}{param name}` entries for every parameter of `store`.
pub fn store_entries(store: &ParamStore<f32>, prefix: &str) -> NamedTensors {
    store.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
}

/// Raw (non-averaged) weights paired with `store`'s names.
pub fn raw_entries(store: &ParamStore<f32>, raw: &[Tensor<f32>], prefix: &str) -> NamedTensors {
    store.iter().zip(raw).map(|((n, _), t)| (format!("{prefix}{n}"), t.clone())).collect()
}
