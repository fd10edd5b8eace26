//! Self-describing binary checkpoint container.
//!
//! Layout: the 8-byte magic `SACKPT01`, a little-endian `u64` header length,
//! a JSON header listing every tensor (name, shape, element offset) plus free
//! form metadata, then the raw little-endian `f32` payload. Values round-trip
//! bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SACKPT01";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

pub fn encode(store: &ParamStore, meta: &serde_json::Value) -> Vec<u8> {
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        tensors,
        meta: meta.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[16 + hlen..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| Error::Format(format!("truncated payload for `{}`", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(e.name, Tensor::from_vec(&e.shape, data));
    }
    Ok((store, header.meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(store, meta))
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<u32>(), 1..64), meta in any::<i64>()) {
            let mut s = ParamStore::new();
            let floats: Vec<f32> = vals.iter().map(|b| f32::from_bits(*b)).collect();
            s.add("a", Tensor::from_vec(&[floats.len()], floats.clone()));
            s.add("b.weight", Tensor::from_vec(&[1, 1], vec![floats[0]]));
            let m = serde_json::json!({ "k": meta });
            let (back, mback) = decode(&encode(&s, &m)).unwrap();
            prop_assert_eq!(mback, m);
            prop_assert_eq!(back.names(), s.names());
            for (x, y) in back.tensors().iter().zip(s.tensors()) {
                let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
                prop_assert_eq!(x.shape(), y.shape());
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"hello world, not a checkpoint").is_err());
    }
}
