//! Parameter blobs and their text manifests.
//!
//! Blob layout (little-endian):
//! - magic `CXCK`, version u16 = 1, entry count u32
//! - per entry: name length u16, UTF-8 name, rows u32, cols u32,
//!   rows × cols f64 row-major

use std::collections::BTreeMap;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::Param;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CXCK";
const VERSION: u16 = 1;

pub fn encode_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> Vec<u8> {
    let params: Vec<&Param> = params.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let (rows, cols) = p.shape();
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Array2<f64>)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let payload = cur.take(rows * cols * 8)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((
            name,
            Array2::from_shape_vec((rows, cols), values).expect("sized payload"),
        ));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(out)
}

/// Copies decoded values into `params`, matching by position, name and shape.
pub fn load_params(params: Vec<&mut Param>, entries: &[(String, Array2<f64>)]) -> Result<()> {
    if params.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, blob holds {}",
            params.len(),
            entries.len()
        )));
    }
    for (p, (name, value)) in params.into_iter().zip(entries) {
        if &p.name != name || p.value.dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} does not match blob entry `{name}` {:?}",
                p.name,
                p.value.dim(),
                value.dim()
            )));
        }
        p.value.assign(value);
        p.zero_grad();
    }
    Ok(())
}

/// Hex SHA-256 of the encoded blob.
pub fn params_digest<'a>(params: impl IntoIterator<Item = &'a Param>) -> String {
    hex::encode(Sha256::digest(encode_params(params)))
}

/// `key = value` manifest beside a blob: module kind, build parameters and
/// the layer structure (one `layer = ...` line per top-level layer).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointManifest {
    pub kind: String,
    pub fields: BTreeMap<String, String>,
    pub layers: Vec<String>,
}

impl CheckpointManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("kind = {}\n", self.kind);
        for (k, v) in &self.fields {
            out += &format!("{k} = {v}\n");
        }
        for l in &self.layers {
            out += &format!("layer = {l}\n");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = CheckpointManifest::default();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("manifest line without `=`: {line}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "kind" => manifest.kind = v.to_string(),
                "layer" => manifest.layers.push(v.to_string()),
                _ => {
                    manifest.fields.insert(k.to_string(), v.to_string());
                }
            }
        }
        if manifest.kind.is_empty() {
            return Err(Error::Checkpoint("manifest lacks `kind`".into()));
        }
        Ok(manifest)
    }

    pub fn field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .fields
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("manifest `{key}` = `{raw}` is malformed")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn blobs_round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let vals: Vec<f64> = (0..rows * cols)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 12 | 0x3ff0_0000_0000_0000))
                .collect();
            let a = Param::new("a.weight", Array2::from_shape_vec((rows, cols), vals).unwrap());
            let b = Param::new("b", array![[-0.0, 1e-300]]);
            let decoded = decode_params(&encode_params([&a, &b])).unwrap();
            prop_assert_eq!(&decoded[0].1, &a.value);
            prop_assert_eq!(&decoded[1].0, "b");
            prop_assert_eq!(decoded[1].1[[0, 0]].to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn shape_mismatch_refuses_to_load() {
        let src = Param::new("w", array![[1.0, 2.0]]);
        let mut dst = Param::zeros("w", 2, 1);
        let entries = decode_params(&encode_params([&src])).unwrap();
        assert!(load_params(vec![&mut dst], &entries).is_err());
    }

    #[test]
    fn manifest_text_round_trips() {
        let m = CheckpointManifest {
            kind: "adapter".into(),
            fields: BTreeMap::from([("d".into(), "32".into())]),
            layers: vec!["residual[linear(32->16)]".into()],
        };
        assert_eq!(CheckpointManifest::parse(&m.to_text()).unwrap(), m);
        assert_eq!(m.field::<usize>("d").unwrap(), 32);
    }
}
