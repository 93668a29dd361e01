//! Component checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FMTK"                       magic
//! u16                          format version (1)
//! u8                           component kind (0 encoder, 1 backbone, 2 adapter, 3 decoder)
//! u32 + UTF-8                  component name
//! u32 + UTF-8                  canonical JSON {"config": .., "type": ..}, keys sorted
//! u32                          parameter count
//! per parameter:
//!   u32 + UTF-8                path
//!   u8                         dtype (0 f64, 1 f32)
//!   u32                        rank
//!   u64 × rank                 dims
//!   raw scalars
//! u32                          CRC32 of every preceding byte
//! ```

use std::path::Path;

use serde_json::Value;

use crate::adapters::{LoraAdapter, LoraConfig};
use crate::backbone::{Backbone, BackboneConfig};
use crate::component::{Component, ComponentKind};
use crate::decoders::{self, Decoder};
use crate::encoders::{self, Encoder};
use crate::error::{Error, Result};
use crate::params::{Param, ParameterSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMTK";
pub const FORMAT_VERSION: u16 = 1;

/// Scalar width used when writing parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    /// Half the size; values round-trip through `f32`, so not bit-exact.
    F32,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F64 => 0,
            Precision::F32 => 1,
        }
    }
}

/// Serializes a JSON value with object keys in sorted order at every level.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Encodes a component into checkpoint bytes.
pub fn encode(c: &dyn Component, precision: Precision) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(c.kind().tag());
    put_str(&mut buf, c.name());
    let envelope = serde_json::json!({ "type": c.type_name(), "config": c.config() });
    put_str(&mut buf, &canonical_json(&envelope));
    let params = c.parameters();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (path, p) in params.iter() {
        put_str(&mut buf, path);
        buf.push(precision.tag());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match precision {
            Precision::F64 => p.value.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            Precision::F32 => p
                .value
                .data()
                .iter()
                .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Writes a component checkpoint to `path`.
pub fn save_component(c: &dyn Component, path: &Path, precision: Precision) -> Result<()> {
    std::fs::write(path, encode(c, precision))?;
    Ok(())
}

/// Parsed checkpoint contents before a component is rebuilt.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: ComponentKind,
    pub name: String,
    pub type_name: String,
    pub config: Value,
    pub params: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

/// Verifies the checksum and header, then parses every field.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic; not a component checkpoint".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}; this build reads version {FORMAT_VERSION}"
        )));
    }
    let tag = r.u8()?;
    let kind = ComponentKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown component kind tag {tag}")))?;
    let name = r.string()?;
    let envelope: Value = serde_json::from_str(&r.string()?)?;
    let type_name = envelope
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Format("config has no type".into()))?
        .to_string();
    let config = envelope.get("config").cloned().unwrap_or(Value::Null);
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let path = r.string()?;
        let dtype = r.u8()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            0 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            1 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(Error::Format(format!("unknown dtype tag {other} for {path}"))),
        };
        params.push((path, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        kind,
        name,
        type_name,
        config,
        params,
    })
}

/// A component rebuilt from a checkpoint.
pub enum LoadedComponent {
    Encoder(Box<dyn Encoder>),
    Backbone(Backbone),
    Adapter(LoraAdapter),
    Decoder(Box<dyn Decoder>),
}

impl LoadedComponent {
    pub fn kind(&self) -> ComponentKind {
        match self {
            LoadedComponent::Encoder(_) => ComponentKind::Encoder,
            LoadedComponent::Backbone(_) => ComponentKind::Backbone,
            LoadedComponent::Adapter(_) => ComponentKind::Adapter,
            LoadedComponent::Decoder(_) => ComponentKind::Decoder,
        }
    }

    pub fn as_component(&self) -> &dyn Component {
        match self {
            LoadedComponent::Encoder(c) => c.as_ref(),
            LoadedComponent::Backbone(c) => c,
            LoadedComponent::Adapter(c) => c,
            LoadedComponent::Decoder(c) => c.as_ref(),
        }
    }
}

impl std::fmt::Debug for LoadedComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = self.as_component();
        write!(f, "LoadedComponent({} {:?})", c.kind(), c.name())
    }
}

/// Copies stored parameters into a freshly built component. Entries the
/// fresh component lacks (fitted decoder state) are added frozen.
fn restore(target: &mut ParameterSet, stored: Vec<(String, Tensor)>) -> Result<()> {
    let missing: Vec<String> = target
        .names()
        .filter(|n| !stored.iter().any(|(p, _)| p == n))
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint lacks parameters: {}", missing.join(", "))));
    }
    for (path, t) in stored {
        if target.get(&path).is_some() {
            target.assign(&path, t)?;
        } else {
            target.upsert(path, Param::frozen(t));
        }
    }
    Ok(())
}

fn config_err(what: &str, e: serde_json::Error) -> Error {
    Error::Format(format!("invalid {what} config in checkpoint: {e}"))
}

/// Rebuilds a component from parsed checkpoint contents.
pub fn rebuild(ck: Checkpoint) -> Result<LoadedComponent> {
    let mut loaded = match ck.kind {
        ComponentKind::Encoder => LoadedComponent::Encoder(encoders::build(&ck.type_name, &ck.config)?),
        ComponentKind::Decoder => LoadedComponent::Decoder(decoders::build(&ck.type_name, &ck.config)?),
        ComponentKind::Backbone => {
            let cfg: BackboneConfig = serde_json::from_value(ck.config.clone()).map_err(|e| config_err("backbone", e))?;
            LoadedComponent::Backbone(Backbone::new(cfg)?)
        }
        ComponentKind::Adapter => {
            let cfg: LoraConfig = serde_json::from_value(ck.config.clone()).map_err(|e| config_err("adapter", e))?;
            let mut ps = ParameterSet::new();
            for (path, t) in ck.params {
                ps.insert(path, Param::new(t))?;
            }
            let mut ad = LoraAdapter::from_parts(cfg, ps)?;
            ad.set_name(ck.name);
            return Ok(LoadedComponent::Adapter(ad));
        }
    };
    let c: &mut dyn Component = match &mut loaded {
        LoadedComponent::Encoder(c) => c.as_mut(),
        LoadedComponent::Backbone(c) => c,
        LoadedComponent::Adapter(c) => c,
        LoadedComponent::Decoder(c) => c.as_mut(),
    };
    restore(c.parameters_mut(), ck.params)?;
    c.set_name(ck.name);
    Ok(loaded)
}

/// Reads and rebuilds any component checkpoint.
pub fn load_component(path: &Path) -> Result<LoadedComponent> {
    rebuild(decode(&std::fs::read(path)?)?)
}

/// Like [`load_component`], but fails unless the file holds `expected`.
pub fn load_component_as(path: &Path, expected: ComponentKind) -> Result<LoadedComponent> {
    let ck = decode(&std::fs::read(path)?)?;
    if ck.kind != expected {
        return Err(Error::KindMismatch {
            expected: expected.as_str(),
            actual: ck.kind.as_str(),
        });
    }
    rebuild(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::{MlpDecoder, MlpDecoderConfig};

    fn mlp() -> MlpDecoder {
        MlpDecoder::new(MlpDecoderConfig {
            input_dim: 4,
            output_dim: 2,
            hidden_dim: 3,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v = serde_json::json!({"b": 1, "a": {"z": [1, {"y": 2, "x": 3}], "c": null}});
        assert_eq!(canonical_json(&v), r#"{"a":{"c":null,"z":[1,{"x":3,"y":2}]},"b":1}"#);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&mlp(), Precision::F64);
        assert_eq!(&bytes[..4], b"FMTK");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 3);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 3);
        assert_eq!(&bytes[11..14], b"mlp");
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = mlp();
        let ck = decode(&encode(&m, Precision::F64)).unwrap();
        let LoadedComponent::Decoder(d) = rebuild(ck).unwrap() else {
            panic!("wrong kind")
        };
        assert!(d.parameters().bitwise_eq(m.parameters()));
    }

    #[test]
    fn corruption_and_truncation_are_rejected() {
        let bytes = encode(&mlp(), Precision::F64);
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x10;
        assert!(matches!(decode(&flipped), Err(Error::Checksum { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() / 2]), Err(Error::Checksum { .. })));
    }

    #[test]
    fn f32_storage_is_close() {
        let m = mlp();
        let ck = decode(&encode(&m, Precision::F32)).unwrap();
        let LoadedComponent::Decoder(d) = rebuild(ck).unwrap() else {
            panic!("wrong kind")
        };
        for ((_, a), (_, b)) in d.parameters().iter().zip(m.parameters().iter()) {
            assert!(a.value.max_abs_diff(&b.value) < 1e-6);
        }
    }
}
