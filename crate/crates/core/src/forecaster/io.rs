//! `CDFM` model files: magic, version, JSON config, then every parameter as
//! name, rank, dims and 32-bit floats (all integers u32 little-endian).

use std::collections::HashSet;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::autodiff::Tensor4;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"CDFM";
pub const MODEL_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let config = serde_json::to_string_pretty(model.config())?;
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    for (_, p) in model.params().iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        put_u32(&mut out, shape.len());
        for d in shape {
            put_u32(&mut out, d);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses a model file and checks every parameter against the shapes the
/// embedded config implies.
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MODEL_MAGIC.as_slice()) {
        return Err(Error::Format("missing CDFM magic".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let config: ModelConfig = serde_json::from_str(r.string()?)?;
    let mut model = Model::new(config)?;
    let mut seen = HashSet::new();
    while !r.done() {
        let name = r.string()?.to_string();
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| Error::ModelMismatch(format!("unknown parameter `{name}`")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::ModelMismatch(format!("parameter `{name}` appears twice")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let expected = model.params().value(id).shape();
        if dims != expected {
            return Err(Error::Shape {
                left: dims,
                right: expected.to_vec(),
                context: "stored parameter vs model config",
            });
        }
        let n: usize = expected.iter().product();
        let raw = r.take(n * 4)?;
        let values: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        *model.params_mut().value_mut(id) = Tensor4::from_vec(expected, values)?;
    }
    if seen.len() != model.params().len() {
        let missing: Vec<_> = model
            .params()
            .iter()
            .filter(|(_, p)| !seen.contains(&p.name))
            .map(|(_, p)| p.name.clone())
            .collect();
        return Err(Error::ModelMismatch(format!("missing parameters {missing:?}")));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::tests::random_window;
    use crate::forecaster::{D2dConfig, Structure};

    fn model() -> Model {
        let cfg = ModelConfig {
            frames: 2,
            resolution: 16,
            d2d: D2dConfig {
                pool_stages: 2,
                ..D2dConfig::default()
            },
            ..ModelConfig::compact()
        };
        let mut m = Model::new(cfg).unwrap();
        // Give the head non-zero weights so predictions exercise every path.
        let head = m.params().id("head.w").unwrap();
        m.params_mut().value_mut(head).fill(0.05);
        m
    }

    #[test]
    fn save_load_save_is_identical() {
        let m = model();
        let a = encode_model(&m).unwrap();
        let b = encode_model(&decode_model(&a).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[..4], b"CDFM");
    }

    #[test]
    fn predictions_survive_round_trip() {
        let m = model();
        let loaded = decode_model(&encode_model(&m).unwrap()).unwrap();
        let w = random_window(m.config(), 5);
        let p1 = m.predict(&w).unwrap();
        let p2 = loaded.predict(&w).unwrap();
        for (a, b) in p1.grid().values().iter().zip(p2.grid().values()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn distinct_errors() {
        let m = model();
        let bytes = encode_model(&m).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_model(&bad), Err(Error::Version { found: 9, .. })));

        // Edit the first dim of the first parameter.
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let name_at = 12 + cfg_len;
        let name_len = u32::from_le_bytes(bytes[name_at..name_at + 4].try_into().unwrap()) as usize;
        let dim_at = name_at + 4 + name_len + 4;
        let mut bad = bytes.clone();
        bad[dim_at] += 1;
        assert!(matches!(decode_model(&bad), Err(Error::Shape { .. })));

        assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn config_mismatch_detected() {
        let m = model();
        let bytes = encode_model(&m).unwrap();
        // Re-encode with a config whose structure lacks the F2D stream.
        let mut cfg = m.config().clone();
        cfg.structure = Structure::D2dOnly;
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut bad = bytes[..8].to_vec();
        bad.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bad.extend_from_slice(json.as_bytes());
        bad.extend_from_slice(&bytes[12 + cfg_len..]);
        assert!(matches!(decode_model(&bad), Err(Error::ModelMismatch(_))));
    }
}
