//! Binary checkpoint format.
//!
//! ```text
//! "CSMN" | version u32 | count u32 | entries... | fnv1a-64 of everything before
//! entry: name_len u32 | name (UTF-8) | rank u32 | dims u32 * rank | values f32 * numel
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`
//! whatever the build precision. Entries are written in name order and
//! include batch-norm running statistics.

use std::fs;
use std::path::Path;

use csamoe::backbone::Preset;
use csamoe::moe::{CsaMoeModel, Expert, ModelConfig, Variant};
use csamoe::{ParamSet, Real};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"CSMN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Artifact(format!("corrupt checkpoint: {}", msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    /// Down-casts every entry of `params` to `f32`.
    pub fn from_params(params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                dims: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self { entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        if bytes.len() < MAGIC.len() + 16 {
            return Err(corrupt(format!("only {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<CliResult<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| corrupt(format!("`{name}` has absurd dims {dims:?}")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry { name, dims, values });
        }
        if r.pos != body.len() {
            return Err(corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Preset, variant and dropped expert implied by the entry names and
    /// the stem width.
    pub fn infer_config(&self) -> CliResult<ModelConfig> {
        let stem = self
            .entry("expert_img.stem.conv.weight")
            .ok_or_else(|| CliError::Artifact("checkpoint has no whole-image expert".into()))?;
        let preset = [Preset::Full, Preset::Tiny]
            .into_iter()
            .find(|&p| ModelConfig::for_preset(p, Variant::Resnet18).backbone.stem_channels == stem.dims[0])
            .ok_or_else(|| CliError::Artifact(format!("stem width {} matches no preset", stem.dims[0])))?;
        let has_prefix = |prefix: &str| self.entries.iter().any(|e| e.name.starts_with(prefix));
        let variant = if !has_prefix("gate.") {
            Variant::Resnet18
        } else if has_prefix("expert_img.csa.") {
            Variant::CsaMoe
        } else {
            Variant::ResnetMoe
        };
        let missing: Vec<Expert> = [Expert::Tumor, Expert::Boundary]
            .into_iter()
            .filter(|e| !has_prefix(&format!("{}.", e.prefix())))
            .collect();
        let dropped = match (variant, missing.as_slice()) {
            (Variant::Resnet18, _) | (_, []) => None,
            (_, [e]) => Some(*e),
            _ => return Err(CliError::Artifact("checkpoint gate has fewer than two experts".into())),
        };
        ModelConfig::for_preset(preset, variant)
            .with_dropped(dropped)
            .map_err(|e| CliError::Artifact(e.to_string()))
    }

    /// Rebuilds the model, checking every entry against the inferred layout.
    pub fn to_model(&self) -> CliResult<CsaMoeModel> {
        let cfg = self.infer_config()?;
        let mut model = CsaMoeModel::new(cfg, 0)?;
        let params = model.params_mut();
        if params.len() != self.entries.len() {
            return Err(CliError::Artifact(format!(
                "checkpoint has {} entries, {} model expects {}",
                self.entries.len(),
                model.config().variant,
                model.params().len()
            )));
        }
        for e in &self.entries {
            let shape_ok = params.get(&e.name).map(|t| t.shape() == e.dims.as_slice());
            match shape_ok {
                Ok(true) => {}
                Ok(false) => {
                    return Err(CliError::Artifact(format!("`{}` has unexpected shape {:?}", e.name, e.dims)))
                }
                Err(_) => return Err(CliError::Artifact(format!("unexpected entry `{}`", e.name))),
            }
            let values: Vec<Real> = e.values.iter().map(|&v| v as Real).collect();
            params.set_values(&e.name, &values)?;
        }
        Ok(model)
    }
}
