//! Sectioned binary container for generator checkpoints.
//!
//! ```text
//! "CSG0"  u32 version  u32 section_count
//! per section:
//!   u32 name_len, name (UTF-8)
//!   u64 payload_len, payload
//!   u64 FNV-1a digest of payload
//! ```
//!
//! Sections, in order: `CONFIG` (generator config JSON), `REGISTRY`
//! (mapping CSV), `BASE`, then one `DELTA:<domain>` per continual step.
//! Parameter payloads hold `u32 count` records of
//! `u32 name_len, name, u32 ndim, u64 dims.., f64 data..`, sorted by name.
//! Integers and reals are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::labelspace::LabelRegistry;
use crate::netblocks::{GeneratorConfig, GeneratorModel};
use crate::params::{fnv1a64, DomainTag, ParamSet, Parameter};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSG0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub payload: Vec<u8>,
    pub digest: u64,
}

impl Section {
    fn new(name: impl Into<String>, payload: Vec<u8>) -> Self {
        let digest = fnv1a64(&payload);
        Self {
            name: name.into(),
            payload,
            digest,
        }
    }
}

fn encode_params(set: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for p in set.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.tensor.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Self {
            bytes,
            pos: 0,
            what,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Corrupt(format!("{}: truncated at byte {}", self.what, self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::Corrupt(format!("{}: length overflow", self.what)))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt(format!("{}: name is not UTF-8", self.what)))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_params(payload: &[u8], section: &str, tag: DomainTag) -> Result<ParamSet> {
    let mut r = Reader::new(payload, section);
    let count = r.u32()?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("{section}: shape overflow")))?;
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Corrupt(format!("{section}: size overflow")))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        set.insert(Parameter::new(name, Tensor::new(&shape, data)?, tag));
    }
    if !r.done() {
        return Err(Error::Corrupt(format!("{section}: trailing bytes")));
    }
    Ok(set)
}

/// An encoded checkpoint: its sections and the bytes they serialize to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub version: u32,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn from_model(model: &GeneratorModel) -> Result<Self> {
        let reg = model.registry();
        let mut sections = vec![
            Section::new("CONFIG", serde_json::to_vec(model.config())?),
            Section::new("REGISTRY", reg.to_csv().into_bytes()),
            Section::new("BASE", encode_params(model.base())),
        ];
        for (k, d) in model.deltas().iter().enumerate() {
            let domain = &reg.step(k + 1)?.domain;
            sections.push(Section::new(format!("DELTA:{domain}"), encode_params(d)));
        }
        Ok(Self {
            version: VERSION,
            sections,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&s.payload);
            out.extend_from_slice(&s.digest.to_le_bytes());
        }
        out
    }

    /// Parses the container; a stored digest that disagrees with its payload is [`Error::Corrupt`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("missing CSG0 magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let n = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let len = r.len()?;
            let payload = r.take(len)?.to_vec();
            let stored = r.u64()?;
            let s = Section::new(name, payload);
            if s.digest != stored {
                return Err(Error::Corrupt(format!(
                    "section {} digest {:016x} does not match stored {:016x}",
                    s.name, s.digest, stored
                )));
            }
            sections.push(s);
        }
        if !r.done() {
            return Err(Error::Corrupt("trailing bytes after last section".into()));
        }
        Ok(Self { version, sections })
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Corrupt(format!("missing section {name}")))
    }

    pub fn digests(&self) -> Vec<(String, u64)> {
        self.sections
            .iter()
            .map(|s| (s.name.clone(), s.digest))
            .collect()
    }

    pub fn to_model(&self) -> Result<GeneratorModel> {
        let config: GeneratorConfig = serde_json::from_slice(&self.section("CONFIG")?.payload)?;
        let csv = std::str::from_utf8(&self.section("REGISTRY")?.payload)
            .map_err(|_| Error::Corrupt("registry is not UTF-8".into()))?;
        let registry = LabelRegistry::load_mapping(csv)?;
        let base = decode_params(&self.section("BASE")?.payload, "BASE", DomainTag::Base)?;
        let mut deltas = Vec::new();
        for (i, s) in self.sections.iter().skip(3).enumerate() {
            let step = i + 1;
            let expected = format!("DELTA:{}", registry.step(step)?.domain);
            if s.name != expected {
                return Err(Error::Validation(format!(
                    "section {} found where {expected} was expected",
                    s.name
                )));
            }
            deltas.push(decode_params(&s.payload, &s.name, DomainTag::Domain(step))?);
        }
        let model = GeneratorModel::from_parts(config, registry, base, deltas)?;
        model.check_structure()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn save_model(model: &GeneratorModel, path: impl AsRef<Path>) -> Result<Checkpoint> {
    let ck = Checkpoint::from_model(model)?;
    ck.save(path)?;
    Ok(ck)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GeneratorModel> {
    Checkpoint::load(path)?.to_model()
}
