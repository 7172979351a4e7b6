//! Little-endian binary checkpoints.
//!
//! Layout: 8-byte magic `CERTLIP1`, `u32` version, `u32`-length-prefixed UTF-8
//! spec text, `u32` blob count, then per blob a `u32`-length-prefixed name, a
//! `u8` dtype code (0 = f64, 1 = f32), a `u32` rank, `rank` `u64` dims and the
//! raw values.

use std::fs;
use std::path::Path;

use super::{build_network, Network, NetworkSpec};
use crate::config::{Document, Section};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CERTLIP1";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";

/// A network plus named training-state blobs (optimizer moments, power
/// iterates, epoch counter).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub precision: Precision,
    pub extras: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint { network, precision: Precision::F64, extras: Vec::new() }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn spec_text(&self) -> String {
        let mut doc = Document::default();
        doc.push(self.network.spec().to_section());
        let mut meta = Section::new("checkpoint");
        meta.set("dtype", self.precision.name());
        doc.push(meta);
        doc.to_text()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.spec_text();
        write_str(&mut out, &text);
        let blobs: Vec<(String, &Tensor)> = self
            .network
            .params()
            .iter()
            .map(|p| (format!("{}{}", PARAM_PREFIX, p.name), &p.value))
            .chain(self.extras.iter().map(|(n, t)| (n.clone(), t)))
            .collect();
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, t) in blobs {
            write_str(&mut out, &name);
            out.push(0u8);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; when `expected` is given the embedded spec must
    /// equal it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&NetworkSpec>) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let text = r.string()?;
        let doc = Document::parse(&text).map_err(|e| Error::CorruptCheckpoint(format!("spec text: {}", e)))?;
        let spec = NetworkSpec::from_section(
            doc.section("network").ok_or_else(|| Error::CorruptCheckpoint("spec text lacks [network]".into()))?,
        )?;
        let precision = match doc.section("checkpoint").and_then(|s| s.get("dtype")) {
            Some("f32") => Precision::F32,
            Some("f64") | None => Precision::F64,
            Some(other) => return Err(Error::CorruptCheckpoint(format!("unknown dtype {}", other))),
        };
        if let Some(exp) = expected {
            if exp != &spec {
                return Err(Error::SpecMismatch(format!(
                    "checkpoint holds {} layers ({}), requested {} layers ({})",
                    spec.layers.len(),
                    describe(&spec),
                    exp.layers.len(),
                    describe(exp)
                )));
            }
        }
        let mut network = build_network(&spec, 0)?;
        let mut seen = vec![false; network.params().len()];
        let mut extras = Vec::new();
        let count = r.u32()? as usize;
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CorruptCheckpoint(format!("blob {} has rank {}", name, rank)));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::CorruptCheckpoint(format!("blob {} shape overflows", name)))?;
            let data: Vec<f64> = match dtype {
                0 => r.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                1 => r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(Error::CorruptCheckpoint(format!("blob {} has dtype code {}", name, other))),
            };
            let t = Tensor::new(shape, data)?;
            if let Some(pname) = name.strip_prefix(PARAM_PREFIX) {
                let idx = network
                    .param_index(pname)
                    .ok_or_else(|| Error::SpecMismatch(format!("parameter {} not in embedded spec", pname)))?;
                if t.shape() != network.param(idx).shape() {
                    return Err(Error::SpecMismatch(format!(
                        "parameter {} has shape {:?}, spec implies {:?}",
                        pname,
                        t.shape(),
                        network.param(idx).shape()
                    )));
                }
                network.set_param(idx, t)?;
                seen[idx] = true;
            } else {
                extras.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::CorruptCheckpoint(format!("missing parameter {}", network.params()[missing].name)));
        }
        Ok(Checkpoint { network, precision, extras })
    }
}

fn describe(spec: &NetworkSpec) -> String {
    let kinds: Vec<&str> = spec.layers.iter().map(|l| l.kind()).filter(|k| *k != "minmax").collect();
    kinds.join(",")
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&NetworkSpec>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, expected)
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("unexpected end of file at byte {} (need {} more)", self.pos, n))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid UTF-8".into()))
    }
}
