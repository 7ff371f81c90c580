//! Binary file formats: "KNCP" context-pair files (inputs to datastore
//! construction and teacher-forced scoring) and "KNPJ" projection weights.
//! Both are little-endian with a magic/version header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::prediction::Projection;

const PAIRS_MAGIC: [u8; 4] = *b"KNCP";
const PAIRS_VERSION: u16 = 1;
const PROJECTION_MAGIC: [u8; 4] = *b"KNPJ";
const PROJECTION_VERSION: u16 = 1;

/// Token id marking a sequence boundary; its record carries a zero vector.
pub const SEQUENCE_SENTINEL: u32 = 0xFFFF_FFFF;

/// A stream of (context vector, gold token) records with embedded sequence
/// boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPairs {
    pub dim: usize,
    pub vocab_size: u32,
    /// Records in order, sentinels included.
    pub records: Vec<(Vec<f32>, u32)>,
}

impl ContextPairs {
    pub fn new(dim: usize, vocab_size: u32) -> Self {
        ContextPairs {
            dim,
            vocab_size,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, vector: Vec<f32>, token: u32) {
        debug_assert_eq!(vector.len(), self.dim);
        self.records.push((vector, token));
    }

    pub fn push_boundary(&mut self) {
        self.records.push((vec![0.0; self.dim], SEQUENCE_SENTINEL));
    }

    /// All non-sentinel records, in order.
    pub fn pairs(&self) -> Vec<(Vec<f32>, u32)> {
        self.records
            .iter()
            .filter(|(_, t)| *t != SEQUENCE_SENTINEL)
            .cloned()
            .collect()
    }

    /// Records split at sequence boundaries; empty segments are dropped.
    pub fn sequences(&self) -> Vec<Vec<(Vec<f32>, u32)>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        for (v, t) in &self.records {
            if *t == SEQUENCE_SENTINEL {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
            } else {
                current.push((v.clone(), *t));
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&PAIRS_MAGIC)?;
        w.write_u16::<LittleEndian>(PAIRS_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.vocab_size)?;
        w.write_u64::<LittleEndian>(self.records.len() as u64)?;
        for (v, t) in &self.records {
            for &x in v {
                w.write_f32::<LittleEndian>(x)?;
            }
            w.write_u32::<LittleEndian>(*t)?;
        }
        Ok(())
    }

    pub fn save_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| map_eof(e, "magic"))?;
        if magic != PAIRS_MAGIC {
            return Err(Error::BadMagic {
                expected: PAIRS_MAGIC,
                got: magic,
            });
        }
        let version = r
            .read_u16::<LittleEndian>()
            .map_err(|e| map_eof(e, "version"))?;
        if version != PAIRS_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let dim = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "dim"))? as usize;
        let vocab_size = r
            .read_u32::<LittleEndian>()
            .map_err(|e| map_eof(e, "vocab"))?;
        let count = r
            .read_u64::<LittleEndian>()
            .map_err(|e| map_eof(e, "count"))? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v = vec![0f32; dim];
            for x in &mut v {
                *x = r
                    .read_f32::<LittleEndian>()
                    .map_err(|e| map_eof(e, "record"))?;
            }
            let t = r
                .read_u32::<LittleEndian>()
                .map_err(|e| map_eof(e, "record"))?;
            records.push((v, t));
        }
        Ok(ContextPairs {
            dim,
            vocab_size,
            records,
        })
    }

    pub fn load_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }
}

fn map_eof(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::TruncatedFile(what.to_string())
    } else {
        Error::Io(e)
    }
}

pub fn save_projection<W: Write>(proj: &Projection, mut w: W) -> Result<()> {
    w.write_all(&PROJECTION_MAGIC)?;
    w.write_u16::<LittleEndian>(PROJECTION_VERSION)?;
    w.write_u32::<LittleEndian>(proj.vocab_size() as u32)?;
    w.write_u32::<LittleEndian>(proj.dim() as u32)?;
    for &x in proj.weights().iter() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn save_projection_path<P: AsRef<Path>>(proj: &Projection, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_projection(proj, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_projection<R: Read>(mut r: R) -> Result<Projection> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| map_eof(e, "magic"))?;
    if magic != PROJECTION_MAGIC {
        return Err(Error::BadMagic {
            expected: PROJECTION_MAGIC,
            got: magic,
        });
    }
    let version = r
        .read_u16::<LittleEndian>()
        .map_err(|e| map_eof(e, "version"))?;
    if version != PROJECTION_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let vocab = r
        .read_u32::<LittleEndian>()
        .map_err(|e| map_eof(e, "vocab"))? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "dim"))? as usize;
    let mut weights = Array2::zeros((vocab, dim));
    for x in weights.iter_mut() {
        *x = r
            .read_f64::<LittleEndian>()
            .map_err(|e| map_eof(e, "weights"))?;
    }
    Projection::from_weights(weights)
}

pub fn load_projection_path<P: AsRef<Path>>(path: P) -> Result<Projection> {
    load_projection(BufReader::new(File::open(path)?))
}
