//! Key-value translation memory with exact top-k retrieval.
//!
//! The datastore maps context vectors (keys) to next-token ids (values) and
//! supports brute-force exact search under inner-product or negative squared
//! L2 scoring. Retrieval order is deterministic: non-increasing score, ties
//! broken by ascending insertion index.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DATASTORE_MAGIC: [u8; 4] = *b"KNDS";
const DATASTORE_VERSION: u16 = 1;

/// Scoring function used for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    /// score = key · query
    InnerProduct,
    /// score = -|key - query|^2
    NegativeL2,
}

impl Metric {
    pub fn score(self, key: &[f32], query: &[f32]) -> f64 {
        match self {
            Metric::InnerProduct => key
                .iter()
                .zip(query)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum(),
            Metric::NegativeL2 => -key
                .iter()
                .zip(query)
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>(),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ip" | "inner-product" => Ok(Metric::InnerProduct),
            "l2" | "negative-l2" => Ok(Metric::NegativeL2),
            other => Err(format!("unknown metric {other:?} (expected ip or l2)")),
        }
    }
}

/// One retrieved entry.
#[derive(Debug, Clone)]
pub struct Neighbor {
    /// Insertion index into the datastore.
    pub index: usize,
    pub key: Vec<f32>,
    pub value: u32,
    pub score: f64,
}

/// Ordered retrieval result.
#[derive(Debug, Clone)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
    pub metric: Metric,
    pub query_dim: usize,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|n| n.value)
    }
}

/// Immutable key-value memory of (context vector, token id) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    vocab_size: u32,
    /// Row-major `count * dim` key storage.
    keys: Vec<f32>,
    values: Vec<u32>,
}

impl Datastore {
    /// Build a datastore from (vector, token) pairs. Insertion order is kept.
    pub fn build<'a, I>(pairs: I, dim: usize, vocab_size: u32) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f32], u32)>,
    {
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (index, (vec, token)) in pairs.into_iter().enumerate() {
            if vec.len() != dim {
                return Err(Error::DimensionMismatch {
                    index,
                    expected: dim,
                    got: vec.len(),
                });
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            if token >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    index,
                    token,
                    vocab_size,
                });
            }
            keys.extend_from_slice(vec);
            values.push(token);
        }
        Ok(Datastore {
            dim,
            vocab_size,
            keys,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn key(&self, index: usize) -> &[f32] {
        &self.keys[index * self.dim..(index + 1) * self.dim]
    }

    pub fn value(&self, index: usize) -> u32 {
        self.values[index]
    }

    /// Exact top-k retrieval. Returns `min(k, count)` entries sorted by
    /// non-increasing score, ties broken by ascending index.
    pub fn search(&self, query: &[f32], k: usize, metric: Metric) -> Result<NeighborSet> {
        if self.count() == 0 {
            return Err(Error::EmptyDatastore);
        }
        if k == 0 {
            return Err(Error::ZeroK);
        }
        if query.len() != self.dim {
            return Err(Error::QueryDimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = (0..self.count())
            .map(|i| (i, metric.score(self.key(i), query)))
            .collect();
        scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        let entries = scored
            .into_iter()
            .map(|(index, score)| Neighbor {
                index,
                key: self.key(index).to_vec(),
                value: self.values[index],
                score,
            })
            .collect();
        Ok(NeighborSet {
            entries,
            metric,
            query_dim: self.dim,
        })
    }

    /// Serialize to the "KNDS" binary format (little-endian).
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&DATASTORE_MAGIC)?;
        w.write_u16::<LittleEndian>(DATASTORE_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.vocab_size)?;
        w.write_u64::<LittleEndian>(self.count() as u64)?;
        for i in 0..self.count() {
            for &x in self.key(i) {
                w.write_f32::<LittleEndian>(x)?;
            }
            w.write_u32::<LittleEndian>(self.values[i])?;
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
        read_exact_or_truncated(&mut r, &mut magic, "magic")?;
        if magic != DATASTORE_MAGIC {
            return Err(Error::BadMagic {
                expected: DATASTORE_MAGIC,
                got: magic,
            });
        }
        let version = r.read_u16::<LittleEndian>().map_err(truncated("version"))?;
        if version != DATASTORE_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let dim = r.read_u32::<LittleEndian>().map_err(truncated("dim"))? as usize;
        let vocab_size = r.read_u32::<LittleEndian>().map_err(truncated("vocab"))?;
        let count = r.read_u64::<LittleEndian>().map_err(truncated("count"))? as usize;
        let mut keys = vec![0f32; count * dim];
        let mut values = vec![0u32; count];
        for i in 0..count {
            for x in &mut keys[i * dim..(i + 1) * dim] {
                *x = r
                    .read_f32::<LittleEndian>()
                    .map_err(truncated("key record"))?;
            }
            values[i] = r
                .read_u32::<LittleEndian>()
                .map_err(truncated("value record"))?;
        }
        Ok(Datastore {
            dim,
            vocab_size,
            keys,
            values,
        })
    }

    pub fn load_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedFile(what.to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn truncated(what: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedFile(what.to_string())
        } else {
            Error::Io(e)
        }
    }
}
