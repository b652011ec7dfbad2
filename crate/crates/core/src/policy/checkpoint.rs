//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header, then little-endian f32 tensors (parameters, then the two
//! optimizer moment vectors when present). Save, load and save again yields
//! identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::TensorSpec;
use super::{Network, Policy, PolicyConfig};
use crate::env::CurriculumState;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QLEAGUE\0";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngCursor {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub label: String,
    pub iteration: usize,
    pub policy: PolicyConfig,
    pub tensors: Vec<TensorSpec>,
    pub curriculum: Option<CurriculumState>,
    pub rng: Vec<RngCursor>,
    pub optimizer_step: u64,
    pub has_moments: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

fn write_f32s<W: Write>(out: &mut W, xs: &[f32]) -> Result<()> {
    for x in xs {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy<f32>, label: impl Into<String>, iteration: usize) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                label: label.into(),
                iteration,
                policy: policy.config().clone(),
                tensors: policy.layout().tensors().to_vec(),
                curriculum: None,
                rng: Vec::new(),
                optimizer_step: 0,
                has_moments: false,
            },
            params: policy.params().values().as_slice().to_vec(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        }
    }

    pub fn with_moments(mut self, m: Vec<f32>, v: Vec<f32>, step: u64) -> Self {
        self.header.has_moments = true;
        self.header.optimizer_step = step;
        self.adam_m = m;
        self.adam_v = v;
        self
    }

    pub fn policy(&self) -> Result<Policy<f32>> {
        Policy::from_values(self.header.policy.clone(), self.params.clone())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        out.write_all(MAGIC)?;
        out.write_all(&self.header.format_version.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        write_f32s(&mut out, &self.params)?;
        if self.header.has_moments {
            write_f32s(&mut out, &self.adam_m)?;
            write_f32s(&mut out, &self.adam_v)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32b = [0u8; 4];
        input.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut u64b = [0u8; 8];
        input.read_exact(&mut u64b)?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut header = vec![0u8; len];
        input
            .read_exact(&mut header)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let (_, layout) = Network::build(&header.policy);
        if layout.tensors() != header.tensors.as_slice() {
            return Err(Error::Checkpoint("tensor layout does not match the policy configuration".into()));
        }
        let n = layout.len();
        let params = read_f32s(&mut input, n)?;
        let (adam_m, adam_v) = if header.has_moments {
            (read_f32s(&mut input, n)?, read_f32s(&mut input, n)?)
        } else {
            (Vec::new(), Vec::new())
        };
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            header,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
