//! Sentence encoders that turn enhanced concept text into fixed-width vectors,
//! and the on-disk embedding table format.
//!
//! Table file layout (little-endian):
//!
//! ```text
//! magic b"EMBT" | stage u32 | dim u32 | count u32 | count*dim f32, row-major by concept id
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::str::FromStr;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datasets::ConceptId;
use crate::error::{Error, Result};
use crate::params::ByteReader;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    RawText,
    GraphAdapted,
    Fused,
}

impl Stage {
    fn code(self) -> u32 {
        match self {
            Stage::RawText => 0,
            Stage::GraphAdapted => 1,
            Stage::Fused => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Stage::RawText),
            1 => Ok(Stage::GraphAdapted),
            2 => Ok(Stage::Fused),
            _ => Err(Error::Format(format!("unknown table stage {c}"))),
        }
    }
}

/// One finite vector per concept `0..len`, all of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    stage: Stage,
    dim: usize,
    data: Vec<f32>,
}

const TABLE_MAGIC: &[u8; 4] = b"EMBT";

impl EmbeddingTable {
    pub fn new(stage: Stage, dim: usize, rows: Vec<Vec<f32>>) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (k, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!("concept {k} has width {} instead of {dim}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(stage, dim, data)
    }

    fn from_flat(stage: Stage, dim: usize, data: Vec<f32>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite entry for concept {}", i / dim.max(1))));
        }
        Ok(Self { stage, dim, data })
    }

    pub fn from_matrix(stage: Stage, m: &Matrix) -> Result<Self> {
        Self::from_flat(stage, m.cols(), m.data().iter().map(|&v| v as f32).collect())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.dim, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, k: ConceptId) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim.max(1))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(TABLE_MAGIC);
        out.extend_from_slice(&self.stage.code().to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != TABLE_MAGIC {
            return Err(Error::Format("bad embedding table magic".into()));
        }
        let stage = Stage::from_code(r.u32()?)?;
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let body = r.remaining();
        let expected = count * dim * 4;
        if body != expected {
            return Err(Error::Format(format!(
                "header declares {count} x {dim} entries ({expected} bytes) but body has {body} bytes"
            )));
        }
        let data = (0..count * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        Self::from_flat(stage, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_table(table: &EmbeddingTable, path: &Path) -> Result<()> {
    table.save(path)
}

pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    PretrainedLm,
    DeterministicHash,
}

impl FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" | "pretrained-lm" => Ok(BackendKind::PretrainedLm),
            "hash" | "deterministic-hash" => Ok(BackendKind::DeterministicHash),
            other => Err(Error::invalid("backend", format!("unknown backend `{other}`"))),
        }
    }
}

pub trait TextEncoder {
    fn kind(&self) -> BackendKind;
    fn native_dim(&self) -> usize;
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Offline stand-in for a language model: each token owns a fixed Gaussian
/// vector drawn from a generator seeded by the token's hash; a text is the
/// L2-normalized sum of its token vectors. Structural tokens shared by every
/// text make the raw space anisotropic.
#[derive(Clone, Debug)]
pub struct HashEncoder {
    dim: usize,
}

impl HashEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "hash encoder width must be positive");
        Self { dim }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::invalid("text", format!("no tokens in `{text}`")));
        }
        let mut sum = vec![0.0f64; self.dim];
        for t in &tokens {
            for (s, v) in sum.iter_mut().zip(self.token_vector(t)) {
                *s += v;
            }
        }
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("text", "token vectors cancelled to zero"));
        }
        Ok(sum.iter().map(|v| (v / norm) as f32).collect())
    }
}

impl TextEncoder for HashEncoder {
    fn kind(&self) -> BackendKind {
        BackendKind::DeterministicHash
    }

    fn native_dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        texts.iter().map(|t| self.encode(t)).collect()
    }
}

/// A frozen pretrained language model run out of process. The command reads
/// json lines `{"id": n, "text": "..."}` on stdin and answers with json lines
/// `{"id": n, "vector": [...]}` holding the leading-position hidden state of
/// the encoder's final layer for the text with its start token prepended.
#[derive(Clone, Debug)]
pub struct ExternalLmEncoder {
    program: String,
    args: Vec<String>,
    dim: usize,
}

impl ExternalLmEncoder {
    pub fn new(program: impl Into<String>, args: Vec<String>, dim: usize) -> Self {
        Self {
            program: program.into(),
            args,
            dim,
        }
    }
}

impl TextEncoder for ExternalLmEncoder {
    fn kind(&self) -> BackendKind {
        BackendKind::PretrainedLm
    }

    fn native_dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Provider(format!("cannot start `{}`: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            for (i, t) in texts.iter().enumerate() {
                let line = serde_json::json!({ "id": i, "text": t });
                writeln!(stdin, "{line}").map_err(|e| Error::Provider(format!("encoder stdin: {e}")))?;
            }
        }
        let stdout = child.stdout.take().expect("piped stdout");
        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| Error::Provider(format!("encoder stdout: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            #[derive(serde::Deserialize)]
            struct Reply {
                id: usize,
                vector: Vec<f32>,
            }
            let reply: Reply =
                serde_json::from_str(&line).map_err(|e| Error::Provider(format!("encoder reply: {e}")))?;
            if reply.vector.len() != self.dim {
                return Err(Error::Shape(format!(
                    "encoder returned width {} for text {}, expected {}",
                    reply.vector.len(),
                    reply.id,
                    self.dim
                )));
            }
            let slot = out
                .get_mut(reply.id)
                .ok_or_else(|| Error::Provider(format!("encoder replied for unknown id {}", reply.id)))?;
            *slot = Some(reply.vector);
        }
        let status = child.wait().map_err(|e| Error::Provider(e.to_string()))?;
        if !status.success() {
            return Err(Error::Provider(format!("encoder exited with {status}")));
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::Provider(format!("encoder gave no vector for text {i}"))))
            .collect()
    }
}

/// Encodes one text per concept; `texts` must cover `0..names.len()`.
/// An empty text falls back to the concept name.
pub fn encode_texts(
    texts: &BTreeMap<ConceptId, String>,
    names: &[String],
    backend: &dyn TextEncoder,
) -> Result<EmbeddingTable> {
    if texts.is_empty() {
        return Err(Error::invalid("texts", "nothing to encode"));
    }
    let mut inputs: Vec<&str> = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let text = texts
            .get(&k)
            .ok_or_else(|| Error::UnknownConcept(format!("{name} (id {k}) has no text")))?;
        if text.trim().is_empty() {
            warn!("concept {name} has empty text, encoding its name instead");
            inputs.push(name);
        } else {
            inputs.push(text);
        }
    }
    let rows = backend.encode_batch(&inputs)?;
    EmbeddingTable::new(Stage::RawText, backend.native_dim(), rows)
}

/// Applies `params` (`native_dim x out_dim`) to every vector.
pub fn project(table: &EmbeddingTable, out_dim: usize, params: &Matrix) -> Result<EmbeddingTable> {
    if params.shape() != (table.dim(), out_dim) {
        return Err(Error::Shape(format!(
            "projection is {:?}, expected ({}, {out_dim})",
            params.shape(),
            table.dim()
        )));
    }
    EmbeddingTable::from_matrix(table.stage(), &table.to_matrix().matmul(params))
}
