//! Corpus ingestion, the indexed token dataset and fixed-context packing.
//!
//! `.idx` layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 8 | magic `NTIDX1\0\0` |
//! | 4 | version = 1 |
//! | 4 | token width = 4 |
//! | 8 | document count |
//! | 8 | total tokens |
//! | 8 × (count + 1) | token offsets |
//!
//! `.bin` is the bare stream of `u32` token ids.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::fim::{self, FimConfig, FimStats};
use crate::tokenizer::{BpeVocab, TokenId};

pub const IDX_MAGIC: &[u8; 8] = b"NTIDX1\0\0";
pub const IDX_VERSION: u32 = 1;
pub const TOKEN_WIDTH: u32 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub docs: Vec<Document>,
    pub skipped_empty: usize,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    text: Option<String>,
}

/// Reads a JSON-lines record file with `id` and `text` fields. Blank lines are
/// ignored; records are numbered by line.
pub fn ingest(path: &Path) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| ForgeError::io(path, e))?;
    let mut out = Ingested::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let record = i + 1;
        let line = line.map_err(|e| ForgeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| ForgeError::Record { record, msg: format!("malformed record: {e}") })?;
        let id = match raw.id {
            Some(serde_json::Value::String(s)) => s,
            Some(other) => other.to_string(),
            None => return Err(ForgeError::Record { record, msg: "missing field id".into() }),
        };
        let text = raw.text.ok_or(ForgeError::Record { record, msg: "missing field text".into() })?;
        if text.is_empty() {
            out.skipped_empty += 1;
            continue;
        }
        out.docs.push(Document { id, text });
    }
    if out.skipped_empty > 0 {
        log::warn!("{}: skipped {} empty records", path.display(), out.skipped_empty);
    }
    Ok(out)
}

pub fn write_records(path: &Path, docs: &[Document]) -> Result<()> {
    let file = File::create(path).map_err(|e| ForgeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        let line = serde_json::to_string(d).expect("documents serialize");
        writeln!(w, "{line}").map_err(|e| ForgeError::io(path, e))?;
    }
    w.flush().map_err(|e| ForgeError::io(path, e))
}

pub fn bin_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".bin")
}

pub fn idx_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".idx")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// The in-memory form of a `.bin`/`.idx` pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexedDataset {
    pub bin_path: PathBuf,
    pub idx_path: PathBuf,
    offsets: Vec<u64>,
    tokens: Vec<TokenId>,
}

impl IndexedDataset {
    /// Writes per-document token streams under `prefix`.
    pub fn write<D: AsRef<[TokenId]>>(prefix: &Path, docs: &[D]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(docs.len() + 1);
        let mut tokens = Vec::new();
        offsets.push(0u64);
        for d in docs {
            tokens.extend_from_slice(d.as_ref());
            offsets.push(tokens.len() as u64);
        }
        let ds = IndexedDataset { bin_path: bin_path(prefix), idx_path: idx_path(prefix), offsets, tokens };
        ds.persist()?;
        Ok(ds)
    }

    /// Serializes this dataset to another prefix.
    pub fn rewrite(&self, prefix: &Path) -> Result<Self> {
        let ds = IndexedDataset { bin_path: bin_path(prefix), idx_path: idx_path(prefix), ..self.clone() };
        ds.persist()?;
        Ok(ds)
    }

    fn persist(&self) -> Result<()> {
        if let Some(parent) = self.bin_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| ForgeError::io(parent, e))?;
        }
        let mut idx = Vec::with_capacity(32 + 8 * self.offsets.len());
        idx.extend_from_slice(IDX_MAGIC);
        idx.extend_from_slice(&IDX_VERSION.to_le_bytes());
        idx.extend_from_slice(&TOKEN_WIDTH.to_le_bytes());
        idx.extend_from_slice(&(self.doc_count() as u64).to_le_bytes());
        idx.extend_from_slice(&(self.total_tokens() as u64).to_le_bytes());
        for o in &self.offsets {
            idx.extend_from_slice(&o.to_le_bytes());
        }
        let bin: Vec<u8> = self.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        fs::write(&self.bin_path, bin).map_err(|e| ForgeError::io(&self.bin_path, e))?;
        fs::write(&self.idx_path, idx).map_err(|e| ForgeError::io(&self.idx_path, e))
    }

    pub fn open(prefix: &Path) -> Result<Self> {
        let (bin_p, idx_p) = (bin_path(prefix), idx_path(prefix));
        let idx = fs::read(&idx_p).map_err(|e| ForgeError::io(&idx_p, e))?;
        let name = idx_p.display().to_string();
        let bad = |msg: &str| ForgeError::format(name.clone(), 0, msg.to_string());
        if idx.len() < 32 || &idx[..8] != IDX_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(idx[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(idx[o..o + 8].try_into().unwrap());
        if u32_at(8) != IDX_VERSION {
            return Err(bad("unsupported version"));
        }
        if u32_at(12) != TOKEN_WIDTH {
            return Err(bad("unsupported token width"));
        }
        let doc_count = u64_at(16) as usize;
        let total = u64_at(24);
        if idx.len() != 32 + 8 * (doc_count + 1) {
            return Err(bad("index length disagrees with document count"));
        }
        let offsets: Vec<u64> = (0..=doc_count).map(|i| u64_at(32 + 8 * i)).collect();
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] >= w[1]) || offsets[doc_count] != total {
            return Err(bad("offsets must start at 0, ascend strictly and end at total_tokens"));
        }
        let bin = fs::read(&bin_p).map_err(|e| ForgeError::io(&bin_p, e))?;
        if bin.len() as u64 != total * TOKEN_WIDTH as u64 {
            return Err(ForgeError::format(bin_p.display().to_string(), 0, "bin size disagrees with index"));
        }
        let tokens = bin.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(IndexedDataset { bin_path: bin_p, idx_path: idx_p, offsets, tokens })
    }

    pub fn doc_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn doc_offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn read_doc(&self, i: usize) -> Result<&[TokenId]> {
        if i >= self.doc_count() {
            return Err(ForgeError::OutOfRange { index: i, len: self.doc_count() });
        }
        Ok(&self.tokens[self.offsets[i] as usize..self.offsets[i + 1] as usize])
    }

    pub fn docs(&self) -> impl Iterator<Item = &[TokenId]> {
        self.offsets.windows(2).map(|w| &self.tokens[w[0] as usize..w[1] as usize])
    }
}

/// Tokenizes documents, optionally applies FIM, and writes the dataset.
/// Without FIM each stored document is `encode(text) ++ [eod]`.
pub fn preprocess(
    docs: &[Document],
    vocab: &BpeVocab,
    out_prefix: &Path,
    fim_cfg: Option<&FimConfig>,
) -> Result<(IndexedDataset, Option<FimStats>)> {
    if docs.is_empty() {
        return Err(ForgeError::Invalid("no documents to preprocess".into()));
    }
    let mut stats = fim_cfg.map(|_| FimStats::default());
    let mut streams = Vec::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        let stream = match fim_cfg {
            Some(cfg) => {
                let split = fim::split_document(d.text.as_bytes(), cfg, &mut cfg.doc_rng(i as u64))?;
                stats.as_mut().unwrap().record(&split);
                fim::render_fim(&split, vocab)
            }
            None => {
                let mut s = vocab.encode(d.text.as_bytes());
                s.push(vocab.specials().eod);
                s
            }
        };
        streams.push(stream);
    }
    Ok((IndexedDataset::write(out_prefix, &streams)?, stats))
}

/// One training batch; both matrices are row-major `[batch, context]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBatch {
    pub batch: usize,
    pub context: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

impl PackedBatch {
    pub fn row(&self, b: usize) -> (&[TokenId], &[TokenId]) {
        let r = b * self.context..(b + 1) * self.context;
        (&self.inputs[r.clone()], &self.targets[r])
    }

    /// Rows `start..end` as a smaller batch.
    pub fn slice(&self, start: usize, end: usize) -> PackedBatch {
        let r = start * self.context..end * self.context;
        PackedBatch {
            batch: end - start,
            context: self.context,
            inputs: self.inputs[r.clone()].to_vec(),
            targets: self.targets[r].to_vec(),
        }
    }
}

/// Start offsets of the non-overlapping `context + 1` windows, in shuffled order.
pub fn window_starts(stream_len: usize, context: usize, seed: u64) -> Result<Vec<usize>> {
    if context < 2 {
        return Err(ForgeError::Config(format!("context_length must be ≥ 2, got {context}")));
    }
    let width = context + 1;
    if stream_len < width {
        return Err(ForgeError::InsufficientTokens { have: stream_len, need: width });
    }
    let mut starts: Vec<usize> = (0..stream_len / width).map(|w| w * width).collect();
    starts.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    Ok(starts)
}

/// Iterator over shuffled packed batches; an incomplete final batch is dropped.
#[derive(Debug)]
pub struct PackIter<'a> {
    stream: &'a [TokenId],
    starts: Vec<usize>,
    context: usize,
    batch_size: usize,
    next: usize,
}

impl PackIter<'_> {
    pub fn batches_total(&self) -> usize {
        self.starts.len() / self.batch_size
    }

    /// Skips `n` batches.
    pub fn advance(&mut self, n: usize) {
        self.next = (self.next + n).min(self.batches_total());
    }
}

impl Iterator for PackIter<'_> {
    type Item = PackedBatch;

    fn next(&mut self) -> Option<PackedBatch> {
        if self.next >= self.batches_total() {
            return None;
        }
        let c = self.context;
        let mut inputs = Vec::with_capacity(self.batch_size * c);
        let mut targets = Vec::with_capacity(self.batch_size * c);
        for &s in &self.starts[self.next * self.batch_size..(self.next + 1) * self.batch_size] {
            inputs.extend_from_slice(&self.stream[s..s + c]);
            targets.extend_from_slice(&self.stream[s + 1..s + c + 1]);
        }
        self.next += 1;
        Some(PackedBatch { batch: self.batch_size, context: c, inputs, targets })
    }
}

pub fn pack_stream(stream: &[TokenId], context_length: usize, batch_size: usize, seed: u64) -> Result<PackIter<'_>> {
    if batch_size == 0 {
        return Err(ForgeError::Config("batch_size must be ≥ 1".into()));
    }
    let starts = window_starts(stream.len(), context_length, seed)?;
    if starts.len() < batch_size {
        return Err(ForgeError::InsufficientTokens { have: stream.len(), need: batch_size * (context_length + 1) });
    }
    Ok(PackIter { stream, starts, context: context_length, batch_size, next: 0 })
}
