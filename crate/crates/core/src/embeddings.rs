//! Two-view posting representations and the snapshot files that carry them.
//!
//! Binary snapshot layout (little endian):
//!
//! ```text
//! "CVEC1" | u32 count | u32 doc_dim | u32 word_dim
//! count x ( u16 id_len | id bytes | doc_dim x f32 | word_dim x f32 )
//! ```
//!
//! A JSON Lines form with one `{"id", "doc", "word"}` object per line is
//! accepted as well. Vectors are held as `f64` in memory and written as `f32`,
//! so only `f32`-representable snapshots round-trip bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Posting, QTERM};

pub const MAGIC: &[u8; 5] = b"CVEC1";

/// Context window (tokens per side) of the built-in embedder.
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("malformed snapshot: {0}")]
    Format(String),
    #[error("vector for {id:?} has dims ({doc},{word}), expected ({expected_doc},{expected_word})")]
    DimMismatch { id: String, doc: usize, word: usize, expected_doc: usize, expected_word: usize },
    #[error("duplicate id {0:?} in snapshot")]
    DuplicateId(String),
    #[error("snapshot is missing {missing} ids, first {first:?}")]
    Coverage { missing: usize, first: String },
    #[error("embedding dims must be at least {min}, got ({doc},{word})")]
    DimsTooSmall { min: usize, doc: usize, word: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewVectors {
    pub doc: Vec<f64>,
    pub word: Vec<f64>,
}

impl ViewVectors {
    fn is_finite(&self) -> bool {
        self.doc.iter().chain(&self.word).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSnapshot {
    dims: (usize, usize),
    vectors: BTreeMap<String, ViewVectors>,
    pub epoch: u64,
}

impl EmbeddingSnapshot {
    pub fn new(dims: (usize, usize)) -> Self {
        EmbeddingSnapshot { dims, vectors: BTreeMap::new(), epoch: 0 }
    }

    pub fn from_vectors(
        dims: (usize, usize),
        vectors: impl IntoIterator<Item = (String, ViewVectors)>,
    ) -> Result<Self, EmbeddingError> {
        let mut snap = EmbeddingSnapshot::new(dims);
        for (id, v) in vectors {
            snap.insert(id, v)?;
        }
        Ok(snap)
    }

    pub fn insert(&mut self, id: String, v: ViewVectors) -> Result<(), EmbeddingError> {
        if v.doc.len() != self.dims.0 || v.word.len() != self.dims.1 {
            return Err(EmbeddingError::DimMismatch {
                id,
                doc: v.doc.len(),
                word: v.word.len(),
                expected_doc: self.dims.0,
                expected_word: self.dims.1,
            });
        }
        if !v.is_finite() {
            return Err(EmbeddingError::Format(format!("non-finite component in vector for {id:?}")));
        }
        if self.vectors.contains_key(&id) {
            return Err(EmbeddingError::DuplicateId(id));
        }
        self.vectors.insert(id, v);
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ViewVectors> {
        self.vectors.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ViewVectors)> {
        self.vectors.iter()
    }

    /// Fails with `Coverage` unless every id has a vector.
    pub fn check_coverage<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<(), EmbeddingError> {
        let missing: Vec<&str> = ids.into_iter().filter(|id| !self.vectors.contains_key(*id)).collect();
        match missing.first() {
            None => Ok(()),
            Some(first) => Err(EmbeddingError::Coverage { missing: missing.len(), first: first.to_string() }),
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, EmbeddingError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| EmbeddingError::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize, buf: &mut Vec<u8>) -> Result<Vec<f64>, EmbeddingError> {
    buf.resize(n * 4, 0);
    r.read_exact(buf).map_err(|e| EmbeddingError::Format(format!("truncated record: {e}")))?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// Loads a snapshot, detecting the binary or JSON Lines form by its first bytes.
pub fn load_snapshot(path: &Path) -> Result<EmbeddingSnapshot, EmbeddingError> {
    let mut reader = BufReader::new(File::open(path)?);
    let head = reader.fill_buf()?;
    if head.starts_with(MAGIC) {
        read_binary(&mut reader)
    } else {
        read_jsonl(reader)
    }
}

fn read_binary(r: &mut impl Read) -> Result<EmbeddingSnapshot, EmbeddingError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    let count = read_u32(r)? as usize;
    let doc = read_u32(r)? as usize;
    let word = read_u32(r)? as usize;
    if doc == 0 || word == 0 {
        return Err(EmbeddingError::Format("header dims must be positive".into()));
    }
    let mut snap = EmbeddingSnapshot::new((doc, word));
    let mut buf = Vec::new();
    for n in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)
            .map_err(|_| EmbeddingError::Format(format!("header declares {count} records, found {n}")))?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut id).map_err(|e| EmbeddingError::Format(format!("truncated id: {e}")))?;
        let id = String::from_utf8(id).map_err(|e| EmbeddingError::Format(format!("id is not UTF-8: {e}")))?;
        let v = ViewVectors { doc: read_f32s(r, doc, &mut buf)?, word: read_f32s(r, word, &mut buf)? };
        snap.insert(id, v)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(EmbeddingError::Format(format!("trailing data after {count} declared records")));
    }
    Ok(snap)
}

#[derive(Deserialize, Serialize)]
struct JsonRecord {
    id: String,
    doc: Vec<f64>,
    word: Vec<f64>,
}

fn read_jsonl(reader: impl BufRead) -> Result<EmbeddingSnapshot, EmbeddingError> {
    let mut snap: Option<EmbeddingSnapshot> = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)
            .map_err(|e| EmbeddingError::Format(format!("line {}: {e}", n + 1)))?;
        let s = snap.get_or_insert_with(|| EmbeddingSnapshot::new((rec.doc.len(), rec.word.len())));
        s.insert(rec.id, ViewVectors { doc: rec.doc, word: rec.word })?;
    }
    let snap = snap.ok_or_else(|| EmbeddingError::Format("empty snapshot".into()))?;
    if snap.dims.0 == 0 || snap.dims.1 == 0 {
        return Err(EmbeddingError::Format("dims must be positive".into()));
    }
    Ok(snap)
}

/// Writes the binary form. Components are narrowed to `f32`.
pub fn write_snapshot(path: &Path, snap: &EmbeddingSnapshot) -> Result<(), EmbeddingError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for v in [snap.vectors.len(), snap.dims.0, snap.dims.1] {
        let v = u32::try_from(v).map_err(|_| EmbeddingError::Format("count exceeds u32".into()))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for (id, v) in &snap.vectors {
        let len = u16::try_from(id.len()).map_err(|_| EmbeddingError::Format(format!("id too long: {id:?}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for x in v.doc.iter().chain(&v.word) {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_snapshot_jsonl(path: &Path, snap: &EmbeddingSnapshot) -> Result<(), EmbeddingError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, v) in &snap.vectors {
        let rec = JsonRecord { id: id.clone(), doc: v.doc.clone(), word: v.word.clone() };
        serde_json::to_writer(&mut w, &rec).map_err(|e| EmbeddingError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Output of [`hash_embed`].
#[derive(Debug, Clone, PartialEq)]
pub struct HashEmbedding {
    pub vectors: ViewVectors,
    /// Set when the posting had no token besides `<QTERM>`; the word view then
    /// repeats the document view.
    pub empty_context: bool,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn add_token(acc: &mut [f64], token: &str) {
    let mut state = fnv1a(token.to_lowercase().as_bytes());
    for a in acc.iter_mut() {
        *a += if splitmix(&mut state) & 1 == 0 { 1.0 } else { -1.0 };
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn bag_of_tokens<'a>(tokens: impl Iterator<Item = &'a str>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for t in tokens {
        add_token(&mut acc, t);
    }
    normalized(acc)
}

/// Deterministic signed-hash embedder.
///
/// The document view sums per-token hash vectors over the whole text. The word
/// view sums over up to `window` tokens on each side of the anchor token,
/// skipping `<QTERM>` tokens. Expects a canonicalized posting.
pub fn hash_embed(posting: &Posting, dims: (usize, usize), window: usize) -> Result<HashEmbedding, EmbeddingError> {
    if dims.0 < 8 || dims.1 < 8 {
        return Err(EmbeddingError::DimsTooSmall { min: 8, doc: dims.0, word: dims.1 });
    }
    let text = posting.text();
    let tokens: Vec<&str> = tokenize(text).into_iter().map(|(s, e)| &text[s..e]).collect();
    let doc = bag_of_tokens(tokens.iter().copied(), dims.0);

    let anchor = posting.anchor_span();
    let anchor_tok = tokenize(text).iter().position(|&(s, e)| s < anchor.end && e > anchor.start).unwrap_or(0);
    let lo = anchor_tok.saturating_sub(window);
    let hi = (anchor_tok + window + 1).min(tokens.len());
    let context: Vec<&str> = tokens[lo..hi]
        .iter()
        .enumerate()
        .filter(|&(i, t)| lo + i != anchor_tok && *t != QTERM)
        .map(|(_, t)| *t)
        .collect();

    let empty_context = tokens.iter().all(|t| *t == QTERM);
    let word = if empty_context {
        bag_of_tokens(tokens.iter().copied(), dims.1)
    } else {
        bag_of_tokens(context.into_iter(), dims.1)
    };
    Ok(HashEmbedding { vectors: ViewVectors { doc, word }, empty_context })
}

/// Embeds every posting of a (canonicalized) dataset with [`hash_embed`].
pub fn hash_embed_all<'a>(
    postings: impl IntoIterator<Item = &'a Posting>,
    dims: (usize, usize),
    window: usize,
) -> Result<EmbeddingSnapshot, EmbeddingError> {
    let mut snap = EmbeddingSnapshot::new(dims);
    for p in postings {
        snap.insert(p.id().to_string(), hash_embed(p, dims, window)?.vectors)?;
    }
    Ok(snap)
}
