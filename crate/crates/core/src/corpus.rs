//! Postings, datasets and pool bookkeeping.
//!
//! Every posting is anchored on at least one query-term occurrence. Query terms
//! are matched case-insensitively on whole word tokens, and all variants can be
//! collapsed onto the single synthesized token [`QTERM`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Synthesized token replacing every query-term occurrence.
pub const QTERM: &str = "<QTERM>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("posting {0:?} has no query-term span")]
    NoSpans(String),
    #[error("posting {id:?}: span ({start},{end}) is invalid for text of {len} bytes")]
    BadSpan { id: String, start: usize, end: usize, len: usize },
    #[error("posting {0:?}: spans overlap")]
    OverlappingSpans(String),
    #[error("posting {0:?} contains no query term")]
    MissingTerm(String),
    #[error("query term list is empty")]
    NoQueryTerms,
    #[error("duplicate posting id {0:?}")]
    DuplicateId(String),
    #[error("posting {id:?}: span text {found:?} is not a query term")]
    ForeignSpan { id: String, found: String },
    #[error("need {needed} labeled train postings for the cold start, found {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Binary label. Encoded as `+1` / `-1` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    /// `value >= 0` is positive, matching the labeling rule of the engine.
    pub fn from_score(value: f64) -> Self {
        if value >= 0.0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn from_i64(value: i64) -> Option<Self> {
        match value {
            1 => Some(Label::Positive),
            -1 => Some(Label::Negative),
            _ => None,
        }
    }

    pub fn as_i64(self) -> i64 {
        match self {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_i64())
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(self.as_i64())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_i64(v).ok_or_else(|| serde::de::Error::custom(format!("label must be 1 or -1, got {v}")))
    }
}

/// Byte range `[start, end)` of one query-term occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Posting {
    id: String,
    text: String,
    term_spans: Vec<Span>,
    gold_label: Option<Label>,
}

impl Posting {
    /// Validates the spans and stores them sorted by start offset.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        mut term_spans: Vec<Span>,
        gold_label: Option<Label>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let text = text.into();
        if term_spans.is_empty() {
            return Err(CorpusError::NoSpans(id));
        }
        term_spans.sort();
        for s in &term_spans {
            if s.start >= s.end
                || s.end > text.len()
                || !text.is_char_boundary(s.start)
                || !text.is_char_boundary(s.end)
            {
                return Err(CorpusError::BadSpan { id, start: s.start, end: s.end, len: text.len() });
            }
        }
        if term_spans.windows(2).any(|w| w[1].start < w[0].end) {
            return Err(CorpusError::OverlappingSpans(id));
        }
        Ok(Posting { id, text, term_spans, gold_label })
    }

    /// Builds a posting by locating the query terms in `text`.
    pub fn from_text(
        id: impl Into<String>,
        text: impl Into<String>,
        query_terms: &[String],
        gold_label: Option<Label>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let text = text.into();
        let spans = find_term_spans(&text, query_terms);
        if spans.is_empty() {
            return Err(CorpusError::MissingTerm(id));
        }
        Posting::new(id, text, spans, gold_label)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn term_spans(&self) -> &[Span] {
        &self.term_spans
    }

    pub fn gold_label(&self) -> Option<Label> {
        self.gold_label
    }

    /// First query-term occurrence in document order.
    pub fn anchor_span(&self) -> Span {
        self.term_spans[0]
    }
}

/// First query-term occurrence; the one the word-level view is built around.
pub fn select_anchor_span(posting: &Posting) -> Span {
    posting.anchor_span()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\''
}

/// Word tokens with their byte ranges. `<QTERM>` is kept as one token.
pub fn tokenize(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c == '<' && text[i..].starts_with(QTERM) {
            if let Some(s) = start.take() {
                out.push((s, i));
            }
            out.push((i, i + QTERM.len()));
            while let Some(&(j, _)) = iter.peek() {
                if j < i + QTERM.len() {
                    iter.next();
                } else {
                    break;
                }
            }
            continue;
        }
        if is_word_char(c) {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            out.push((s, i));
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

/// Locates query-term occurrences as whole-token, case-insensitive matches.
///
/// Multi-word terms match consecutive tokens; longer terms win over shorter
/// ones starting at the same token. Existing `<QTERM>` tokens count as matches.
pub fn find_term_spans(text: &str, query_terms: &[String]) -> Vec<Span> {
    let tokens = tokenize(text);
    let folded: Vec<String> = tokens.iter().map(|&(s, e)| text[s..e].to_lowercase()).collect();
    let mut terms: Vec<Vec<String>> = query_terms
        .iter()
        .map(|t| tokenize(t).iter().map(|&(s, e)| t[s..e].to_lowercase()).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect();
    terms.sort_by_key(|t| std::cmp::Reverse(t.len()));

    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if text[tokens[i].0..tokens[i].1] == *QTERM {
            spans.push(Span::new(tokens[i].0, tokens[i].1));
            i += 1;
            continue;
        }
        let hit = terms.iter().find(|term| {
            i + term.len() <= folded.len() && term.iter().zip(&folded[i..]).all(|(a, b)| a == b)
        });
        match hit {
            Some(term) => {
                let last = i + term.len() - 1;
                spans.push(Span::new(tokens[i].0, tokens[last].1));
                i += term.len();
            }
            None => i += 1,
        }
    }
    spans
}

/// Replaces every query-term occurrence with [`QTERM`] and recomputes spans.
pub fn canonicalize_terms(posting: &Posting, query_terms: &[String]) -> Result<Posting, CorpusError> {
    if query_terms.is_empty() {
        return Err(CorpusError::NoQueryTerms);
    }
    let found = find_term_spans(&posting.text, query_terms);
    if found.is_empty() {
        return Err(CorpusError::MissingTerm(posting.id.clone()));
    }
    let mut text = String::with_capacity(posting.text.len());
    let mut spans = Vec::with_capacity(found.len());
    let mut cursor = 0;
    for s in &found {
        text.push_str(&posting.text[cursor..s.start]);
        let start = text.len();
        text.push_str(QTERM);
        spans.push(Span::new(start, text.len()));
        cursor = s.end;
    }
    text.push_str(&posting.text[cursor..]);
    Posting::new(posting.id.clone(), text, spans, posting.gold_label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub posting: Posting,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub query_terms: Vec<String>,
    pub name: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    entries: Vec<Entry>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, entries: Vec<Entry>) -> Result<Self, CorpusError> {
        if meta.query_terms.is_empty() {
            return Err(CorpusError::NoQueryTerms);
        }
        let terms: HashSet<String> = meta.query_terms.iter().map(|t| t.to_lowercase()).collect();
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            let p = &e.posting;
            if !seen.insert(p.id.as_str()) {
                return Err(CorpusError::DuplicateId(p.id.clone()));
            }
            for s in &p.term_spans {
                let found = &p.text[s.start..s.end];
                if found != QTERM && !terms.contains(&found.to_lowercase()) {
                    return Err(CorpusError::ForeignSpan { id: p.id.clone(), found: found.to_string() });
                }
            }
        }
        Ok(Dataset { meta, entries })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn postings(&self) -> impl Iterator<Item = &Posting> {
        self.entries.iter().map(|e| &e.posting)
    }

    pub fn split_ids(&self, split: Split) -> Vec<&str> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.posting.id()).collect()
    }

    pub fn gold_labels(&self) -> BTreeMap<String, Label> {
        self.entries
            .iter()
            .filter_map(|e| e.posting.gold_label.map(|l| (e.posting.id.clone(), l)))
            .collect()
    }

    /// Canonicalizes every posting; postings stay in file order.
    pub fn canonicalized(&self) -> Result<Dataset, CorpusError> {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                Ok(Entry { posting: canonicalize_terms(&e.posting, &self.meta.query_terms)?, split: e.split })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;
        Ok(Dataset { meta: self.meta.clone(), entries })
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    spans: Vec<Span>,
    label: Option<Label>,
    split: Split,
}

/// Reads the JSON Lines posting file and its sidecar metadata file.
pub fn load_dataset(jsonl: &Path, meta: &Path) -> Result<Dataset, CorpusError> {
    let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(meta)?))?;
    let reader = BufReader::new(File::open(jsonl)?);
    let mut entries = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Format { line: n + 1, message: e.to_string() })?;
        let posting = Posting::new(rec.id, rec.text, rec.spans, rec.label)?;
        entries.push(Entry { posting, split: rec.split });
    }
    Dataset::new(meta, entries)
}

pub fn write_dataset(dataset: &Dataset, jsonl: &Path, meta: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(jsonl)?);
    for e in &dataset.entries {
        let rec = Record {
            id: e.posting.id.clone(),
            text: e.posting.text.clone(),
            spans: e.posting.term_spans.clone(),
            label: e.posting.gold_label,
            split: e.split,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut m = BufWriter::new(File::create(meta)?);
    serde_json::to_writer_pretty(&mut m, &dataset.meta)?;
    m.write_all(b"\n")?;
    m.flush()?;
    Ok(())
}

/// Labeled, unlabeled and test partitions of one active-learning run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: BTreeMap<String, Label>,
    pub unlabeled: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl PoolState {
    /// Checks that the three partitions are pairwise disjoint.
    pub fn is_partition(&self) -> bool {
        self.labeled.keys().all(|id| !self.unlabeled.contains(id) && !self.test.contains(id))
            && self.unlabeled.is_disjoint(&self.test)
    }

    /// |L| + |U|; constant over a run.
    pub fn pool_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// Draws the initial labeled set uniformly from the labeled train postings.
///
/// Train ids are visited in lexicographic order so the draw depends only on
/// the set of ids and the seed, not on file order.
pub fn cold_start_split(dataset: &Dataset, n_seed: usize, rng_seed: u64) -> Result<PoolState, CorpusError> {
    let mut train: Vec<&Posting> =
        dataset.entries.iter().filter(|e| e.split == Split::Train).map(|e| &e.posting).collect();
    train.sort_by(|a, b| a.id.cmp(&b.id));
    let candidates: Vec<&Posting> = train.iter().copied().filter(|p| p.gold_label.is_some()).collect();
    if candidates.len() < n_seed {
        return Err(CorpusError::InsufficientData { needed: n_seed, available: candidates.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pool = PoolState::default();
    for i in index::sample(&mut rng, candidates.len(), n_seed).into_iter() {
        let p = candidates[i];
        pool.labeled.insert(p.id.clone(), p.gold_label.expect("candidate carries gold label"));
    }
    pool.unlabeled =
        train.iter().filter(|p| !pool.labeled.contains_key(&p.id)).map(|p| p.id.clone()).collect();
    pool.test = dataset.split_ids(Split::Test).into_iter().map(String::from).collect();
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms() -> Vec<String> {
        vec!["diabetes".into(), "diabetic".into()]
    }

    fn posting(text: &str, spans: Vec<(usize, usize)>) -> Posting {
        Posting::new("p", text, spans.into_iter().map(Span::from).collect(), None).unwrap()
    }

    #[test]
    fn canonicalize_single_occurrence() {
        let p = Posting::from_text("p", "my diabetes is acting up", &terms(), None).unwrap();
        let c = canonicalize_terms(&p, &terms()).unwrap();
        assert_eq!(c.text(), "my <QTERM> is acting up");
        assert_eq!(c.term_spans(), &[Span::new(3, 10)]);
    }

    #[test]
    fn canonicalize_two_occurrences() {
        let p = Posting::from_text("p", "diabetic and diabetes", &terms(), None).unwrap();
        let c = canonicalize_terms(&p, &terms()).unwrap();
        assert_eq!(c.text(), "<QTERM> and <QTERM>");
        assert_eq!(c.term_spans().len(), 2);
        for s in c.term_spans() {
            assert_eq!(&c.text()[s.start..s.end], QTERM);
        }
    }

    #[test]
    fn canonicalize_missing_term() {
        let p = posting("no match here", vec![(0, 2)]);
        assert!(matches!(canonicalize_terms(&p, &terms()), Err(CorpusError::MissingTerm(_))));
    }

    #[test]
    fn matching_is_case_insensitive_on_whole_words() {
        let spans = find_term_spans("Diabetes, prediabetes and DIABETIC!", &terms());
        assert_eq!(spans, vec![Span::new(0, 8), Span::new(26, 34)]);
    }

    #[test]
    fn multi_word_terms() {
        let t = vec!["type 2 diabetes".to_string(), "diabetes".to_string()];
        let spans = find_term_spans("my type 2 diabetes and diabetes", &t);
        assert_eq!(spans, vec![Span::new(3, 18), Span::new(23, 31)]);
    }

    #[test]
    fn anchor_is_first_span() {
        let text = "abc diabetes  x  diabetic  ";
        assert_eq!(select_anchor_span(&posting(text, vec![(4, 12), (17, 25)])), Span::new(4, 12));
        assert_eq!(select_anchor_span(&posting("diabetes", vec![(0, 8)])), Span::new(0, 8));
        let p = posting("012diabetes012345678diabetic", vec![(20, 28), (3, 11)]);
        assert_eq!(select_anchor_span(&p), Span::new(3, 11));
    }

    #[test]
    fn span_validation() {
        assert!(matches!(Posting::new("a", "abc", vec![], None), Err(CorpusError::NoSpans(_))));
        assert!(matches!(
            Posting::new("a", "abc", vec![Span::new(1, 9)], None),
            Err(CorpusError::BadSpan { .. })
        ));
        assert!(matches!(
            Posting::new("a", "abcdef", vec![Span::new(0, 3), Span::new(2, 5)], None),
            Err(CorpusError::OverlappingSpans(_))
        ));
    }

    fn dataset(n_train: usize, n_test: usize) -> Dataset {
        let meta = DatasetMeta { query_terms: terms(), name: "t".into() };
        let mut entries = Vec::new();
        for i in 0..n_train + n_test {
            let label = if i % 5 == 0 { Label::Positive } else { Label::Negative };
            let posting = Posting::from_text(format!("p{i:05}"), "my diabetes", &terms(), Some(label)).unwrap();
            let split = if i < n_train { Split::Train } else { Split::Test };
            entries.push(Entry { posting, split });
        }
        Dataset::new(meta, entries).unwrap()
    }

    #[test]
    fn cold_start_sizes() {
        let ds = dataset(4096, 10);
        let pool = cold_start_split(&ds, 50, 7).unwrap();
        assert_eq!(pool.labeled.len(), 50);
        assert_eq!(pool.unlabeled.len(), 4046);
        assert_eq!(pool.test.len(), 10);
        assert!(pool.is_partition());

        let ds = dataset(50, 0);
        let pool = cold_start_split(&ds, 50, 3).unwrap();
        assert!(pool.unlabeled.is_empty());
    }

    #[test]
    fn cold_start_is_deterministic() {
        let ds = dataset(300, 0);
        let a = serde_json::to_string(&cold_start_split(&ds, 50, 11).unwrap()).unwrap();
        let b = serde_json::to_string(&cold_start_split(&ds, 50, 11).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&cold_start_split(&ds, 50, 12).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cold_start_insufficient() {
        let ds = dataset(10, 0);
        assert!(matches!(cold_start_split(&ds, 50, 1), Err(CorpusError::InsufficientData { .. })));
    }

    #[test]
    fn dataset_rejects_duplicates_and_foreign_spans() {
        let meta = DatasetMeta { query_terms: terms(), name: "t".into() };
        let p = Posting::from_text("a", "diabetes", &terms(), None).unwrap();
        let dup = vec![
            Entry { posting: p.clone(), split: Split::Train },
            Entry { posting: p, split: Split::Test },
        ];
        assert!(matches!(Dataset::new(meta.clone(), dup), Err(CorpusError::DuplicateId(_))));
        let foreign = Posting::new("b", "hello world", vec![Span::new(0, 5)], None).unwrap();
        let res = Dataset::new(meta, vec![Entry { posting: foreign, split: Split::Train }]);
        assert!(matches!(res, Err(CorpusError::ForeignSpan { .. })));
    }

    #[test]
    fn dataset_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(20, 5);
        let (j, m) = (dir.path().join("d.jsonl"), dir.path().join("d.meta.json"));
        write_dataset(&ds, &j, &m).unwrap();
        let back = load_dataset(&j, &m).unwrap();
        assert_eq!(back.entries(), ds.entries());
        assert_eq!(back.meta, ds.meta);
    }

    #[test]
    fn label_wire_format() {
        assert_eq!(serde_json::to_string(&Label::Negative).unwrap(), "-1");
        assert_eq!(serde_json::from_str::<Label>("1").unwrap(), Label::Positive);
        assert!(serde_json::from_str::<Label>("0").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn canonicalize_is_idempotent(words in proptest::collection::vec("[a-zA-Z]{1,8}|diabetes|Diabetic", 1..12)) {
                let mut text = words.join(" ");
                text.push_str(" diabetes");
                let p = Posting::from_text("x", text, &terms(), None).unwrap();
                let once = canonicalize_terms(&p, &terms()).unwrap();
                let twice = canonicalize_terms(&once, &terms()).unwrap();
                prop_assert_eq!(once.term_spans().len(), p.term_spans().len());
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn cold_start_partitions(n_train in 5usize..200, frac in 0.0f64..1.0, seed in any::<u64>()) {
                let ds = dataset(n_train, 3);
                let n_seed = ((n_train as f64) * frac) as usize;
                let pool = cold_start_split(&ds, n_seed, seed).unwrap();
                prop_assert_eq!(pool.labeled.len() + pool.unlabeled.len(), n_train);
                prop_assert!(pool.is_partition());
            }
        }
    }
}
