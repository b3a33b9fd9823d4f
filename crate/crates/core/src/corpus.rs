//! Document ingestion, sentence segmentation and entity-aware tokenization.
//!
//! Entities from the lexicon are matched longest-first on the normalized
//! sentence text before any other splitting happens, so a multi-word entity
//! such as `support vector machine` always becomes a single token. The spans
//! between entity matches are handed to a pluggable [`Tokenizer`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentence delimiters used when none are configured: full-width period,
/// half- and full-width question marks, the doubled ellipsis and newline.
pub const DEFAULT_DELIMITERS: [&str; 5] = ["。", "?", "？", "……", "\n"];

pub const DEFAULT_MIN_FREQUENCY: u64 = 4;
pub const DEFAULT_MIN_COUNT: u64 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: field `{field}`: {message}")]
    Parse {
        file: String,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{file}:{line}: duplicate doc_id `{doc_id}`")]
    DuplicateDocId {
        file: String,
        line: usize,
        doc_id: String,
    },
    #[error("document `{doc_id}` references unknown category id `{category}`")]
    UnknownCategory { doc_id: String, category: String },
    #[error("delimiter set is empty or contains an empty delimiter")]
    InvalidDelimiters,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Normalization

/// Case and full/half-width folding applied to both lexicon surfaces and
/// sentence text. Whitespace runs always collapse to one ASCII space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalizer {
    pub fold_case: bool,
    pub fold_width: bool,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            fold_case: true,
            fold_width: true,
        }
    }
}

fn fold_width_char(c: char) -> char {
    match c {
        '\u{3000}' => ' ',
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
        _ => c,
    }
}

impl Normalizer {
    pub fn normalize(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut pending_space = false;
        for c in text.chars() {
            let c = if self.fold_width { fold_width_char(c) } else { c };
            if c.is_whitespace() {
                pending_space = !out.is_empty();
                continue;
            }
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            if self.fold_case {
                out.extend(c.to_lowercase());
            } else {
                out.push(c);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Sentence segmentation

/// A non-empty set of delimiter strings, matched longest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delimiters(Vec<String>);

impl Delimiters {
    pub fn new<I, S>(delimiters: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: Vec<String> = delimiters.into_iter().map(Into::into).collect();
        if set.is_empty() || set.iter().any(String::is_empty) {
            return Err(CorpusError::InvalidDelimiters);
        }
        set.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        set.dedup();
        Ok(Self(set))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    fn match_at(&self, rest: &str) -> Option<usize> {
        self.0.iter().find(|d| rest.starts_with(d.as_str())).map(String::len)
    }
}

impl Default for Delimiters {
    fn default() -> Self {
        Self::new(DEFAULT_DELIMITERS).expect("default delimiters are valid")
    }
}

/// One piece of a segmented text. Concatenating every piece in order
/// reproduces the input exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece<'a> {
    Text(&'a str),
    Delimiter(&'a str),
}

impl<'a> Piece<'a> {
    pub fn as_str(&self) -> &'a str {
        match *self {
            Piece::Text(s) | Piece::Delimiter(s) => s,
        }
    }
}

/// Splits `text` into alternating text and delimiter pieces without losing
/// any byte. Empty text pieces are omitted.
pub fn split_pieces<'a>(text: &'a str, delimiters: &Delimiters) -> Vec<Piece<'a>> {
    let mut pieces = Vec::new();
    let mut seg_start = 0;
    let mut pos = 0;
    while pos < text.len() {
        if let Some(len) = delimiters.match_at(&text[pos..]) {
            if seg_start < pos {
                pieces.push(Piece::Text(&text[seg_start..pos]));
            }
            pieces.push(Piece::Delimiter(&text[pos..pos + len]));
            pos += len;
            seg_start = pos;
        } else {
            pos += text[pos..].chars().next().map_or(1, char::len_utf8);
        }
    }
    if seg_start < text.len() {
        pieces.push(Piece::Text(&text[seg_start..]));
    }
    pieces
}

/// Splits text into sentences at any delimiter; whitespace-only segments
/// are dropped.
pub fn segment_sentences<'a>(text: &'a str, delimiters: &Delimiters) -> Vec<&'a str> {
    split_pieces(text, delimiters)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Text(s) if !s.trim().is_empty() => Some(s),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lexicon

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub surface: String,
    pub frequency: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconReport {
    pub read: usize,
    /// Raw lines whose normalized surface collided with an earlier entry;
    /// their frequencies are summed into the first occurrence.
    pub merged: usize,
    pub dropped_below_min_frequency: usize,
}

/// Methodology entities with their corpus frequencies. Surfaces are stored
/// normalized and are unique.
#[derive(Debug, Clone)]
pub struct EntityLexicon {
    entries: Vec<LexiconEntry>,
    index: HashMap<String, usize>,
    normalizer: Normalizer,
}

impl EntityLexicon {
    pub fn from_entries<I>(
        entries: I,
        normalizer: Normalizer,
        min_frequency: u64,
    ) -> (Self, LexiconReport)
    where
        I: IntoIterator<Item = LexiconEntry>,
    {
        let mut report = LexiconReport::default();
        let mut merged: Vec<LexiconEntry> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for entry in entries {
            report.read += 1;
            let surface = normalizer.normalize(&entry.surface);
            if surface.is_empty() {
                continue;
            }
            match index.get(&surface) {
                Some(&i) => {
                    merged[i].frequency += entry.frequency;
                    report.merged += 1;
                }
                None => {
                    index.insert(surface.clone(), merged.len());
                    merged.push(LexiconEntry {
                        surface,
                        frequency: entry.frequency,
                    });
                }
            }
        }
        let before = merged.len();
        merged.retain(|e| e.frequency >= min_frequency);
        report.dropped_below_min_frequency = before - merged.len();
        let index = merged
            .iter()
            .enumerate()
            .map(|(i, e)| (e.surface.clone(), i))
            .collect();
        (
            Self {
                entries: merged,
                index,
                normalizer,
            },
            report,
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.index.contains_key(surface)
    }

    pub fn frequency(&self, surface: &str) -> Option<u64> {
        self.index.get(surface).map(|&i| self.entries[i].frequency)
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
    }

    pub fn frequencies(&self) -> BTreeMap<String, u64> {
        self.entries
            .iter()
            .map(|e| (e.surface.clone(), e.frequency))
            .collect()
    }
}

/// Reads `surface<TAB>frequency` lines. Blank lines are skipped.
pub fn parse_lexicon_tsv<R: BufRead>(
    reader: R,
    file: &str,
) -> Result<Vec<LexiconEntry>, CorpusError> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::from(file),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |field: &str, message: String| CorpusError::Parse {
            file: file.to_string(),
            line: line_no,
            field: field.to_string(),
            message,
        };
        let mut cols = line.split('\t');
        let surface = cols.next().unwrap_or_default();
        if surface.trim().is_empty() {
            return Err(parse_err("surface", "empty surface".into()));
        }
        let freq = cols
            .next()
            .ok_or_else(|| parse_err("frequency", "missing second column".into()))?;
        if cols.next().is_some() {
            return Err(parse_err("frequency", "expected exactly two columns".into()));
        }
        let frequency = freq
            .trim()
            .parse::<u64>()
            .map_err(|e| parse_err("frequency", format!("`{freq}`: {e}")))?;
        entries.push(LexiconEntry {
            surface: surface.to_string(),
            frequency,
        });
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Tokenization

/// Splits a span of normalized text that contains no lexicon entity.
pub trait Tokenizer: Send + Sync {
    fn split(&self, span: &str) -> Vec<String>;
}

/// Splits on whitespace and punctuation. Hyphens, underscores and
/// apostrophes inside a word are kept.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultTokenizer;

impl Tokenizer for DefaultTokenizer {
    fn split(&self, span: &str) -> Vec<String> {
        span.split(|c: char| !(c.is_alphanumeric() || matches!(c, '-' | '_' | '\'')))
            .map(|w| w.trim_matches(|c| matches!(c, '-' | '\'')))
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    }
}

/// Letters and digits of alphabetic scripts. Entity matches may not start or
/// end inside a run of these; CJK text has no such boundary requirement.
fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() && (c as u32) < 0x2E80
}

#[derive(Debug, Default, Clone)]
struct TrieNode {
    children: BTreeMap<char, usize>,
    terminal: bool,
}

/// Character trie over lexicon surfaces for leftmost-longest matching.
#[derive(Debug, Clone)]
pub struct EntityMatcher {
    nodes: Vec<TrieNode>,
}

impl EntityMatcher {
    pub fn new<'a, I: IntoIterator<Item = &'a str>>(surfaces: I) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for surface in surfaces {
            let mut cur = 0;
            for c in surface.chars() {
                cur = match nodes[cur].children.get(&c) {
                    Some(&next) => next,
                    None => {
                        nodes.push(TrieNode::default());
                        let next = nodes.len() - 1;
                        nodes[cur].children.insert(c, next);
                        next
                    }
                };
            }
            if cur != 0 {
                nodes[cur].terminal = true;
            }
        }
        Self { nodes }
    }

    /// Length in chars of the longest entity starting at `start` that
    /// respects word boundaries.
    fn longest_at(&self, chars: &[char], start: usize) -> Option<usize> {
        if start > 0 && is_word_char(chars[start - 1]) && is_word_char(chars[start]) {
            return None;
        }
        let mut cur = 0;
        let mut best = None;
        for (offset, c) in chars[start..].iter().enumerate() {
            match self.nodes[cur].children.get(c) {
                Some(&next) => cur = next,
                None => break,
            }
            let end = start + offset + 1;
            let boundary_ok = end == chars.len()
                || !(is_word_char(chars[end - 1]) && is_word_char(chars[end]));
            if self.nodes[cur].terminal && boundary_ok {
                best = Some(offset + 1);
            }
        }
        best
    }
}

/// Normalizes a sentence, merges lexicon entities into single tokens and
/// splits the remaining spans with a pluggable tokenizer.
pub struct EntityTokenizer {
    normalizer: Normalizer,
    matcher: EntityMatcher,
    base: Box<dyn Tokenizer>,
}

impl EntityTokenizer {
    pub fn new(lexicon: &EntityLexicon) -> Self {
        Self::with_tokenizer(lexicon, Box::new(DefaultTokenizer))
    }

    pub fn with_tokenizer(lexicon: &EntityLexicon, base: Box<dyn Tokenizer>) -> Self {
        Self {
            normalizer: lexicon.normalizer(),
            matcher: EntityMatcher::new(lexicon.entries().iter().map(|e| e.surface.as_str())),
            base,
        }
    }

    pub fn tokenize(&self, sentence: &str) -> Vec<String> {
        let chars: Vec<char> = self.normalizer.normalize(sentence).chars().collect();
        let mut tokens = Vec::new();
        let mut span_start = 0;
        let mut i = 0;
        while i < chars.len() {
            match self.matcher.longest_at(&chars, i) {
                Some(len) => {
                    if span_start < i {
                        let span: String = chars[span_start..i].iter().collect();
                        tokens.extend(self.base.split(&span));
                    }
                    tokens.push(chars[i..i + len].iter().collect());
                    i += len;
                    span_start = i;
                }
                None => i += 1,
            }
        }
        if span_start < chars.len() {
            let span: String = chars[span_start..].iter().collect();
            tokens.extend(self.base.split(&span));
        }
        tokens
    }
}

/// Tokenizes one sentence against `lexicon` with the default tokenizer.
pub fn tokenize(sentence: &str, lexicon: &EntityLexicon) -> Vec<String> {
    EntityTokenizer::new(lexicon).tokenize(sentence)
}

// ---------------------------------------------------------------------------
// Corpus

/// One line of the corpus JSON-lines file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub category_ids: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub category_ids: BTreeSet<String>,
    pub sentences: Vec<Sentence>,
}

impl Document {
    pub fn is_labeled(&self) -> bool {
        !self.category_ids.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.documents.iter().flat_map(|d| d.sentences.iter())
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    pub fn labeled(&self) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(|d| d.is_labeled())
    }
}

/// Parses a corpus JSON-lines stream. Blank lines are skipped.
pub fn parse_corpus_jsonl<R: BufRead>(
    reader: R,
    file: &str,
) -> Result<Vec<(usize, RawDocument)>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::from(file),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                file: file.to_string(),
                line: line_no,
                field: "<json>".into(),
                message: e.to_string(),
            })?;
        let doc = raw_document_from_value(&value).map_err(|(field, message)| {
            CorpusError::Parse {
                file: file.to_string(),
                line: line_no,
                field,
                message,
            }
        })?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId {
                file: file.to_string(),
                line: line_no,
                doc_id: doc.doc_id,
            });
        }
        docs.push((line_no, doc));
    }
    Ok(docs)
}

fn raw_document_from_value(v: &serde_json::Value) -> Result<RawDocument, (String, String)> {
    let obj = v
        .as_object()
        .ok_or_else(|| ("<json>".to_string(), "expected a JSON object".to_string()))?;
    let string_field = |name: &str| -> Result<String, (String, String)> {
        match obj.get(name) {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err((name.into(), "expected a string".into())),
            None => Err((name.into(), "missing".into())),
        }
    };
    let doc_id = string_field("doc_id")?;
    if doc_id.is_empty() {
        return Err(("doc_id".into(), "empty".into()));
    }
    let text = string_field("text")?;
    if text.trim().is_empty() {
        return Err(("text".into(), "empty".into()));
    }
    let category_ids = match obj.get("category_ids") {
        Some(serde_json::Value::Array(items)) => items
            .iter()
            .map(|item| {
                item.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| ("category_ids".to_string(), "expected strings".to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(("category_ids".into(), "expected an array".into())),
        None => return Err(("category_ids".into(), "missing".into())),
    };
    Ok(RawDocument {
        doc_id,
        category_ids,
        text,
    })
}

/// Segments and tokenizes one document. Sentences left without tokens are
/// dropped and the survivors renumbered from 0.
pub fn process_document(
    raw: &RawDocument,
    delimiters: &Delimiters,
    tokenizer: &EntityTokenizer,
) -> Document {
    let sentences = segment_sentences(&raw.text, delimiters)
        .into_iter()
        .map(|s| tokenizer.tokenize(s))
        .filter(|tokens| !tokens.is_empty())
        .enumerate()
        .map(|(index, tokens)| Sentence { index, tokens })
        .collect();
    Document {
        doc_id: raw.doc_id.clone(),
        category_ids: raw.category_ids.iter().cloned().collect(),
        sentences,
    }
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Token types with dense ids, ordered by descending corpus count then by
/// token text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts every token in `corpus`, keeps those reaching `min_count`, and
    /// always keeps every lexicon surface even when it never occurs.
    pub fn build(corpus: &Corpus, lexicon: &EntityLexicon, min_count: u64) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for token in corpus.sentences().flat_map(|s| s.tokens.iter()) {
            *counts.entry(token.as_str()).or_default() += 1;
        }
        for entry in lexicon.entries() {
            counts.entry(entry.surface.as_str()).or_default();
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|&(tok, c)| c >= min_count || lexicon.contains(tok))
            .map(|(tok, c)| (tok.to_string(), c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_counts(kept)
    }

    /// Rebuilds a vocabulary from `(token, count)` pairs in id order.
    pub fn from_counts<I: IntoIterator<Item = (String, u64)>>(pairs: I) -> Self {
        let (tokens, counts): (Vec<String>, Vec<u64>) = pairs.into_iter().unzip();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of ids with a non-zero count. Ids are count-ordered, so these
    /// are exactly `0..observed_len()`.
    pub fn observed_len(&self) -> usize {
        self.counts.iter().take_while(|&&c| c > 0).count()
    }

    /// Maps a sentence to ids, dropping tokens outside the vocabulary.
    pub fn encode<'a, I: IntoIterator<Item = &'a String>>(&self, tokens: I) -> Vec<usize> {
        tokens.into_iter().filter_map(|t| self.id(t)).collect()
    }
}

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub delimiters: Vec<String>,
    pub fold_case: bool,
    pub fold_width: bool,
    pub min_frequency: u64,
    pub min_count: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            delimiters: DEFAULT_DELIMITERS.iter().map(|s| s.to_string()).collect(),
            fold_case: true,
            fold_width: true,
            min_frequency: DEFAULT_MIN_FREQUENCY,
            min_count: DEFAULT_MIN_COUNT,
        }
    }
}

impl IngestConfig {
    pub fn normalizer(&self) -> Normalizer {
        Normalizer {
            fold_case: self.fold_case,
            fold_width: self.fold_width,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: usize,
    pub labeled_documents: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub lexicon: LexiconReport,
    pub lexicon_size: usize,
    pub vocabulary_size: usize,
    /// Lexicon entities that never occur in the tokenized corpus.
    pub entities_absent_from_corpus: Vec<String>,
}

pub struct Ingested {
    pub corpus: Corpus,
    pub lexicon: EntityLexicon,
    pub vocabulary: Vocabulary,
    pub report: IngestReport,
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads the corpus and lexicon files and produces token streams and the
/// vocabulary. When `known_categories` is given, every document category
/// must belong to it.
pub fn ingest(
    corpus_path: &Path,
    lexicon_path: &Path,
    known_categories: Option<&BTreeSet<String>>,
    config: &IngestConfig,
) -> Result<Ingested, CorpusError> {
    let delimiters = Delimiters::new(config.delimiters.iter().cloned())?;
    let lex_name = lexicon_path.display().to_string();
    let raw_entries = parse_lexicon_tsv(open(lexicon_path)?, &lex_name)?;
    let (lexicon, lex_report) =
        EntityLexicon::from_entries(raw_entries, config.normalizer(), config.min_frequency);

    let corpus_name = corpus_path.display().to_string();
    let raw_docs = parse_corpus_jsonl(open(corpus_path)?, &corpus_name)?;
    ingest_documents(
        raw_docs.into_iter().map(|(_, d)| d).collect(),
        lexicon,
        lex_report,
        known_categories,
        &delimiters,
        config.min_count,
    )
}

/// In-memory half of [`ingest`].
pub fn ingest_documents(
    raw_docs: Vec<RawDocument>,
    lexicon: EntityLexicon,
    lexicon_report: LexiconReport,
    known_categories: Option<&BTreeSet<String>>,
    delimiters: &Delimiters,
    min_count: u64,
) -> Result<Ingested, CorpusError> {
    if let Some(known) = known_categories {
        for doc in &raw_docs {
            if let Some(bad) = doc.category_ids.iter().find(|c| !known.contains(*c)) {
                return Err(CorpusError::UnknownCategory {
                    doc_id: doc.doc_id.clone(),
                    category: bad.clone(),
                });
            }
        }
    }
    let tokenizer = EntityTokenizer::new(&lexicon);
    let documents: Vec<Document> = raw_docs
        .par_iter()
        .map(|raw| process_document(raw, delimiters, &tokenizer))
        .collect();
    let corpus = Corpus { documents };
    let vocabulary = Vocabulary::build(&corpus, &lexicon, min_count);
    let entities_absent_from_corpus = lexicon
        .entries()
        .iter()
        .filter(|e| vocabulary.id(&e.surface).map_or(true, |id| vocabulary.count(id) == 0))
        .map(|e| e.surface.clone())
        .collect();
    let report = IngestReport {
        documents: corpus.documents.len(),
        labeled_documents: corpus.labeled().count(),
        sentences: corpus.sentence_count(),
        tokens: corpus.sentences().map(|s| s.tokens.len()).sum(),
        lexicon: lexicon_report,
        lexicon_size: lexicon.len(),
        vocabulary_size: vocabulary.len(),
        entities_absent_from_corpus,
    };
    Ok(Ingested {
        corpus,
        lexicon,
        vocabulary,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lexicon(surfaces: &[&str]) -> EntityLexicon {
        EntityLexicon::from_entries(
            surfaces.iter().map(|s| LexiconEntry {
                surface: s.to_string(),
                frequency: 10,
            }),
            Normalizer::default(),
            DEFAULT_MIN_FREQUENCY,
        )
        .0
    }

    #[test]
    fn segments_on_each_delimiter() {
        let d = Delimiters::new(["。", "?"]).unwrap();
        assert_eq!(segment_sentences("A。B?C", &d), vec!["A", "B", "C"]);
        let nl = Delimiters::new(["\n"]).unwrap();
        assert_eq!(segment_sentences("A\n\nB", &nl), vec!["A", "B"]);
        assert_eq!(
            segment_sentences("no delimiter here", &Delimiters::default()),
            vec!["no delimiter here"]
        );
        assert!(segment_sentences("", &Delimiters::default()).is_empty());
    }

    #[test]
    fn default_delimiters_cover_both_question_marks_and_ellipsis() {
        let d = Delimiters::default();
        assert_eq!(
            segment_sentences("甲？乙?丙……丁。戊\n己", &d),
            vec!["甲", "乙", "丙", "丁", "戊", "己"]
        );
    }

    #[test]
    fn empty_delimiter_set_rejected() {
        assert!(Delimiters::new(Vec::<String>::new()).is_err());
        assert!(Delimiters::new([""]).is_err());
    }

    #[test]
    fn longest_match_merges_entities() {
        let lex = lexicon(&["support vector machine"]);
        assert_eq!(
            tokenize("we use support vector machine here", &lex),
            vec!["we", "use", "support vector machine", "here"]
        );
        let lex = lexicon(&["svm", "svm classifier"]);
        assert_eq!(
            tokenize("svm and svm classifier", &lex),
            vec!["svm", "and", "svm classifier"]
        );
        assert!(tokenize("", &lex).is_empty());
    }

    #[test]
    fn entity_match_respects_word_boundaries() {
        let lex = lexicon(&["svm"]);
        assert_eq!(tokenize("libsvm svms svm.", &lex), vec!["libsvm", "svms", "svm"]);
    }

    #[test]
    fn cjk_entities_match_without_spaces() {
        let lex = lexicon(&["支持向量机"]);
        assert_eq!(tokenize("我们用支持向量机分类", &lex), vec!["我们用", "支持向量机", "分类"]);
    }

    #[test]
    fn normalization_folds_case_and_width() {
        let n = Normalizer::default();
        assert_eq!(n.normalize("ＳＶＭ  Model\t"), "svm model");
        let lex = lexicon(&["SVM"]);
        assert_eq!(tokenize("Ｓｖｍ works", &lex), vec!["svm", "works"]);
        let off = Normalizer {
            fold_case: false,
            fold_width: false,
        };
        assert_eq!(off.normalize("ＳＶＭ"), "ＳＶＭ");
    }

    #[test]
    fn lexicon_filters_and_merges() {
        let (lex, report) = EntityLexicon::from_entries(
            vec![
                LexiconEntry { surface: "SVM".into(), frequency: 2 },
                LexiconEntry { surface: "svm".into(), frequency: 3 },
                LexiconEntry { surface: "crf".into(), frequency: 3 },
            ],
            Normalizer::default(),
            4,
        );
        assert_eq!(report.merged, 1);
        assert_eq!(report.dropped_below_min_frequency, 1);
        assert_eq!(lex.frequency("svm"), Some(5));
        assert!(!lex.contains("crf"));
    }

    #[test]
    fn lexicon_parse_errors_name_line_and_field() {
        let err = parse_lexicon_tsv("a\t4\nb\tx\n".as_bytes(), "lex.tsv").unwrap_err();
        match err {
            CorpusError::Parse { file, line, field, .. } => {
                assert_eq!((file.as_str(), line, field.as_str()), ("lex.tsv", 2, "frequency"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_lexicon_tsv("only\n".as_bytes(), "l").is_err());
    }

    #[test]
    fn corpus_parse_errors() {
        let dup = "{\"doc_id\":\"a\",\"category_ids\":[],\"text\":\"x\"}\n\
                   {\"doc_id\":\"a\",\"category_ids\":[],\"text\":\"y\"}\n";
        assert!(matches!(
            parse_corpus_jsonl(dup.as_bytes(), "c"),
            Err(CorpusError::DuplicateDocId { line: 2, .. })
        ));
        let missing = "{\"doc_id\":\"a\",\"text\":\"x\"}\n";
        match parse_corpus_jsonl(missing.as_bytes(), "c").unwrap_err() {
            CorpusError::Parse { field, line, .. } => {
                assert_eq!(field, "category_ids");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        let empty_text = "{\"doc_id\":\"a\",\"category_ids\":[],\"text\":\"  \"}\n";
        assert!(parse_corpus_jsonl(empty_text.as_bytes(), "c").is_err());
    }

    #[test]
    fn unknown_category_rejected() {
        let known: BTreeSet<String> = ["x".to_string()].into();
        let docs = vec![RawDocument {
            doc_id: "d1".into(),
            category_ids: vec!["nope".into()],
            text: "t".into(),
        }];
        let err = ingest_documents(
            docs,
            lexicon(&[]),
            LexiconReport::default(),
            Some(&known),
            &Delimiters::default(),
            1,
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn vocabulary_keeps_lexicon_surfaces_below_min_count() {
        let lex = lexicon(&["rare entity", "never seen"]);
        let docs = vec![RawDocument {
            doc_id: "d".into(),
            category_ids: vec![],
            text: "a a a rare entity b".into(),
        }];
        let ing = ingest_documents(
            docs,
            lex,
            LexiconReport::default(),
            None,
            &Delimiters::default(),
            2,
        )
        .unwrap();
        let v = &ing.vocabulary;
        assert_eq!(v.tokens(), &["a", "rare entity", "never seen"]);
        assert_eq!(v.observed_len(), 2);
        assert_eq!(ing.report.entities_absent_from_corpus, vec!["never seen"]);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
    }

    #[test]
    fn sentence_indices_are_contiguous() {
        let lex = lexicon(&[]);
        let tok = EntityTokenizer::new(&lex);
        let raw = RawDocument {
            doc_id: "d".into(),
            category_ids: vec![],
            text: "one。,,,。two\n\nthree".into(),
        };
        let doc = process_document(&raw, &Delimiters::default(), &tok);
        let idx: Vec<usize> = doc.sentences.iter().map(|s| s.index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    /// All segmentations of `words` into lexicon phrases and single words,
    /// choosing the one whose piece lengths are lexicographically largest
    /// from the left (leftmost-longest preference).
    fn brute_force_segmentation(words: &[&str], lexicon: &BTreeSet<String>) -> Vec<String> {
        fn go(
            words: &[&str],
            lexicon: &BTreeSet<String>,
            prefix: &mut Vec<usize>,
            best: &mut Option<Vec<usize>>,
        ) {
            if words.is_empty() {
                if best.as_ref().map_or(true, |b| &*prefix > b) {
                    *best = Some(prefix.clone());
                }
                return;
            }
            for len in 1..=words.len() {
                let phrase = words[..len].join(" ");
                if len == 1 || lexicon.contains(&phrase) {
                    prefix.push(len);
                    go(&words[len..], lexicon, prefix, best);
                    prefix.pop();
                }
            }
        }
        let mut best = None;
        go(words, lexicon, &mut Vec::new(), &mut best);
        let mut out = Vec::new();
        let mut pos = 0;
        for len in best.unwrap_or_default() {
            out.push(words[pos..pos + len].join(" "));
            pos += len;
        }
        out
    }

    #[test]
    fn longest_match_agrees_with_brute_force() {
        let surfaces = ["svm", "svm classifier", "svm classifier model", "classifier model"];
        let lex = lexicon(&surfaces);
        let set: BTreeSet<String> = surfaces.iter().map(|s| s.to_string()).collect();
        for sentence in [
            "svm and svm classifier",
            "svm classifier model works",
            "a classifier model and svm classifier",
            "svm svm classifier classifier model",
        ] {
            let words: Vec<&str> = sentence.split(' ').collect();
            assert_eq!(tokenize(sentence, &lex), brute_force_segmentation(&words, &set), "{sentence}");
        }
    }

    proptest! {
        #[test]
        fn segmentation_is_a_partition(text in "[ab。?？\n …]{0,40}") {
            let d = Delimiters::default();
            let pieces = split_pieces(&text, &d);
            let joined: String = pieces.iter().map(|p| p.as_str()).collect();
            prop_assert_eq!(&joined, &text);
            for s in segment_sentences(&text, &d) {
                for delim in d.as_slice() {
                    prop_assert!(!s.contains(delim.as_str()));
                }
            }
        }

        #[test]
        fn entities_never_split(
            words in proptest::collection::vec(prop_oneof!["alpha", "beta", "gamma", "x"], 0..12)
        ) {
            let lex = lexicon(&["alpha beta", "gamma"]);
            let sentence = words.join(" ");
            let tokens = tokenize(&sentence, &lex);
            let rejoined = tokens.join(" ");
            prop_assert_eq!(&rejoined, &sentence);
            let expected = sentence.matches("alpha beta").count();
            let got = tokens.iter().filter(|t| *t == "alpha beta").count();
            prop_assert_eq!(got, expected);
        }
    }
}
