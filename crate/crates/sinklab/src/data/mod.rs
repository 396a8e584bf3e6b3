//! Byte-level tokenization, corpus chunking/packing, BOS/EOS placement,
//! and attention-mask construction for the training regimes
//! (causal / intra-doc masking × BOS placements).

use crate::numerics::Mask;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Byte ids 0..=255, then the three specials.
pub const BYTE_VOCAB: usize = 256;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad packing config: {0}")]
    Config(String),
    #[error("line {line}: {detail}")]
    Ingest { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Masking {
    Causal,
    IntraDoc,
}

/// One of the packing/masking regimes of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PackingStrategy {
    pub masking: Masking,
    /// Reserve position 0 of every context for BOS and let every row
    /// attend to it.
    #[serde(default)]
    pub fixed_bos: bool,
    /// Place BOS at document starts (or, with `fixed_bos`, at position 0).
    #[serde(default)]
    pub use_bos: bool,
    /// Append EOS after every document.
    #[serde(default)]
    pub use_eos: bool,
    pub context_length: usize,
}

impl PackingStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.context_length == 0 {
            return Err(DataError::Config("context_length must be positive".into()));
        }
        if self.fixed_bos && !self.use_bos {
            return Err(DataError::Config(
                "fixed_bos requires use_bos (the reserved slot holds a BOS)".into(),
            ));
        }
        if self.fixed_bos && self.context_length < 2 {
            return Err(DataError::Config(
                "fixed_bos needs context_length >= 2: position 0 is reserved".into(),
            ));
        }
        Ok(())
    }

    /// Content slots per sequence (everything except a reserved BOS).
    pub fn slots(&self) -> usize {
        if self.fixed_bos {
            self.context_length - 1
        } else {
            self.context_length
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    /// The reserved BOS at position 0 under fixed-BOS packing.
    FixedBos,
    /// A BOS immediately preceding document `doc`.
    Bos { doc: usize },
    /// Content tokens of document `doc`.
    Doc { doc: usize },
    /// The EOS terminating document `doc`.
    Eos { doc: usize },
    Pad,
}

impl SpanKind {
    /// Document membership for intra-doc masking; BOS/EOS markers belong
    /// to the document they delimit.
    pub fn doc(self) -> Option<usize> {
        match self {
            SpanKind::Bos { doc } | SpanKind::Doc { doc } | SpanKind::Eos { doc } => Some(doc),
            SpanKind::FixedBos | SpanKind::Pad => None,
        }
    }

    pub fn is_special(self) -> bool {
        !matches!(self, SpanKind::Doc { .. })
    }
}

/// Half-open position range [start, end) of one kind within a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<usize>,
    /// Spans tile [0, T) in order without overlap.
    pub spans: Vec<Span>,
}

impl PackedSequence {
    /// Span kind owning position `pos`.
    pub fn kind_at(&self, pos: usize) -> Option<SpanKind> {
        self.spans
            .iter()
            .find(|s| s.start <= pos && pos < s.end)
            .map(|s| s.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub sequences: Vec<PackedSequence>,
}

/// UTF-8 text to byte ids.
pub fn tokenize(text: &str) -> Vec<usize> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Byte ids back to bytes; the specials (BOS/EOS/PAD) are dropped, ids
/// beyond the vocabulary are an error.
pub fn detokenize_bytes(ids: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < BYTE_VOCAB {
            out.push(id as u8);
        } else if id >= VOCAB_SIZE {
            return Err(DataError::Config(format!(
                "token id {id} outside vocabulary of {VOCAB_SIZE}"
            )));
        }
    }
    Ok(out)
}

/// Lossy string form of `detokenize_bytes`.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    Ok(String::from_utf8_lossy(&detokenize_bytes(ids)?).into_owned())
}

fn check_docs(docs: &[Vec<usize>]) -> Result<()> {
    for (i, doc) in docs.iter().enumerate() {
        if doc.is_empty() {
            return Err(DataError::Config(format!("document {i} is empty")));
        }
        if let Some(&bad) = doc.iter().find(|&&t| t >= BYTE_VOCAB) {
            return Err(DataError::Config(format!(
                "document {i} contains id {bad}; content must be byte ids < {BYTE_VOCAB}"
            )));
        }
    }
    Ok(())
}

/// Concatenate documents (with the strategy's BOS/EOS placement), chunk
/// the stream into contexts, and pad the tail. Documents may split across
/// chunk boundaries; no tokens are dropped. Deterministic in `docs` order.
pub fn pack_corpus(docs: &[Vec<usize>], strategy: &PackingStrategy) -> Result<Vec<PackedSequence>> {
    strategy.validate()?;
    check_docs(docs)?;
    let mut stream: Vec<(usize, SpanKind)> = Vec::new();
    for (id, doc) in docs.iter().enumerate() {
        if strategy.use_bos && !strategy.fixed_bos {
            stream.push((BOS, SpanKind::Bos { doc: id }));
        }
        for &tok in doc {
            stream.push((tok, SpanKind::Doc { doc: id }));
        }
        if strategy.use_eos {
            stream.push((EOS, SpanKind::Eos { doc: id }));
        }
    }
    let slots = strategy.slots();
    let mut sequences = Vec::with_capacity(stream.len().div_ceil(slots.max(1)));
    for chunk in stream.chunks(slots) {
        let mut tokens = Vec::with_capacity(strategy.context_length);
        let mut kinds = Vec::with_capacity(strategy.context_length);
        if strategy.fixed_bos {
            tokens.push(BOS);
            kinds.push(SpanKind::FixedBos);
        }
        for &(tok, kind) in chunk {
            tokens.push(tok);
            kinds.push(kind);
        }
        while tokens.len() < strategy.context_length {
            tokens.push(PAD);
            kinds.push(SpanKind::Pad);
        }
        sequences.push(PackedSequence {
            tokens,
            spans: runs_to_spans(&kinds),
        });
    }
    Ok(sequences)
}

fn runs_to_spans(kinds: &[SpanKind]) -> Vec<Span> {
    let mut spans: Vec<Span> = Vec::new();
    for (pos, &kind) in kinds.iter().enumerate() {
        match spans.last_mut() {
            Some(last) if last.kind == kind => last.end = pos + 1,
            _ => spans.push(Span {
                start: pos,
                end: pos + 1,
                kind,
            }),
        }
    }
    spans
}

/// Group sequences into batches; the final batch may be ragged.
pub fn batch_sequences(sequences: Vec<PackedSequence>, batch_size: usize) -> Vec<PackedBatch> {
    let mut batches = Vec::new();
    let mut current = Vec::with_capacity(batch_size.max(1));
    for seq in sequences {
        current.push(seq);
        if current.len() == batch_size {
            batches.push(PackedBatch {
                sequences: std::mem::take(&mut current),
            });
        }
    }
    if !current.is_empty() {
        batches.push(PackedBatch { sequences: current });
    }
    batches
}

fn check_spans_tile(seq: &PackedSequence) -> Result<()> {
    let t = seq.tokens.len();
    let mut cursor = 0;
    for span in &seq.spans {
        if span.start != cursor || span.end <= span.start {
            return Err(DataError::Config(format!(
                "spans must tile [0, {t}) in order; found [{}, {}) at cursor {cursor}",
                span.start, span.end
            )));
        }
        cursor = span.end;
    }
    if cursor != t {
        return Err(DataError::Config(format!(
            "spans cover [0, {cursor}) but the sequence has {t} tokens"
        )));
    }
    Ok(())
}

/// Attention mask for one packed sequence. Causal masking is the full
/// lower triangle; intra-doc masking restricts each row to its own
/// document's prefix (every position may still attend to itself, which
/// keeps PAD rows valid for softmax); fixed-BOS additionally opens
/// column 0 for every row.
pub fn build_mask(seq: &PackedSequence, strategy: &PackingStrategy) -> Result<Mask> {
    strategy.validate()?;
    if seq.spans.is_empty() || seq.tokens.is_empty() {
        return Err(DataError::Config("empty layout".into()));
    }
    check_spans_tile(seq)?;
    let t = seq.tokens.len();
    match strategy.masking {
        Masking::Causal => Ok(Mask::causal(t)),
        Masking::IntraDoc => {
            let doc_of: Vec<Option<usize>> = (0..t)
                .map(|pos| seq.kind_at(pos).and_then(SpanKind::doc))
                .collect();
            let mut mask = Mask::empty(t);
            for i in 0..t {
                for j in 0..=i {
                    let same_doc = match (doc_of[i], doc_of[j]) {
                        (Some(a), Some(b)) => a == b,
                        _ => false,
                    };
                    if same_doc || i == j || (strategy.fixed_bos && j == 0) {
                        mask.allow(i, j);
                    }
                }
            }
            Ok(mask)
        }
    }
}

/// Prompts from a line-delimited JSON file with a "text" field, tokenized
/// and optionally truncated. Blank lines are skipped; anything else that
/// fails to parse is an error naming the 1-based line.
pub fn load_prompt_set(path: &Path, truncate: Option<usize>) -> Result<Vec<Vec<usize>>> {
    let raw = fs::read_to_string(path)?;
    let mut prompts = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| DataError::Ingest {
                line: idx + 1,
                detail: format!("invalid JSON: {e}"),
            })?;
        let text = value
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| DataError::Ingest {
                line: idx + 1,
                detail: "record has no string \"text\" field".into(),
            })?;
        let mut ids = tokenize(text);
        if let Some(max) = truncate {
            ids.truncate(max);
        }
        prompts.push(ids);
    }
    Ok(prompts)
}

/// Documents from disk: line-delimited JSON (`.jsonl`/`.ndjson`/`.json`,
/// one document per record's "text" field) or a plain UTF-8 file treated
/// as a single document.
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<usize>>> {
    let is_jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("ndjson") | Some("json")
    );
    if is_jsonl {
        load_prompt_set(path, None)
    } else {
        let raw = fs::read(path)?;
        Ok(vec![tokenize_bytes(&raw)])
    }
}

const ARTICLES: &[&str] = &["the", "a", "this", "that", "every", "some"];
const ADJECTIVES: &[&str] = &[
    "quiet", "bright", "heavy", "narrow", "green", "old", "sudden", "plain", "warm", "distant",
    "hollow", "steady", "pale", "rough", "clever", "broad",
];
const NOUNS: &[&str] = &[
    "river", "lamp", "garden", "signal", "window", "engine", "harbor", "letter", "mountain",
    "market", "bridge", "forest", "clock", "stone", "valley", "shadow", "station", "meadow",
    "door", "bell",
];
const VERBS: &[&str] = &[
    "crosses", "holds", "follows", "opens", "carries", "turns", "watches", "finds", "leaves",
    "meets", "fills", "passes", "keeps", "reaches", "covers", "lifts",
];
const ADVERBS: &[&str] = &[
    "slowly", "again", "quietly", "at last", "by morning", "without a sound", "in the rain",
    "before dark",
];
const CONNECTORS: &[&str] = &["and", "but", "so", "while", "until", "because"];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let pick =
        |rng: &mut ChaCha8Rng, words: &[&'static str]| -> &'static str { words[rng.gen_range(0..words.len())] };
    let mut s = format!(
        "{} {} {} {} {} {} {}",
        pick(rng, ARTICLES),
        pick(rng, ADJECTIVES),
        pick(rng, NOUNS),
        pick(rng, VERBS),
        pick(rng, ARTICLES),
        pick(rng, ADJECTIVES),
        pick(rng, NOUNS),
    );
    if rng.gen_bool(0.5) {
        s.push(' ');
        s.push_str(pick(rng, ADVERBS));
    }
    if rng.gen_bool(0.3) {
        s.push(' ');
        s.push_str(pick(rng, CONNECTORS));
        s.push(' ');
        s.push_str(ARTICLES[0]);
        s.push(' ');
        s.push_str(pick(rng, NOUNS));
        s.push(' ');
        s.push_str(pick(rng, VERBS));
        s.push(' ');
        s.push_str(ARTICLES[0]);
        s.push(' ');
        s.push_str(pick(rng, NOUNS));
    }
    s.push('.');
    s
}

/// Seeded English-like documents for self-contained training runs:
/// templated sentences over a small word bank, document lengths between
/// `min_sentences` and `max_sentences`. Pure ASCII, deterministic.
pub fn synthetic_corpus(
    seed: u64,
    n_docs: usize,
    min_sentences: usize,
    max_sentences: usize,
) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|_| {
            let n = rng.gen_range(min_sentences..=max_sentences.max(min_sentences));
            let mut doc = String::new();
            for k in 0..n {
                if k > 0 {
                    doc.push(' ');
                }
                let s = sentence(&mut rng);
                let mut chars = s.chars();
                if let Some(first) = chars.next() {
                    doc.push(first.to_ascii_uppercase());
                    doc.push_str(chars.as_str());
                }
            }
            doc
        })
        .collect()
}

/// Seeded pseudo-word documents with per-document topic reuse. A global
/// lexicon of random letter-words is drawn once from the seed; each
/// document picks a small topic subset and samples its words from that
/// subset with Zipf-like weights. Word transitions are unpredictable
/// without context but strongly constrained by the words already seen in
/// the document, so attention is informative where templated prose is
/// not; this is the default corpus for sink-formation training runs.
pub fn lexicon_corpus(
    seed: u64,
    n_docs: usize,
    min_words: usize,
    max_words: usize,
) -> Vec<String> {
    const LEXICON: usize = 512;
    const TOPIC: usize = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..LEXICON)
        .map(|_| {
            let len = rng.gen_range(3..=8);
            (0..len)
                .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
                .collect()
        })
        .collect();
    // Zipf weights over topic ranks, shared by every document.
    let weights: Vec<f64> = (0..TOPIC).map(|k| 1.0 / (k as f64 + 1.0)).collect();
    let total: f64 = weights.iter().sum();

    (0..n_docs)
        .map(|_| {
            let mut topic = Vec::with_capacity(TOPIC);
            while topic.len() < TOPIC {
                let w = rng.gen_range(0..LEXICON);
                if !topic.contains(&w) {
                    topic.push(w);
                }
            }
            let n = rng.gen_range(min_words..=max_words.max(min_words));
            let mut doc = String::new();
            for k in 0..n {
                if k > 0 {
                    doc.push(' ');
                }
                let mut u = rng.gen_range(0.0..total);
                let mut pick = TOPIC - 1;
                for (rank, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = rank;
                        break;
                    }
                    u -= w;
                }
                doc.push_str(&lexicon[topic[pick]]);
            }
            doc.push('.');
            doc
        })
        .collect()
}

/// Seeded repetition documents: each document is one uniformly random
/// lowercase-letter segment, emitted 3–6 times in a row (space-separated).
/// The first pass is incompressible; later passes are perfectly
/// predictable *if* the matching earlier position is inside the attention
/// window. There is deliberately no intra-segment structure (no words, no
/// punctuation) so purely local attention earns nothing beyond letter
/// frequency — the only reducible loss is content-addressed retrieval.
/// Segment lengths spread over `min_segment..=max_segment` bytes, so the
/// copy distance sweeps the context lengths under ablation: longer
/// training contexts can exploit more of the corpus, and heads face the
/// sharpest retrieve-or-park pressure this crate can generate.
pub fn echo_corpus(
    seed: u64,
    n_docs: usize,
    min_segment: usize,
    max_segment: usize,
) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|_| {
            let len = rng.gen_range(min_segment..=max_segment.max(min_segment));
            let segment: String = (0..len)
                .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
                .collect();
            let reps = rng.gen_range(3..=6);
            let mut doc = String::with_capacity((segment.len() + 1) * reps);
            for k in 0..reps {
                if k > 0 {
                    doc.push(' ');
                }
                doc.push_str(&segment);
            }
            doc
        })
        .collect()
}

/// Echo documents interleaved with equally shaped decoys. Even-indexed
/// documents repeat one random segment exactly as [`echo_corpus`] does;
/// odd-indexed documents share the layout (same segment-length and
/// repetition draws, space separators) but draw every segment fresh, so
/// nothing in them is retrievable. Layout alone therefore carries no
/// signal: a head must content-match against the window to know whether
/// copying pays off, and on decoys (plus every first pass) the best move
/// is to stay out of the residual stream. That keeps no-op rows in the
/// majority at every context length, so the retrieve-or-park split stays
/// under pressure for the whole run instead of washing out once the
/// induction circuit matures.
pub fn echo_mix_corpus(
    seed: u64,
    n_docs: usize,
    min_segment: usize,
    max_segment: usize,
) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|i| {
            let len = rng.gen_range(min_segment..=max_segment.max(min_segment));
            let reps = rng.gen_range(3..=6);
            let rand_segment = |rng: &mut ChaCha8Rng| -> String {
                (0..len)
                    .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
                    .collect()
            };
            let repeated = rand_segment(&mut rng);
            let mut doc = String::with_capacity((len + 1) * reps);
            for k in 0..reps {
                if k > 0 {
                    doc.push(' ');
                }
                if i % 2 == 0 {
                    doc.push_str(&repeated);
                } else {
                    let fresh = rand_segment(&mut rng);
                    doc.push_str(&fresh);
                }
            }
            doc
        })
        .collect()
}

/// Deterministic seeded permutation of sequence indices, for epoch
/// shuffling.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

pub const PACK_FORMAT_TAG: &str = "sinklab-pack-v1";

fn kind_to_str(kind: SpanKind) -> String {
    match kind {
        SpanKind::FixedBos => "fixedbos".into(),
        SpanKind::Bos { doc } => format!("bos:{doc}"),
        SpanKind::Doc { doc } => format!("doc:{doc}"),
        SpanKind::Eos { doc } => format!("eos:{doc}"),
        SpanKind::Pad => "pad".into(),
    }
}

fn kind_from_str(s: &str) -> Result<SpanKind> {
    let parse_doc = |rest: &str| -> Result<usize> {
        rest.parse()
            .map_err(|_| DataError::Config(format!("bad span doc id: {rest}")))
    };
    match s.split_once(':') {
        None if s == "fixedbos" => Ok(SpanKind::FixedBos),
        None if s == "pad" => Ok(SpanKind::Pad),
        Some(("bos", rest)) => Ok(SpanKind::Bos { doc: parse_doc(rest)? }),
        Some(("doc", rest)) => Ok(SpanKind::Doc { doc: parse_doc(rest)? }),
        Some(("eos", rest)) => Ok(SpanKind::Eos { doc: parse_doc(rest)? }),
        _ => Err(DataError::Config(format!("unknown span kind: {s}"))),
    }
}

/// Cache packed sequences: a text manifest plus one raw blob of
/// little-endian 32-bit token ids.
pub fn save_packed(dir: &Path, sequences: &[PackedSequence]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("format {PACK_FORMAT_TAG}\n"));
    manifest.push_str(&format!("sequences {}\n", sequences.len()));
    let mut blob: Vec<u8> = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        manifest.push_str(&format!("seq {i} len {}\n", seq.tokens.len()));
        for span in &seq.spans {
            manifest.push_str(&format!(
                "span {i} {} {} {}\n",
                span.start,
                span.end,
                kind_to_str(span.kind)
            ));
        }
        for &tok in &seq.tokens {
            blob.extend_from_slice(&(tok as u32).to_le_bytes());
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    let mut f = fs::File::create(dir.join("tokens.bin"))?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load_packed(dir: &Path) -> Result<Vec<PackedSequence>> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let blob = fs::read(dir.join("tokens.bin"))?;
    let mut lines = manifest.lines();
    let header = lines.next().unwrap_or_default();
    if header != format!("format {PACK_FORMAT_TAG}") {
        return Err(DataError::Config(format!(
            "unrecognized pack manifest header: {header:?}"
        )));
    }
    let mut sequences: Vec<PackedSequence> = Vec::new();
    let mut offset = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["sequences", _] => {}
            ["seq", _, "len", len] => {
                let len: usize = len
                    .parse()
                    .map_err(|_| DataError::Config(format!("bad seq length: {line}")))?;
                let mut tokens = Vec::with_capacity(len);
                for _ in 0..len {
                    let bytes: [u8; 4] = blob
                        .get(offset..offset + 4)
                        .ok_or_else(|| {
                            DataError::Config("token blob shorter than manifest claims".into())
                        })?
                        .try_into()
                        .expect("4-byte slice");
                    tokens.push(u32::from_le_bytes(bytes) as usize);
                    offset += 4;
                }
                sequences.push(PackedSequence {
                    tokens,
                    spans: Vec::new(),
                });
            }
            ["span", idx, start, end, kind] => {
                let idx: usize = idx
                    .parse()
                    .map_err(|_| DataError::Config(format!("bad span line: {line}")))?;
                let span = Span {
                    start: start
                        .parse()
                        .map_err(|_| DataError::Config(format!("bad span line: {line}")))?,
                    end: end
                        .parse()
                        .map_err(|_| DataError::Config(format!("bad span line: {line}")))?,
                    kind: kind_from_str(kind)?,
                };
                sequences
                    .get_mut(idx)
                    .ok_or_else(|| DataError::Config(format!("span for unknown sequence {idx}")))?
                    .spans
                    .push(span);
            }
            _ => {
                return Err(DataError::Config(format!(
                    "unrecognized manifest line: {line:?}"
                )))
            }
        }
    }
    if offset != blob.len() {
        return Err(DataError::Config(format!(
            "token blob has {} bytes but manifest consumed {offset}",
            blob.len()
        )));
    }
    Ok(sequences)
}
