//! Text processing: tokenization, vocabulary, span-annotated samples, JSONL
//! ingestion, and a synthetic grounded-dialogue generator for desk-scale
//! experiments.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<sos>", "<eos>"];

const SPLIT_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '$', '(', ')'];

/// Lowercases, splits on whitespace, and breaks punctuation into separate
/// tokens. `tokenize(detokenize(t)) == t` for any output `t`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if SPLIT_PUNCT.contains(&ch) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Token table with fixed reserved ids and a hard size cap.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    max_size: usize,
}

impl Vocabulary {
    fn with_reserved(max_size: usize) -> Self {
        let id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    fn push(&mut self, token: &str) {
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
    }

    /// Plain text, one token per line; line `n` holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for token in &self.id_to_token[RESERVED.len()..] {
            writeln!(f, "{token}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut vocab = Vocabulary::with_reserved(usize::MAX);
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            vocab.push(&line);
        }
        vocab.max_size = vocab.len();
        Ok(vocab)
    }

    /// Canonical content hash of the vocabulary (reserved entries excluded).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for token in &self.id_to_token[RESERVED.len()..] {
            hasher.update(token.as_bytes());
            hasher.update(b"\n");
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Inclusive token-index alignment between a background run and the response
/// run it is copied into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub bg_start: usize,
    pub bg_end: usize,
    pub resp_start: usize,
    pub resp_end: usize,
}

/// One tokenized sample, spans validated against the background.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub background: Vec<String>,
    pub context: Vec<Vec<String>>,
    pub response: Vec<String>,
    pub spans: Vec<SpanAnnotation>,
    pub references: Vec<Vec<String>>,
}

impl RawSample {
    /// Checks the span invariants: in range, verbatim match, ordered and
    /// non-overlapping on the response side.
    pub fn validate_spans(&self) -> Result<()> {
        let mut prev_end: Option<usize> = None;
        for s in &self.spans {
            if s.bg_start > s.bg_end || s.bg_end >= self.background.len() {
                return Err(Error::Data(format!(
                    "span ({}, {}) out of background range {}",
                    s.bg_start,
                    s.bg_end,
                    self.background.len()
                )));
            }
            if s.resp_start > s.resp_end || s.resp_end >= self.response.len() {
                return Err(Error::Data(format!(
                    "span response range ({}, {}) out of range {}",
                    s.resp_start,
                    s.resp_end,
                    self.response.len()
                )));
            }
            if s.resp_end - s.resp_start != s.bg_end - s.bg_start {
                return Err(Error::Data("span length mismatch".into()));
            }
            if let Some(pe) = prev_end {
                if s.resp_start <= pe {
                    return Err(Error::Data("overlapping or unordered spans".into()));
                }
            }
            prev_end = Some(s.resp_end);
            for k in 0..=(s.bg_end - s.bg_start) {
                if self.background[s.bg_start + k] != self.response[s.resp_start + k] {
                    return Err(Error::Data(format!(
                        "span text mismatch at background {} vs response {}",
                        s.bg_start + k,
                        s.resp_start + k
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Wire form of one corpus line.
#[derive(Serialize, Deserialize)]
struct SampleJson {
    background: String,
    context: Vec<String>,
    response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    spans: Option<Vec<SpanAnnotation>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    references: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IngestStats {
    pub read: usize,
    pub kept: usize,
    pub bad_json: usize,
    pub bad_spans: usize,
}

/// Reads a JSONL corpus, tokenizing every field. Lines with malformed JSON or
/// invalid span annotations are dropped and counted, not fatal.
pub fn load_corpus(path: &Path) -> Result<(Vec<RawSample>, IngestStats)> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut stats = IngestStats::default();
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.read += 1;
        let parsed: SampleJson = match serde_json::from_str(&line) {
            Ok(p) => p,
            Err(e) => {
                stats.bad_json += 1;
                log::debug!("dropping line {}: {e}", stats.read);
                continue;
            }
        };
        let sample = RawSample {
            background: tokenize(&parsed.background),
            context: parsed.context.iter().map(|t| tokenize(t)).collect(),
            response: tokenize(&parsed.response),
            spans: parsed.spans.unwrap_or_default(),
            references: parsed
                .references
                .unwrap_or_default()
                .iter()
                .map(|t| tokenize(t))
                .collect(),
        };
        if let Err(e) = sample.validate_spans() {
            stats.bad_spans += 1;
            log::debug!("dropping line {}: {e}", stats.read);
            continue;
        }
        stats.kept += 1;
        out.push(sample);
    }
    Ok((out, stats))
}

pub fn save_corpus(path: &Path, samples: &[RawSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let json = SampleJson {
            background: detokenize(&s.background),
            context: s.context.iter().map(|t| detokenize(t)).collect(),
            response: detokenize(&s.response),
            spans: if s.spans.is_empty() {
                None
            } else {
                Some(s.spans.clone())
            },
            references: if s.references.is_empty() {
                None
            } else {
                Some(s.references.iter().map(|t| detokenize(t)).collect())
            },
        };
        serde_json::to_writer(&mut f, &json)?;
        writeln!(f)?;
    }
    Ok(())
}

/// Most frequent tokens across backgrounds, contexts, and responses, ties
/// broken lexicographically, capped at `max_size` including reserved ids.
pub fn build_vocab(corpus: &[RawSample], max_size: usize) -> Result<Vocabulary> {
    if max_size < RESERVED.len() + 1 {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} leaves no room beyond reserved ids"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Config("cannot build vocabulary from empty corpus".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in corpus {
        for t in s
            .background
            .iter()
            .chain(s.context.iter().flatten())
            .chain(s.response.iter())
        {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut vocab = Vocabulary::with_reserved(max_size);
    for (token, _) in ranked.into_iter().take(max_size - RESERVED.len()) {
        vocab.push(token);
    }
    Ok(vocab)
}

/// Fraction of response token occurrences covered by the vocabulary.
pub fn response_coverage(corpus: &[RawSample], vocab: &Vocabulary) -> f64 {
    let mut total = 0u64;
    let mut hit = 0u64;
    for s in corpus {
        for t in &s.response {
            total += 1;
            if vocab.id(t).is_some() {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Greedy left-to-right alignment of response runs onto the background: at
/// each response position take the longest common contiguous run of length at
/// least `min_len`, preferring the leftmost background occurrence, then skip
/// past it.
pub fn align_spans(
    background: &[String],
    response: &[String],
    min_len: usize,
) -> Result<Vec<SpanAnnotation>> {
    if min_len < 2 {
        return Err(Error::Config(format!("align_spans min_len {min_len} < 2")));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < response.len() {
        let mut best_len = 0;
        let mut best_j = 0;
        for j in 0..background.len() {
            let mut l = 0;
            while i + l < response.len()
                && j + l < background.len()
                && response[i + l] == background[j + l]
            {
                l += 1;
            }
            if l > best_len {
                best_len = l;
                best_j = j;
            }
        }
        if best_len >= min_len {
            out.push(SpanAnnotation {
                bg_start: best_j,
                bg_end: best_j + best_len - 1,
                resp_start: i,
                resp_end: i + best_len - 1,
            });
            i += best_len;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// One response unit: a single token (by encoded id) or a background span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Token(u32),
    Span { start: usize, end: usize },
}

#[derive(Clone, Debug)]
pub struct SegmentedResponse {
    pub units: Vec<Unit>,
    /// Flat token ids including the trailing EOS; extended ids are
    /// `vocab.len() + k`.
    pub flat: Vec<u32>,
}

/// A sample resolved to ids, ready for the model.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    /// Background ids for the embedding lookup (out-of-vocabulary tokens
    /// collapse to UNK here).
    pub bg_embed_ids: Vec<u32>,
    /// Background ids for copy aggregation (out-of-vocabulary tokens keep
    /// their per-sample extended id).
    pub bg_copy_ids: Vec<u32>,
    pub context_ids: Vec<u32>,
    pub response: SegmentedResponse,
    /// Surface forms of this sample's extended ids, in id order.
    pub ext_tokens: Vec<String>,
    /// Gold span annotations (post-truncation), for supervision and scoring.
    pub spans: Vec<SpanAnnotation>,
    pub response_tokens: Vec<String>,
}

impl EncodedSample {
    pub fn surface_of(&self, vocab: &Vocabulary, id: u32) -> String {
        let v = vocab.len() as u32;
        if id < v {
            vocab.token(id).to_string()
        } else {
            self.ext_tokens[(id - v) as usize].clone()
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncodeLimits {
    pub context: usize,
    pub background: usize,
}

impl Default for EncodeLimits {
    fn default() -> Self {
        EncodeLimits {
            context: 65,
            background: 256,
        }
    }
}

/// Resolves a raw sample to ids. Backgrounds are truncated before span
/// validation; a sample whose gold span was cut is rejected (the caller
/// counts these).
pub fn encode_sample(
    raw: &RawSample,
    vocab: &Vocabulary,
    limits: EncodeLimits,
) -> Result<EncodedSample> {
    let bg_len = raw.background.len().min(limits.background);
    let background = &raw.background[..bg_len];
    for s in &raw.spans {
        if s.bg_end >= bg_len {
            return Err(Error::Data(format!(
                "span ({}, {}) truncated away at background limit {}",
                s.bg_start, s.bg_end, limits.background
            )));
        }
    }

    let v = vocab.len() as u32;
    let mut ext_tokens: Vec<String> = Vec::new();
    let mut ext_ids: HashMap<&str, u32> = HashMap::new();
    let mut bg_embed_ids = Vec::with_capacity(bg_len);
    let mut bg_copy_ids = Vec::with_capacity(bg_len);
    for t in background {
        match vocab.id(t) {
            Some(id) => {
                bg_embed_ids.push(id);
                bg_copy_ids.push(id);
            }
            None => {
                let ext = *ext_ids.entry(t.as_str()).or_insert_with(|| {
                    ext_tokens.push(t.clone());
                    v + (ext_tokens.len() as u32 - 1)
                });
                bg_embed_ids.push(UNK);
                bg_copy_ids.push(ext);
            }
        }
    }

    let mut context_tokens: Vec<&String> = raw.context.iter().flatten().collect();
    if context_tokens.len() > limits.context {
        context_tokens = context_tokens.split_off(context_tokens.len() - limits.context);
    }
    let context_ids: Vec<u32> = if context_tokens.is_empty() {
        vec![SOS]
    } else {
        context_tokens.iter().map(|t| vocab.id_or_unk(t)).collect()
    };

    let encode_resp_token = |t: &str| -> u32 {
        if let Some(id) = vocab.id(t) {
            id
        } else if let Some(&ext) = ext_ids.get(t) {
            ext
        } else {
            UNK
        }
    };
    let mut flat: Vec<u32> = raw.response.iter().map(|t| encode_resp_token(t)).collect();

    let mut units = Vec::new();
    let mut pos = 0;
    for s in &raw.spans {
        while pos < s.resp_start {
            units.push(Unit::Token(flat[pos]));
            pos += 1;
        }
        units.push(Unit::Span {
            start: s.bg_start,
            end: s.bg_end,
        });
        pos = s.resp_end + 1;
    }
    while pos < flat.len() {
        units.push(Unit::Token(flat[pos]));
        pos += 1;
    }
    units.push(Unit::Token(EOS));
    flat.push(EOS);

    Ok(EncodedSample {
        bg_embed_ids,
        bg_copy_ids,
        context_ids,
        response: SegmentedResponse { units, flat },
        ext_tokens,
        spans: raw.spans.clone(),
        response_tokens: raw.response.clone(),
    })
}

/// Configuration of the synthetic grounded-dialogue generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub background_len: usize,
    pub vocab_size: usize,
    pub span_len_range: (usize, usize),
    pub template_set: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            background_len: 40,
            vocab_size: 100,
            span_len_range: (3, 5),
            template_set: 3,
        }
    }
}

const QUESTION_TEMPLATES: &[&[&str]] = &[
    &["what", "comes", "after", "<key>", "?"],
    &["tell", "me", "about", "<key>", "."],
    &["what", "follows", "<key>", "?"],
    &["do", "you", "know", "<key>", "?"],
];

const RESPONSE_TEMPLATES: &[(&[&str], &[&str])] = &[
    (&["it", "is"], &["."]),
    (&["the", "answer", "is"], &["."]),
    (&["i", "think", "it", "is"], &["."]),
    (&["well", ",", "it", "is"], &["here", "."]),
];

/// Deterministically generates samples whose background hides one planted
/// fact span, addressed by a key token that the question names. Every sample
/// carries an exact span annotation.
pub fn synthesize_corpus(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<RawSample>> {
    let (span_min, span_max) = cfg.span_len_range;
    if span_min < 1 || span_min > span_max {
        return Err(Error::Config(format!(
            "invalid span length range ({span_min}, {span_max})"
        )));
    }
    if cfg.vocab_size < 20 {
        return Err(Error::Config(format!(
            "synthetic vocab_size {} < 20",
            cfg.vocab_size
        )));
    }
    if cfg.background_len < span_max + 4 {
        return Err(Error::Config(format!(
            "background_len {} too short for spans up to {span_max}",
            cfg.background_len
        )));
    }
    if cfg.template_set == 0 || cfg.template_set > QUESTION_TEMPLATES.len() {
        return Err(Error::Config(format!(
            "template_set {} out of range 1..={}",
            cfg.template_set,
            QUESTION_TEMPLATES.len()
        )));
    }

    let words: Vec<String> = (0..cfg.vocab_size).map(|i| format!("w{i:03}")).collect();
    let third = cfg.vocab_size / 3;
    let keys = &words[..third];
    let content = &words[third..2 * third];
    let filler = &words[2 * third..];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let span_len = rng.gen_range(span_min..=span_max);
        let key_pos = rng.gen_range(0..=(cfg.background_len - span_len - 1));
        let key = keys[rng.gen_range(0..keys.len())].clone();
        let mut background: Vec<String> = (0..cfg.background_len)
            .map(|_| filler[rng.gen_range(0..filler.len())].clone())
            .collect();
        background[key_pos] = key.clone();
        let span: Vec<String> = (0..span_len)
            .map(|_| content[rng.gen_range(0..content.len())].clone())
            .collect();
        background[key_pos + 1..=key_pos + span_len].clone_from_slice(&span);

        let q = QUESTION_TEMPLATES[rng.gen_range(0..cfg.template_set)];
        let question: Vec<String> = q
            .iter()
            .map(|t| if *t == "<key>" { key.clone() } else { t.to_string() })
            .collect();
        let (prefix, suffix) = RESPONSE_TEMPLATES[rng.gen_range(0..cfg.template_set)];
        let mut response: Vec<String> = prefix.iter().map(|t| t.to_string()).collect();
        let resp_start = response.len();
        response.extend(span.iter().cloned());
        let resp_end = response.len() - 1;
        response.extend(suffix.iter().map(|t| t.to_string()));

        let sample = RawSample {
            background,
            context: vec![question],
            response,
            spans: vec![SpanAnnotation {
                bg_start: key_pos + 1,
                bg_end: key_pos + span_len,
                resp_start,
                resp_end,
            }],
            references: Vec::new(),
        };
        debug_assert!(sample.validate_spans().is_ok());
        out.push(sample);
    }
    Ok(out)
}
