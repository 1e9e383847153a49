//! Augmented vocabulary, word tokenization, and conversion between word/box
//! documents and the interleaved global text-layout sequence.
//!
//! Coordinates never enter the global token stream: every word is emitted as
//! its character tokens followed by a single `[LOC]` token whose four bins
//! live in a side table keyed by position.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{BBox, GeometryError};

/// Printable alphabet of the character-level tokenizer.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

const SPECIALS: [&str; 10] = [
    "[PAD]",
    "[BOS]",
    "[CONT]",
    "[EOS]",
    "[LOC]",
    "[DOC_CLS]",
    "[VQA]",
    "[SEP]",
    "[ANS_YES]",
    "[ANS_NO]",
];

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("character {0:?} outside the alphabet")]
    OutOfAlphabet(char),
    #[error("empty document")]
    EmptyDocument,
    #[error("invalid word {0:?}: must be non-empty without whitespace")]
    InvalidWord(String),
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("vocabulary manifest corrupt: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// The augmented vocabulary: special tokens, class-label tokens, then the
/// character alphabet. Token ids are dense and stable.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    n_classes: usize,
}

impl Vocabulary {
    pub fn new(n_classes: usize) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in 0..n_classes {
            tokens.push(format!("CLS_{c}"));
        }
        for ch in ALPHABET.chars() {
            tokens.push(ch.to_string());
        }
        Vocabulary { tokens, n_classes }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn pad(&self) -> u32 {
        0
    }
    pub fn bos(&self) -> u32 {
        1
    }
    pub fn cont(&self) -> u32 {
        2
    }
    pub fn eos(&self) -> u32 {
        3
    }
    pub fn loc(&self) -> u32 {
        4
    }
    pub fn doc_cls(&self) -> u32 {
        5
    }
    pub fn vqa(&self) -> u32 {
        6
    }
    pub fn sep(&self) -> u32 {
        7
    }
    pub fn ans_yes(&self) -> u32 {
        8
    }
    pub fn ans_no(&self) -> u32 {
        9
    }

    pub fn class_token(&self, class: usize) -> Option<u32> {
        (class < self.n_classes).then(|| (SPECIALS.len() + class) as u32)
    }

    /// Class index for a class-label token id, if it is one.
    pub fn class_of(&self, id: u32) -> Option<usize> {
        let id = id as usize;
        (SPECIALS.len()..SPECIALS.len() + self.n_classes)
            .contains(&id)
            .then(|| id - SPECIALS.len())
    }

    pub fn char_token(&self, ch: char) -> Result<u32, CodecError> {
        ALPHABET
            .chars()
            .position(|c| c == ch)
            .map(|p| (SPECIALS.len() + self.n_classes + p) as u32)
            .ok_or(CodecError::OutOfAlphabet(ch))
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        let base = SPECIALS.len() + self.n_classes;
        let id = id as usize;
        (id >= base).then(|| ALPHABET.chars().nth(id - base)).flatten()
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Result<u32, CodecError> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|p| p as u32)
            .ok_or_else(|| CodecError::UnknownToken(token.to_string()))
    }

    /// One id per character.
    pub fn tokenize_word(&self, word: &str) -> Result<Vec<u32>, CodecError> {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(CodecError::InvalidWord(word.to_string()));
        }
        word.chars().map(|c| self.char_token(c)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, CodecError> {
        ids.iter()
            .map(|&id| {
                self.char_of(id).ok_or_else(|| {
                    CodecError::MalformedSequence(format!("id {id} is not a character token"))
                })
            })
            .collect()
    }

    /// Versioned text manifest, `id<TAB>token` per line.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("VDOC-VOCAB v1\nclasses {}\n", self.n_classes);
        for (id, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{tok}");
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, CodecError> {
        let mut lines = text.lines();
        if lines.next() != Some("VDOC-VOCAB v1") {
            return Err(CodecError::BadManifest("missing version header".into()));
        }
        let classes_line = lines
            .next()
            .ok_or_else(|| CodecError::BadManifest("missing classes line".into()))?;
        let n_classes: usize = classes_line
            .strip_prefix("classes ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CodecError::BadManifest("bad classes line".into()))?;
        let vocab = Vocabulary::new(n_classes);
        for (expect_id, line) in lines.enumerate() {
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| CodecError::BadManifest(format!("bad line {line:?}")))?;
            if id != expect_id.to_string() || vocab.token_str(expect_id as u32) != Some(tok) {
                return Err(CodecError::BadManifest(format!(
                    "token mismatch at id {expect_id}"
                )));
            }
        }
        Ok(vocab)
    }
}

/// A word with its quantized box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordBox {
    pub word: String,
    pub bbox: BBox,
}

impl WordBox {
    pub fn new(word: impl Into<String>, bbox: BBox) -> Result<Self, CodecError> {
        let word = word.into();
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(CodecError::InvalidWord(word));
        }
        Ok(WordBox { word, bbox })
    }
}

/// One position of a sequence: a token with the coordinate payload present
/// exactly when the token is `[LOC]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenEntry {
    pub token: u32,
    pub bbox: Option<BBox>,
}

/// The global text-layout token stream with aligned coordinate targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalSequence {
    tokens: Vec<u32>,
    loc_targets: BTreeMap<usize, BBox>,
    loc_id: u32,
}

impl GlobalSequence {
    pub fn new(
        tokens: Vec<u32>,
        loc_targets: BTreeMap<usize, BBox>,
        loc_id: u32,
    ) -> Result<Self, CodecError> {
        for (pos, &tok) in tokens.iter().enumerate() {
            let has_payload = loc_targets.contains_key(&pos);
            if (tok == loc_id) != has_payload {
                return Err(CodecError::MalformedSequence(format!(
                    "position {pos}: token {tok} vs payload {has_payload}"
                )));
            }
        }
        if let Some((&pos, _)) = loc_targets.iter().next_back() {
            if pos >= tokens.len() {
                return Err(CodecError::MalformedSequence(format!(
                    "payload at {pos} beyond sequence end"
                )));
            }
        }
        Ok(GlobalSequence {
            tokens,
            loc_targets,
            loc_id,
        })
    }

    pub fn from_entries(entries: &[TokenEntry], loc_id: u32) -> Result<Self, CodecError> {
        let tokens = entries.iter().map(|e| e.token).collect();
        let loc_targets = entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.bbox.map(|b| (i, b)))
            .collect();
        Self::new(tokens, loc_targets, loc_id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn loc_targets(&self) -> &BTreeMap<usize, BBox> {
        &self.loc_targets
    }

    pub fn loc_id(&self) -> u32 {
        self.loc_id
    }

    pub fn entries(&self) -> Vec<TokenEntry> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, &token)| TokenEntry {
                token,
                bbox: self.loc_targets.get(&i).copied(),
            })
            .collect()
    }

    /// Line-oriented text form: `token[\t x1 y1 x2 y2]`.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (i, &tok) in self.tokens.iter().enumerate() {
            let name = vocab.token_str(tok).unwrap_or("?");
            match self.loc_targets.get(&i) {
                Some(b) => {
                    let _ = writeln!(out, "{name}\t{} {} {} {}", b.x1, b.y1, b.x2, b.y2);
                }
                None => {
                    let _ = writeln!(out, "{name}");
                }
            }
        }
        out
    }

    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self, CodecError> {
        let mut tokens = Vec::new();
        let mut loc_targets = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            match line.split_once('\t') {
                Some((name, coords)) => {
                    let id = vocab.id_of(name)?;
                    let parts: Vec<u16> = coords
                        .split_whitespace()
                        .map(|p| {
                            p.parse::<u16>().map_err(|_| {
                                CodecError::MalformedSequence(format!("bad coord {p:?}"))
                            })
                        })
                        .collect::<Result<_, _>>()?;
                    if parts.len() != 4 {
                        return Err(CodecError::MalformedSequence(format!(
                            "expected 4 coords, got {}",
                            parts.len()
                        )));
                    }
                    loc_targets
                        .insert(tokens.len(), BBox::new(parts[0], parts[1], parts[2], parts[3])?);
                    tokens.push(id);
                }
                None => tokens.push(vocab.id_of(line)?),
            }
        }
        GlobalSequence::new(tokens, loc_targets, vocab.loc())
    }
}

/// Sort words into row-major reading order: by y1 band (band height is the
/// median word height), then x1.
pub fn reading_order(words: &[WordBox]) -> Vec<WordBox> {
    if words.is_empty() {
        return Vec::new();
    }
    let mut heights: Vec<u16> = words.iter().map(|w| w.bbox.y2 - w.bbox.y1).collect();
    heights.sort_unstable();
    let band = heights[heights.len() / 2].max(1) as u32;
    let mut sorted = words.to_vec();
    sorted.sort_by_key(|w| (w.bbox.y1 as u32 / band, w.bbox.x1, w.bbox.y1));
    sorted
}

/// Emit each word's character tokens followed by one `[LOC]` carrying the
/// word's box. Words are taken in the order given; no `[EOS]` is appended.
pub fn encode_document(
    words: &[WordBox],
    vocab: &Vocabulary,
) -> Result<GlobalSequence, CodecError> {
    if words.is_empty() {
        return Err(CodecError::EmptyDocument);
    }
    let mut tokens = Vec::new();
    let mut loc_targets = BTreeMap::new();
    for w in words {
        tokens.extend(vocab.tokenize_word(&w.word)?);
        loc_targets.insert(tokens.len(), w.bbox);
        tokens.push(vocab.loc());
    }
    GlobalSequence::new(tokens, loc_targets, vocab.loc())
}

/// A decoded document plus any non-fatal diagnostics.
#[derive(Debug, Clone, Default)]
pub struct DecodedDocument {
    pub words: Vec<WordBox>,
    pub warnings: Vec<String>,
}

/// Split a sequence at `[LOC]` boundaries back into words. A `[LOC]` that
/// closes an empty word is a hard error; trailing characters without a
/// closing `[LOC]` are reported as a warning, not dropped silently.
pub fn decode_sequence(
    seq: &GlobalSequence,
    vocab: &Vocabulary,
) -> Result<DecodedDocument, CodecError> {
    let mut doc = DecodedDocument::default();
    let mut pending: Vec<u32> = Vec::new();
    for (pos, &tok) in seq.tokens().iter().enumerate() {
        if tok == vocab.loc() {
            if pending.is_empty() {
                return Err(CodecError::MalformedSequence(format!(
                    "[LOC] at position {pos} closes an empty word"
                )));
            }
            let word = vocab.detokenize(&pending)?;
            let bbox = seq.loc_targets()[&pos];
            doc.words.push(WordBox::new(word, bbox)?);
            pending.clear();
        } else if vocab.char_of(tok).is_some() {
            pending.push(tok);
        } else {
            return Err(CodecError::MalformedSequence(format!(
                "unexpected token {:?} at position {pos}",
                vocab.token_str(tok).unwrap_or("?")
            )));
        }
    }
    if !pending.is_empty() {
        doc.warnings.push(format!(
            "unterminated word {:?} with no [LOC]",
            vocab.detokenize(&pending)?
        ));
    }
    Ok(doc)
}

/// `(|w|+1)/(|w|+4)` with `|w|` the mean tokens per word under this codec.
pub fn compression_ratio(words: &[WordBox], vocab: &Vocabulary) -> Result<f64, CodecError> {
    if words.is_empty() {
        return Err(CodecError::EmptyDocument);
    }
    let total: usize = words
        .iter()
        .map(|w| vocab.tokenize_word(&w.word).map(|t| t.len()))
        .sum::<Result<usize, _>>()?;
    // (mean + 1) / (mean + 4) in exact integer form
    let n = words.len();
    Ok((total + n) as f64 / (total + 4 * n) as f64)
}
