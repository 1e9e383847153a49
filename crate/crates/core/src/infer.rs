//! Inference paths: greedy OCR generation with multi-segment continuation,
//! document classification, grounded question answering, and token labeling.

use thiserror::Error;

use crate::codec::{encode_document, CodecError, TokenEntry, Vocabulary, WordBox, ALPHABET};
use crate::geometry::BBox;
use crate::image::Image;
use crate::model::{argmax, ModelError, ModelState};
use crate::segmenter::{next_prefix, split, Segment, SegmentConfig, SegmentError, SegmentMode};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub max_segments: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { max_segments: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct OcrResult {
    pub words: Vec<WordBox>,
    pub segments_used: usize,
    pub diagnostics: Vec<String>,
}

/// Like the codec's strict decode, but malformed stretches become
/// diagnostics instead of errors: generation output must never crash.
fn lenient_decode(entries: &[TokenEntry], vocab: &Vocabulary) -> (Vec<WordBox>, Vec<String>) {
    let mut words = Vec::new();
    let mut diagnostics = Vec::new();
    let mut pending: Vec<u32> = Vec::new();
    for (pos, e) in entries.iter().enumerate() {
        if e.token == vocab.loc() {
            if pending.is_empty() {
                diagnostics.push(format!("[LOC] at position {pos} closes an empty word"));
                continue;
            }
            match (vocab.detokenize(&pending), e.bbox) {
                (Ok(word), Some(bbox)) => match WordBox::new(word, bbox) {
                    Ok(w) => words.push(w),
                    Err(err) => diagnostics.push(err.to_string()),
                },
                (_, None) => diagnostics.push(format!("[LOC] at position {pos} has no box")),
                (Err(err), _) => diagnostics.push(err.to_string()),
            }
            pending.clear();
        } else if vocab.char_of(e.token).is_some() {
            pending.push(e.token);
        } else {
            let name = vocab
                .token_str(e.token)
                .map(str::to_string)
                .unwrap_or_else(|| format!("#{}", e.token));
            diagnostics.push(format!("unexpected token {name} at position {pos}"));
        }
    }
    if !pending.is_empty() {
        diagnostics.push(format!(
            "{} trailing character(s) without a closing [LOC]",
            pending.len()
        ));
    }
    (words, diagnostics)
}

fn check_dims(state: &ModelState, image: &Image) -> Result<(), InferError> {
    let cfg = &state.cfg;
    if image.width != cfg.image_w || image.height != cfg.image_h {
        return Err(InferError::BadInput(format!(
            "image is {}x{}, model expects {}x{}",
            image.width, image.height, cfg.image_w, cfg.image_h
        )));
    }
    Ok(())
}

/// Token ids the OCR decoder may emit: characters, `[LOC]`, `[EOS]`.
fn ocr_allowed(vocab: &Vocabulary) -> Vec<u32> {
    let mut ids: Vec<u32> = ALPHABET
        .chars()
        .map(|c| vocab.char_token(c).unwrap())
        .collect();
    ids.push(vocab.loc());
    ids.push(vocab.eos());
    ids
}

fn argmax_restricted(logits: &[f64], allowed: &[u32]) -> u32 {
    let mut best = allowed[0];
    for &id in allowed {
        if logits[id as usize] > logits[best as usize] {
            best = id;
        }
    }
    best
}

/// One greedy decoding step over the current stream; returns the chosen
/// entry (with generated box when it is `[LOC]`) plus a degenerate-box
/// diagnostic if the layout head emitted one.
fn next_entry(
    state: &ModelState,
    hv: &crate::tensor::Tensor,
    stream: &[TokenEntry],
    allowed: &[u32],
    vocab: &Vocabulary,
) -> Result<(TokenEntry, Option<String>), InferError> {
    let hidden = state.decoder_hidden(hv, stream)?;
    let last = hidden.select_rows(&[stream.len() - 1])?;
    let logits = state.lm_logits(&last)?;
    let token = argmax_restricted(&logits.data(), allowed);
    if token != vocab.loc() {
        return Ok((TokenEntry { token, bbox: None }, None));
    }
    let c = state.layout_generate(&last)?;
    match BBox::new(c[0], c[1], c[2], c[3]) {
        Ok(b) => Ok((
            TokenEntry {
                token,
                bbox: Some(b),
            },
            None,
        )),
        Err(_) => {
            // clamp a degenerate prediction so decoding can continue
            let x2 = c[2].max(c[0] + 1).min(1000);
            let y2 = c[3].max(c[1] + 1).min(1000);
            let b = BBox::new(c[0].min(999), c[1].min(999), x2, y2).unwrap();
            Ok((
                TokenEntry {
                    token,
                    bbox: Some(b),
                },
                Some(format!("degenerate box {c:?} clamped")),
            ))
        }
    }
}

/// Greedy OCR over the whole page. Generation mirrors the training-time
/// segment shapes: the first segment emits up to M targets, continuations
/// carry the previous α_p·M entries as prefix and emit up to (1−α_p)·M;
/// one overflow position is allowed for `[EOS]`, as in training.
pub fn generate_ocr(
    state: &ModelState,
    image: &Image,
    vocab: &Vocabulary,
    seg_cfg: &SegmentConfig,
    gen: &GenerationConfig,
) -> Result<OcrResult, InferError> {
    check_dims(state, image)?;
    let hv = state.encode_image(image)?;
    let allowed = ocr_allowed(vocab);
    let mut segments: Vec<Segment> = Vec::new();
    let mut diagnostics: Vec<String> = Vec::new();
    let mut done = false;

    while !done && segments.len() < gen.max_segments {
        let (mode, prefix) = if segments.is_empty() {
            (SegmentMode::Beginning, Vec::new())
        } else {
            let prev = segments.last().unwrap();
            if prev.targets.is_empty() {
                diagnostics.push("empty segment; stopping".into());
                break;
            }
            (SegmentMode::Continuation, next_prefix(prev, seg_cfg)?)
        };
        let cap = match mode {
            SegmentMode::Beginning => seg_cfg.max_targets,
            SegmentMode::Continuation => seg_cfg.continuation_targets(),
        };
        let mode_token = match mode {
            SegmentMode::Beginning => vocab.bos(),
            SegmentMode::Continuation => vocab.cont(),
        };
        let mut stream: Vec<TokenEntry> = vec![TokenEntry {
            token: mode_token,
            bbox: None,
        }];
        stream.extend(prefix.iter().cloned());
        let mut targets: Vec<TokenEntry> = Vec::new();
        loop {
            let (entry, diag) = next_entry(state, &hv, &stream, &allowed, vocab)?;
            if let Some(d) = diag {
                diagnostics.push(d);
            }
            if entry.token == vocab.eos() {
                targets.push(entry);
                done = true;
                break;
            }
            if targets.len() == cap {
                // at capacity and the next token is not [EOS]: hand off
                break;
            }
            stream.push(entry);
            targets.push(entry);
        }
        let loss_mask = vec![false; 1 + prefix.len() + targets.len()];
        segments.push(Segment {
            mode,
            prefix,
            targets,
            loss_mask,
        });
    }
    if !done {
        diagnostics.push(format!(
            "no [EOS] within {} segments",
            gen.max_segments
        ));
    }

    let segments_used = segments.len();
    let seq = match crate::segmenter::reassemble(&segments, vocab.eos(), vocab.loc()) {
        Ok(s) => s,
        Err(e) => {
            diagnostics.push(format!("reassembly failed: {e}"));
            return Ok(OcrResult {
                words: Vec::new(),
                segments_used,
                diagnostics,
            });
        }
    };
    let (words, decode_diags) = lenient_decode(&seq.entries(), vocab);
    diagnostics.extend(decode_diags);
    Ok(OcrResult {
        words,
        segments_used,
        diagnostics,
    })
}

/// Argmax over class-token logits at the position after `[DOC_CLS]`;
/// ties resolve to the lowest class id.
pub fn classify(
    state: &ModelState,
    image: &Image,
    vocab: &Vocabulary,
) -> Result<usize, InferError> {
    check_dims(state, image)?;
    let hv = state.encode_image(image)?;
    let hidden = state.decoder_hidden(
        &hv,
        &[TokenEntry {
            token: vocab.doc_cls(),
            bbox: None,
        }],
    )?;
    let logits = state.lm_logits(&hidden)?;
    let row = logits.data();
    let mut best = 0usize;
    for c in 0..vocab.n_classes() {
        let id = vocab.class_token(c).unwrap() as usize;
        if row[id] > row[vocab.class_token(best).unwrap() as usize] {
            best = c;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub enum QaPrediction {
    YesNo(bool),
    Words(Vec<WordBox>),
}

#[derive(Debug, Clone)]
pub struct QaResult {
    pub prediction: QaPrediction,
    pub diagnostics: Vec<String>,
}

impl QaResult {
    /// The answer as plain text (for ANLS): words joined by spaces, or
    /// yes/no.
    pub fn text(&self) -> String {
        match &self.prediction {
            QaPrediction::YesNo(yes) => if *yes { "yes" } else { "no" }.to_string(),
            QaPrediction::Words(ws) => ws
                .iter()
                .map(|w| w.word.as_str())
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Greedy answer generation after the `[VQA] question [SEP]` prompt.
pub fn answer_question(
    state: &ModelState,
    image: &Image,
    question: &str,
    vocab: &Vocabulary,
) -> Result<QaResult, InferError> {
    check_dims(state, image)?;
    if question.is_empty() {
        return Err(InferError::BadInput("empty question".into()));
    }
    let hv = state.encode_image(image)?;
    let mut stream = vec![TokenEntry {
        token: vocab.vqa(),
        bbox: None,
    }];
    for id in vocab.tokenize_word(question)? {
        stream.push(TokenEntry {
            token: id,
            bbox: None,
        });
    }
    stream.push(TokenEntry {
        token: vocab.sep(),
        bbox: None,
    });

    let mut allowed = ocr_allowed(vocab);
    allowed.push(vocab.ans_yes());
    allowed.push(vocab.ans_no());
    let mut answer: Vec<TokenEntry> = Vec::new();
    let mut diagnostics = Vec::new();
    let budget = state.cfg.max_seq().saturating_sub(stream.len() + 1);
    for _ in 0..budget {
        let (entry, diag) = next_entry(state, &hv, &stream, &allowed, vocab)?;
        if let Some(d) = diag {
            diagnostics.push(d);
        }
        if entry.token == vocab.eos() {
            break;
        }
        if entry.token == vocab.ans_yes() || entry.token == vocab.ans_no() {
            return Ok(QaResult {
                prediction: QaPrediction::YesNo(entry.token == vocab.ans_yes()),
                diagnostics,
            });
        }
        stream.push(entry);
        answer.push(entry);
    }
    let (words, decode_diags) = lenient_decode(&answer, vocab);
    diagnostics.extend(decode_diags);
    Ok(QaResult {
        prediction: QaPrediction::Words(words),
        diagnostics,
    })
}

/// Tag prediction for teacher-provided words: argmax of the tag classifier
/// at each word-final `[LOC]` input position, concatenated across segments.
pub fn label_tokens(
    state: &ModelState,
    image: &Image,
    words: &[WordBox],
    vocab: &Vocabulary,
    seg_cfg: &SegmentConfig,
) -> Result<Vec<usize>, InferError> {
    check_dims(state, image)?;
    if words.is_empty() {
        return Err(InferError::BadInput("no words to label".into()));
    }
    let seq = encode_document(words, vocab)?;
    let segments = split(&seq, seg_cfg, vocab.eos())?;
    let hv = state.encode_image(image)?;
    let mut tags = Vec::new();
    for seg in &segments {
        let mode_token = match seg.mode {
            SegmentMode::Beginning => vocab.bos(),
            SegmentMode::Continuation => vocab.cont(),
        };
        let full = seg.full_entries(mode_token);
        let hidden = state.decoder_hidden(&hv, &full)?;
        let loc_rows: Vec<usize> = full
            .iter()
            .enumerate()
            .skip(1 + seg.prefix.len())
            .filter(|(_, e)| e.bbox.is_some())
            .map(|(i, _)| i)
            .collect();
        if loc_rows.is_empty() {
            continue;
        }
        let logits = state.tag_logits(&hidden.select_rows(&loc_rows)?)?;
        let data = logits.data();
        let n_tags = logits.shape()[1];
        for r in 0..loc_rows.len() {
            tags.push(argmax(&data[r * n_tags..(r + 1) * n_tags]));
        }
    }
    Ok(tags)
}

/// Burns box outlines into a copy of the page for visual inspection.
pub fn overlay(image: &Image, words: &[WordBox]) -> Image {
    let mut out = image.clone();
    let px = |bin: u16, extent: usize| -> usize {
        ((bin as f64 / 1000.0 * extent as f64).round() as usize).min(extent - 1)
    };
    for w in words {
        let (x1, y1) = (px(w.bbox.x1, out.width), px(w.bbox.y1, out.height));
        let (x2, y2) = (px(w.bbox.x2, out.width), px(w.bbox.y2, out.height));
        for x in x1..=x2 {
            out.set(x, y1, 0.5);
            out.set(x, y2, 0.5);
        }
        for y in y1..=y2 {
            out.set(x1, y, 0.5);
            out.set(x2, y, 0.5);
        }
    }
    out
}
