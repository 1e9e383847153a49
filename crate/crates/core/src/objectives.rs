//! Training objectives: the global text loss, the local layout loss, their
//! sum, AdamW with cosine decay, and the fine-tuning losses for document
//! classification, token labeling, and grounded QA.

use thiserror::Error;

use crate::codec::{TokenEntry, Vocabulary, WordBox};
use crate::image::Image;
use crate::model::{ModelError, ModelState};
use crate::segmenter::{Segment, SegmentMode};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty loss mask")]
    EmptyMask,
    #[error("non-finite gradient in {0}; step rejected")]
    NonFiniteGrad(String),
    #[error("optimizer/parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("invalid fine-tune input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Scalar loss values for one step.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub global_text: f64,
    pub local_layout: f64,
    pub total: f64,
    /// Token positions contributing to the text term.
    pub text_positions: usize,
    /// `[LOC]` positions contributing to the layout term (|S_L|).
    pub layout_positions: usize,
}

/// Mean cross-entropy over masked-in positions of `[n×V]` logits.
pub fn global_text_loss(
    logits: &Tensor,
    targets: &[u32],
    mask: &[bool],
) -> Result<Tensor, ObjectiveError> {
    if !mask.iter().any(|&m| m) {
        return Err(ObjectiveError::EmptyMask);
    }
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let nll = logits.nll_rows(&idx)?;
    Ok(nll.mean_masked(mask)?)
}

/// −(1/(4|S_L|)) Σ_i Σ_j log p(L_{i,j}); zero when |S_L| = 0.
pub fn local_layout_loss(
    logits4: &[Tensor; 4],
    tuples: &[[u16; 4]],
) -> Result<Tensor, ObjectiveError> {
    if tuples.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let mut sum = Tensor::scalar(0.0);
    for (j, logits) in logits4.iter().enumerate() {
        let targets: Vec<usize> = tuples.iter().map(|t| t[j] as usize).collect();
        sum = sum.add(&logits.nll_rows(&targets)?.sum_all()?)?;
    }
    Ok(sum.scale(1.0 / (4.0 * tuples.len() as f64)))
}

/// Unnormalized per-sequence loss terms, combined across a batch by
/// `total_loss` into per-batch masked means.
pub(crate) struct SequenceTerms {
    pub text_sum: Tensor,
    pub text_count: usize,
    pub layout_sum: Tensor,
    pub layout_count: usize,
}

/// Teacher-forced forward of one full decoder stream (`full[0]` is the mode
/// or task token). Position i predicts `full[i+1]`; `loss_mask` is indexed
/// like `full` and selects which predicted positions count.
pub(crate) fn sequence_terms(
    state: &ModelState,
    h_visual: &Tensor,
    full: &[TokenEntry],
    loss_mask: &[bool],
) -> Result<SequenceTerms, ObjectiveError> {
    if full.len() < 2 {
        return Err(ObjectiveError::BadInput(
            "sequence needs at least one predicted position".into(),
        ));
    }
    let inputs = &full[..full.len() - 1];
    let hidden = state.decoder_hidden(h_visual, inputs)?;
    let logits = state.lm_logits(&hidden)?;

    let targets: Vec<usize> = full[1..].iter().map(|e| e.token as usize).collect();
    let mask = &loss_mask[1..];
    let text_count = mask.iter().filter(|&&m| m).count();
    if text_count == 0 {
        return Err(ObjectiveError::EmptyMask);
    }
    let text_sum = logits
        .nll_rows(&targets)?
        .mean_masked(mask)?
        .scale(text_count as f64);

    // layout targets: masked-in positions whose predicted token is [LOC]
    let mut loc_rows = Vec::new();
    let mut tuples = Vec::new();
    for (i, e) in full[1..].iter().enumerate() {
        if mask[i] {
            if let Some(b) = e.bbox {
                loc_rows.push(i);
                tuples.push(b.coords());
            }
        }
    }
    let (layout_sum, layout_count) = if loc_rows.is_empty() {
        (Tensor::scalar(0.0), 0)
    } else {
        let h0 = hidden.select_rows(&loc_rows)?;
        let logits4 = state.layout_logits(&h0, &tuples)?;
        let mut sum = Tensor::scalar(0.0);
        for (j, l) in logits4.iter().enumerate() {
            let t: Vec<usize> = tuples.iter().map(|c| c[j] as usize).collect();
            sum = sum.add(&l.nll_rows(&t)?.sum_all()?)?;
        }
        (sum, tuples.len())
    };
    Ok(SequenceTerms {
        text_sum,
        text_count,
        layout_sum,
        layout_count,
    })
}

/// One pre-training batch item: a segment of a page's gold sequence.
pub struct BatchItem<'a> {
    pub image: &'a Image,
    pub segment: &'a Segment,
}

/// Full joint objective over a batch: total = global_text + local_layout,
/// both as per-batch masked means. `include_layout = false` is the
/// layout-modeling ablation switch.
pub fn total_loss(
    state: &ModelState,
    batch: &[BatchItem<'_>],
    vocab: &Vocabulary,
    include_layout: bool,
) -> Result<(Tensor, LossBreakdown), ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::BadInput("empty batch".into()));
    }
    // one encoder pass per distinct image in the batch
    let mut encoded: Vec<(*const Image, Tensor)> = Vec::new();
    let mut text_sums = Tensor::scalar(0.0);
    let mut layout_sums = Tensor::scalar(0.0);
    let mut text_count = 0usize;
    let mut layout_count = 0usize;
    for item in batch {
        let key = item.image as *const Image;
        let hv = match encoded.iter().find(|(k, _)| *k == key) {
            Some((_, t)) => t.clone(),
            None => {
                let t = state.encode_image(item.image)?;
                encoded.push((key, t.clone()));
                t
            }
        };
        let mode_token = match item.segment.mode {
            SegmentMode::Beginning => vocab.bos(),
            SegmentMode::Continuation => vocab.cont(),
        };
        let full = item.segment.full_entries(mode_token);
        let terms = sequence_terms(state, &hv, &full, &item.segment.loss_mask)?;
        text_sums = text_sums.add(&terms.text_sum)?;
        layout_sums = layout_sums.add(&terms.layout_sum)?;
        text_count += terms.text_count;
        layout_count += terms.layout_count;
    }
    let global_text = text_sums.scale(1.0 / text_count as f64);
    let local_layout = if include_layout && layout_count > 0 {
        layout_sums.scale(1.0 / (4.0 * layout_count as f64))
    } else {
        Tensor::scalar(0.0)
    };
    let total = global_text.add(&local_layout)?;
    let breakdown = LossBreakdown {
        global_text: global_text.item(),
        local_layout: local_layout.item(),
        total: total.item(),
        text_positions: text_count,
        layout_positions: layout_count,
    };
    Ok((total, breakdown))
}

// ─── optimizer ─────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay and cosine-decayed learning rate.
pub struct AdamW {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the learning rate decays from base to 0.
    pub horizon: usize,
    step: usize,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)], base_lr: f64, weight_decay: f64, horizon: usize) -> Self {
        AdamW {
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            horizon: horizon.max(1),
            step: 0,
            moments: params
                .iter()
                .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
                .collect(),
        }
    }

    /// Cosine schedule: base at step 0, exactly 0 at the horizon.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step.min(self.horizon) as f64 / self.horizon as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update from the gradients currently accumulated on the
    /// parameters, then clear them. A non-finite gradient rejects the whole
    /// step without touching any parameter.
    pub fn apply(&mut self, params: &[(String, Tensor)]) -> Result<f64, ObjectiveError> {
        if params.len() != self.moments.len() {
            return Err(ObjectiveError::ParamMismatch(format!(
                "{} params vs {} moment slots",
                params.len(),
                self.moments.len()
            )));
        }
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|(name, t)| {
                let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
                if g.iter().any(|v| !v.is_finite()) {
                    Err(ObjectiveError::NonFiniteGrad(name.clone()))
                } else {
                    Ok(g)
                }
            })
            .collect::<Result<_, _>>()?;
        let lr = self.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((_, t), g), (m, v)) in params.iter().zip(&grads).zip(&mut self.moments) {
            let mut data = t.data().clone();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * self.weight_decay * data[i];
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            t.set_data(data);
            t.zero_grad();
        }
        Ok(lr)
    }
}

// ─── fine-tuning losses ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneTask {
    TokenLabel,
    DocCls,
    Vqa,
}

/// Cross-entropy of the class-token prediction at the position after
/// `[DOC_CLS]`.
pub fn doc_cls_loss(
    state: &ModelState,
    image: &Image,
    class: usize,
    vocab: &Vocabulary,
) -> Result<Tensor, ObjectiveError> {
    let class_token = vocab
        .class_token(class)
        .ok_or_else(|| ObjectiveError::BadInput(format!("class {class} out of range")))?;
    let hv = state.encode_image(image)?;
    let hidden = state.decoder_hidden(
        &hv,
        &[TokenEntry {
            token: vocab.doc_cls(),
            bbox: None,
        }],
    )?;
    let logits = state.lm_logits(&hidden)?;
    let row = logits.select_rows(&[0])?;
    Ok(row.nll_rows(&[class_token as usize])?.sum_all()?)
}

/// Token-labeling loss: gold words are fed teacher-provided; the tag
/// classifier reads the hidden state at each word-final `[LOC]` position.
/// `segments` must come from the page's gold sequence; `tags` are per-word,
/// in reading order.
pub fn token_label_loss(
    state: &ModelState,
    image: &Image,
    segments: &[Segment],
    tags: &[usize],
    vocab: &Vocabulary,
) -> Result<Tensor, ObjectiveError> {
    let hv = state.encode_image(image)?;
    let mut sum = Tensor::scalar(0.0);
    let mut count = 0usize;
    let mut next_word = 0usize;
    for seg in segments {
        let mode_token = match seg.mode {
            SegmentMode::Beginning => vocab.bos(),
            SegmentMode::Continuation => vocab.cont(),
        };
        let full = seg.full_entries(mode_token);
        // classification conditions on the whole word, box included, so the
        // stream is fed unshifted and read at the [LOC] input positions
        let hidden = state.decoder_hidden(&hv, &full)?;
        let target_start = 1 + seg.prefix.len();
        let loc_rows: Vec<usize> = full
            .iter()
            .enumerate()
            .skip(target_start)
            .filter(|(_, e)| e.bbox.is_some())
            .map(|(i, _)| i)
            .collect();
        if loc_rows.is_empty() {
            continue;
        }
        if next_word + loc_rows.len() > tags.len() {
            return Err(ObjectiveError::BadInput(format!(
                "{} tags for more than {} words",
                tags.len(),
                next_word + loc_rows.len()
            )));
        }
        let logits = state.tag_logits(&hidden.select_rows(&loc_rows)?)?;
        let targets = &tags[next_word..next_word + loc_rows.len()];
        sum = sum.add(&logits.nll_rows(targets)?.sum_all()?)?;
        count += loc_rows.len();
        next_word += loc_rows.len();
    }
    if count == 0 {
        return Err(ObjectiveError::BadInput("no words to label".into()));
    }
    if next_word != tags.len() {
        return Err(ObjectiveError::BadInput(format!(
            "{} tags but {} labeled words",
            tags.len(),
            next_word
        )));
    }
    Ok(sum.scale(1.0 / count as f64))
}

/// A grounded-QA target: either answer words with boxes or a yes/no token.
#[derive(Debug, Clone)]
pub enum VqaAnswer {
    Words(Vec<WordBox>),
    YesNo(bool),
}

/// Builds the `[VQA] question [SEP] answer [EOS]` stream with the answer
/// span (and `[EOS]`) as loss positions.
pub fn vqa_entries(
    question: &str,
    answer: &VqaAnswer,
    vocab: &Vocabulary,
) -> Result<(Vec<TokenEntry>, Vec<bool>), ObjectiveError> {
    if question.is_empty() {
        return Err(ObjectiveError::BadInput("empty question".into()));
    }
    let mut full = vec![TokenEntry {
        token: vocab.vqa(),
        bbox: None,
    }];
    for id in vocab
        .tokenize_word(question)
        .map_err(|e| ObjectiveError::BadInput(e.to_string()))?
    {
        full.push(TokenEntry {
            token: id,
            bbox: None,
        });
    }
    full.push(TokenEntry {
        token: vocab.sep(),
        bbox: None,
    });
    let prompt_len = full.len();
    match answer {
        VqaAnswer::YesNo(yes) => full.push(TokenEntry {
            token: if *yes { vocab.ans_yes() } else { vocab.ans_no() },
            bbox: None,
        }),
        VqaAnswer::Words(words) => {
            if words.is_empty() {
                return Err(ObjectiveError::BadInput("empty answer".into()));
            }
            for w in words {
                for id in vocab
                    .tokenize_word(&w.word)
                    .map_err(|e| ObjectiveError::BadInput(e.to_string()))?
                {
                    full.push(TokenEntry {
                        token: id,
                        bbox: None,
                    });
                }
                full.push(TokenEntry {
                    token: vocab.loc(),
                    bbox: Some(w.bbox),
                });
            }
        }
    }
    full.push(TokenEntry {
        token: vocab.eos(),
        bbox: None,
    });
    let mut mask = vec![false; prompt_len];
    mask.extend(std::iter::repeat(true).take(full.len() - prompt_len));
    Ok((full, mask))
}

/// Joint-objective loss over the answer span of a QA pair.
pub fn vqa_loss(
    state: &ModelState,
    image: &Image,
    question: &str,
    answer: &VqaAnswer,
    vocab: &Vocabulary,
) -> Result<(Tensor, LossBreakdown), ObjectiveError> {
    let (full, mask) = vqa_entries(question, answer, vocab)?;
    let hv = state.encode_image(image)?;
    let terms = sequence_terms(state, &hv, &full, &mask)?;
    let text = terms.text_sum.scale(1.0 / terms.text_count as f64);
    let layout = if terms.layout_count > 0 {
        terms
            .layout_sum
            .scale(1.0 / (4.0 * terms.layout_count as f64))
    } else {
        Tensor::scalar(0.0)
    };
    let total = text.add(&layout)?;
    let breakdown = LossBreakdown {
        global_text: text.item(),
        local_layout: layout.item(),
        total: total.item(),
        text_positions: terms.text_count,
        layout_positions: terms.layout_count,
    };
    Ok((total, breakdown))
}
