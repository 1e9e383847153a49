//! Training loops over synthetic corpora: pre-training on segmented page
//! sequences and the three fine-tuning tasks.

use std::io::Write;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{encode_document, CodecError, TokenEntry, Vocabulary};
use crate::objectives::{
    doc_cls_loss, token_label_loss, total_loss, vqa_loss, AdamW, BatchItem, LossBreakdown,
    ObjectiveError,
};
use crate::segmenter::{split, Segment, SegmentConfig, SegmentError};
use crate::synthdoc::Page;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training data")]
    NoData,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Ablation switch: drop the layout term from the objective.
    pub include_layout: bool,
    /// Ablation switch: train on truncated single segments instead of the
    /// multi-segment scheme.
    pub truncate: bool,
    pub log_every: usize,
    /// Stop early once the total loss drops below this value.
    pub stop_below: Option<f64>,
}

impl TrainConfig {
    pub fn desk(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size: 8,
            lr: 3e-3,
            weight_decay: 1e-2,
            seed,
            include_layout: true,
            truncate: false,
            log_every: 25,
            stop_below: None,
        }
    }
}

/// The sampling pool: every segment of every page, or with `truncate` just
/// each page's first segment closed off with `[EOS]`.
fn segment_pool(
    pages: &[Page],
    seg_cfg: &SegmentConfig,
    vocab: &Vocabulary,
    truncate: bool,
) -> Result<Vec<(usize, Segment)>, TrainError> {
    let mut pool = Vec::new();
    for (i, page) in pages.iter().enumerate() {
        let seq = encode_document(&page.words, vocab)?;
        let segments = split(&seq, seg_cfg, vocab.eos())?;
        if truncate {
            let mut seg = segments.into_iter().next().unwrap();
            if seg.targets.last().map(|e| e.token) != Some(vocab.eos()) {
                seg.targets.push(TokenEntry {
                    token: vocab.eos(),
                    bbox: None,
                });
                seg.loss_mask.push(true);
            }
            pool.push((i, seg));
        } else {
            pool.extend(segments.into_iter().map(|s| (i, s)));
        }
    }
    if pool.is_empty() {
        return Err(TrainError::NoData);
    }
    Ok(pool)
}

fn log_step(
    log: &mut dyn Write,
    step: usize,
    lr: f64,
    b: &LossBreakdown,
) -> Result<(), TrainError> {
    writeln!(
        log,
        "step {step} lr {lr:.6e} global_text {:.6} local_layout {:.6} total {:.6}",
        b.global_text, b.local_layout, b.total
    )?;
    Ok(())
}

/// Joint-objective pre-training; returns the per-step loss history.
pub fn pretrain(
    state: &crate::model::ModelState,
    pages: &[Page],
    seg_cfg: &SegmentConfig,
    vocab: &Vocabulary,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<LossBreakdown>, TrainError> {
    let pool = segment_pool(pages, seg_cfg, vocab, tc.truncate)?;
    let params = state.params();
    let mut opt = AdamW::new(&params, tc.lr, tc.weight_decay, tc.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut history = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<BatchItem> = (0..tc.batch_size)
            .map(|_| {
                let (pi, seg) = &pool[rng.gen_range(0..pool.len())];
                BatchItem {
                    image: &pages[*pi].image,
                    segment: seg,
                }
            })
            .collect();
        let (total, breakdown) = total_loss(state, &batch, vocab, tc.include_layout)?;
        total.backward();
        let lr = opt.apply(&params)?;
        if step % tc.log_every == 0 || step + 1 == tc.steps {
            log_step(log, step, lr, &breakdown)?;
        }
        history.push(breakdown);
        if tc.stop_below.map_or(false, |t| breakdown.total < t) {
            log_step(log, step, lr, &breakdown)?;
            break;
        }
    }
    Ok(history)
}

/// Shared driver for the fine-tuning tasks: `loss_of` builds the scalar
/// loss for one sampled example index.
fn finetune_driver<F>(
    state: &crate::model::ModelState,
    n_examples: usize,
    tc: &TrainConfig,
    log: &mut dyn Write,
    mut loss_of: F,
) -> Result<Vec<f64>, TrainError>
where
    F: FnMut(usize) -> Result<crate::tensor::Tensor, TrainError>,
{
    if n_examples == 0 {
        return Err(TrainError::NoData);
    }
    let params = state.params();
    let mut opt = AdamW::new(&params, tc.lr, tc.weight_decay, tc.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut history = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut sum = crate::tensor::Tensor::scalar(0.0);
        for _ in 0..tc.batch_size {
            let loss = loss_of(rng.gen_range(0..n_examples))?;
            sum = sum.add(&loss).map_err(ObjectiveError::from)?;
        }
        let mean = sum.scale(1.0 / tc.batch_size as f64);
        let value = mean.item();
        mean.backward();
        let lr = opt.apply(&params)?;
        if step % tc.log_every == 0 || step + 1 == tc.steps {
            writeln!(log, "step {step} lr {lr:.6e} total {value:.6}")?;
        }
        history.push(value);
        if tc.stop_below.map_or(false, |t| value < t) {
            break;
        }
    }
    Ok(history)
}

pub fn finetune_cls(
    state: &crate::model::ModelState,
    pages: &[Page],
    vocab: &Vocabulary,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<f64>, TrainError> {
    finetune_driver(state, pages.len(), tc, log, |i| {
        let p = &pages[i];
        Ok(doc_cls_loss(state, &p.image, p.class, vocab)?)
    })
}

pub fn finetune_label(
    state: &crate::model::ModelState,
    pages: &[Page],
    seg_cfg: &SegmentConfig,
    vocab: &Vocabulary,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<f64>, TrainError> {
    // precompute each page's gold segments once
    let mut segmented = Vec::with_capacity(pages.len());
    for p in pages {
        let seq = encode_document(&p.words, vocab)?;
        segmented.push(split(&seq, seg_cfg, vocab.eos())?);
    }
    finetune_driver(state, pages.len(), tc, log, |i| {
        let p = &pages[i];
        Ok(token_label_loss(state, &p.image, &segmented[i], &p.tags, vocab)?)
    })
}

pub fn finetune_vqa(
    state: &crate::model::ModelState,
    pages: &[Page],
    vocab: &Vocabulary,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<f64>, TrainError> {
    let examples: Vec<(usize, usize)> = pages
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.qa.len()).map(move |j| (i, j)))
        .collect();
    finetune_driver(state, examples.len(), tc, log, |k| {
        let (i, j) = examples[k];
        let p = &pages[i];
        let (q, a) = &p.qa[j];
        let (loss, _) = vqa_loss(state, &p.image, q, a, vocab)?;
        Ok(loss)
    })
}
