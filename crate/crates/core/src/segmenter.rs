//! Multi-segment scheme: split a global sequence into decoder-length
//! segments (one beginning segment, then continuation segments whose prefix
//! is the previous segment's suffix) and reassemble generated segments.

use thiserror::Error;

use crate::codec::{CodecError, GlobalSequence, TokenEntry};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("invalid segment config: {0}")]
    Config(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("segment continuity violated: {0}")]
    Continuity(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMode {
    Beginning,
    Continuation,
}

/// One decoder-length chunk. `loss_mask` covers mode token + prefix +
/// targets in order; only target positions are loss positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub mode: SegmentMode,
    pub prefix: Vec<TokenEntry>,
    pub targets: Vec<TokenEntry>,
    pub loss_mask: Vec<bool>,
}

impl Segment {
    fn new(mode: SegmentMode, prefix: Vec<TokenEntry>, targets: Vec<TokenEntry>) -> Self {
        let mut loss_mask = vec![false; 1 + prefix.len()];
        loss_mask.extend(std::iter::repeat(true).take(targets.len()));
        Segment {
            mode,
            prefix,
            targets,
            loss_mask,
        }
    }

    /// Full token stream the decoder consumes: mode token, prefix, targets.
    pub fn full_entries(&self, mode_token: u32) -> Vec<TokenEntry> {
        let mut out = Vec::with_capacity(1 + self.prefix.len() + self.targets.len());
        out.push(TokenEntry {
            token: mode_token,
            bbox: None,
        });
        out.extend_from_slice(&self.prefix);
        out.extend_from_slice(&self.targets);
        out
    }

    /// Debug dump: `MODE|PREFIX…|TARGETS…`.
    pub fn dump_text(&self, vocab: &crate::codec::Vocabulary) -> String {
        let fmt = |entries: &[TokenEntry]| -> String {
            entries
                .iter()
                .map(|e| {
                    let name = vocab.token_str(e.token).unwrap_or("?").to_string();
                    match e.bbox {
                        Some(b) => format!("{name}({},{},{},{})", b.x1, b.y1, b.x2, b.y2),
                        None => name,
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mode = match self.mode {
            SegmentMode::Beginning => "BEGIN",
            SegmentMode::Continuation => "CONT",
        };
        format!("{mode}|{}|{}", fmt(&self.prefix), fmt(&self.targets))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentConfig {
    /// Maximum decoder targets per segment (M).
    pub max_targets: usize,
    /// Prefix ratio α_p in (0,1); α_p·M must be a positive integer.
    pub prefix_ratio: f64,
}

impl SegmentConfig {
    pub fn new(max_targets: usize, prefix_ratio: f64) -> Result<Self, SegmentError> {
        let cfg = SegmentConfig {
            max_targets,
            prefix_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.max_targets < 4 {
            return Err(SegmentError::Config(format!(
                "max_targets {} < 4",
                self.max_targets
            )));
        }
        if !(0.0 < self.prefix_ratio && self.prefix_ratio < 1.0) {
            return Err(SegmentError::Config(format!(
                "prefix_ratio {} outside (0,1)",
                self.prefix_ratio
            )));
        }
        let p = self.prefix_ratio * self.max_targets as f64;
        if (p - p.round()).abs() > 1e-9 || p.round() < 1.0 {
            return Err(SegmentError::Config(format!(
                "prefix_ratio * max_targets = {p} must be a positive integer"
            )));
        }
        Ok(())
    }

    /// |P| = α_p·M.
    pub fn prefix_len(&self) -> usize {
        (self.prefix_ratio * self.max_targets as f64).round() as usize
    }

    /// Targets per continuation segment, (1−α_p)·M.
    pub fn continuation_targets(&self) -> usize {
        self.max_targets - self.prefix_len()
    }
}

/// Divide a sequence into segments. `[EOS]` is appended as the final target
/// of the last segment and may overflow M by one position.
pub fn split(
    seq: &GlobalSequence,
    cfg: &SegmentConfig,
    eos: u32,
) -> Result<Vec<Segment>, SegmentError> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(SegmentError::EmptySequence);
    }
    let entries = seq.entries();
    let n = entries.len();
    let m = cfg.max_targets;
    let p = cfg.prefix_len();
    let step = cfg.continuation_targets();

    let mut segments = Vec::new();
    segments.push(Segment::new(
        SegmentMode::Beginning,
        Vec::new(),
        entries[..n.min(m)].to_vec(),
    ));
    let mut pos = m;
    while pos < n {
        let end = (pos + step).min(n);
        segments.push(Segment::new(
            SegmentMode::Continuation,
            entries[pos - p..pos].to_vec(),
            entries[pos..end].to_vec(),
        ));
        pos = end;
    }
    let last = segments.last_mut().expect("at least one segment");
    last.targets.push(TokenEntry {
        token: eos,
        bbox: None,
    });
    last.loss_mask.push(true);
    Ok(segments)
}

/// Inverse of `split`: concatenate target streams, checking that every
/// continuation prefix equals the previous segment's suffix, then strip the
/// trailing `[EOS]`.
pub fn reassemble(
    segments: &[Segment],
    eos: u32,
    loc_id: u32,
) -> Result<GlobalSequence, SegmentError> {
    let first = segments.first().ok_or(SegmentError::EmptySequence)?;
    if first.mode != SegmentMode::Beginning {
        return Err(SegmentError::Continuity(
            "first segment is not in beginning mode".into(),
        ));
    }
    let mut entries: Vec<TokenEntry> = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if i == 0 {
            if !seg.prefix.is_empty() {
                return Err(SegmentError::Continuity(
                    "beginning segment has a prefix".into(),
                ));
            }
        } else {
            if seg.mode != SegmentMode::Continuation {
                return Err(SegmentError::Continuity(format!(
                    "segment {i} is not in continuation mode"
                )));
            }
            let p = seg.prefix.len();
            if p > entries.len() || entries[entries.len() - p..] != seg.prefix[..] {
                return Err(SegmentError::Continuity(format!(
                    "segment {i} prefix does not match previous suffix"
                )));
            }
        }
        entries.extend_from_slice(&seg.targets);
    }
    if entries.last().map(|e| e.token) == Some(eos) {
        entries.pop();
    }
    Ok(GlobalSequence::from_entries(&entries, loc_id)?)
}

/// Prefix for the segment after `prev`: its last min(α_p·M, available)
/// target entries, coordinate payloads included.
pub fn next_prefix(prev: &Segment, cfg: &SegmentConfig) -> Result<Vec<TokenEntry>, SegmentError> {
    if prev.targets.is_empty() {
        return Err(SegmentError::EmptySequence);
    }
    let p = cfg.prefix_len().min(prev.targets.len());
    Ok(prev.targets[prev.targets.len() - p..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_document, testutil, Vocabulary};
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn seq_of_len(len: usize, seed: u64) -> (GlobalSequence, Vocabulary) {
        // build a char sequence of exactly `len` tokens by trimming an
        // encoded page; payload-correct by construction
        let v = Vocabulary::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = testutil::random_words(&mut rng, len);
        let seq = encode_document(&words, &v).unwrap();
        let entries = seq.entries();
        let seq = GlobalSequence::from_entries(&entries[..len], v.loc()).unwrap();
        (seq, v)
    }

    #[test]
    fn config_validation() {
        assert!(SegmentConfig::new(8, 0.25).is_ok());
        assert!(SegmentConfig::new(3, 0.25).is_err());
        assert!(SegmentConfig::new(8, 0.3).is_err()); // 2.4 prefix tokens
        assert!(SegmentConfig::new(8, 0.0).is_err());
    }

    #[test]
    fn single_segment_with_eos_overflow() {
        let (seq, v) = seq_of_len(8, 1);
        let cfg = SegmentConfig::new(8, 0.25).unwrap();
        let segs = split(&seq, &cfg, v.eos()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].mode, SegmentMode::Beginning);
        assert!(segs[0].prefix.is_empty());
        assert_eq!(segs[0].targets.len(), 9); // 8 tokens + [EOS]
        assert_eq!(segs[0].targets[8].token, v.eos());
    }

    #[test]
    fn hand_simulated_three_segments() {
        let (seq, v) = seq_of_len(20, 2);
        let cfg = SegmentConfig::new(8, 0.25).unwrap();
        let segs = split(&seq, &cfg, v.eos()).unwrap();
        assert_eq!(segs.len(), 3); // K = 1 + ceil(12/6)
        let e = seq.entries();
        assert_eq!(segs[0].targets, e[0..8]);
        assert_eq!(segs[1].prefix, e[6..8]); // tokens 7–8, 1-based
        assert_eq!(segs[1].targets, e[8..14]); // tokens 9–14
        assert_eq!(segs[2].prefix, e[12..14]);
        assert_eq!(segs[2].targets[..6], e[14..20]);
        assert_eq!(segs[2].targets[6].token, v.eos());
    }

    #[test]
    fn loss_mask_counts() {
        let (seq, v) = seq_of_len(20, 3);
        let cfg = SegmentConfig::new(8, 0.25).unwrap();
        let segs = split(&seq, &cfg, v.eos()).unwrap();
        let true_count: usize = segs
            .iter()
            .flat_map(|s| &s.loss_mask)
            .filter(|&&b| b)
            .count();
        assert_eq!(true_count, seq.len() + 1);
        for s in &segs {
            assert_eq!(s.loss_mask.len(), 1 + s.prefix.len() + s.targets.len());
            assert!(!s.loss_mask[0]);
            assert!(s.loss_mask[1 + s.prefix.len()..].iter().all(|&b| b));
            assert!(!s.loss_mask[1..1 + s.prefix.len()].iter().any(|&b| b));
        }
    }

    #[test]
    fn tampered_prefix_is_continuity_error() {
        let (seq, v) = seq_of_len(20, 4);
        let cfg = SegmentConfig::new(8, 0.25).unwrap();
        let mut segs = split(&seq, &cfg, v.eos()).unwrap();
        segs[1].prefix[0].token = v.eos();
        assert!(matches!(
            reassemble(&segs, v.eos(), v.loc()),
            Err(SegmentError::Continuity(_))
        ));
    }

    #[test]
    fn next_prefix_takes_suffix_with_payloads() {
        let (seq, v) = seq_of_len(20, 5);
        let cfg = SegmentConfig::new(8, 0.25).unwrap();
        let segs = split(&seq, &cfg, v.eos()).unwrap();
        let p = next_prefix(&segs[0], &cfg).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[..], segs[0].targets[6..8]);
        assert_eq!(p, segs[1].prefix);
        // any [LOC] in the window must carry its box
        for e in segs.iter().flat_map(|s| s.prefix.iter()) {
            assert_eq!(e.token == v.loc(), e.bbox.is_some());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn split_reassemble_identity(len in 1usize..200, seed in 0u64..500) {
            let (seq, v) = seq_of_len(len, seed);
            let cfg = SegmentConfig::new(8, 0.25).unwrap();
            let segs = split(&seq, &cfg, v.eos()).unwrap();
            // K formula
            let expect_k = 1 + (len.saturating_sub(8) + 5) / 6;
            prop_assert_eq!(segs.len(), expect_k.max(1));
            // order-preserving, no duplicate or dropped tokens
            let flat: Vec<u32> = segs
                .iter()
                .flat_map(|s| s.targets.iter().map(|e| e.token))
                .collect();
            prop_assert_eq!(&flat[..flat.len() - 1], seq.tokens());
            prop_assert_eq!(flat[flat.len() - 1], v.eos());
            let back = reassemble(&segs, v.eos(), v.loc()).unwrap();
            prop_assert_eq!(back, seq);
        }
    }
}
