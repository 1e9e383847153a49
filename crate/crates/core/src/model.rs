//! The encoder-decoder network: patch-based image encoder, causal
//! text-layout decoder with cross-attention, LM head over the augmented
//! vocabulary, and the sequential layout head that expands each `[LOC]`
//! hidden state into four coordinate bins.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use thiserror::Error;

use crate::codec::TokenEntry;
use crate::geometry::NUM_BINS;
use crate::image::Image;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("malformed decoder input: {0}")]
    MalformedInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Maximum decoder targets per segment (M).
    pub max_targets: usize,
    pub vocab_size: usize,
    /// Tag classifier classes for token labeling; 0 disables the head.
    pub n_tags: usize,
    /// When false, `[LOC]` inputs use the plain token embedding instead of
    /// the coordinate-composed one (the no-layout-modeling ablation).
    pub layout_conditioning: bool,
}

impl ModelConfig {
    /// Desk-scale default: trainable in minutes on a CPU.
    pub fn desk(vocab_size: usize, n_tags: usize) -> Self {
        ModelConfig {
            d: 64,
            n_heads: 4,
            enc_layers: 4,
            dec_layers: 2,
            patch_size: 16,
            image_h: 64,
            image_w: 64,
            max_targets: 64,
            vocab_size,
            n_tags,
            layout_conditioning: true,
        }
    }

    /// Tiny configuration for gradient checking.
    pub fn micro(vocab_size: usize, n_tags: usize) -> Self {
        ModelConfig {
            d: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            patch_size: 4,
            image_h: 8,
            image_w: 8,
            max_targets: 8,
            vocab_size,
            n_tags,
            layout_conditioning: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d % 4 != 0 {
            return Err(ModelError::Config(format!("d {} not divisible by 4", self.d)));
        }
        if self.d % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d {} not divisible by n_heads {}",
                self.d, self.n_heads
            )));
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.max_targets < 4 || self.vocab_size == 0 {
            return Err(ModelError::Config("max_targets/vocab_size too small".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// Positions the decoder can address: mode + prefix + targets + slack
    /// for the [EOS] overflow and task-prefix prompts.
    pub fn max_seq(&self) -> usize {
        2 * self.max_targets + 2
    }

    pub fn to_text(&self) -> String {
        format!(
            "VDOC-CONFIG v1\nd {}\nn_heads {}\nenc_layers {}\ndec_layers {}\npatch_size {}\n\
             image_h {}\nimage_w {}\nmax_targets {}\nvocab_size {}\nn_tags {}\nlayout_conditioning {}\n",
            self.d,
            self.n_heads,
            self.enc_layers,
            self.dec_layers,
            self.patch_size,
            self.image_h,
            self.image_w,
            self.max_targets,
            self.vocab_size,
            self.n_tags,
            u8::from(self.layout_conditioning)
        )
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines();
        if lines.next() != Some("VDOC-CONFIG v1") {
            return Err(ModelError::Config("missing config version header".into()));
        }
        let mut get = std::collections::HashMap::new();
        for line in lines {
            if let Some((k, v)) = line.split_once(' ') {
                get.insert(k.to_string(), v.to_string());
            }
        }
        let field = |k: &str| -> Result<usize, ModelError> {
            get.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ModelError::Config(format!("missing field {k}")))
        };
        let cfg = ModelConfig {
            d: field("d")?,
            n_heads: field("n_heads")?,
            enc_layers: field("enc_layers")?,
            dec_layers: field("dec_layers")?,
            patch_size: field("patch_size")?,
            image_h: field("image_h")?,
            image_w: field("image_w")?,
            max_targets: field("max_targets")?,
            vocab_size: field("vocab_size")?,
            n_tags: field("n_tags")?,
            layout_conditioning: field("layout_conditioning").map(|v| v != 0).unwrap_or(true),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ─── parameter containers ──────────────────────────────────────────────

struct Linear {
    w: Tensor, // [out × in]
    b: Tensor, // [out]
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Self {
        Linear {
            w: randn(rng, &[out, inp]),
            b: Tensor::param(&[out], vec![0.0; out]),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.matmul_nt(&self.w)?.add_bias(&self.b)
    }
}

struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn init(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::param(&[d], vec![1.0; d]),
            bias: Tensor::param(&[d], vec![0.0; d]),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.layer_norm(&self.gain, &self.bias)
    }
}

struct AttentionParams {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl AttentionParams {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        AttentionParams {
            wq: Linear::init(rng, d, d),
            wk: Linear::init(rng, d, d),
            wv: Linear::init(rng, d, d),
            wo: Linear::init(rng, d, d),
        }
    }
}

struct Block {
    ln1: LayerNorm,
    attn: AttentionParams,
    cross: Option<(LayerNorm, AttentionParams)>,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn init(rng: &mut ChaCha8Rng, d: usize, with_cross: bool) -> Self {
        Block {
            ln1: LayerNorm::init(d),
            attn: AttentionParams::init(rng, d),
            cross: with_cross.then(|| (LayerNorm::init(d), AttentionParams::init(rng, d))),
            ln2: LayerNorm::init(d),
            ff1: Linear::init(rng, 4 * d, d),
            ff2: Linear::init(rng, d, 4 * d),
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, 0.02).expect("valid normal");
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// All learnable parameters of the model.
pub struct ModelState {
    pub cfg: ModelConfig,
    patch_proj: Linear,
    enc_pos: Tensor,
    enc_blocks: Vec<Block>,
    enc_ln: LayerNorm,
    dec_pos: Tensor,
    dec_blocks: Vec<Block>,
    dec_ln: LayerNorm,
    e_word: Tensor, // [V̂ × d]
    e_x: Tensor,    // [1001 × d/4]
    e_y: Tensor,    // [1001 × d/4]
    lm_head: Linear, // [V̂ × d]
    // sequential layout head (primed tables are separate parameters)
    w_h: Tensor,  // [d × d]
    e_px: Tensor, // [1001 × d]
    e_py: Tensor, // [1001 × d]
    w_l: Tensor,  // [1001 × d]
    tag_head: Option<Linear>,
}

impl ModelState {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let p2 = cfg.patch_size * cfg.patch_size;
        Ok(ModelState {
            patch_proj: Linear::init(&mut rng, d, p2),
            enc_pos: randn(&mut rng, &[cfg.n_patches(), d]),
            enc_blocks: (0..cfg.enc_layers)
                .map(|_| Block::init(&mut rng, d, false))
                .collect(),
            enc_ln: LayerNorm::init(d),
            dec_pos: randn(&mut rng, &[cfg.max_seq(), d]),
            dec_blocks: (0..cfg.dec_layers)
                .map(|_| Block::init(&mut rng, d, true))
                .collect(),
            dec_ln: LayerNorm::init(d),
            e_word: randn(&mut rng, &[cfg.vocab_size, d]),
            e_x: randn(&mut rng, &[NUM_BINS, d / 4]),
            e_y: randn(&mut rng, &[NUM_BINS, d / 4]),
            lm_head: Linear::init(&mut rng, cfg.vocab_size, d),
            w_h: randn(&mut rng, &[d, d]),
            e_px: randn(&mut rng, &[NUM_BINS, d]),
            e_py: randn(&mut rng, &[NUM_BINS, d]),
            w_l: randn(&mut rng, &[NUM_BINS, d]),
            tag_head: (cfg.n_tags > 0).then(|| Linear::init(&mut rng, cfg.n_tags, d)),
            cfg,
        })
    }

    /// Named parameters, in a stable order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        let lin = |name: String, l: &Linear, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{name}.w"), l.w.clone()));
            out.push((format!("{name}.b"), l.b.clone()));
        };
        let ln = |name: String, l: &LayerNorm, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{name}.gain"), l.gain.clone()));
            out.push((format!("{name}.bias"), l.bias.clone()));
        };
        let attn = |name: String, a: &AttentionParams, out: &mut Vec<(String, Tensor)>| {
            for (s, l) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                out.push((format!("{name}.{s}.w"), l.w.clone()));
                out.push((format!("{name}.{s}.b"), l.b.clone()));
            }
        };
        lin("patch_proj".into(), &self.patch_proj, &mut out);
        out.push(("enc_pos".into(), self.enc_pos.clone()));
        for (i, b) in self.enc_blocks.iter().enumerate() {
            ln(format!("enc.{i}.ln1"), &b.ln1, &mut out);
            attn(format!("enc.{i}.attn"), &b.attn, &mut out);
            ln(format!("enc.{i}.ln2"), &b.ln2, &mut out);
            lin(format!("enc.{i}.ff1"), &b.ff1, &mut out);
            lin(format!("enc.{i}.ff2"), &b.ff2, &mut out);
        }
        ln("enc_ln".into(), &self.enc_ln, &mut out);
        out.push(("dec_pos".into(), self.dec_pos.clone()));
        for (i, b) in self.dec_blocks.iter().enumerate() {
            ln(format!("dec.{i}.ln1"), &b.ln1, &mut out);
            attn(format!("dec.{i}.attn"), &b.attn, &mut out);
            let (cln, cattn) = b.cross.as_ref().expect("decoder block has cross-attention");
            ln(format!("dec.{i}.ln_cross"), cln, &mut out);
            attn(format!("dec.{i}.cross"), cattn, &mut out);
            ln(format!("dec.{i}.ln2"), &b.ln2, &mut out);
            lin(format!("dec.{i}.ff1"), &b.ff1, &mut out);
            lin(format!("dec.{i}.ff2"), &b.ff2, &mut out);
        }
        ln("dec_ln".into(), &self.dec_ln, &mut out);
        out.push(("e_word".into(), self.e_word.clone()));
        out.push(("e_x".into(), self.e_x.clone()));
        out.push(("e_y".into(), self.e_y.clone()));
        lin("lm_head".into(), &self.lm_head, &mut out);
        out.push(("w_h".into(), self.w_h.clone()));
        out.push(("e_px".into(), self.e_px.clone()));
        out.push(("e_py".into(), self.e_py.clone()));
        out.push(("w_l".into(), self.w_l.clone()));
        if let Some(t) = &self.tag_head {
            lin("tag_head".into(), t, &mut out);
        }
        out
    }

    // ─── encoder ───────────────────────────────────────────────────────

    /// Flattened non-overlapping patches of the page.
    pub fn patchify(&self, img: &Image) -> Result<Tensor, ModelError> {
        let p = self.cfg.patch_size;
        if img.height != self.cfg.image_h || img.width != self.cfg.image_w {
            return Err(ModelError::Config(format!(
                "image {}x{} does not match config {}x{}",
                img.width, img.height, self.cfg.image_w, self.cfg.image_h
            )));
        }
        let (ph, pw) = (img.height / p, img.width / p);
        let mut data = Vec::with_capacity(ph * pw * p * p);
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..p {
                    for dx in 0..p {
                        data.push(img.get(px * p + dx, py * p + dy));
                    }
                }
            }
        }
        Ok(Tensor::constant(&[ph * pw, p * p], data))
    }

    /// Visual representations H^V: patch projection, positions, encoder
    /// blocks, final norm.
    pub fn encode_image(&self, img: &Image) -> Result<Tensor, ModelError> {
        let patches = self.patchify(img)?;
        let mut h = self.patch_proj.apply(&patches)?.add(&self.enc_pos)?;
        for b in &self.enc_blocks {
            h = self.run_block(b, h, None, None)?;
        }
        Ok(self.enc_ln.apply(&h)?)
    }

    // ─── decoder ───────────────────────────────────────────────────────

    /// Input embeddings H^TL: word tokens through the word table, `[LOC]`
    /// entries through the concatenated 4-way spatial lookup.
    pub fn embed_entries(&self, entries: &[TokenEntry]) -> Result<Tensor, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::MalformedInput("empty decoder input".into()));
        }
        let tokens: Vec<usize> = entries.iter().map(|e| e.token as usize).collect();
        let base = self.e_word.embedding(&tokens)?;
        let loc_rows: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.bbox.is_some())
            .map(|(i, _)| i)
            .collect();
        if loc_rows.is_empty() || !self.cfg.layout_conditioning {
            return Ok(base);
        }
        let boxes: Vec<[u16; 4]> = loc_rows
            .iter()
            .map(|&i| entries[i].bbox.expect("filtered Some").coords())
            .collect();
        let idx = |k: usize| -> Vec<usize> { boxes.iter().map(|b| b[k] as usize).collect() };
        let loc_emb = Tensor::concat_cols(&[
            self.e_x.embedding(&idx(0))?,
            self.e_y.embedding(&idx(1))?,
            self.e_x.embedding(&idx(2))?,
            self.e_y.embedding(&idx(3))?,
        ])?;
        Ok(base.overwrite_rows(&loc_emb, &loc_rows)?)
    }

    /// H^{VTL}: adds decoder positions, runs causal self-attention +
    /// cross-attention blocks, final norm.
    pub fn decode(&self, h_visual: &Tensor, h_tl: &Tensor) -> Result<Tensor, ModelError> {
        let len = h_tl.shape()[0];
        if len > self.cfg.max_seq() {
            return Err(ModelError::MalformedInput(format!(
                "sequence length {len} exceeds decoder budget {}",
                self.cfg.max_seq()
            )));
        }
        let pos_rows: Vec<usize> = (0..len).collect();
        let mut h = h_tl.add(&self.dec_pos.select_rows(&pos_rows)?)?;
        let mask = causal_mask(len);
        for b in &self.dec_blocks {
            h = self.run_block(b, h, Some(&mask), Some(h_visual))?;
        }
        Ok(self.dec_ln.apply(&h)?)
    }

    pub fn decoder_hidden(
        &self,
        h_visual: &Tensor,
        entries: &[TokenEntry],
    ) -> Result<Tensor, ModelError> {
        let h_tl = self.embed_entries(entries)?;
        self.decode(h_visual, &h_tl)
    }

    fn run_block(
        &self,
        b: &Block,
        x: Tensor,
        self_mask: Option<&Tensor>,
        h_visual: Option<&Tensor>,
    ) -> Result<Tensor, ModelError> {
        let normed = b.ln1.apply(&x)?;
        let mut h = x.add(&self.attention(&b.attn, &normed, &normed, self_mask)?)?;
        if let (Some((cln, cattn)), Some(hv)) = (&b.cross, h_visual) {
            let normed = cln.apply(&h)?;
            h = h.add(&self.attention(cattn, &normed, hv, None)?)?;
        }
        let normed = b.ln2.apply(&h)?;
        let ff = b.ff2.apply(&b.ff1.apply(&normed)?.gelu())?;
        Ok(h.add(&ff)?)
    }

    fn attention(
        &self,
        p: &AttentionParams,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor, ModelError> {
        let dk = self.cfg.d / self.cfg.n_heads;
        let q = p.wq.apply(q_in)?;
        let k = p.wk.apply(kv_in)?;
        let v = p.wv.apply(kv_in)?;
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = q.slice_cols(h * dk, dk)?;
            let kh = k.slice_cols(h * dk, dk)?;
            let vh = v.slice_cols(h * dk, dk)?;
            let mut scores = qh.matmul_nt(&kh)?.scale(1.0 / (dk as f64).sqrt());
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            heads.push(scores.softmax().matmul(&vh)?);
        }
        Ok(p.wo.apply(&Tensor::concat_cols(&heads)?)?)
    }

    // ─── heads ─────────────────────────────────────────────────────────

    /// Per-position logits over the augmented vocabulary.
    pub fn lm_logits(&self, h_vtl: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.lm_head.apply(h_vtl)?)
    }

    /// Teacher-forced layout head over a batch of `[LOC]` hidden states:
    /// returns logits over the 1001 bins for each of x1, y1, x2, y2.
    /// H1 = GELU(W_h·h0), H_{j+1} = GELU(W_h·H_j + E′(L_j)), L_j chained.
    pub fn layout_logits(
        &self,
        h0: &Tensor,
        teacher: &[[u16; 4]],
    ) -> Result<[Tensor; 4], ModelError> {
        if h0.shape()[0] != teacher.len() {
            return Err(ModelError::MalformedInput(format!(
                "{} hidden rows vs {} teacher tuples",
                h0.shape()[0],
                teacher.len()
            )));
        }
        let idx = |k: usize| -> Vec<usize> { teacher.iter().map(|t| t[k] as usize).collect() };
        let h1 = h0.matmul_nt(&self.w_h)?.gelu();
        let h2 = h1
            .matmul_nt(&self.w_h)?
            .add(&self.e_px.embedding(&idx(0))?)?
            .gelu();
        let h3 = h2
            .matmul_nt(&self.w_h)?
            .add(&self.e_py.embedding(&idx(1))?)?
            .gelu();
        let h4 = h3
            .matmul_nt(&self.w_h)?
            .add(&self.e_px.embedding(&idx(2))?)?
            .gelu();
        Ok([
            h1.matmul_nt(&self.w_l)?,
            h2.matmul_nt(&self.w_l)?,
            h3.matmul_nt(&self.w_l)?,
            h4.matmul_nt(&self.w_l)?,
        ])
    }

    /// Greedy layout decoding for one `[LOC]` hidden state `[1×d]`: each
    /// step feeds the argmax bin forward.
    pub fn layout_generate(&self, h0: &Tensor) -> Result<[u16; 4], ModelError> {
        let mut coords = [0u16; 4];
        let mut h = h0.matmul_nt(&self.w_h)?.gelu();
        for j in 0..4 {
            let logits = h.matmul_nt(&self.w_l)?;
            coords[j] = argmax(&logits.data()) as u16;
            if j < 3 {
                let table = match j {
                    0 | 2 => &self.e_px,
                    _ => &self.e_py,
                };
                h = h
                    .matmul_nt(&self.w_h)?
                    .add(&table.embedding(&[coords[j] as usize])?)?
                    .gelu();
            }
        }
        Ok(coords)
    }

    /// Tag classifier logits for token labeling.
    pub fn tag_logits(&self, h_rows: &Tensor) -> Result<Tensor, ModelError> {
        let head = self
            .tag_head
            .as_ref()
            .ok_or_else(|| ModelError::Config("model built without a tag head".into()))?;
        Ok(head.apply(h_rows)?)
    }
}

/// Additive causal mask: 0 on and below the diagonal, −1e30 above.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = -1e30;
        }
    }
    Tensor::constant(&[len, len], data)
}

/// Argmax with ties broken by lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
