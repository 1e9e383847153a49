//! Deterministic synthetic page generator: dot-matrix pseudo-glyphs laid
//! out in one of four page styles, with word boxes, tags, a class label,
//! and QA pairs derived from the layout.

use std::fmt::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{reading_order, WordBox, ALPHABET};
use crate::geometry::{quantize, BBox};
use crate::image::Image;
use crate::objectives::VqaAnswer;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
/// Horizontal advance per character (glyph plus 1px spacing).
pub const CHAR_PITCH: usize = GLYPH_W + 1;
const ROW_PITCH: usize = 8;

pub const STYLE_NAMES: [&str; 4] = ["paragraph", "twocol", "table", "form"];
pub const TAG_NAMES: [&str; 4] = ["header", "body", "key", "value"];
pub const N_CLASSES: usize = 4;
pub const N_TAGS: usize = 4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad page file: {0}")]
    BadPage(String),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error("canvas {0}x{1} too small")]
    CanvasTooSmall(usize, usize),
}

/// One rendered page with its full ground truth. `words` and `tags` are
/// parallel and already in reading order.
#[derive(Debug, Clone)]
pub struct Page {
    pub image: Image,
    pub words: Vec<WordBox>,
    pub tags: Vec<usize>,
    pub class: usize,
    pub qa: Vec<(String, VqaAnswer)>,
}

/// 7 rows of 5 bits. The low 6 cells hold the character's alphabet index
/// in binary, which makes every glyph distinct by construction; the rest
/// come from a character-seeded stream.
pub fn render_glyph(c: char) -> [[bool; GLYPH_W]; GLYPH_H] {
    let idx = ALPHABET
        .find(c)
        .expect("glyphs exist only for alphabet characters");
    let mut rng = ChaCha8Rng::seed_from_u64(0x617 + idx as u64);
    let mut g = [[false; GLYPH_W]; GLYPH_H];
    for row in &mut g {
        for cell in row.iter_mut() {
            *cell = rng.gen_bool(0.5);
        }
    }
    for bit in 0..6 {
        g[bit / GLYPH_W][bit % GLYPH_W] = (idx >> bit) & 1 == 1;
    }
    g
}

fn draw_word(img: &mut Image, word: &str, x: usize, y: usize) {
    for (i, c) in word.chars().enumerate() {
        let g = render_glyph(c);
        for (gy, row) in g.iter().enumerate() {
            for (gx, &on) in row.iter().enumerate() {
                if on {
                    img.set(x + i * CHAR_PITCH + gx, y + gy, 1.0);
                }
            }
        }
    }
}

fn word_width(len: usize) -> usize {
    len * CHAR_PITCH - 1
}

fn random_word(rng: &mut ChaCha8Rng, len: usize) -> String {
    let chars: Vec<char> = ALPHABET.chars().collect();
    (0..len).map(|_| *chars.choose(rng).unwrap()).collect()
}

fn word_box(x: usize, y: usize, len: usize, w: usize, h: usize) -> BBox {
    let q = |v: usize, denom: usize| quantize(v as f64 / denom as f64).unwrap();
    BBox::new(
        q(x, w),
        q(y, h),
        q(x + word_width(len), w),
        q(y + GLYPH_H, h),
    )
    .expect("pixel boxes are non-degenerate")
}

/// Deterministically renders one page. `dense` pages fill every row and are
/// long enough to need multiple decoding segments at the desk sequence
/// budget.
pub fn generate_page(
    seed: u64,
    style: usize,
    width: usize,
    height: usize,
    dense: bool,
) -> Result<Page, SynthError> {
    if width < 64 || height < 64 {
        return Err(SynthError::CanvasTooSmall(width, height));
    }
    let style = style % N_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5d0c);
    let mut image = Image::new(width, height);
    let mut words: Vec<WordBox> = Vec::new();
    let mut tags: Vec<usize> = Vec::new();

    let max_rows = (height - 1 - GLYPH_H) / ROW_PITCH + 1;
    let n_rows = if dense {
        max_rows
    } else {
        rng.gen_range(2..=3usize.min(max_rows))
    };
    let right_col = width / 2 + 2;

    let place = |words: &mut Vec<WordBox>,
                     tags: &mut Vec<usize>,
                     img: &mut Image,
                     rng: &mut ChaCha8Rng,
                     x: usize,
                     y: usize,
                     len: usize,
                     tag: usize| {
        let w = random_word(rng, len);
        draw_word(img, &w, x, y);
        let b = word_box(x, y, len, width, height);
        words.push(WordBox::new(w, b).unwrap());
        tags.push(tag);
    };

    for row in 0..n_rows {
        let y = 1 + row * ROW_PITCH;
        let header = row == 0;
        match style {
            // paragraph: left-to-right flow, ragged right edge
            0 => {
                let mut x = 2;
                let n = if dense { 3 } else { rng.gen_range(1..=3) };
                for _ in 0..n {
                    let len = rng.gen_range(2..=4);
                    if x + word_width(len) > width - 2 {
                        break;
                    }
                    place(
                        &mut words,
                        &mut tags,
                        &mut image,
                        &mut rng,
                        x,
                        y,
                        len,
                        if header { 0 } else { 1 },
                    );
                    x += word_width(len) + rng.gen_range(3..=6);
                }
            }
            // two columns, one word each
            1 => {
                for &x in &[2usize, right_col] {
                    let len = if dense { 4 } else { rng.gen_range(2..=4) };
                    place(
                        &mut words,
                        &mut tags,
                        &mut image,
                        &mut rng,
                        x,
                        y,
                        len,
                        if header { 0 } else { 1 },
                    );
                }
            }
            // table: rigid two-column grid of fixed-width cells
            2 => {
                for &x in &[2usize, right_col] {
                    place(
                        &mut words,
                        &mut tags,
                        &mut image,
                        &mut rng,
                        x,
                        y,
                        4,
                        if header { 0 } else { 1 },
                    );
                }
            }
            // form: key on the left, value on the right
            _ => {
                let klen = if dense { 3 } else { rng.gen_range(2..=3) };
                place(
                    &mut words,
                    &mut tags,
                    &mut image,
                    &mut rng,
                    2,
                    y,
                    klen,
                    if header { 0 } else { 2 },
                );
                let vlen = if dense { 4 } else { rng.gen_range(2..=4) };
                place(
                    &mut words,
                    &mut tags,
                    &mut image,
                    &mut rng,
                    right_col,
                    y,
                    vlen,
                    if header { 0 } else { 3 },
                );
            }
        }
    }

    // QA pairs: a grounded key→value question on forms, plus one yes and
    // one no presence question on every page
    let mut qa: Vec<(String, VqaAnswer)> = Vec::new();
    if style == 3 && words.len() >= 4 {
        let key = &words[2];
        let value = &words[3];
        qa.push((key.word.clone(), VqaAnswer::Words(vec![value.clone()])));
    }
    let present = words.last().unwrap().word.clone();
    qa.push((present, VqaAnswer::YesNo(true)));
    let absent = loop {
        let w = random_word(&mut rng, 4);
        if words.iter().all(|wb| wb.word != w) {
            break w;
        }
    };
    qa.push((absent, VqaAnswer::YesNo(false)));

    debug_assert_eq!(
        reading_order(&words),
        words,
        "generation order must already be reading order"
    );
    Ok(Page {
        image,
        words,
        tags,
        class: style,
        qa,
    })
}

/// Builds a balanced corpus: styles cycle round-robin and every k-th page
/// of each style is dense.
pub fn make_corpus(
    seed: u64,
    n_pages: usize,
    width: usize,
    height: usize,
    dense_period: usize,
) -> Result<Vec<Page>, SynthError> {
    (0..n_pages)
        .map(|i| {
            let dense = dense_period > 0 && (i / N_CLASSES) % dense_period == 0;
            generate_page(
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                i % N_CLASSES,
                width,
                height,
                dense,
            )
        })
        .collect()
}

fn annotation_text(page: &Page) -> String {
    let mut s = String::new();
    writeln!(s, "class {}", STYLE_NAMES[page.class]).unwrap();
    for (w, &t) in page.words.iter().zip(&page.tags) {
        let (x1, y1, x2, y2) = (w.bbox.x1, w.bbox.y1, w.bbox.x2, w.bbox.y2);
        writeln!(s, "word {} {x1} {y1} {x2} {y2} {}", w.word, TAG_NAMES[t]).unwrap();
    }
    for (q, a) in &page.qa {
        match a {
            VqaAnswer::YesNo(yes) => {
                writeln!(s, "qa {q} {}", if *yes { "yes" } else { "no" }).unwrap()
            }
            VqaAnswer::Words(ws) => {
                let w = &ws[0];
                let (x1, y1, x2, y2) = (w.bbox.x1, w.bbox.y1, w.bbox.x2, w.bbox.y2);
                writeln!(s, "qa {q} {} {x1} {y1} {x2} {y2}", w.word).unwrap();
            }
        }
    }
    s
}

fn parse_annotation(text: &str) -> Result<(usize, Vec<WordBox>, Vec<usize>, Vec<(String, VqaAnswer)>), SynthError> {
    let bad = |m: &str| SynthError::BadPage(m.to_string());
    let mut class = None;
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let mut qa = Vec::new();
    let parse_box = |p: &[&str]| -> Result<BBox, SynthError> {
        let v: Vec<u16> = p
            .iter()
            .map(|s| s.parse().map_err(|_| bad("bad coordinate")))
            .collect::<Result<_, _>>()?;
        BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(&e.to_string()))
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["class", name] => {
                class = Some(
                    STYLE_NAMES
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(|| bad("unknown class"))?,
                )
            }
            ["word", w, rest @ ..] if rest.len() == 5 => {
                let b = parse_box(&rest[..4])?;
                let tag = TAG_NAMES
                    .iter()
                    .position(|n| *n == rest[4])
                    .ok_or_else(|| bad("unknown tag"))?;
                words.push(WordBox::new(*w, b).map_err(|e| bad(&e.to_string()))?);
                tags.push(tag);
            }
            ["qa", q, "yes"] => qa.push((q.to_string(), VqaAnswer::YesNo(true))),
            ["qa", q, "no"] => qa.push((q.to_string(), VqaAnswer::YesNo(false))),
            ["qa", q, w, rest @ ..] if rest.len() == 4 => {
                let b = parse_box(rest)?;
                qa.push((
                    q.to_string(),
                    VqaAnswer::Words(vec![WordBox::new(*w, b).map_err(|e| bad(&e.to_string()))?]),
                ));
            }
            _ => return Err(bad(&format!("unrecognized line `{line}`"))),
        }
    }
    Ok((class.ok_or_else(|| bad("missing class line"))?, words, tags, qa))
}

/// Writes `page_NNNN.pgm` / `page_NNNN.txt` pairs plus a manifest carrying
/// the corpus digest.
pub fn save_corpus(dir: &Path, pages: &[Page]) -> Result<String, SynthError> {
    std::fs::create_dir_all(dir)?;
    for (i, page) in pages.iter().enumerate() {
        page.image.write_pgm(&dir.join(format!("page_{i:04}.pgm")))?;
        std::fs::write(dir.join(format!("page_{i:04}.txt")), annotation_text(page))?;
    }
    let digest = corpus_digest(pages);
    std::fs::write(
        dir.join("corpus.txt"),
        format!("VDOC-CORPUS v1\npages {}\ndigest {digest}\n", pages.len()),
    )?;
    Ok(digest)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Page>, SynthError> {
    let manifest = std::fs::read_to_string(dir.join("corpus.txt"))
        .map_err(|_| SynthError::BadPage("missing corpus.txt".into()))?;
    let mut lines = manifest.lines();
    if lines.next() != Some("VDOC-CORPUS v1") {
        return Err(SynthError::BadPage("bad corpus manifest".into()));
    }
    let n: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("pages "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| SynthError::BadPage("bad page count".into()))?;
    let mut pages = Vec::with_capacity(n);
    for i in 0..n {
        let image = Image::read_pgm(&dir.join(format!("page_{i:04}.pgm")))?;
        let text = std::fs::read_to_string(dir.join(format!("page_{i:04}.txt")))?;
        let (class, words, tags, qa) = parse_annotation(&text)?;
        pages.push(Page {
            image,
            words,
            tags,
            class,
            qa,
        });
    }
    Ok(pages)
}

/// SHA-256 over every page's pixels and annotations, for run manifests.
pub fn corpus_digest(pages: &[Page]) -> String {
    let mut h = Sha256::new();
    for page in pages {
        for &p in &page.image.pixels {
            h.update(((p * 255.0).round() as u8).to_le_bytes());
        }
        h.update(annotation_text(page).as_bytes());
    }
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_document, Vocabulary};
    use std::collections::HashSet;

    #[test]
    fn glyphs_are_injective() {
        let set: HashSet<_> = ALPHABET.chars().map(render_glyph).collect();
        assert_eq!(set.len(), ALPHABET.chars().count());
    }

    #[test]
    fn page_generation_is_deterministic() {
        let a = generate_page(42, 1, 64, 64, false).unwrap();
        let b = generate_page(42, 1, 64, 64, false).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.words, b.words);
        let c = generate_page(43, 1, 64, 64, false).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn words_do_not_overlap_and_match_reading_order() {
        for seed in 0..20 {
            let page = generate_page(seed, (seed % 4) as usize, 64, 64, seed % 3 == 0).unwrap();
            assert_eq!(page.words.len(), page.tags.len());
            assert!(!page.words.is_empty());
            assert_eq!(reading_order(&page.words), page.words);
            for (i, a) in page.words.iter().enumerate() {
                for b in &page.words[i + 1..] {
                    let overlap = crate::geometry::iou(&a.bbox, &b.bbox);
                    assert_eq!(overlap, 0.0, "{:?} vs {:?}", a, b);
                }
            }
        }
    }

    #[test]
    fn dense_pages_need_multiple_segments() {
        let vocab = Vocabulary::new(N_CLASSES);
        for style in 0..4 {
            let page = generate_page(7 + style as u64, style, 64, 64, true).unwrap();
            let seq = encode_document(&page.words, &vocab).unwrap();
            assert!(
                seq.tokens().len() + 1 > 64,
                "dense style {style} has only {} tokens",
                seq.tokens().len()
            );
        }
    }

    #[test]
    fn corpus_balances_classes_and_density() {
        let pages = make_corpus(5, 40, 64, 64, 3).unwrap();
        let vocab = Vocabulary::new(N_CLASSES);
        for class in 0..N_CLASSES {
            assert_eq!(pages.iter().filter(|p| p.class == class).count(), 10);
        }
        let long = pages
            .iter()
            .filter(|p| encode_document(&p.words, &vocab).unwrap().tokens().len() + 1 > 64)
            .count();
        assert!(long * 5 >= pages.len(), "only {long}/40 dense pages");
    }

    #[test]
    fn form_pages_have_grounded_qa() {
        let page = generate_page(9, 3, 64, 64, false).unwrap();
        let grounded = page
            .qa
            .iter()
            .filter(|(_, a)| matches!(a, VqaAnswer::Words(_)))
            .count();
        assert_eq!(grounded, 1);
        let yes = page
            .qa
            .iter()
            .any(|(q, a)| matches!(a, VqaAnswer::YesNo(true)) && page.words.iter().any(|w| &w.word == q));
        assert!(yes);
    }

    #[test]
    fn save_load_round_trip_preserves_truth() {
        let pages = make_corpus(11, 8, 64, 64, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let digest = save_corpus(dir.path(), &pages).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), pages.len());
        for (a, b) in pages.iter().zip(&back) {
            assert_eq!(a.words, b.words);
            assert_eq!(a.tags, b.tags);
            assert_eq!(a.class, b.class);
            assert_eq!(a.qa.len(), b.qa.len());
            assert_eq!(a.image, b.image);
        }
        assert_eq!(corpus_digest(&back), digest);
    }

    #[test]
    fn ink_lands_inside_word_boxes() {
        let page = generate_page(3, 0, 64, 64, true).unwrap();
        let img = &page.image;
        for y in 0..img.height {
            for x in 0..img.width {
                if img.get(x, y) > 0.0 {
                    let inside = page.words.iter().any(|w| {
                        let fx = x as f64 / 64.0 * 1000.0;
                        let fy = y as f64 / 64.0 * 1000.0;
                        // +16 bins = one pixel of quantization slack
                        fx + 16.0 >= w.bbox.x1 as f64
                            && fx <= w.bbox.x2 as f64
                            && fy + 16.0 >= w.bbox.y1 as f64
                            && fy <= w.bbox.y2 as f64
                    });
                    assert!(inside, "stray ink at {x},{y}");
                }
            }
        }
    }
}
